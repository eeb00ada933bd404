import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from thermophase import stepper
from thermophase.io import config as cfgmod

settings.register_profile(
    "thermophase", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("thermophase")


def preset_config(name, **overrides):
    """Preset with ``key = value`` lines replaced (keys are unique across sections)."""
    text = cfgmod.preset_text(name)
    for key, val in overrides.items():
        text, n = re.subn(rf"^{key} = .*$", f"{key} = {val}", text, flags=re.M)
        assert n == 1, key
    return cfgmod.parse_config(text)


def small_damage_config(T=0.6, tau=0.05, cells=8):
    text = cfgmod.preset_text("damage-loading")
    text = text.replace("cells = 16, 16", f"cells = {cells}, {cells}")
    text = text.replace("T = 1.0", f"T = {T!r}").replace("tau = 0.02", f"tau = {tau!r}")
    return cfgmod.parse_config(text)


@pytest.fixture(scope="session")
def small_damage_traj():
    """8x8 damage-loading run that reaches the damage onset."""
    return stepper.run(small_damage_config())


@pytest.fixture(scope="session")
def small_equilibrium_traj():
    text = cfgmod.preset_text("equilibrium").replace("cells = 16, 16", "cells = 6, 6")
    text = text.replace("T = 1.0", "T = 0.2")
    return stepper.run(cfgmod.parse_config(text))


@pytest.fixture
def rng():
    return np.random.default_rng(20260516)

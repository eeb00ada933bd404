import copy

import numpy as np
import pytest
from hypothesis import given, strategies as st

from thermophase import grid, monitors, stepper
from thermophase import material as mat
from thermophase.errors import NegativeTestFunction, SearchBoxTooSmall, WindowMisaligned

from conftest import preset_config


def uniform_state(mesh, c=0.0, z=1.0, theta=1.0):
    n, d = mesh.n_nodes, mesh.dim
    return stepper.State(0, 0.0, np.full(n, c), np.zeros(n), np.full(n, z), np.full(n, theta),
                         np.zeros((n, d)), np.zeros((n, d)))


@pytest.fixture(scope="module")
def heating_traj():
    """One step of uniform heating g = 1 on an otherwise frozen equilibrium state."""
    return stepper.run(preset_config("equilibrium", cells="4, 4", T=0.1, tau=0.1,
                                     g="constant:1.0"))


# --- energy --------------------------------------------------------------------------


def test_total_energy_of_uniform_state():
    mesh = grid.Mesh.unit(2, 4)
    e = monitors.total_energy(uniform_state(mesh), mesh, mat.MaterialModel(), 3.0)
    assert e.total == pytest.approx(1.25, rel=1e-12)
    assert e.kinetic == 0.0 and e.grad_c == 0.0 and e.elastic == 0.0
    assert e.total == pytest.approx(sum(v for k, v in e.as_dict().items() if k != "total"))


def test_thermal_part_scales_linearly():
    mesh = grid.Mesh(2, (2.0, 0.5), (4, 2))
    model = mat.MaterialModel()
    a = monitors.total_energy(uniform_state(mesh, theta=1.0), mesh, model, 3.0)
    b = monitors.total_energy(uniform_state(mesh, theta=2.0), mesh, model, 3.0)
    assert b.total - a.total == pytest.approx(1.0 * 1.0, rel=1e-12)  # |Omega| = 1
    assert a.thermal > 0


def test_energy_inequality_on_equilibrium_is_tight(small_equilibrium_traj):
    for r in monitors.energy_reports(small_equilibrium_traj):
        assert abs(r.residual) <= 1e-12 * r.scale


def test_energy_inequality_pure_heating(heating_traj):
    r = monitors.check_total_energy_inequality(heating_traj, 0, 1)
    assert r.rhs - r.lhs == pytest.approx(0.0, abs=1e-11)
    assert r.lhs - monitors.trajectory_energies(heating_traj)[0] == pytest.approx(0.1, rel=1e-10)
    assert np.allclose(heating_traj.states[1].theta, 1.1, rtol=1e-12)


# --- entropy -------------------------------------------------------------------------


def test_entropy_zero_test_field():
    field = monitors.TestField("zero", lambda x, t: np.zeros(len(x)))
    traj = stepper.run(preset_config("damage-loading", cells="3, 3", T=0.04))
    for r in monitors.entropy_reports(traj, [field]):
        assert r.residual == 0.0


def test_entropy_constant_trajectory_is_tight(small_equilibrium_traj):
    reports = monitors.entropy_reports(small_equilibrium_traj)
    assert {r.test_id for r in reports} == {f.name for f in
                                            monitors.canonical_test_fields(grid.Mesh.unit(2, 1))}
    for r in reports:
        assert abs(r.residual) <= 1e-12 * r.scale


def test_entropy_rejects_negative_test_field(small_equilibrium_traj):
    bad = monitors.TestField("neg", lambda x, t: -np.ones(len(x)))
    with pytest.raises(NegativeTestFunction):
        monitors.check_entropy_inequality(small_equilibrium_traj, 0, 1, bad)


def test_canonical_fields_nonnegative():
    mesh = grid.Mesh.unit(2, 8)
    fields = monitors.canonical_test_fields(mesh, 1.0)
    assert len(fields) == 6
    for f in fields:
        for t in (0.0, 0.5, 1.0):
            assert np.all(f.at(mesh, t) >= 0)


# --- damage --------------------------------------------------------------------------


def test_damage_vi_self_candidate_is_gap(small_damage_traj):
    _, vi, gaps = monitors.damage_reports(small_damage_traj)
    selfs = [r for r in vi if r.test_id == "self"]
    assert len(selfs) == len(small_damage_traj) - 1
    assert all(r.rhs == 0.0 for r in selfs)
    assert np.max(gaps) <= 1e-10


def test_damage_energy_equality_without_drive(small_equilibrium_traj):
    ed, _, _ = monitors.damage_reports(small_equilibrium_traj, windows="all")
    for r in ed:
        assert abs(r.residual) <= 1e-12 * r.scale


# --- mass, positivity, norms -----------------------------------------------------------


def test_mass_defect_examples(small_damage_traj):
    m = monitors.mass_defect(small_damage_traj)
    assert m[0] == 0.0 and np.max(np.abs(m)) <= 1e-10
    traj = copy.copy(small_damage_traj)
    traj.states = list(traj.states)
    last = traj.states[-1].copy()
    i = 3
    last.c[i] += 1.0
    traj.states[-1] = last
    defect = monitors.mass_defect(traj)[-1] - m[-1]
    assert defect == pytest.approx(traj.mesh.lumped_mass[i], rel=1e-12)


def test_theta_floor_examples():
    assert monitors.theta_floor(1.0, 1.0, 1.0) == 0.5
    assert monitors.theta_floor(0.7, 0.0, 3.0) == 0.7
    with pytest.raises(ValueError):
        monitors.theta_floor(0.0, 1.0, 1.0)


def test_positivity_and_constraints(small_damage_traj):
    rep = monitors.positivity_report(small_damage_traj)
    assert rep.passed and rep.global_min > 0
    assert len(rep.minima) == len(small_damage_traj)
    assert all(monitors.constraint_report(small_damage_traj).values())


def test_positivity_flags_bad_step(small_equilibrium_traj):
    traj = copy.copy(small_equilibrium_traj)
    traj.states = [s.copy() for s in traj.states]
    traj.states[2].theta[0] = 0.0
    rep = monitors.positivity_report(traj)
    assert rep.flagged == [2] and not rep.passed


def test_apriori_tracker(small_equilibrium_traj, small_damage_traj, heating_traj):
    rows = monitors.apriori_norm_tracker(small_equilibrium_traj)
    for key in ("sum_dc_L2", "sum_dtheta_L1"):
        assert rows[-1][key] == pytest.approx(0.0, abs=1e-20)
    rows = monitors.apriori_norm_tracker(heating_traj)
    assert rows[-1]["sum_dtheta_L1"] == pytest.approx(0.1 * 1.0, rel=1e-10)
    rows = monitors.apriori_norm_tracker(small_damage_traj)
    for key in rows[0]:
        if key not in ("k", "t"):
            vals = [r[key] for r in rows]
            assert np.all(np.diff(vals) >= 0), key


# --- windows and reports ------------------------------------------------------------


def test_window_validation(small_equilibrium_traj):
    with pytest.raises(WindowMisaligned):
        monitors.check_total_energy_inequality(small_equilibrium_traj, 2, 1)
    with pytest.raises(WindowMisaligned):
        monitors.check_total_energy_inequality(small_equilibrium_traj, 0, 0.5)
    with pytest.raises(WindowMisaligned):
        monitors.check_total_energy_inequality(small_equilibrium_traj, 0, 99)


def test_inequality_report_tolerance():
    ok = monitors.InequalityReport("x", 0, 1, lhs=1.0, rhs=1.0 - 1.9e-6)
    bad = monitors.InequalityReport("x", 0, 1, lhs=1.0, rhs=1.0 - 2.1e-6)
    assert ok.scale == 2.0 and ok.passed and not bad.passed


def test_check_all_passes_on_small_run(small_damage_traj):
    summary = monitors.check_all(small_damage_traj)
    assert summary.passed, summary.failures[:3]
    kinds = {r.kind for r in summary.reports}
    assert kinds == {"total_energy", "entropy", "damage_energy", "damage_vi"}


# --- splitting -----------------------------------------------------------------------


@given(st.integers(0, 10_000), st.sampled_from([1.5, 2.0, 3.0, 4.0]))
def test_p_power_slack_nonnegative(seed, p):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 50, 2))
    s = monitors.p_power_slack(x, y, p)
    scale = 1 + np.sum(x * x, -1) ** (p / 2) + np.sum(y * y, -1) ** (p / 2)
    assert np.all(s >= -1e-12 * scale)


def test_trajectory_splitting_slacks(small_damage_traj):
    worst = monitors.trajectory_splitting_check(small_damage_traj)
    assert set(worst) == {"phi", "W", "p_c", "p_z"}
    assert all(v >= -1e-12 for v in worst.values())


# --- brute-force oracle -----------------------------------------------------------------


def test_oracle_quadratic_matches_linear_solve():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -0.5])
    obj = lambda X: 0.5 * np.einsum("mi,ij,mj->m", X, A, X) - X @ b
    x = monitors.brute_force_incremental_oracle(obj, [-2, -2], [2, 2])
    assert np.max(np.abs(x - np.linalg.solve(A, b))) <= 1e-6


def test_oracle_respects_declared_constraints():
    obj = lambda X: np.sum((X - 2.0) ** 2, axis=1)
    x = monitors.brute_force_incremental_oracle(obj, [0, 0], [1, 1], constraint_upper=[True, True])
    assert np.allclose(x, 1.0)
    with pytest.raises(SearchBoxTooSmall):
        monitors.brute_force_incremental_oracle(obj, [0, 0], [1, 1])


def test_oracle_rejects_large_problems():
    with pytest.raises(ValueError):
        monitors.brute_force_incremental_oracle(lambda X: X.sum(1), np.zeros(7), np.ones(7))

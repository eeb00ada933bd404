"""Configuration, trajectory archives and report figures."""

from .archive import read_archive, write_archive, write_snapshot
from .config import PRESETS, RunConfig, parse_config, preset, serialize

__all__ = ["PRESETS", "RunConfig", "parse_config", "preset", "read_archive", "serialize",
           "write_archive", "write_snapshot"]

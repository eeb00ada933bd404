import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from thermophase import cli, grid, stepper
from thermophase.errors import ArchiveError, ConfigInvalid
from thermophase.io import archive, config as cfgmod

from conftest import preset_config, small_damage_config


# --- configuration -------------------------------------------------------------------


def test_minimal_config_gets_defaults():
    cfg = cfgmod.parse_config("[time]\nT = 0.5\n")
    assert cfg["time"]["T"] == 0.5
    assert cfg["domain"]["dim"] == 2 and cfg["material"]["kappa"] == 1.5
    assert cfgmod.parse_config("") == cfgmod.defaults()
    assert cfgmod.preset("equilibrium") == cfgmod.defaults()


def test_kappa_violation_names_hypothesis():
    with pytest.raises(ConfigInvalid) as err:
        cfgmod.parse_config("[material]\nkappa = 0.5\n")
    assert any("kappa > 1" in e for e in err.value.errors)


def test_errors_are_aggregated():
    with pytest.raises(ConfigInvalid) as err:
        cfgmod.parse_config("[material]\nkappa = 0.5\n[initial]\nz = constant:1.5\n"
                            "[data]\ng = constant:-1.0\n")
    msgs = err.value.errors
    assert any("0 <= z0 <= 1" in e for e in msgs)
    assert any("kappa" in e for e in msgs)
    assert any("heat source g" in e for e in msgs)


@pytest.mark.parametrize("text,needle", [
    ("[solver]\np = 2.0\n", "p > d"),
    ("[initial]\ntheta = constant:0.5\ntheta_star = 0.8\n", "theta0 >= theta_star"),
    ("[material]\na0 = 0.0\n", "a0"),
    ("[continuation]\nnu = 0.1\nvarrho = 3.0\n", "varrho > 4"),
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[time]\ntau = abc\n", "cannot parse"),
])
def test_invalid_configs(text, needle):
    with pytest.raises(ConfigInvalid, match=needle):
        cfgmod.parse_config(text)


@pytest.mark.parametrize("name", list(cfgmod.PRESETS))
def test_presets_parse_and_round_trip(name):
    cfg = cfgmod.preset(name)
    assert cfgmod.parse_config(cfgmod.serialize(cfg)) == cfg


@given(tau=st.floats(1e-4, 1.0), T=st.floats(0.0, 5.0), kappa=st.floats(1.0001, 4.0),
       lam=st.floats(0.1, 50.0), omega=st.floats(1e-8, 1e-1), cells=st.integers(1, 40),
       fmt=st.sampled_from(["csv", "vtk", "csv, vtk", ""]), auto=st.booleans())
def test_config_round_trip(tau, T, kappa, lam, omega, cells, fmt, auto):
    cfg = cfgmod.defaults()
    cfg["time"].update(tau=tau, T=T)
    cfg["material"].update(kappa=kappa, lame_lambda=lam, omega_reg=omega)
    cfg["domain"]["cells"] = (cells, cells + 1)
    cfg["output"]["formats"] = fmt
    cfg["continuation"]["auto"] = auto
    back = cfgmod.parse_config(cfgmod.serialize(cfg))
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_series_data_local_mean(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("t,value\n0.0,0.0\n1.0,2.0\n")
    fn = cfgmod.scalar_data(f"series:{path}")
    x = np.zeros((3, 2))
    assert np.allclose(fn(x, 0.25, 0.75), 1.0)
    assert cfgmod.series_mean(np.array([0.0, 1.0]), np.array([0.0, 2.0]), 0.0, 0.5) == 0.5


# --- snapshots -----------------------------------------------------------------------


def test_csv_snapshot_three_nodes(tmp_path):
    mesh = grid.Mesh.unit(1, 2)
    paths = archive.write_snapshot({"c": np.array([0.0, 1.0, 2.0])}, tmp_path, ["csv"], mesh,
                                   name="s")
    lines = open(paths[0], newline="").read().split("\n")
    assert lines[:4] == ["index,x,c", "0,0.0,0.0", "1,0.5,1.0", "2,1.0,2.0"]


def test_empty_format_list_writes_nothing(tmp_path):
    mesh = grid.Mesh.unit(1, 2)
    assert archive.write_snapshot({"c": np.zeros(3)}, tmp_path / "x", [], mesh) == []
    assert not (tmp_path / "x").exists()


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ArchiveError):
        archive.write_snapshot({"c": np.zeros(3)}, tmp_path, ["hdf5"], grid.Mesh.unit(1, 2))


@pytest.mark.parametrize("dim,n", [(1, 5), (2, 3), (3, 2)])
def test_snapshot_round_trip_is_exact(tmp_path, rng, dim, n):
    mesh = grid.Mesh.unit(dim, n)
    N = mesh.n_nodes
    fields = dict(c=rng.normal(size=N) * 1e-7, mu=rng.normal(size=N) * 1e5,
                  z=rng.uniform(size=N), theta=np.exp(rng.normal(size=N)),
                  u=rng.normal(size=(N, dim)), v=rng.normal(size=(N, dim)) / 3)
    state = stepper.State(7, 0.7, *fields.values())
    csv_path, vtk_path = archive.write_snapshot(state, tmp_path, ["csv", "vtk"], mesh)
    assert os.path.basename(csv_path) == "step_00007.csv"
    coords, cols = archive.read_snapshot_csv(csv_path, dim)
    assert np.array_equal(coords, mesh.coords)
    vtk = archive.read_snapshot_vtk(vtk_path)
    for name, vals in fields.items():
        if vals.ndim == 1:
            assert np.array_equal(cols[name], vals)
            assert np.array_equal(vtk[name], vals)
        else:
            for i in range(dim):
                assert np.array_equal(cols[f"{name}_{i}"], vals[:, i])
            assert np.array_equal(vtk[name][:, :dim], vals)


def test_vtk_header(tmp_path):
    mesh = grid.Mesh(2, (2.0, 1.0), (4, 2))
    path = archive.write_snapshot({"c": np.zeros(15)}, tmp_path, ["vtk"], mesh, name="a")[0]
    head = open(path).read().splitlines()[:8]
    assert head[0] == "# vtk DataFile Version 3.0" and head[2] == "ASCII"
    assert head[3] == "DATASET STRUCTURED_POINTS"
    assert head[4] == "DIMENSIONS 5 3 1" and head[6] == "SPACING 0.5 0.5 1.0"


# --- archive ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def archived(tmp_path_factory):
    cfg = small_damage_config(T=0.15, cells=4)
    traj = stepper.run(cfg)
    d = tmp_path_factory.mktemp("arch")
    manifest = archive.write_archive(traj, str(d), cfg, formats=("csv", "vtk"), cadence=2)
    return traj, cfg, d, manifest


def test_archive_round_trip(archived):
    traj, cfg, d, manifest = archived
    assert manifest["steps"] == len(traj) - 1
    back, cfg2 = archive.read_archive(str(d))
    assert cfg2 == cfg
    for a, b in zip(traj.states, back.states):
        for name in a.fields():
            assert np.array_equal(a.fields()[name], b.fields()[name])
    assert np.array_equal(back.ghost, traj.ghost)
    for ra, rb in zip(traj.reports[1:], back.reports[1:]):
        assert ra.row() == rb.row()
        assert np.array_equal(ra.loads.uD, rb.loads.uD)
    snaps = sorted(os.listdir(d / "snapshots"))
    assert snaps == ["step_00000.csv", "step_00000.vtk", "step_00002.csv", "step_00002.vtk",
                     "step_00003.csv", "step_00003.vtk"]


def test_archive_detects_tampering(archived, tmp_path):
    _, _, d, _ = archived
    copy = tmp_path / "copy"
    shutil.copytree(d, copy)
    with open(copy / "trajectory.npz", "r+b") as fh:
        fh.truncate(100)
    with pytest.raises(ArchiveError, match="sha256 mismatch"):
        archive.read_archive(str(copy))
    os.remove(copy / "manifest.json")
    with pytest.raises(ArchiveError, match="no manifest"):
        archive.verify_archive(str(copy))


def test_archive_config_hash_mismatch(archived, tmp_path):
    _, _, d, _ = archived
    copy = tmp_path / "copy"
    shutil.copytree(d, copy)
    man = json.loads((copy / "manifest.json").read_text())
    man["config_sha256"] = "0" * 64
    (copy / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ArchiveError, match="config hash"):
        archive.verify_archive(str(copy))


# --- command line -------------------------------------------------------------------


def test_cli_presets(capsys):
    assert cli.main(["presets"]) == 0
    names = [ln.split("\t")[0] for ln in capsys.readouterr().out.strip().splitlines()]
    assert names == ["equilibrium", "spinodal-decomposition", "damage-loading", "thermal-pulse"]
    assert cli.main(["presets", "--show", "thermal-pulse"]) == 0
    assert "[domain]" in capsys.readouterr().out


def test_cli_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--bogus"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_cli_runtime_error_line(tmp_path, capsys):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.ini")]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")
    bad = tmp_path / "bad.ini"
    bad.write_text("[material]\nkappa = 0.5\n")
    assert cli.main(["simulate", "--config", str(bad)]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigInvalid:") and "kappa > 1" in err[0]


def test_cli_simulate_then_check_equilibrium(tmp_path, capsys):
    out = tmp_path / "eq"
    assert cli.main(["simulate", "--preset", "equilibrium", "--out", str(out), "--quiet"]) == 0
    for rel in ("manifest.json", "config.ini", "trajectory.npz", "reports.csv",
                "figures/energy.png", "figures/fields_final.png"):
        assert (out / rel).is_file(), rel
    assert cli.main(["check", "--traj", str(out), "--no-figures"]) == 0
    text = capsys.readouterr().out
    assert "all checks passed" in text and "FAIL" not in text
    assert (out / "check" / "summary.csv").is_file()


def test_cli_check_fails_on_violation(tmp_path, capsys):
    cfg = preset_config("equilibrium", cells="3, 3", T=0.06, figures="false")
    traj = stepper.run(cfg)
    traj.states[2].theta[0] = 5.0  # energy appears from nowhere
    archive.write_archive(traj, str(tmp_path / "bad"), cfg)
    assert cli.main(["check", "--traj", str(tmp_path / "bad"), "--no-figures"]) == 1
    assert "FAIL total_energy" in capsys.readouterr().out


def test_cli_output_directory_precedence(tmp_path, monkeypatch):
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(f"[domain]\ncells = 2, 2\n[time]\nT = 0.02\n"
                        f"[output]\nfigures = false\ndirectory = {tmp_path / 'from_config'}\n")
    monkeypatch.setenv("THERMOPHASE_OUT", str(tmp_path / "from_env"))
    assert cli.main(["simulate", "--config", str(cfg_path), "--quiet"]) == 0
    assert (tmp_path / "from_env" / "manifest.json").is_file()
    assert cli.main(["simulate", "--config", str(cfg_path), "--quiet", "--out",
                     str(tmp_path / "from_flag")]) == 0
    assert (tmp_path / "from_flag" / "manifest.json").is_file()
    monkeypatch.delenv("THERMOPHASE_OUT")
    assert cli.main(["simulate", "--config", str(cfg_path), "--quiet"]) == 0
    assert (tmp_path / "from_config" / "manifest.json").is_file()


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "thermophase", "presets"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0 and "damage-loading" in proc.stdout

"""Trajectory persistence: field snapshots (CSV, legacy VTK), step reports and a hashed manifest.

Archive layout::

    D/config.ini        serialized RunConfig
    D/trajectory.npz    every state, the ghost level and the per-step loads (lossless)
    D/reports.csv       one StepReport row per step
    D/snapshots/        step_NNNNN.csv / .vtk at the output cadence
    D/manifest.json     config hash, mesh, step count, times, sha256 of every file

Every file is written to a temporary name and renamed into place.
"""

import csv
import hashlib
import io
import json
import os
import tempfile

import numpy as np

from .. import grid
from .. import stepper
from ..errors import ArchiveError
from . import config as cfgmod

FORMAT = "thermophase-archive"
VERSION = 1
SCALARS = ("c", "mu", "z", "theta")
VECTORS = ("u", "v")


def _num(x):
    # repr is the shortest string that reads back to the same double
    return repr(float(x))


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file in the same directory."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def _field_columns(fields, dim):
    cols = []
    for name, vals in fields.items():
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 1:
            cols.append((name, vals))
        else:
            for i in range(vals.shape[1]):
                cols.append((f"{name}_{i}", vals[:, i]))
    return cols


def snapshot_csv(mesh, fields):
    """CSV text: ``index, x[, y[, z]]`` then one column per (component of a) field."""
    axes = "xyz"[: mesh.dim]
    cols = _field_columns(fields, mesh.dim)
    buf = io.StringIO()
    buf.write(",".join(["index", *axes, *(n for n, _ in cols)]) + "\n")
    coords = mesh.coords
    for i in range(mesh.n_nodes):
        row = [str(i)] + [_num(v) for v in coords[i]] + [_num(c[i]) for _, c in cols]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def snapshot_vtk(mesh, fields, title="thermophase snapshot"):
    """Legacy ASCII VTK 3.0 STRUCTURED_POINTS text; node order is axis 0 fastest."""
    dims = list(mesh.node_shape) + [1] * (3 - mesh.dim)
    spacing = list(mesh.h) + [1.0] * (3 - mesh.dim)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET STRUCTURED_POINTS",
             "DIMENSIONS " + " ".join(str(n) for n in dims),
             "ORIGIN 0.0 0.0 0.0",
             "SPACING " + " ".join(_num(s) for s in spacing),
             f"POINT_DATA {mesh.n_nodes}"]
    for name, vals in fields.items():
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 1:
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [_num(v) for v in vals]
        else:
            pad = np.zeros((len(vals), 3))
            pad[:, : vals.shape[1]] = vals
            lines.append(f"VECTORS {name} double")
            lines += [" ".join(_num(v) for v in row) for row in pad]
    return "\n".join(lines) + "\n"


def write_snapshot(state, directory, formats, mesh, name=None):
    """Write the fields of ``state`` (a State or a name -> array mapping) in each format.

    Returns the written paths; an empty ``formats`` writes nothing.
    """
    fields = state.fields() if isinstance(state, stepper.State) else dict(state)
    if name is None:
        name = f"step_{state.k:05d}" if isinstance(state, stepper.State) else "snapshot"
    out = []
    for fmt in formats:
        if fmt == "csv":
            text = snapshot_csv(mesh, fields)
        elif fmt == "vtk":
            text = snapshot_vtk(mesh, fields)
        else:
            raise ArchiveError(f"unknown snapshot format {fmt!r}")
        out.append(atomic_write(os.path.join(directory, f"{name}.{fmt}"), text))
    return out


def read_snapshot_csv(path, dim):
    """Inverse of :func:`snapshot_csv`: ``(coords, {column: values})``; vector components stay split."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    arr = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    coords = arr[:, 1 : 1 + dim]
    return coords, {h: arr[:, j] for j, h in enumerate(header) if j > dim}


def read_snapshot_vtk(path):
    """Fields of a file written by :func:`snapshot_vtk` (vectors come back with 3 components)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# vtk DataFile Version 3.0"):
        raise ArchiveError(f"{path}: not a legacy VTK 3.0 file")
    n = None
    fields = {}
    i = 0
    while i < len(lines):
        tok = lines[i].split()
        if tok and tok[0] == "POINT_DATA":
            n = int(tok[1])
        elif tok and tok[0] == "SCALARS":
            fields[tok[1]] = np.array([float(v) for v in lines[i + 2 : i + 2 + n]])
            i += 1 + n
        elif tok and tok[0] == "VECTORS":
            fields[tok[1]] = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1 : i + 1 + n]])
            i += n
        i += 1
    return fields


# ---------------------------------------------------------------------------
# Trajectory archive
# ---------------------------------------------------------------------------

def _reports_csv(reports):
    rows = [r.row() for r in reports if r is not None]
    if not rows:
        return ""
    buf = io.StringIO()
    keys = list(rows[0])
    buf.write(",".join(keys) + "\n")
    for r in rows:
        buf.write(",".join(_num(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")
    return buf.getvalue()


def _npz_bytes(traj):
    st = traj.states
    arrays = {
        "k": np.array([s.k for s in st]),
        "t": np.array([s.t for s in st]),
        "ghost": traj.ghost,
    }
    for f in SCALARS + VECTORS:
        arrays[f] = np.stack([getattr(s, f) for s in st])
    n = traj.mesh.n_nodes
    arrays["xi"] = np.stack([s.xi if s.xi is not None else np.full(n, np.nan) for s in st])
    loads = traj.loads[1:]
    for f in ("g", "h", "H", "f", "F", "uD", "uD_old"):
        if loads:
            arrays["load_" + f] = np.stack([getattr(ld, f) for ld in loads])
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def write_archive(traj, directory, cfg, formats=("csv",), cadence=None):
    """Persist ``traj`` produced from ``cfg`` into ``directory``; returns the manifest dict."""
    os.makedirs(directory, exist_ok=True)
    cadence = cadence or cfg["output"]["cadence"]
    files = {}

    def put(rel, data):
        atomic_write(os.path.join(directory, rel), data)
        files[rel] = sha256_file(os.path.join(directory, rel))

    cfg_text = cfgmod.serialize(cfg)
    put("config.ini", cfg_text)
    put("trajectory.npz", _npz_bytes(traj))
    put("reports.csv", _reports_csv(traj.reports))
    last = len(traj.states) - 1
    for s in traj.states:
        if s.k % cadence == 0 or s.k == last:
            for path in write_snapshot(s, os.path.join(directory, "snapshots"), formats, traj.mesh):
                files[os.path.relpath(path, directory)] = sha256_file(path)
    mesh = traj.mesh
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "mesh": {"dim": mesh.dim, "extents": list(mesh.extents), "cells": list(mesh.cells)},
        "steps": last,
        "tau": traj.tau,
        "times": [float(t) for t in traj.times],
        "files": files,
    }
    atomic_write(os.path.join(directory, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    return manifest


def verify_archive(directory):
    """Load and check the manifest; raises ``ArchiveError`` on any mismatch."""
    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        raise ArchiveError(f"{directory}: no manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise ArchiveError(f"{path}: not a {FORMAT} manifest")
    for rel, digest in manifest["files"].items():
        full = os.path.join(directory, rel)
        if not os.path.isfile(full):
            raise ArchiveError(f"{rel}: listed in manifest but missing")
        if sha256_file(full) != digest:
            raise ArchiveError(f"{rel}: sha256 mismatch (truncated or modified)")
    with open(os.path.join(directory, "config.ini"), encoding="utf-8") as fh:
        if hashlib.sha256(fh.read().encode()).hexdigest() != manifest["config_sha256"]:
            raise ArchiveError("config.ini does not match the manifest config hash")
    return manifest


def _read_reports(directory):
    path = os.path.join(directory, "reports.csv")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    reports = []
    for r in rows:
        reports.append(stepper.StepReport(
            k=int(r["k"]), t=float(r["t"]), sweeps=int(r["sweeps"]),
            newton_iterations={b: int(r["newton_" + b]) for b in ("ch", "damage", "momentum", "temperature")},
            residuals={b: float(r["res_" + b]) for b in ("ch", "damage", "momentum", "temperature")},
            active_upper=int(r["active_upper"]), active_lower=int(r["active_lower"]),
            theta_min=float(r["theta_min"]), theta_max=float(r["theta_max"]),
            mass_defect=float(r["mass_defect"]), boundary_work=float(r["boundary_work"]),
            energy_residual=float(r["energy_residual"]),
            continuation=bool(int(r["continuation"])), substeps=int(r["substeps"])))
    return reports


def read_archive(directory):
    """Rebuild ``(Trajectory, RunConfig)`` from an archive after verifying its manifest."""
    manifest = verify_archive(directory)
    with open(os.path.join(directory, "config.ini"), encoding="utf-8") as fh:
        cfg = cfgmod.parse_config(fh.read(), validate=False)
    mesh = cfg.mesh()
    m = manifest["mesh"]
    if (m["dim"], tuple(m["extents"]), tuple(m["cells"])) != (mesh.dim, mesh.extents, mesh.cells):
        raise ArchiveError("manifest mesh does not match config.ini")
    with np.load(os.path.join(directory, "trajectory.npz")) as z:
        arr = {k: z[k] for k in z.files}
    n_states = len(arr["k"])
    if n_states != manifest["steps"] + 1:
        raise ArchiveError(f"manifest lists {manifest['steps']} steps, archive stores {n_states - 1}")
    states = []
    for i in range(n_states):
        xi = arr["xi"][i]
        states.append(stepper.State(int(arr["k"][i]), float(arr["t"][i]),
                                    *(arr[f][i].copy() for f in SCALARS + VECTORS),
                                    xi=None if np.all(np.isnan(xi)) else xi.copy()))
    loads = [None]
    for i in range(n_states - 1):
        loads.append(stepper.StepLoads(*(arr["load_" + f][i].copy()
                                         for f in ("g", "h", "H", "f", "F", "uD", "uD_old"))))
    reports = [None] + _read_reports(directory)
    for r, ld in zip(reports[1:], loads[1:]):
        r.loads = ld
    if len(reports) != n_states:
        raise ArchiveError("reports.csv row count does not match the stored steps")
    scheme = cfg.scheme().resolved(mesh.dim)
    traj = stepper.Trajectory(mesh, cfg.model(), scheme, cfg.data(), states,
                              arr["ghost"].copy(), reports, loads)
    return traj, cfg


def mesh_from_manifest(manifest):
    m = manifest["mesh"]
    return grid.Mesh(m["dim"], tuple(m["extents"]), tuple(m["cells"]))

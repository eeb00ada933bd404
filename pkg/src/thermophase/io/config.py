"""Sectioned key-value run configuration, built-in presets and data catalogue.

Every key has a type and a default.  ``parse_config`` fills defaults,
converts types and validates the admissibility conditions of the model;
``serialize`` writes every key back so that ``parse(serialize(c)) == c``.
"""

import configparser
from dataclasses import dataclass
import hashlib
import math

import numpy as np

from .. import grid
from .. import material as mat
from .. import stepper
from ..errors import ConfigInvalid


def _floats(text):
    return tuple(float(x) for x in str(text).replace(";", ",").split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (converter, default)
SCHEMA = {
    "domain": {
        "dim": (int, 2),
        "extents": (_floats, (1.0, 1.0)),
        "cells": (_ints, (16, 16)),
    },
    "time": {
        "T": (float, 1.0),
        "tau": (float, 0.02),
    },
    "material": {
        "potential": (str, "polynomial"),
        "c_lo": (float, -1.0),
        "c_hi": (float, 1.0),
        "gamma": (_floats, (0.25, 0.0, -0.5)),
        "lambda_gamma": (float, 0.0),
        "omega_reg": (float, 1e-3),
        "trunc_halfwidth": (float, 10.0),
        "lame_lambda": (float, 10.0),
        "lame_mu": (float, 10.0),
        "viscosity_factor": (float, 0.1),
        "b_coeffs": (str, "0,2:1.0"),
        "eigenstrain_coeff": (float, 0.0),
        "a0": (float, 1.0),
        "a_z": (float, 0.0),
        "m0": (float, 1.0),
        "m_z": (float, 0.0),
        "sigma": (_floats, (0.0, 0.0)),
        "c0": (float, 1.0),
        "c1": (float, 1.0),
        "kappa": (float, 1.5),
        "rho": (float, 0.1),
    },
    "initial": {
        "c": (str, "constant:0.0"),
        "z": (str, "constant:1.0"),
        "theta": (str, "constant:1.0"),
        "u": (str, "dirichlet"),
        "v": (str, "zero"),
        "theta_star": (float, 0.0),
    },
    "data": {
        "f": (str, "zero"),
        "g": (str, "zero"),
        "h": (str, "zero"),
        "u_D": (str, "zero"),
    },
    "solver": {
        "p": (float, 0.0),
        "p_override": (_bool, False),
        "eps_p": (float, 1e-8),
        "sweep_tol": (float, 1e-11),
        "newton_tol": (float, 1e-12),
        "max_sweeps": (int, 200),
        "max_newton": (int, 60),
        "damping": (float, 1.0),
        "max_active_set": (int, 100),
        "max_halvings": (int, 4),
    },
    "continuation": {
        "auto": (_bool, True),
        "nu": (float, 0.0),
        "varrho": (float, 6.0),
        "M": (float, math.inf),
        "nu0": (float, 1e-2),
        "nu_factor": (float, 1e-2),
        "M0": (float, 1e3),
        "M_factor": (float, 10.0),
        "stages": (int, 3),
    },
    "output": {
        "directory": (str, "thermophase_out"),
        "cadence": (int, 10),
        "formats": (str, "csv"),
        "monitors": (_bool, True),
        "figures": (_bool, True),
    },
}


@dataclass
class RunConfig:
    """Typed configuration values, ``values[section][key]``."""

    values: dict

    def __getitem__(self, section):
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and _canon(self.values) == _canon(other.values)

    def hash(self):
        return hashlib.sha256(serialize(self).encode()).hexdigest()

    def mesh(self):
        d = self["domain"]
        return grid.Mesh(d["dim"], tuple(d["extents"]), tuple(d["cells"]))

    def model(self):
        m = self["material"]
        reg = mat.RegularizationParams(m["omega_reg"], m["trunc_halfwidth"])
        pot = mat.ConcentrationPotential(m["potential"], m["c_lo"], m["c_hi"],
                                         tuple(m["gamma"]), m["lambda_gamma"])
        el = mat.ElasticModel(m["lame_lambda"], m["lame_mu"], m["viscosity_factor"],
                              parse_b_coeffs(m["b_coeffs"]), m["eigenstrain_coeff"],
                              m["a0"], m["a_z"])
        heat = mat.HeatModel(m["c0"], m["c1"], m["kappa"], m["rho"])
        dmg = mat.DamagePotential(tuple(m["sigma"]))
        return mat.MaterialModel(pot, el, heat, dmg, reg, m["m0"], m["m_z"])

    def scheme(self):
        s, c = self["solver"], self["continuation"]
        solver = stepper.SolverParams(s["sweep_tol"], s["newton_tol"], s["max_sweeps"],
                                      s["max_newton"], s["damping"], s["max_active_set"],
                                      s["max_halvings"])
        sched = stepper.continuation_schedule(c["nu0"], c["nu_factor"], c["M0"], c["M_factor"],
                                              c["stages"])
        return stepper.SchemeParams(
            tau=self["time"]["tau"], p=s["p"] if s["p"] > 0 else None, eps_p=s["eps_p"],
            nu=c["nu"], varrho=c["varrho"], M=c["M"], solver=solver,
            p_override=s["p_override"], auto_continuation=c["auto"], schedule=sched)

    def data(self):
        d = self["data"]
        dim = self["domain"]["dim"]
        return stepper.DataSampler(
            f_mean=vector_data(d["f"], dim), g_mean=scalar_data(d["g"]),
            h_mean=scalar_data(d["h"]), u_D=dirichlet_data(d["u_D"], dim))

    def initial(self, mesh=None, model=None, data=None):
        mesh = mesh or self.mesh()
        model = model or self.model()
        data = data or self.data()
        ini = self["initial"]
        x = mesh.coords
        c0 = field_values(ini["c"], x)
        z0 = field_values(ini["z"], x)
        th0 = field_values(ini["theta"], x)
        uD0 = data.u_D(x, 0.0)
        u0 = uD0 if ini["u"] == "dirichlet" else vector_field_values(ini["u"], x, mesh.dim)
        if ini["v"] == "dirichlet_rate":
            h = 1e-6
            v0 = (data.u_D(x, h) - data.u_D(x, 0.0)) / h
            v0 = np.round(v0, 9)
        else:
            v0 = vector_field_values(ini["v"], x, mesh.dim)
        theta_star = ini["theta_star"] if ini["theta_star"] > 0 else None
        return stepper.init_states(mesh, model, c0, z0, th0, u0, v0, self["time"]["tau"],
                                   u_D0=uD0, theta_star=theta_star)

    def build(self):
        mesh, model, data = self.mesh(), self.model(), self.data()
        state, ghost = self.initial(mesh, model, data)
        return stepper.Problem(mesh, model, self.scheme(), data, state, ghost, self["time"]["T"])


def _canon(values):
    out = {}
    for sec, kv in values.items():
        out[sec] = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in kv.items()}
    return out


def defaults():
    return RunConfig({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})


def parse_config(text, validate=True):
    """Parse INI text into a :class:`RunConfig`; raises ``ConfigInvalid`` listing every problem."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid([f"unreadable configuration: {exc}"]) from exc
    cfg = defaults()
    errs = []
    for sec in cp.sections():
        if sec not in SCHEMA:
            errs.append(f"unknown section [{sec}]")
            continue
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                errs.append(f"unknown key {key!r} in [{sec}]")
                continue
            conv = SCHEMA[sec][key][0]
            try:
                cfg.values[sec][key] = conv(raw.strip())
            except (ValueError, TypeError) as exc:
                errs.append(f"[{sec}] {key}: cannot parse {raw!r} ({exc})")
    if errs:
        raise ConfigInvalid(errs)
    if validate:
        errs = validate_config(cfg)
        if errs:
            raise ConfigInvalid(errs)
    return cfg


def serialize(cfg):
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key in keys:
            lines.append(f"{key} = {_fmt(cfg.values[sec][key])}")
        lines.append("")
    return "\n".join(lines)


def validate_config(cfg):
    """Every violated admissibility condition, each naming the assumption it breaks."""
    errs = []
    d = cfg["domain"]
    dim = d["dim"]
    if dim not in (1, 2, 3):
        return [f"[domain] dim must be 1, 2 or 3 (got {dim})"]
    if len(d["extents"]) != dim or len(d["cells"]) != dim:
        errs.append("[domain] extents and cells need one entry per dimension")
    if any(x <= 0 for x in d["extents"]) or any(n < 1 for n in d["cells"]):
        errs.append("[domain] extents must be > 0 and cells >= 1")
    if errs:
        return errs
    t = cfg["time"]
    if t["T"] < 0:
        errs.append("[time] T must be >= 0")
    try:
        errs += cfg.model().validate(dim)
    except (ValueError, KeyError, IndexError) as exc:
        errs.append(f"[material] {exc}")
    errs += cfg.scheme().validate(dim)
    o = cfg["output"]
    if o["cadence"] < 1:
        errs.append("[output] cadence must be >= 1")
    for fmt in _formats(o["formats"]):
        if fmt not in ("csv", "vtk"):
            errs.append(f"[output] unknown format {fmt!r} (csv, vtk)")
    try:
        mesh = cfg.mesh()
        x = mesh.coords
        for key in ("g", "h"):
            fn = scalar_data(cfg["data"][key])
            T = max(t["T"], t["tau"])
            for s in np.linspace(0.0, T, 5):
                vals = fn(x, s, s + t["tau"])
                if key == "h":
                    vals = vals[mesh.boundary_mask]
                if np.any(vals < 0):
                    name = "heat source g" if key == "g" else "boundary heat flux h"
                    errs.append(f"data hypothesis: {name} must be nonnegative")
                    break
        vector_data(cfg["data"]["f"], dim)
        dirichlet_data(cfg["data"]["u_D"], dim)
        ini = cfg["initial"]
        z0 = field_values(ini["z"], x)
        if np.any(z0 < 0) or np.any(z0 > 1):
            errs.append("initial-data hypothesis: 0 <= z0 <= 1 violated")
        th0 = field_values(ini["theta"], x)
        ts = ini["theta_star"]
        if ts < 0:
            errs.append("initial-data hypothesis: theta_star must be > 0 when given")
        if np.any(th0 <= 0) or (ts > 0 and np.any(th0 < ts)):
            errs.append("initial-data hypothesis: theta0 >= theta_star > 0 violated")
        c0 = field_values(ini["c"], x)
        pot = mat.ConcentrationPotential(cfg["material"]["potential"], cfg["material"]["c_lo"],
                                         cfg["material"]["c_hi"])
        if not np.all(np.isfinite(pot.beta_hat(c0))):
            errs.append("initial-data hypothesis: c0 must lie in the domain of the mixing potential "
                        "(Hypothesis (I))")
        if ini["u"] != "dirichlet":
            vector_field_values(ini["u"], x, dim)
        if ini["v"] != "dirichlet_rate":
            vector_field_values(ini["v"], x, dim)
    except (ValueError, KeyError, IndexError) as exc:
        errs.append(str(exc))
    return errs


def _formats(text):
    return [f.strip() for f in str(text).split(",") if f.strip()]


def parse_b_coeffs(text):
    """``"i,j:coef; ..."`` -> ``(((i, j), coef), ...)`` for ``b(c, z) = sum coef c^i z^j``."""
    out = []
    for term in str(text).split(";"):
        if not term.strip():
            continue
        ij, coef = term.split(":")
        i, j = (int(v) for v in ij.split(","))
        out.append(((i, j), float(coef)))
    if not out:
        raise ValueError("b_coeffs must contain at least one term")
    return tuple(out)


# ---------------------------------------------------------------------------
# Field and data catalogue
# ---------------------------------------------------------------------------

def _split(spec):
    kind, _, args = str(spec).partition(":")
    kind = kind.strip()
    if kind in ("file", "series"):
        return kind, args.strip()
    return kind, _floats(args)


def field_values(spec, x):
    """Nodal values of a scalar initial field.

    Kinds: ``constant:v``, ``cosine:amp,mean`` (product of cosines),
    ``gaussian:amp,width,base`` (centred), ``random:amp,seed,mean``,
    ``file:path`` (CSV with one value per node, column ``value``).
    """
    kind, args = _split(spec)
    n = len(x)
    L = x.max(axis=0)
    L = np.where(L > 0, L, 1.0)
    if kind == "constant":
        return np.full(n, args[0])
    if kind == "cosine":
        amp, mean = (args + (0.0,))[:2]
        return mean + amp * np.prod(np.cos(np.pi * x / L), axis=1)
    if kind == "gaussian":
        amp, width, base = (args + (0.0,))[:3]
        r2 = np.sum((x - 0.5 * L) ** 2, axis=1)
        return base + amp * np.exp(-r2 / (2 * width**2))
    if kind == "random":
        amp, seed, mean = (args + (0.0,))[:3]
        rng = np.random.default_rng(int(seed))
        return mean + amp * rng.uniform(-1.0, 1.0, n)
    if kind == "file":
        vals = np.loadtxt(args, delimiter=",", skiprows=1, ndmin=2)[:, -1]
        if len(vals) != n:
            raise ValueError(f"field file {args} has {len(vals)} values, mesh has {n} nodes")
        return vals
    raise ValueError(f"unknown field kind {kind!r}")


def vector_field_values(spec, x, dim):
    kind, args = _split(spec)
    if kind == "zero":
        return np.zeros((len(x), dim))
    if kind == "constant":
        if len(args) != dim:
            raise ValueError(f"vector constant needs {dim} components")
        return np.tile(np.asarray(args), (len(x), 1))
    raise ValueError(f"unknown vector field kind {kind!r}")


def _time_factor_mean(slope, t0, t1):
    return 1.0 + slope * 0.5 * (t0 + t1)


def scalar_data(spec):
    """Local-mean callable ``(x, t0, t1)`` for a scalar data entry.

    Kinds: ``zero``; ``constant:v``; ``linear:v,slope`` (``v + slope t``);
    ``gaussian:amp,width,slope[,x0,...]`` (spatial Gaussian times
    ``1 + slope t``); ``series:path`` (CSV ``t,value``, spatially uniform,
    local mean by the trapezoid rule on the linear interpolant).
    """
    kind, args = _split(spec)
    if kind == "zero":
        return lambda x, t0, t1: np.zeros(len(x))
    if kind == "constant":
        v = args[0]
        return lambda x, t0, t1: np.full(len(x), v)
    if kind == "linear":
        v, slope = args
        return lambda x, t0, t1: np.full(len(x), v + slope * 0.5 * (t0 + t1))
    if kind == "gaussian":
        amp, width, slope = args[:3]
        centre = np.asarray(args[3:]) if len(args) > 3 else None

        def fn(x, t0, t1):
            c = 0.5 * x.max(axis=0) if centre is None else centre
            r2 = np.sum((x - c) ** 2, axis=1)
            return amp * np.exp(-r2 / (2 * width**2)) * _time_factor_mean(slope, t0, t1)
        return fn
    if kind == "series":
        tab = np.loadtxt(args, delimiter=",", skiprows=1, ndmin=2)
        ts, vs = tab[:, 0], tab[:, 1]

        def fn(x, t0, t1):
            return np.full(len(x), series_mean(ts, vs, t0, t1))
        return fn
    raise ValueError(f"unknown data kind {kind!r}")


def series_mean(ts, vs, t0, t1):
    """Mean of the piecewise linear interpolant of ``(ts, vs)`` over ``[t0, t1]`` (trapezoid)."""
    if t1 <= t0:
        return float(np.interp(t0, ts, vs))
    inner = ts[(ts > t0) & (ts < t1)]
    knots = np.concatenate([[t0], inner, [t1]])
    vals = np.interp(knots, ts, vs)
    return float(np.trapezoid(vals, knots) / (t1 - t0))


def vector_data(spec, dim):
    kind, args = _split(spec)
    if kind == "zero":
        return lambda x, t0, t1: np.zeros((len(x), dim))
    if kind == "constant":
        if len(args) != dim:
            raise ValueError(f"vector data needs {dim} components")
        v = np.asarray(args)
        return lambda x, t0, t1: np.tile(v, (len(x), 1))
    if kind == "linear":
        if len(args) != 2 * dim:
            raise ValueError(f"linear vector data needs {2 * dim} numbers (value, slope)")
        v, s = np.asarray(args[:dim]), np.asarray(args[dim:])
        return lambda x, t0, t1: np.tile(v + s * 0.5 * (t0 + t1), (len(x), 1))
    raise ValueError(f"unknown vector data kind {kind!r}")


def dirichlet_data(spec, dim):
    """Pointwise ``u_D(x, t)``: ``zero``, ``constant:v..``, ``stretch:rate``, ``linear:G..`` (``t G x``)."""
    kind, args = _split(spec)
    if kind == "zero":
        return lambda x, t: np.zeros((len(x), dim))
    if kind == "constant":
        if len(args) != dim:
            raise ValueError(f"Dirichlet constant needs {dim} components")
        v = np.asarray(args)
        return lambda x, t: np.tile(v, (len(x), 1))
    if kind in ("stretch", "linear"):
        if kind == "stretch":
            G = np.zeros((dim, dim))
            G[0, 0] = args[0]
        else:
            if len(args) != dim * dim:
                raise ValueError(f"linear Dirichlet data needs {dim * dim} entries")
            G = np.asarray(args).reshape(dim, dim)
        return lambda x, t: t * (x @ G.T)
    raise ValueError(f"unknown Dirichlet kind {kind!r}")


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESETS = {
    "equilibrium": (
        "uniform state c=0, z=1, theta=1, u=v=0 with zero data; must stay put",
        """
[domain]
dim = 2
extents = 1.0, 1.0
cells = 16, 16
[time]
T = 1.0
tau = 0.02
""",
    ),
    "spinodal-decomposition": (
        "small random perturbation of c=0 inside the spinodal region (early stage)",
        """
[domain]
dim = 2
extents = 4.0, 4.0
cells = 16, 16
[time]
T = 0.2
tau = 0.01
[material]
sigma = 0.5, -0.5
[initial]
c = random:0.05,7,0.0
""",
    ),
    "damage-loading": (
        "ramped stretch on the boundary, boundary heating; damage develops mid-run",
        """
[domain]
dim = 2
extents = 1.0, 1.0
cells = 16, 16
[time]
T = 1.0
tau = 0.02
[material]
sigma = 0.2, -0.2
eigenstrain_coeff = 0.05
[initial]
c = cosine:0.1,0.0
theta = constant:0.1
v = dirichlet_rate
[data]
h = constant:0.1
u_D = stretch:0.4
""",
    ),
    "thermal-pulse": (
        "Gaussian heat source decaying in time on an intact, unloaded body",
        """
[domain]
dim = 2
extents = 1.0, 1.0
cells = 16, 16
[time]
T = 0.5
tau = 0.02
[material]
sigma = 0.5, -0.5
[data]
g = gaussian:5.0,0.1,-1.0
""",
    ),
}


def preset_text(name):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return serialize(parse_config(PRESETS[name][1]))


def preset(name):
    return parse_config(preset_text(name))

"""Manufactured-solution convergence study for the decoupled sub-physics.

Both cases drive the stepper's own block solvers (``StepSystem``) with the
other fields frozen, so the observed orders measure the assembled operators
and the time differences actually used by the scheme.

* ``heat``: constant conductivity (``K_M`` with a truncation level far below
  the solution, so ``K = c0``), exact field
  ``theta = 1 + 0.5 exp(-t) cos(pi x) cos(pi y)`` on the unit square, which
  has zero normal flux.
* ``elasticity``: ``b = 1``, no eigenstrain.  Spatial order from the static
  field ``u_1 = u_2 = sin(pi x) sin(pi y)`` (time step large enough to make
  inertia and viscosity negligible); temporal order from ``w(t)`` times that
  field, measured (maximum over checkpoint times) against a fine-step run
  on the same mesh.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import grid
from . import material as mat
from . import stepper


@dataclass
class ConvergenceResult:
    case: str
    kind: str  # "space" or "time"
    sizes: list
    errors: list
    orders: list = field(default_factory=list)

    @property
    def observed_order(self):
        """Least-squares slope of log(error) against log(size)."""
        return float(np.polyfit(np.log(self.sizes), np.log(self.errors), 1)[0])

    def rows(self):
        out = []
        for i, (s, e) in enumerate(zip(self.sizes, self.errors)):
            out.append(dict(case=self.case, kind=self.kind, level=i, size=s, error=e,
                            order=self.orders[i - 1] if i > 0 else float("nan")))
        return out


def _pairwise_orders(sizes, errors):
    return [math.log(errors[i] / errors[i - 1]) / math.log(sizes[i] / sizes[i - 1])
            for i in range(1, len(sizes))]


def _frozen_state(mesh, theta, u):
    n = mesh.n_nodes
    return stepper.State(0, 0.0, np.zeros(n), np.zeros(n), np.ones(n), theta, u,
                         np.zeros_like(u))


def _loads(mesh, g=None, F=None, uD=None, uD_old=None):
    n, d = mesh.n_nodes, mesh.dim
    zs, zv = np.zeros(n), np.zeros((n, d))
    return stepper.StepLoads(zs if g is None else g, zs, zs, zv, zv if F is None else F,
                             zv if uD is None else uD, zv if uD_old is None else uD_old)


def _l2(mesh, e):
    M = grid.assemble_mass(mesh)
    if e.ndim == 2:
        return math.sqrt(sum(float(e[:, i] @ (M @ e[:, i])) for i in range(e.shape[1])))
    return math.sqrt(float(e @ (M @ e)))


# ---------------------------------------------------------------------------
# Heat
# ---------------------------------------------------------------------------

HEAT_K = 1.0


def _heat_exact(x, t):
    return 1.0 + 0.5 * math.exp(-t) * np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])


def _heat_source_mean(x, t0, t1, k):
    # mean over (t0, t1) of theta_t - k lap theta
    shape = 0.5 * np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]) * (2 * np.pi**2 * k - 1.0)
    return shape * (math.exp(-t0) - math.exp(-t1)) / (t1 - t0)


def heat_run(n, tau, T, checkpoints=1):
    """Nodal errors ``theta_h - theta`` at ``checkpoints`` equally spaced times up to ``T``."""
    mesh = grid.Mesh.unit(2, n)
    heat = mat.HeatModel(c0=HEAT_K, c1=HEAT_K)
    model = mat.MaterialModel(heat=heat)
    params = stepper.SchemeParams(tau=tau, p=3.0).resolved(2)
    x = mesh.coords
    theta = _heat_exact(x, 0.0)
    u = np.zeros((mesh.n_nodes, 2))
    steps = int(round(T / tau))
    every = max(1, steps // checkpoints)
    errs = []
    M_trunc = 1e-12  # K_M(theta) = c0 (1 + M^kappa) = c0 for every theta > M
    for k in range(1, steps + 1):
        t0, t1 = (k - 1) * tau, k * tau
        prev = _frozen_state(mesh, theta, u)
        loads = _loads(mesh, g=_heat_source_mean(x, t0, t1, HEAT_K))
        sys_ = stepper.StepSystem(mesh, model, params, prev, u, loads, M=M_trunc)
        theta = sys_.solve_temperature(prev.c, prev.mu, prev.z, u, theta)[0]
        if k % every == 0:
            errs.append(theta - _heat_exact(x, t1))
    return mesh, errs


def heat_space(levels=(8, 16, 32), tau0=0.02, T=0.1):
    """``tau`` shrinks with ``h^2`` so the time error follows the spatial one."""
    sizes, errors = [], []
    for n in levels:
        tau = tau0 * (levels[0] / n) ** 2
        mesh, e = heat_run(n, tau, T)
        sizes.append(1.0 / n)
        errors.append(_l2(mesh, e[-1]))
    return ConvergenceResult("heat", "space", sizes, errors, _pairwise_orders(sizes, errors))


def _time_study(case, run, levels, T, checkpoints):
    # max over checkpoints of the distance to a 32x finer step on the same mesh
    mesh, ref = run(T / (32 * levels[-1]), checkpoints)
    sizes, errors = [], []
    for m in levels:
        _, e = run(T / m, checkpoints)
        sizes.append(T / m)
        errors.append(max(_l2(mesh, a - b) for a, b in zip(e, ref)))
    return ConvergenceResult(case, "time", sizes, errors, _pairwise_orders(sizes, errors))


def heat_time(levels=(8, 16, 32), n=16, T=0.5):
    """Time error isolated by comparing with a fine-step run on the same mesh."""
    return _time_study("heat", lambda tau, cp: heat_run(n, tau, T, cp), levels, T, levels[0])


# ---------------------------------------------------------------------------
# Elasticity
# ---------------------------------------------------------------------------

def _elastic_model():
    return mat.MaterialModel(elastic=mat.ElasticModel(eigenstrain_coeff=0.0))


def _static_exact(x):
    s = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    return np.stack([s, s], axis=1)


def _static_body_force(x, lam, mu):
    s = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    cc = np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])
    f = np.pi**2 * ((3 * mu + lam) * s - (lam + mu) * cc)
    return np.stack([f, f], axis=1)


def elasticity_static_run(n):
    mesh = grid.Mesh.unit(2, n)
    model = _elastic_model()
    el = model.elastic
    params = stepper.SchemeParams(tau=1e8, p=3.0).resolved(2)
    x = mesh.coords
    u0 = np.zeros((mesh.n_nodes, 2))
    F = mesh.lumped_mass[:, None] * _static_body_force(x, el.lame_lambda, el.lame_mu)
    prev = _frozen_state(mesh, np.zeros(mesh.n_nodes), u0)
    sys_ = stepper.StepSystem(mesh, model, params, prev, u0, _loads(mesh, F=F))
    u, _ = sys_.solve_momentum(prev.c, prev.z, np.zeros(mesh.n_nodes), u0)
    return mesh, u - _static_exact(x)


def elasticity_space(levels=(8, 16, 32)):
    sizes, errors = [], []
    for n in levels:
        mesh, e = elasticity_static_run(n)
        sizes.append(1.0 / n)
        errors.append(_l2(mesh, e))
    return ConvergenceResult("elasticity", "space", sizes, errors, _pairwise_orders(sizes, errors))


def _w(t):
    return 0.1 * math.sin(2.0 * t)


def _dw(t):
    return 0.2 * math.cos(2.0 * t)


def _W(t):
    return -0.05 * math.cos(2.0 * t)


def elasticity_dynamic_run(n, tau, T, checkpoints=1):
    """``u = w(t) u_s`` with the static field ``u_s``; nodal errors at ``checkpoints`` times."""
    mesh = grid.Mesh.unit(2, n)
    model = _elastic_model()
    el = model.elastic
    params = stepper.SchemeParams(tau=tau, p=3.0).resolved(2)
    x = mesh.coords
    us = _static_exact(x)
    fs = _static_body_force(x, el.lame_lambda, el.lame_mu)
    visc = el.viscosity_factor * el.a0
    u = _w(0.0) * us
    ghost = u - tau * _dw(0.0) * us
    zeros = np.zeros(mesh.n_nodes)
    steps = int(round(T / tau))
    every = max(1, steps // checkpoints)
    errs = []
    for k in range(1, steps + 1):
        t0, t1 = (k - 1) * tau, k * tau
        # step means of w'', w' and w
        m2 = (_dw(t1) - _dw(t0)) / tau
        m1 = (_w(t1) - _w(t0)) / tau
        m0 = (_W(t1) - _W(t0)) / tau
        F = mesh.lumped_mass[:, None] * (m2 * us + (m0 + visc * m1) * fs)
        prev = _frozen_state(mesh, zeros, u)
        loads = _loads(mesh, F=F, uD=_w(t1) * us, uD_old=_w(t0) * us)
        sys_ = stepper.StepSystem(mesh, model, params, prev, ghost, loads)
        u_new, _ = sys_.solve_momentum(prev.c, prev.z, zeros, u)
        ghost, u = u, u_new
        if k % every == 0:
            errs.append(u - _w(t1) * us)
    return mesh, errs


def elasticity_time(levels=(8, 16, 32), n=8, T=1.0):
    """Time error isolated by comparing with a fine-step run on the same mesh."""
    return _time_study("elasticity", lambda tau, cp: elasticity_dynamic_run(n, tau, T, cp),
                       levels, T, levels[0])


def study(case, n_levels=3, base=8):
    """Spatial and temporal results for ``case`` over ``n_levels`` successive halvings."""
    levels = tuple(base * 2**i for i in range(n_levels))
    if case == "heat":
        return [heat_space(levels), heat_time(levels)]
    if case == "elasticity":
        return [elasticity_space(levels), elasticity_time(levels)]
    raise ValueError(f"unknown convergence case {case!r} (heat, elasticity)")

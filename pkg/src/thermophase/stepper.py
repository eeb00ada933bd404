"""One implicit step of the coupled scheme, its (nu, M)-regularized variant,
the continuation homotopy between them, and the outer time loop.

Nodal unknowns per step are ``c, mu, z, theta`` (scalars) and ``u`` (vector).
Time derivatives and pointwise products are lumped; every term involving a
gradient, a strain or the elastic density is integrated with the Gauss rule.
With these choices the incremental energy and entropy balances hold exactly
for the discrete solution (up to solver tolerance), which is what the
monitors check.
"""

from dataclasses import dataclass, field, replace
import logging
import math
import warnings
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import grid
from . import material as mat
from .errors import (ActiveSetCycling, InvalidInitialData, LinearSolveFailure,
                     NegativeBoundarySource, NewtonDivergence, PositivityLoss,
                     StepDivergence, ThermophaseError)

log = logging.getLogger(__name__)


def default_p(dim):
    """Gradient exponent used when none is configured (always ``p > d`` except d=1)."""
    return {1: 2.0, 2: 3.0, 3: 4.0}[dim]


@dataclass(frozen=True)
class SolverParams:
    sweep_tol: float = 1e-11
    newton_tol: float = 1e-12
    max_sweeps: int = 200
    max_newton: int = 60
    damping: float = 1.0
    max_active_set: int = 100
    max_halvings: int = 4


def continuation_schedule(nu0=1e-2, nu_factor=1e-2, M0=1e3, M_factor=10.0, stages=3):
    """Stages ``(nu, M)`` of the homotopy; the unregularized target is appended by the solver."""
    return tuple((nu0 * nu_factor**i, M0 * M_factor**i) for i in range(stages))


@dataclass(frozen=True)
class SchemeParams:
    """Time step, gradient exponent, regularization and solver settings.

    ``p=None`` selects :func:`default_p` for the mesh dimension.  ``nu`` and
    ``M`` switch on the regularized system directly; ``auto_continuation``
    falls back to the homotopy of ``schedule`` when a plain step diverges.
    """

    tau: float
    p: Optional[float] = None
    eps_p: float = 1e-8
    nu: float = 0.0
    varrho: float = 6.0
    M: float = math.inf
    solver: SolverParams = field(default_factory=SolverParams)
    p_override: bool = False
    auto_continuation: bool = True
    schedule: tuple = field(default_factory=continuation_schedule)
    debug_lagged: bool = False

    def validate(self, dim):
        errs = []
        if not self.tau > 0:
            errs.append("time step tau must be > 0")
        p = default_p(dim) if self.p is None else self.p
        if not p > 1:
            errs.append("gradient exponent p must be > 1")
        elif p <= dim and dim > 1 and not self.p_override:
            errs.append(f"standing assumption p > d violated (p={p}, d={dim}); "
                        "set p_override to run anyway")
        if self.eps_p < 0:
            errs.append("eps_p must be >= 0")
        if self.nu < 0:
            errs.append("nu must be >= 0")
        if self.nu > 0 and not self.varrho > 4:
            errs.append("regularized system needs varrho > 4 when nu > 0")
        if not self.M > 0:
            errs.append("truncation level M must be > 0")
        for nu, M in self.schedule:
            if not (nu > 0 and M > 0):
                errs.append("continuation stages need nu > 0 and M > 0")
                break
        return errs

    def resolved(self, dim):
        """Copy with ``p`` filled in; raises ``ValueError`` on invalid settings."""
        errs = self.validate(dim)
        if errs:
            raise ValueError("; ".join(errs))
        p = default_p(dim) if self.p is None else float(self.p)
        if p <= dim and dim > 1:
            warnings.warn(f"running with p={p} <= d={dim} by explicit override", stacklevel=2)
        return replace(self, p=p)

    @property
    def regularized(self):
        return self.nu > 0 or math.isfinite(self.M)


# ---------------------------------------------------------------------------
# States, data and reports
# ---------------------------------------------------------------------------

@dataclass
class State:
    """Discrete state at time level ``k``; ``v`` is the backward difference of ``u``."""

    k: int
    t: float
    c: np.ndarray
    mu: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    xi: Optional[np.ndarray] = None

    def copy(self):
        return State(self.k, self.t, self.c.copy(), self.mu.copy(), self.z.copy(),
                     self.theta.copy(), self.u.copy(), self.v.copy(),
                     None if self.xi is None else self.xi.copy())

    def fields(self):
        return dict(c=self.c, mu=self.mu, z=self.z, theta=self.theta, u=self.u, v=self.v)


def d_tau(new, old, tau):
    """Backward difference quotient ``(new - old) / tau``."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return (np.asarray(new, dtype=float) - np.asarray(old, dtype=float)) / tau


@dataclass
class StepLoads:
    """Data of one step: local means of ``f, g, h`` and Dirichlet values."""

    g: np.ndarray
    h: np.ndarray
    H: np.ndarray
    f: np.ndarray
    F: np.ndarray
    uD: np.ndarray
    uD_old: np.ndarray


def _zero_vec(x, *_):
    return np.zeros_like(x)


def _zero_scalar(x, *_):
    return np.zeros(len(x))


@dataclass
class DataSampler:
    """Space-time data of the problem.

    ``f_mean, g_mean, h_mean`` map ``(x, t0, t1)`` to the local mean over
    ``(t0, t1]`` at the points ``x``; ``u_D`` maps ``(x, t)`` to the Dirichlet
    datum (evaluated at every node, which also extends it into the domain).
    """

    f_mean: Callable = _zero_vec
    g_mean: Callable = _zero_scalar
    h_mean: Callable = _zero_scalar
    u_D: Callable = _zero_vec
    check_sign: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_functions(cls, f=None, g=None, h=None, u_D=None, n_time=3, check_sign=True):
        """Local means of pointwise callables ``fn(x, t)`` by Gauss-Legendre in time."""
        nodes, weights = np.polynomial.legendre.leggauss(n_time)

        def mean(fn, zero):
            if fn is None:
                return zero

            def m(x, t0, t1):
                ts = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * nodes
                return sum(0.5 * w * fn(x, t) for w, t in zip(weights, ts))
            return m

        return cls(mean(f, _zero_vec), mean(g, _zero_scalar), mean(h, _zero_scalar),
                   u_D if u_D is not None else _zero_vec, check_sign)

    def loads(self, mesh, t0, t1):
        key = (id(mesh), float(t0), float(t1))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        x = mesh.coords
        g = np.asarray(self.g_mean(x, t0, t1), dtype=float).reshape(mesh.n_nodes)
        h = np.asarray(self.h_mean(x, t0, t1), dtype=float).reshape(mesh.n_nodes)
        if self.check_sign:
            if np.any(g < 0):
                raise NegativeBoundarySource("heat source g must be nonnegative")
            H = grid.boundary_flux_load(mesh, h)
        else:
            H = mesh.boundary_measure * np.where(mesh.boundary_mask, h, 0.0)
        f = np.asarray(self.f_mean(x, t0, t1), dtype=float).reshape(mesh.n_nodes, mesh.dim)
        uD = np.asarray(self.u_D(x, t1), dtype=float).reshape(mesh.n_nodes, mesh.dim)
        uD_old = np.asarray(self.u_D(x, t0), dtype=float).reshape(mesh.n_nodes, mesh.dim)
        out = StepLoads(g, h, H, f, mesh.lumped_mass[:, None] * f, uD, uD_old)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = out
        return out


@dataclass
class StepReport:
    k: int
    t: float
    sweeps: int = 0
    newton_iterations: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    active_upper: int = 0
    active_lower: int = 0
    theta_min: float = float("nan")
    theta_max: float = float("nan")
    mass_defect: float = 0.0
    boundary_work: float = 0.0
    energy_residual: float = float("nan")
    continuation: bool = False
    substeps: int = 1
    loads: Optional[StepLoads] = field(default=None, repr=False, compare=False)

    def row(self):
        return dict(k=self.k, t=self.t, sweeps=self.sweeps,
                    newton_ch=self.newton_iterations.get("ch", 0),
                    newton_damage=self.newton_iterations.get("damage", 0),
                    newton_momentum=self.newton_iterations.get("momentum", 0),
                    newton_temperature=self.newton_iterations.get("temperature", 0),
                    res_ch=self.residuals.get("ch", 0.0),
                    res_damage=self.residuals.get("damage", 0.0),
                    res_momentum=self.residuals.get("momentum", 0.0),
                    res_temperature=self.residuals.get("temperature", 0.0),
                    active_upper=self.active_upper, active_lower=self.active_lower,
                    theta_min=self.theta_min, theta_max=self.theta_max,
                    mass_defect=self.mass_defect, boundary_work=self.boundary_work,
                    energy_residual=self.energy_residual,
                    continuation=int(self.continuation), substeps=self.substeps)


@dataclass
class Problem:
    """Everything :func:`run` needs."""

    mesh: grid.Mesh
    model: mat.MaterialModel
    scheme: SchemeParams
    data: DataSampler
    initial: State
    ghost: np.ndarray
    T: float


@dataclass
class Trajectory:
    mesh: grid.Mesh
    model: mat.MaterialModel
    scheme: SchemeParams
    data: DataSampler
    states: list
    ghost: np.ndarray
    reports: list = field(default_factory=list)
    loads: list = field(default_factory=list)

    @property
    def tau(self):
        return self.scheme.tau

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    def __len__(self):
        return len(self.states)


# ---------------------------------------------------------------------------
# Initial data
# ---------------------------------------------------------------------------

def init_states(mesh, model, c0, z0, theta0, u0, v0, tau, u_D0=None, theta_star=None):
    """State at ``k = 0`` and the ghost level ``u^{-1} = u0 - tau v0``."""
    n, d = mesh.n_nodes, mesh.dim
    c0 = np.broadcast_to(np.asarray(c0, dtype=float), (n,)).copy()
    z0 = np.broadcast_to(np.asarray(z0, dtype=float), (n,)).copy()
    th0 = np.broadcast_to(np.asarray(theta0, dtype=float), (n,)).copy()
    u0 = np.broadcast_to(np.asarray(u0, dtype=float), (n, d)).copy()
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), (n, d)).copy()
    for name, arr in (("c0", c0), ("z0", z0), ("theta0", th0), ("u0", u0), ("v0", v0)):
        if not np.all(np.isfinite(arr)):
            raise InvalidInitialData(f"{name} has non-finite entries")
    if not np.all(np.isfinite(model.potential.beta_hat(c0))):
        raise InvalidInitialData("initial data: beta_hat(c0) must be finite (c0 in the domain of phi)")
    if np.any(z0 < 0) or np.any(z0 > 1):
        raise InvalidInitialData("initial data: 0 <= z0 <= 1 violated")
    floor = 0.0 if theta_star is None else float(theta_star)
    if np.any(th0 <= 0) or np.any(th0 < floor):
        raise InvalidInitialData("initial data: theta0 >= theta_star > 0 violated")
    if u_D0 is not None:
        uD = np.broadcast_to(np.asarray(u_D0, dtype=float), (n, d))
        b = mesh.boundary_mask
        if not np.allclose(u0[b], uD[b], rtol=0.0, atol=1e-12):
            raise InvalidInitialData("initial data: u0 must match u_D(0) on the boundary")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    state = State(0, 0.0, c0, np.zeros(n), z0, th0, u0, v0, np.zeros(n))
    return state, u0 - tau * v0


# ---------------------------------------------------------------------------
# Linear algebra helpers
# ---------------------------------------------------------------------------

def _solve(A, b):
    try:
        x = spla.spsolve(sp.csc_matrix(A), b)
    except RuntimeError as exc:
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure("singular or ill-conditioned system")
    return x


def _snorm(r, Ml):
    """Max-norm of an assembled residual scaled by the lumped mass (a pointwise density)."""
    r = np.asarray(r)
    if r.ndim == 2:
        r = np.abs(r).max(axis=1)
    return float(np.max(np.abs(r) / Ml)) if r.size else 0.0


def _power_flux(v, q):
    """``|v|^{q-2} v`` (nodal, pointwise) and its derivative."""
    a = np.abs(v)
    return a ** (q - 2.0) * v, (q - 1.0) * a ** (q - 2.0)


class _LaggedCounter:
    """Debug instrumentation: every lagged-coefficient evaluation is recorded."""

    def __init__(self):
        self.calls = []

    def record(self, name, c, z, c_old, z_old):
        ok = np.array_equal(c, c_old) and np.array_equal(z, z_old)
        self.calls.append((name, ok))
        assert ok, f"{name} must be evaluated at the previous time level"


LAGGED_EVALS = _LaggedCounter()


# ---------------------------------------------------------------------------
# The discrete system at one time level
# ---------------------------------------------------------------------------

class StepSystem:
    """Residuals and block solvers of the discrete system for one step.

    ``nu`` and ``M`` select the regularized system; ``nu = 0, M = inf`` is
    the plain scheme.  Everything depending only on the previous level is
    computed once here.
    """

    def __init__(self, mesh, model, params, prev, ghost, loads, nu=0.0, M=math.inf):
        self.mesh, self.model, self.params = mesh, model, params
        self.prev, self.ghost, self.loads = prev, ghost, loads
        self.tau = params.tau
        self.p = params.p
        self.nu, self.M = nu, M
        self.varrho = params.varrho
        self.heat = replace(model.heat, M=M)
        self.Ml = mesh.lumped_mass
        nq = len(mesh.wq)
        c_old_q = mesh.interp(prev.c)
        z_old_q = mesh.interp(prev.z)
        self.c_old_q, self.z_old_q = c_old_q, z_old_q
        if params.debug_lagged:
            LAGGED_EVALS.record("mobility", prev.c, prev.z, prev.c, prev.z)
            LAGGED_EVALS.record("viscosity", prev.c, prev.z, prev.c, prev.z)
        self.m_q = model.mobility(c_old_q, z_old_q) * np.ones((mesh.n_cells, nq))
        self.a_q = model.viscosity(c_old_q, z_old_q) * np.ones((mesh.n_cells, nq))
        self.A_m = mesh.scalar_matrix(diffusion=self.m_q)
        el = model.elastic
        self.visc = mesh.isotropic_matrix(el.lame_lambda, el.lame_mu,
                                          self.a_q * el.viscosity_factor)
        self.eps_old = mesh.strain(prev.u)
        self.L1 = mat.c_split_bound(self.eps_old, z_old_q, el, model.reg)
        self.B = mesh.divergence_matrix(model.heat.rho * np.ones((mesh.n_cells, nq)))
        d = mesh.dim
        self.Mv = np.repeat(self.Ml, d)
        self.bdofs = (mesh.boundary_nodes[:, None] * d + np.arange(d)).ravel()
        free = np.ones(mesh.n_nodes * d, dtype=bool)
        free[self.bdofs] = False
        self.fdofs = np.flatnonzero(free)
        self.iters = dict(ch=0, damage=0, momentum=0, temperature=0)

    # -- helpers ----------------------------------------------------------------

    def T(self, theta):
        return mat.eval_T_M(theta, self.heat) if math.isfinite(self.M) else theta

    def dT(self, theta):
        if not math.isfinite(self.M):
            return np.ones_like(theta)
        return ((theta > 0) & (theta < self.M)).astype(float)

    def _tol(self):
        return self.params.solver.newton_tol

    # -- Cahn-Hilliard --------------------------------------------------------------

    def ch_residual(self, c, mu, theta, jacobian=False):
        mesh, Ml, tau, prev = self.mesh, self.Ml, self.tau, self.prev
        dc = c - prev.c
        R1 = Ml * dc / tau + self.A_m @ mu
        pc = grid.p_laplacian_residual(mesh, c, self.p, self.params.eps_p, jacobian)
        pc, Jp = pc if jacobian else (pc, None)
        pot = self.model.potential
        drive = mat.phi_splitting_drive(c, prev.c, self.model.reg, pot)
        cq = mesh.interp(c)
        Wc = mat.eval_W_derivatives(cq, self.eps_old, self.z_old_q, self.model.elastic,
                                    self.model.reg)
        wdrive = Wc[0] + self.L1 * (cq - self.c_old_q)
        R2 = (-Ml * mu + pc + Ml * drive + mesh.assemble_source(wdrive)
              - Ml * self.T(theta) + Ml * dc / tau)
        if self.nu > 0:
            pm = grid.p_laplacian_residual(mesh, mu, self.varrho, self.params.eps_p, jacobian)
            pm, Jm = pm if jacobian else (pm, None)
            R1 = R1 + self.nu * (pm + Ml * mu)
            pw, dpw = _power_flux(c, self.varrho)
            R2 = R2 + self.nu * Ml * pw
        if not jacobian:
            return R1, R2
        n = mesh.n_nodes
        J11 = sp.diags(Ml / tau)
        J12 = self.A_m
        diag2 = Ml * (mat.phi_splitting_drive_derivative(c, self.model.reg, pot) + 1.0 / tau)
        J21 = Jp + mesh.scalar_matrix(mass=Wc[3] + self.L1) + sp.diags(diag2)
        J22 = sp.diags(-Ml)
        if self.nu > 0:
            J12 = J12 + self.nu * (Jm + sp.diags(Ml))
            J21 = J21 + sp.diags(self.nu * Ml * dpw)
        J = sp.bmat([[J11, J12], [J21, J22]], format="csc")
        return R1, R2, J

    def solve_ch(self, theta, c, mu):
        tol = self._tol()
        n = self.mesh.n_nodes
        R1, R2, J = self.ch_residual(c, mu, theta, jacobian=True)
        res = max(_snorm(R1, self.Ml), _snorm(R2, self.Ml))
        for it in range(self.params.solver.max_newton):
            if res <= tol:
                return c, mu, res
            dx = _solve(J, -np.concatenate([R1, R2]))
            lam = 1.0
            while True:
                cn, mun = c + lam * dx[:n], mu + lam * dx[n:]
                R1n, R2n, Jn = self.ch_residual(cn, mun, theta, jacobian=True)
                resn = max(_snorm(R1n, self.Ml), _snorm(R2n, self.Ml))
                if resn < res or lam < 1e-4 or resn <= tol:
                    break
                lam *= 0.5
            self.iters["ch"] += 1
            if not np.isfinite(resn) or (lam < 1e-4 and resn >= res):
                if resn <= 10 * tol:
                    return cn, mun, resn
                raise NewtonDivergence("Cahn-Hilliard Newton iteration stalled", resn)
            c, mu, R1, R2, J, res = cn, mun, R1n, R2n, Jn, resn
        if res <= tol:
            return c, mu, res
        raise NewtonDivergence("Cahn-Hilliard Newton iteration did not converge", res)

    # -- damage --------------------------------------------------------------------

    def damage_residual(self, c, z, theta, jacobian=False):
        """Residual of the damage equation without the multiplier ``xi``."""
        mesh, Ml, tau, prev = self.mesh, self.Ml, self.tau, self.prev
        pz = grid.p_laplacian_residual(mesh, z, self.p, self.params.eps_p, jacobian)
        pz, Jp = pz if jacobian else (pz, None)
        dmg = self.model.damage
        cq = mesh.interp(c)
        zq = mesh.interp(z)
        el = self.model.elastic
        Wd = mat.eval_W_derivatives(cq, self.eps_old, zq, el, self.model.reg)
        L3 = mat.z_split_bound(cq, self.eps_old, el, self.model.reg)
        wdrive = Wd[1] + L3 * (zq - self.z_old_q)
        F = (Ml * (z - prev.z) / tau + pz + Ml * dmg.splitting_drive(z, prev.z)
             + mesh.assemble_source(wdrive) - Ml * self.T(theta))
        if self.nu > 0:
            pw, dpw = _power_flux(z, self.varrho)
            F = F + self.nu * Ml * pw
        if not jacobian:
            return F
        diag = Ml * (1.0 / tau + dmg.splitting_drive_derivative(z))
        if self.nu > 0:
            diag = diag + self.nu * Ml * dpw
        J = Jp + mesh.scalar_matrix(mass=Wd[4] + L3) + sp.diags(diag)
        return F, J.tocsr()

    def solve_damage(self, c, theta, z):
        """Primal-dual active set method for ``F(z) + xi = 0``, ``xi in dI_[0, z_old](z)``."""
        tol = self._tol()
        Ml, z_old = self.Ml, self.prev.z
        z = np.clip(z, 0.0, z_old)
        F, J = self.damage_residual(c, z, theta, jacobian=True)
        xi = -F
        cc = np.asarray(J.diagonal()).copy()
        pinned = z_old <= 0.0
        prev_sets = None
        for it in range(self.params.solver.max_active_set):
            upper = ((xi + cc * (z - z_old) > 0) | pinned)
            lower = (xi + cc * z < 0) & ~upper
            sets = (upper.tobytes(), lower.tobytes())
            z = np.where(upper, z_old, np.where(lower, 0.0, z))
            free = np.flatnonzero(~(upper | lower))
            # Newton on the inactive set with the active values frozen
            F, J = self.damage_residual(c, z, theta, jacobian=True)
            res = _snorm(F[free], Ml[free])
            for _ in range(self.params.solver.max_newton):
                if res <= tol or free.size == 0:
                    break
                Jff = J[free][:, free]
                dz = _solve(Jff, -F[free])
                lam = 1.0
                while True:
                    zn = z.copy()
                    zn[free] += lam * dz
                    Fn, Jn = self.damage_residual(c, zn, theta, jacobian=True)
                    resn = _snorm(Fn[free], Ml[free])
                    if resn < res or lam < 1e-4:
                        break
                    lam *= 0.5
                self.iters["damage"] += 1
                stalled = resn >= res
                z, F, J, res = zn, Fn, Jn, resn
                if stalled:
                    break
            if res > 10 * tol and free.size:
                raise NewtonDivergence("damage Newton iteration on the inactive set failed", res)
            xi = -F
            xi[free] = 0.0
            feasible = np.all(z[free] >= 0.0) and np.all(z[free] <= z_old[free])
            if sets == prev_sets and feasible:
                xi_full = -F
                return z, xi_full, dict(upper=int(upper.sum()), lower=int(lower.sum()),
                                        residual=res)
            prev_sets = sets
        raise ActiveSetCycling("primal-dual active set iteration did not settle")

    def damage_natural_residual(self, c, z, theta):
        F = self.damage_residual(c, z, theta)
        proj = np.clip(z - F / self.Ml, 0.0, self.prev.z)
        return float(np.max(np.abs(z - proj)))

    # -- momentum ------------------------------------------------------------------

    def momentum_parts(self, c, z):
        forms = grid.elasticity_forms(self.mesh, self.model.elastic, c, z,
                                      np.zeros(self.mesh.n_nodes), reg=self.model.reg,
                                      rho=self.model.heat.rho)
        return forms["stiffness"], forms["eigen_load"]

    def _thermal_load(self, theta):
        # int rho T(theta) div(w) for every test dof
        return self.B.T @ self.T(theta)

    def momentum_residual(self, c, z, theta, u, parts=None, jacobian=False):
        """Full residual (all dofs, shape ``(N*d,)``) of the momentum balance."""
        prev, tau = self.prev, self.tau
        stiff, eigen = parts if parts is not None else self.momentum_parts(c, z)
        uf, u0, u00 = u.ravel(), prev.u.ravel(), self.ghost.ravel()
        R = (self.Mv * (uf - 2.0 * u0 + u00) / tau**2 + self.visc @ (uf - u0) / tau
             + stiff @ uf - eigen - self._thermal_load(theta) - self.loads.F.ravel())
        J = None
        if self.nu > 0:
            e = self.mesh.strain(u - self.loads.uD)
            n2 = np.sum(e * e, axis=(-2, -1))
            q = self.varrho
            s = n2 ** (0.5 * (q - 2.0))
            R = R + self.nu * self.mesh.assemble_stress(s[..., None, None] * e).ravel()
            if jacobian:
                d = self.mesh.dim
                I = np.eye(d)
                sym = 0.5 * (np.einsum("ij,kl->ikjl", I, I) + np.einsum("il,kj->ikjl", I, I))
                t2 = (q - 2.0) * np.where(n2 > 0, n2 ** (0.5 * (q - 4.0)), 0.0)
                D = (s[..., None, None, None, None] * sym
                     + t2[..., None, None, None, None] * np.einsum("...ik,...jl->...ikjl", e, e))
                J = self.nu * self.mesh.vector_matrix(D)
        if jacobian:
            K = sp.diags(self.Mv / tau**2) + self.visc / tau + stiff
            return R, (K if J is None else K + J)
        return R

    def solve_momentum(self, c, z, theta, u):
        d = self.mesh.dim
        parts = self.momentum_parts(c, z)
        u = u.copy()
        u[self.mesh.boundary_nodes] = self.loads.uD[self.mesh.boundary_nodes]
        f = self.fdofs
        tol = self._tol()
        for it in range(self.params.solver.max_newton):
            R, K = self.momentum_residual(c, z, theta, u, parts, jacobian=True)
            res = _snorm(R[f].reshape(-1) / 1.0, np.repeat(self.Ml, d)[f])
            if res <= tol and (self.nu == 0 or it > 0):
                break
            K = sp.csr_matrix(K)
            du = _solve(K[f][:, f], -R[f])
            uf = u.ravel().copy()
            uf[f] += du
            u = uf.reshape(-1, d)
            self.iters["momentum"] += 1
            if self.nu == 0:
                R = self.momentum_residual(c, z, theta, u, parts)
                break
        else:
            raise NewtonDivergence("momentum Newton iteration did not converge", res)
        R = self.momentum_residual(c, z, theta, u, parts)
        return u, R.reshape(-1, d)

    # -- temperature ---------------------------------------------------------------

    def heat_sources(self, c, mu, z, u):
        """Assembled right-hand side ``S`` of the temperature equation (without ``h``)."""
        mesh, Ml, tau, prev = self.mesh, self.Ml, self.tau, self.prev
        dc = (c - prev.c) / tau
        dz = (z - prev.z) / tau
        ev = mesh.strain((u - prev.u) / tau)
        el = self.model.elastic
        visc = self.a_q * el.viscosity_factor * np.sum(el.apply_C(ev) * ev, axis=(-2, -1))
        gm = mesh.grad(mu)
        chem = self.m_q * np.sum(gm * gm, axis=-1)
        return Ml * (self.loads.g + dc * dc + dz * dz) + mesh.assemble_source(visc + chem)

    def coupling_coefficient(self, c, z, u):
        """Row coefficient of the implicit products ``(D c + D z + rho div D u) theta``."""
        tau, prev = self.tau, self.prev
        return (self.Ml * ((c - prev.c) + (z - prev.z)) / tau
                + self.B @ ((u - prev.u).ravel() / tau))

    def temperature_residual(self, theta, coef, S, jacobian=False):
        use_KM = math.isfinite(self.M)
        out = grid.heat_diffusion_residual(self.mesh, theta, self.heat, use_KM=use_KM,
                                           h_load=self.loads.H, jacobian=jacobian)
        A, JA = out if jacobian else (out, None)
        R = self.Ml * (theta - self.prev.theta) / self.tau + A + coef * self.T(theta) - S
        if not jacobian:
            return R
        J = JA + sp.diags(self.Ml / self.tau + coef * self.dT(theta))
        return R, J

    def solve_temperature(self, c, mu, z, u, theta):
        coef = self.coupling_coefficient(c, z, u)
        S = self.heat_sources(c, mu, z, u)
        theta = np.where(theta > 0, theta, self.prev.theta)
        tol = self._tol()
        R, J = self.temperature_residual(theta, coef, S, jacobian=True)
        res = _snorm(R, self.Ml)
        for it in range(self.params.solver.max_newton):
            if res <= tol:
                break
            dth = _solve(J, -R)
            lam = 1.0
            while True:
                thn = theta + lam * dth
                if np.all(thn > 0) or math.isfinite(self.M):
                    Rn, Jn = self.temperature_residual(thn, coef, S, jacobian=True)
                    resn = _snorm(Rn, self.Ml)
                    if resn < res or lam < 1e-4:
                        break
                elif lam < 1e-8:
                    raise PositivityLoss("temperature Newton step cannot keep theta > 0")
                lam *= 0.5
            self.iters["temperature"] += 1
            if resn >= res and lam < 1e-4:
                if resn <= 10 * tol:
                    theta, res = thn, resn
                    break
                raise NewtonDivergence("temperature Newton iteration stalled", resn)
            theta, R, J, res = thn, Rn, Jn, resn
        else:
            if res > tol:
                raise NewtonDivergence("temperature Newton iteration did not converge", res)
        if np.any(theta <= 0):
            raise PositivityLoss(f"nonpositive temperature after solve (min {theta.min():.3e})")
        return theta, res

    # -- consolidated residuals -------------------------------------------------------

    def residual_norms(self, c, mu, z, theta, u):
        R1, R2 = self.ch_residual(c, mu, theta)
        Rm = self.momentum_residual(c, z, theta, u)
        coef = self.coupling_coefficient(c, z, u)
        S = self.heat_sources(c, mu, z, u)
        Rt = self.temperature_residual(theta, coef, S)
        d = self.mesh.dim
        return dict(
            ch=max(_snorm(R1, self.Ml), _snorm(R2, self.Ml)),
            damage=self.damage_natural_residual(c, z, theta),
            momentum=_snorm(Rm[self.fdofs], self.Mv[self.fdofs]),
            temperature=_snorm(Rt, self.Ml),
        )


# ---------------------------------------------------------------------------
# Block Gauss-Seidel solve of one step
# ---------------------------------------------------------------------------

def _coupled_solve(mesh, model, params, prev, ghost, loads, nu, M, guess=None):
    sys_ = StepSystem(mesh, model, params, prev, ghost, loads, nu, M)
    sol = params.solver
    g = guess if guess is not None else prev
    c, mu, z = g.c.copy(), g.mu.copy(), g.z.copy()
    theta, u = g.theta.copy(), g.u.copy()
    omega = sol.damping
    best = math.inf
    norms = {}
    for sweep in range(1, sol.max_sweeps + 1):
        c, mu, _ = sys_.solve_ch(theta, c, mu)
        z, xi, info = sys_.solve_damage(c, theta, z)
        u, reaction = sys_.solve_momentum(c, z, theta, u)
        theta_new, _ = sys_.solve_temperature(c, mu, z, u, theta)
        theta = theta + omega * (theta_new - theta) if omega != 1.0 else theta_new
        norms = sys_.residual_norms(c, mu, z, theta, u)
        total = max(norms.values())
        if total <= sol.sweep_tol:
            break
        if total > best and omega > 1e-3:
            omega *= 0.5
        best = min(best, total)
        if not np.isfinite(total):
            break
    else:
        total = max(norms.values()) if norms else math.inf
    if not total <= sol.sweep_tol:
        raise StepDivergence(f"block Gauss-Seidel did not converge (residual {total:.3e})",
                             step=prev.k + 1, diagnostics=norms)
    # xi and the reaction belong to the consolidated iterate
    F = sys_.damage_residual(c, z, theta)
    xi = -F
    reaction = sys_.momentum_residual(c, z, theta, u).reshape(-1, mesh.dim)
    reaction[~mesh.boundary_mask] = 0.0
    tau = params.tau
    state = State(prev.k + 1, prev.t + tau, c, mu, z, theta, u, (u - prev.u) / tau, xi)
    report = StepReport(
        k=state.k, t=state.t, sweeps=sweep, newton_iterations=dict(sys_.iters),
        residuals=norms, active_upper=info["upper"], active_lower=info["lower"],
        theta_min=float(theta.min()), theta_max=float(theta.max()),
        mass_defect=float(np.dot(mesh.lumped_mass, c - prev.c)),
        boundary_work=float(np.sum(reaction * (loads.uD - loads.uD_old))),
        loads=loads,
    )
    return state, report


def regularized_step(mesh, model, prev, ghost, params, data, guess=None):
    """One step of the (nu, M)-regularized system with ``params.nu`` and ``params.M``.

    ``nu = 0, M = inf`` is the plain scheme.
    """
    loads = data.loads(mesh, prev.t, prev.t + params.tau)
    return _coupled_solve(mesh, model, params, prev, ghost, loads, params.nu, params.M, guess)


def continuation_step(mesh, model, prev, ghost, params, data, schedule=None):
    """Solve along ``(nu, M)`` stages, warm-starting each, ending at the plain scheme."""
    stages = tuple(params.schedule if schedule is None else schedule) + ((0.0, math.inf),)
    loads = data.loads(mesh, prev.t, prev.t + params.tau)
    guess = None
    for nu, M in stages:
        guess, report = _coupled_solve(mesh, model, params, prev, ghost, loads, nu, M, guess)
    report.continuation = True
    return guess, report


def step(mesh, model, prev, ghost, params, data, _depth=0):
    """Advance one step; falls back to continuation, then to halving ``tau``."""
    try:
        return regularized_step(mesh, model, prev, ghost, params, data)
    except (NewtonDivergence, ActiveSetCycling, StepDivergence, LinearSolveFailure) as exc:
        first = exc
        if params.auto_continuation and not params.regularized:
            log.info("step %d: %s; trying continuation", prev.k + 1, exc)
            try:
                return continuation_step(mesh, model, prev, ghost, params, data)
            except ThermophaseError as exc2:
                first = exc2
    except PositivityLoss as exc:
        first = exc
    if _depth >= params.solver.max_halvings:
        raise StepDivergence(f"step failed after {_depth} halvings: {first}", step=prev.k + 1,
                             diagnostics={"error": str(first)})
    log.info("step %d: %s; halving tau", prev.k + 1, first)
    return _substep(mesh, model, prev, ghost, params, data, _depth)


def _substep(mesh, model, prev, ghost, params, data, depth):
    half = replace(params, tau=0.5 * params.tau)
    s1, r1 = step(mesh, model, prev, ghost, half, data, depth + 1)
    s1 = replace(s1, k=prev.k)
    s2, r2 = step(mesh, model, s1, prev.u, half, data, depth + 1)
    tau = params.tau
    merged = State(prev.k + 1, prev.t + tau, s2.c, s2.mu, s2.z, s2.theta, s2.u,
                   (s2.u - prev.u) / tau, s2.xi)
    rep = replace(r2, k=merged.k, t=merged.t, sweeps=r1.sweeps + r2.sweeps,
                  mass_defect=r1.mass_defect + r2.mass_defect,
                  boundary_work=r1.boundary_work + r2.boundary_work,
                  continuation=r1.continuation or r2.continuation,
                  substeps=r1.substeps + r2.substeps,
                  theta_min=min(r1.theta_min, r2.theta_min),
                  theta_max=max(r1.theta_max, r2.theta_max),
                  loads=_merge_loads(r1.loads, r2.loads))
    return merged, rep


def _merge_loads(a, b):
    return StepLoads(0.5 * (a.g + b.g), 0.5 * (a.h + b.h), 0.5 * (a.H + b.H), 0.5 * (a.f + b.f),
                     0.5 * (a.F + b.F), b.uD, a.uD_old)


def run(problem, callback=None, energy_check=True):
    """Execute ``ceil(T / tau)`` steps; ``problem`` is a :class:`Problem` or has ``build()``."""
    if hasattr(problem, "build"):
        problem = problem.build()
    from . import monitors

    mesh, model, data = problem.mesh, problem.model, problem.data
    params = problem.scheme.resolved(mesh.dim)
    tau = params.tau
    n_steps = max(0, math.ceil(problem.T / tau - 1e-9))
    traj = Trajectory(mesh, model, params, data, [problem.initial.copy()], problem.ghost.copy(),
                      [None], [None])
    prev, ghost = traj.states[0], traj.ghost
    E_prev = monitors.total_energy(prev, mesh, model, params.p).total if energy_check else None
    for k in range(1, n_steps + 1):
        try:
            state, report = step(mesh, model, prev, ghost, params, data)
        except StepDivergence as exc:
            exc.step = k
            raise
        state.k, state.t = k, k * tau
        report.k, report.t = k, state.t
        loads = report.loads
        if energy_check:
            E = monitors.total_energy(state, mesh, model, params.p).total
            work = tau * (np.dot(mesh.lumped_mass, loads.g) + loads.H.sum()
                          + np.sum(loads.F * state.v)) + report.boundary_work
            report.energy_residual = float(E_prev + work - E)
            E_prev = E
        traj.states.append(state)
        traj.reports.append(report)
        traj.loads.append(loads)
        if callback is not None:
            callback(state, report)
        ghost, prev = prev.u, state
    return traj

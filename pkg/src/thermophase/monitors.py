"""Trajectory diagnostics: energies, the discrete entropy, energy and damage
inequalities, conservation and positivity checks, and a brute-force
minimizer used to validate the block solvers.

Window sums use prefix sums over per-step contributions, so checking every
grid pair ``(s, t)`` costs ``O(K^2)`` scalar operations only.
"""

from dataclasses import dataclass, field
import math
from typing import Callable, Optional

import numpy as np

from . import grid
from . import material as mat
from .errors import (InadmissibleTestField, NegativeTestFunction, NonpositiveTemperature,
                     SearchBoxTooSmall, WindowMisaligned)

TOL = 1e-6


@dataclass
class EnergyBreakdown:
    grad_c: float
    grad_z: float
    elastic: float
    phi: float
    sigma: float
    thermal: float
    kinetic: float

    @property
    def total(self):
        return (self.grad_c + self.grad_z + self.elastic + self.phi + self.sigma
                + self.thermal + self.kinetic)

    def as_dict(self):
        return dict(grad_c=self.grad_c, grad_z=self.grad_z, elastic=self.elastic, phi=self.phi,
                    sigma=self.sigma, thermal=self.thermal, kinetic=self.kinetic,
                    total=self.total)


@dataclass
class InequalityReport:
    kind: str
    s: int
    t: int
    lhs: float
    rhs: float
    test_id: str = ""
    tol: float = TOL

    @property
    def residual(self):
        return self.rhs - self.lhs

    @property
    def scale(self):
        return 1.0 + max(abs(self.lhs), abs(self.rhs))

    @property
    def passed(self):
        return bool(self.residual >= -self.tol * self.scale)

    def row(self):
        return dict(kind=self.kind, s=self.s, t=self.t, test_id=self.test_id, lhs=self.lhs,
                    rhs=self.rhs, residual=self.residual, scale=self.scale,
                    passed=int(self.passed))


def _p_of(traj):
    p = traj.scheme.p
    return grid_default_p(traj.mesh.dim) if p is None else p


def grid_default_p(dim):
    from .stepper import default_p
    return default_p(dim)


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

def total_energy(state, mesh, model, p):
    """Regularized total energy of a state.

    Gradient terms and the elastic density are integrated with the Gauss
    rule, the potentials, the thermal and the kinetic part are lumped.
    """
    Ml = mesh.lumped_mass
    w = mesh.wq
    gc = mesh.grad(state.c)
    gz = mesh.grad(state.z)
    grad_c = float(np.sum(grid.p_laplacian_energy_density(gc, p) * w))
    grad_z = float(np.sum(grid.p_laplacian_energy_density(gz, p) * w))
    W = mat.eval_W(mesh.interp(state.c), mesh.strain(state.u), mesh.interp(state.z),
                   model.elastic, model.reg)
    elastic = float(np.sum(W * w))
    phi = float(np.dot(Ml, mat.phi_omega(state.c, model.reg, model.potential)))
    sigma = float(np.dot(Ml, model.damage.value(state.z)))
    thermal = float(np.dot(Ml, state.theta))
    kinetic = 0.5 * float(np.dot(Ml, np.sum(state.v * state.v, axis=1)))
    return EnergyBreakdown(grad_c, grad_z, elastic, phi, sigma, thermal, kinetic)


def trajectory_energies(traj):
    p = _p_of(traj)
    return np.array([total_energy(s, traj.mesh, traj.model, p).total for s in traj.states])


def _check_window(traj, s, t):
    K = len(traj.states) - 1
    if not (isinstance(s, (int, np.integer)) and isinstance(t, (int, np.integer))):
        raise WindowMisaligned("window bounds must be integer grid indices")
    if not 0 <= s <= t <= K:
        raise WindowMisaligned(f"window ({s}, {t}) outside grid 0..{K}")


def _windows(K, windows):
    if windows == "all":
        return [(s, t) for s in range(K + 1) for t in range(s, K + 1)]
    if windows == "steps":
        return [(k - 1, k) for k in range(1, K + 1)]
    return list(windows)


def _step_system(traj, k):
    from .stepper import StepSystem
    prev = traj.states[k - 1]
    ghost = traj.ghost if k == 1 else traj.states[k - 2].u
    return StepSystem(traj.mesh, traj.model, traj.scheme, prev, ghost, traj.loads[k])


def energy_work(traj):
    """Per-step external work ``tau (int g + int_dOmega h + int f.v) + boundary power * tau``."""
    tau, Ml = traj.tau, traj.mesh.lumped_mass
    out = np.zeros(len(traj.states))
    for k in range(1, len(traj.states)):
        L = traj.loads[k]
        st = traj.states[k]
        out[k] = (tau * (np.dot(Ml, L.g) + L.H.sum() + np.sum(L.F * st.v))
                  + traj.reports[k].boundary_work)
    return out


def check_total_energy_inequality(traj, s, t, energies=None, work=None):
    """``E(t) <= E(s) + external work over (t_s, t_t]``."""
    _check_window(traj, s, t)
    E = trajectory_energies(traj) if energies is None else energies
    w = energy_work(traj) if work is None else work
    return InequalityReport("total_energy", s, t, float(E[t]), float(E[s] + np.sum(w[s + 1:t + 1])))


def energy_reports(traj, windows="all"):
    E = trajectory_energies(traj)
    w = energy_work(traj)
    cw = np.concatenate([[0.0], np.cumsum(w[1:])])
    out = []
    for s, t in _windows(len(traj.states) - 1, windows):
        out.append(InequalityReport("total_energy", s, t, float(E[t]),
                                    float(E[s] + cw[t] - cw[s])))
    return out


# ---------------------------------------------------------------------------
# Entropy inequality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestField:
    """Nonnegative test field ``phi(x, t)`` evaluated at the nodes."""

    name: str
    fn: Callable

    def at(self, mesh, t):
        v = np.broadcast_to(np.asarray(self.fn(mesh.coords, t), dtype=float), (mesh.n_nodes,))
        if np.any(v < 0):
            raise NegativeTestFunction(f"test field {self.name} is negative at t={t}")
        return v


def _bump(center, radius):
    center = np.asarray(center, dtype=float)

    def fn(x, t):
        r2 = np.sum((x - center) ** 2, axis=1) / radius**2
        return np.maximum(0.0, 1.0 - r2) ** 2
    return fn


def canonical_test_fields(mesh, T=1.0):
    """Constant one, four bumps (centre, corner, two interior points), one time-linear field."""
    L = np.asarray(mesh.extents, dtype=float)
    r = 0.3 * float(np.min(L))
    T = T if T > 0 else 1.0
    return [
        TestField("one", lambda x, t: np.ones(len(x))),
        TestField("bump_center", _bump(0.5 * L, r)),
        TestField("bump_corner", _bump(0.0 * L, r)),
        TestField("bump_quarter", _bump(0.25 * L, r)),
        TestField("bump_offset", _bump(np.where(np.arange(len(L)) == 0, 0.75, 0.5) * L, r)),
        TestField("ramp_time", lambda x, t: (1.0 + t / T) * (1.0 + x[:, 0] / L[0])),
    ]


def _entropy_terms(traj, phi):
    """Per-step entropy contributions for one test field.

    Returns ``(a_phi, lhs_k, rhs_k)`` with ``a_phi[k] = sum M (log theta + c + z) phi``
    at level ``k`` (boundary terms) and the per-step parts of both sides.
    """
    mesh, tau = traj.mesh, traj.tau
    Ml = mesh.lumped_mass
    K = len(traj.states) - 1
    heat = traj.model.heat
    phis = [phi.at(mesh, s.t) for s in traj.states]
    a = []
    for st in traj.states:
        if np.any(st.theta <= 0):
            raise NonpositiveTemperature(f"theta <= 0 at step {st.k}")
        a.append(np.log(np.maximum(st.theta, 1e-14)) + st.c + st.z)
    a_phi = np.array([np.dot(Ml, a[k] * phis[k]) for k in range(K + 1)])
    lhs = np.zeros(K + 1)
    rhs = np.zeros(K + 1)
    for k in range(1, K + 1):
        sysk = _step_system(traj, k)
        st, pv = traj.states[k], traj.states[k - 1]
        ph = phis[k]
        th = st.theta
        th_q = mesh.interp(th)
        Kq = mat.eval_K(th_q, heat)
        gth = mesh.grad(th)
        D1 = mesh.integrate(Kq * np.sum(gth * mesh.grad(ph), axis=-1) / th_q)
        J = float(np.dot(mesh.assemble_flux(Kq[..., None] * gth), ph / th))
        D2 = D1 - J
        S = sysk.heat_sources(st.c, st.mu, st.z, st.u)
        src = float(np.dot(S + traj.loads[k].H / 1.0, ph / th))
        div_term = float(np.dot(ph, sysk.B @ (st.u - pv.u).ravel()))
        lhs[k] = np.dot(Ml, a[k - 1] * (ph - phis[k - 1])) - div_term - tau * D1
        rhs[k] = -tau * (D2 + src)
    return a_phi, lhs, rhs


def check_entropy_inequality(traj, s, t, phi):
    _check_window(traj, s, t)
    return entropy_reports(traj, [phi], [(s, t)])[0]


def entropy_reports(traj, fields=None, windows="all"):
    if fields is None:
        fields = canonical_test_fields(traj.mesh, traj.states[-1].t)
    out = []
    wins = _windows(len(traj.states) - 1, windows)
    for phi in fields:
        a_phi, lhs, rhs = _entropy_terms(traj, phi)
        cl = np.cumsum(lhs)
        cr = np.cumsum(rhs)
        for s, t in wins:
            L = float(cl[t] - cl[s])
            R = float(a_phi[t] - a_phi[s] + cr[t] - cr[s])
            out.append(InequalityReport("entropy", s, t, L, R, phi.name))
    return out


# ---------------------------------------------------------------------------
# Damage inequalities
# ---------------------------------------------------------------------------

def _damage_potential_energy(traj, z):
    mesh = traj.mesh
    p = _p_of(traj)
    gz = mesh.grad(z)
    return (float(np.sum(grid.p_laplacian_energy_density(gz, p) * mesh.wq))
            + float(np.dot(mesh.lumped_mass, traj.model.damage.value(z))))


def damage_reports(traj, windows="steps", n_perturb=5):
    """Energy-dissipation reports over ``windows`` and per-step one-sided VI reports."""
    mesh, tau = traj.mesh, traj.tau
    Ml = mesh.lumped_mass
    K = len(traj.states) - 1
    G = np.array([_damage_potential_energy(traj, s.z) for s in traj.states])
    diss = np.zeros(K + 1)
    work = np.zeros(K + 1)
    vi = []
    gaps = np.zeros(K + 1)
    for k in range(1, K + 1):
        sysk = _step_system(traj, k)
        st, pv = traj.states[k], traj.states[k - 1]
        dz = st.z - pv.z
        diss[k] = float(np.dot(Ml, dz * dz)) / tau
        cq = mesh.interp(st.c)
        zq = mesh.interp(st.z)
        el = traj.model.elastic
        Wz = mat.eval_W_derivatives(cq, sysk.eps_old, zq, el, traj.model.reg)[1]
        L3 = mat.z_split_bound(cq, sysk.eps_old, el, traj.model.reg)
        drive = Wz + L3 * (zq - sysk.z_old_q)
        work[k] = -mesh.integrate(drive * mesh.interp(dz)) + float(np.dot(Ml, st.theta * dz))
        F = sysk.damage_residual(st.c, st.z, st.theta)
        xi = -F
        gaps[k] = float(np.sum(np.maximum(xi, 0.0) * (pv.z - st.z) + np.maximum(-xi, 0.0) * st.z))
        for name, zeta in _vi_candidates(pv.z, st.z, n_perturb):
            if np.any(zeta < -1e-15) or np.any(zeta > pv.z + 1e-15):
                raise InadmissibleTestField(f"candidate {name} leaves [0, z_old]")
            val = float(np.dot(F, zeta - st.z))
            vi.append(InequalityReport("damage_vi", k - 1, k, 0.0, val, name))
    cd = np.cumsum(diss)
    cw = np.cumsum(work)
    ed = []
    for s, t in _windows(K, windows):
        ed.append(InequalityReport("damage_energy", s, t, float(cd[t] - cd[s] + G[t]),
                                   float(G[s] + cw[t] - cw[s])))
    return ed, vi, gaps


def _vi_candidates(z_old, z, n_perturb):
    yield "zero", np.zeros_like(z)
    yield "z_old", z_old.copy()
    yield "half_z_old", 0.5 * z_old
    yield "self", z.copy()
    idx = np.linspace(0, len(z) - 1, n_perturb).round().astype(int)
    for i in np.unique(idx):
        for label, val in (("up", z_old[i]), ("down", 0.0)):
            zeta = z.copy()
            zeta[i] = val
            yield f"node{i}_{label}", zeta


def check_damage_inequalities(traj, s, t):
    _check_window(traj, s, t)
    ed, vi, _ = damage_reports(traj, windows=[(s, t)])
    vi = [r for r in vi if s < r.t <= t]
    return ed[0], vi


def complementarity_gaps(traj):
    return damage_reports(traj, windows=[])[2]


# ---------------------------------------------------------------------------
# Conservation, positivity, norms
# ---------------------------------------------------------------------------

def mass_defect(traj):
    Ml = traj.mesh.lumped_mass
    m0 = float(np.dot(Ml, traj.states[0].c))
    return np.array([float(np.dot(Ml, s.c)) - m0 for s in traj.states])


def theta_floor(theta_star, C, T):
    """Comparison value ``theta_star / (1 + C T theta_star)``."""
    if not theta_star > 0 or C < 0 or T < 0:
        raise ValueError("need theta_star > 0, C >= 0, T >= 0")
    return theta_star / (1.0 + C * T * theta_star)


@dataclass
class PositivityReport:
    minima: np.ndarray
    global_min: float
    flagged: list

    @property
    def passed(self):
        return not self.flagged


def positivity_report(traj):
    minima = np.array([float(s.theta.min()) for s in traj.states])
    flagged = [int(k) for k in np.flatnonzero(minima <= 0)]
    return PositivityReport(minima, float(minima.min()), flagged)


def constraint_report(traj):
    """Exact checks of ``0 <= z^k <= z^{k-1} <= 1``, ``theta > 0`` and the Dirichlet trace."""
    mesh = traj.mesh
    b = mesh.boundary_mask
    out = dict(z_bounds=True, z_monotone=True, theta_positive=True, dirichlet=True)
    for k, st in enumerate(traj.states):
        out["z_bounds"] &= bool(np.all(st.z >= 0) and np.all(st.z <= 1))
        out["theta_positive"] &= bool(np.all(st.theta > 0))
        if k >= 1:
            out["z_monotone"] &= bool(np.all(st.z <= traj.states[k - 1].z))
            out["dirichlet"] &= bool(np.array_equal(st.u[b], traj.loads[k].uD[b]))
    return out


def apriori_norm_tracker(traj, alpha=0.5):
    """Cumulative discrete analogues of the a priori bounds, one row per step."""
    mesh, tau = traj.mesh, traj.tau
    Ml, w = mesh.lumped_mass, mesh.wq
    p = _p_of(traj)
    kappa = traj.model.heat.kappa
    rows = []
    acc = dict(sup_c_W1p=0.0, sum_dc_L2=0.0, sup_plap_c=0.0, sum_mu_H1=0.0, sup_z_W1p=0.0,
               sum_theta_H1=0.0, sum_theta_power=0.0, sum_grad_log_theta=0.0,
               sup_log_theta_L1=0.0, sum_dtheta_L1=0.0, sup_u_H1=0.0, sup_v_L2=0.0)

    def w1p(f):
        g = mesh.grad(f)
        return (float(np.dot(Ml, np.abs(f) ** p)) + float(np.sum(np.sum(g * g, -1) ** (p / 2) * w))) ** (1 / p)

    for k, st in enumerate(traj.states):
        acc["sup_c_W1p"] = max(acc["sup_c_W1p"], w1p(st.c))
        acc["sup_z_W1p"] = max(acc["sup_z_W1p"], w1p(st.z))
        lap = grid.p_laplacian_residual(mesh, st.c, p, traj.scheme.eps_p, jacobian=False)
        acc["sup_plap_c"] = max(acc["sup_plap_c"], float(np.sqrt(np.dot(Ml, (lap / Ml) ** 2))))
        acc["sup_log_theta_L1"] = max(acc["sup_log_theta_L1"],
                                      float(np.dot(Ml, np.abs(np.log(st.theta)))))
        gu = mesh.vgrad(st.u)
        acc["sup_u_H1"] = max(acc["sup_u_H1"], math.sqrt(
            float(np.dot(Ml, np.sum(st.u**2, 1))) + float(np.sum(np.sum(gu**2, (-2, -1)) * w))))
        acc["sup_v_L2"] = max(acc["sup_v_L2"], math.sqrt(float(np.dot(Ml, np.sum(st.v**2, 1)))))
        if k >= 1:
            pv = traj.states[k - 1]
            dc = (st.c - pv.c) / tau
            acc["sum_dc_L2"] += tau * float(np.dot(Ml, dc * dc))
            gm = mesh.grad(st.mu)
            acc["sum_mu_H1"] += tau * (float(np.dot(Ml, st.mu**2)) + mesh.integrate(np.sum(gm**2, -1)))
            gt = mesh.grad(st.theta)
            acc["sum_theta_H1"] += tau * (float(np.dot(Ml, st.theta**2)) + mesh.integrate(np.sum(gt**2, -1)))
            gpow = mesh.grad(st.theta ** ((kappa + alpha) / 2))
            acc["sum_theta_power"] += tau * mesh.integrate(np.sum(gpow**2, -1))
            glog = mesh.grad(np.log(st.theta))
            acc["sum_grad_log_theta"] += tau * mesh.integrate(np.sum(glog**2, -1))
            acc["sum_dtheta_L1"] += float(np.dot(Ml, np.abs(st.theta - pv.theta)))
        rows.append(dict(k=k, t=st.t, **acc))
    return rows


# ---------------------------------------------------------------------------
# Convex-concave splitting estimates
# ---------------------------------------------------------------------------

def splitting_slacks(c_new, c_old, z_new, z_old, eps_old, eps_new, model):
    """Slacks (>= 0 when the estimates hold) of the one-step splitting inequalities.

    Returns a dict with ``phi`` (potential), ``W`` (combined elastic
    estimate) and the individual ``W_c``, ``W_z``, ``W_eps`` pieces.
    """
    reg, el, pot = model.reg, model.elastic, model.potential
    dc = c_new - c_old
    dphi = mat.phi_omega(c_new, reg, pot) - mat.phi_omega(c_old, reg, pot)
    s_phi = mat.phi_splitting_drive(c_new, c_old, reg, pot) * dc - dphi
    dcw, dzw, stress = mat.W_splitting_drives(c_new, c_old, z_new, z_old, eps_old, eps_new, reg, el)
    W = lambda c, e, z: mat.eval_W(c, e, z, el, reg)
    s_c = dcw * dc - (W(c_new, eps_old, z_old) - W(c_old, eps_old, z_old))
    s_z = dzw * (z_new - z_old) - (W(c_new, eps_old, z_new) - W(c_new, eps_old, z_old))
    s_e = np.sum(stress * (eps_new - eps_old), axis=(-2, -1)) - (W(c_new, eps_new, z_new) - W(c_new, eps_old, z_new))
    s_W = s_c + s_z + s_e
    scale = 1.0 + np.abs(W(c_new, eps_new, z_new)) + np.abs(W(c_old, eps_old, z_old))
    return dict(phi=s_phi, W=s_W, W_c=s_c, W_z=s_z, W_eps=s_e, scale=scale,
                phi_scale=1.0 + np.abs(dphi))


def p_power_slack(x, y, p):
    """``|x|^{p-2} x . (x - y) - (|x|^p - |y|^p) / p`` (nonnegative by convexity)."""
    nx = np.sqrt(np.sum(x * x, axis=-1))
    ny = np.sqrt(np.sum(y * y, axis=-1))
    return np.sum(nx[..., None] ** (p - 2) * x * (x - y), axis=-1) - (nx**p - ny**p) / p


def trajectory_splitting_check(traj):
    """Minimum scaled slack of every splitting estimate over all quadrature points and steps."""
    mesh = traj.mesh
    p = _p_of(traj)
    worst = dict(phi=math.inf, W=math.inf, p_c=math.inf, p_z=math.inf)
    for k in range(1, len(traj.states)):
        st, pv = traj.states[k], traj.states[k - 1]
        cq, c0q = mesh.interp(st.c), mesh.interp(pv.c)
        zq, z0q = mesh.interp(st.z), mesh.interp(pv.z)
        sl = splitting_slacks(cq, c0q, zq, z0q, mesh.strain(pv.u), mesh.strain(st.u), traj.model)
        reg, pot = traj.model.reg, traj.model.potential
        dphi = mat.phi_omega(st.c, reg, pot) - mat.phi_omega(pv.c, reg, pot)
        s_phi = mat.phi_splitting_drive(st.c, pv.c, reg, pot) * (st.c - pv.c) - dphi
        worst["phi"] = min(worst["phi"], float(np.min(s_phi / (1.0 + np.abs(dphi)))))
        worst["W"] = min(worst["W"], float(np.min(sl["W"] / sl["scale"])))
        for key, f in (("p_c", "c"), ("p_z", "z")):
            x, y = mesh.grad(getattr(st, f)), mesh.grad(getattr(pv, f))
            s = p_power_slack(x, y, p)
            scale = 1.0 + np.sum(x * x, -1) ** (p / 2) + np.sum(y * y, -1) ** (p / 2)
            worst[key] = min(worst[key], float(np.min(s / scale)))
    return worst


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

def brute_force_incremental_oracle(objective, lower, upper, points=11, levels=24,
                                   constraint_lower=None, constraint_upper=None,
                                   shrink=0.5, face_tol=None):
    """Minimize a vectorized ``objective(X)`` (``X`` of shape ``(m, n)``) over a box.

    Each level evaluates the full tensor grid with ``points`` nodes per axis
    inside the current box, recentres on the best node and shrinks the box
    by ``shrink`` (clipped to the original box).  Box faces that are not
    declared constraints must not hold the minimizer: that raises
    :class:`SearchBoxTooSmall`.
    """
    lo0 = np.asarray(lower, dtype=float)
    hi0 = np.asarray(upper, dtype=float)
    n = lo0.size
    if n > 6:
        raise ValueError("brute-force search supports at most 6 unknowns")
    cl = np.zeros(n, bool) if constraint_lower is None else np.asarray(constraint_lower, bool)
    cu = np.zeros(n, bool) if constraint_upper is None else np.asarray(constraint_upper, bool)
    lo, hi = lo0.copy(), hi0.copy()
    best = 0.5 * (lo + hi)
    for _ in range(levels):
        axes = [np.linspace(l, h, points) if h > l else np.array([l]) for l, h in zip(lo, hi)]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        vals = objective(X)
        best = X[int(np.argmin(vals))]
        half = shrink * 0.5 * (hi - lo)
        lo = np.maximum(lo0, best - half)
        hi = np.minimum(hi0, best + half)
    width = hi0 - lo0
    tol = 1e-9 * np.maximum(width, 1.0) if face_tol is None else face_tol
    on_lo = (best - lo0 <= tol) & ~cl & (width > 0)
    on_hi = (hi0 - best <= tol) & ~cu & (width > 0)
    if np.any(on_lo | on_hi):
        raise SearchBoxTooSmall("minimizer lies on a non-constraint face of the search box")
    return best


def ch_incremental_functional(mesh, model, p, eps_p, tau, prev, theta):
    """Incremental CH functional in reduced coordinates ``c = c_old + N y``.

    ``N`` spans the mass-preserving increments; returns ``(objective, N)``.
    The chemical potential is eliminated through the mobility pseudo-inverse.
    """
    Ml = mesh.lumped_mass
    c_old = prev.c
    cq_old, zq_old = mesh.interp(prev.c), mesh.interp(prev.z)
    m_q = model.mobility(cq_old, zq_old) * np.ones_like(cq_old)
    A = mesh.scalar_matrix(diffusion=m_q).toarray()
    Ap = np.linalg.pinv(A)
    MApM = Ml[:, None] * Ap * Ml[None, :]
    _, _, Vt = np.linalg.svd(Ml[None, :])
    N = Vt[1:].T
    eps_old = mesh.strain(prev.u)
    L1 = mat.c_split_bound(eps_old, zq_old, model.elastic, model.reg)
    pot, reg, lam = model.potential, model.reg, model.potential.lambda_gamma
    lin = pot.gamma_d1(c_old) - lam * c_old
    Nmat, Nn = mesh.N, mesh.conn

    def objective(Y):
        dC = Y @ N.T
        C = c_old + dC
        E = 0.5 / tau * np.einsum("mi,ij,mj->m", dC, MApM, dC)
        E += 0.5 / tau * (dC * dC) @ Ml
        E += (mat.beta_hat_omega(C, reg, pot) + 0.5 * lam * C * C + lin * C - theta * C) @ Ml
        Ce = C[:, Nn]
        cq = np.einsum("mea,qa->meq", Ce, Nmat)
        g = np.einsum("mea,qak->meqk", Ce, mesh.dN)
        E += np.sum(grid.p_laplacian_energy_density(g, p, eps_p) * mesh.wq, axis=(1, 2))
        W = mat.eval_W(cq, eps_old[None], zq_old[None], model.elastic, reg)
        E += np.sum((W + 0.5 * L1 * (cq - cq_old) ** 2) * mesh.wq, axis=(1, 2))
        return E

    return objective, N


def damage_incremental_functional(mesh, model, p, eps_p, tau, prev, c, theta):
    """Incremental damage functional over nodal ``z`` (box ``[0, z_old]``)."""
    Ml = mesh.lumped_mass
    z_old = prev.z
    zq_old = mesh.interp(z_old)
    cq = mesh.interp(c)
    eps_old = mesh.strain(prev.u)
    L3 = mat.z_split_bound(cq, eps_old, model.elastic, model.reg)
    dmg = model.damage
    Ls = dmg.second_derivative_bound

    def objective(Z):
        E = 0.5 / tau * ((Z - z_old) ** 2) @ Ml
        E += (dmg.value(Z) + 0.5 * Ls * (Z - z_old) ** 2 - theta * Z) @ Ml
        Ze = Z[:, mesh.conn]
        zq = np.einsum("mea,qa->meq", Ze, mesh.N)
        g = np.einsum("mea,qak->meqk", Ze, mesh.dN)
        E += np.sum(grid.p_laplacian_energy_density(g, p, eps_p) * mesh.wq, axis=(1, 2))
        W = mat.eval_W(cq[None], eps_old[None], zq, model.elastic, model.reg)
        E += np.sum((W + 0.5 * L3 * (zq - zq_old) ** 2) * mesh.wq, axis=(1, 2))
        return E

    return objective


def oracle_ch_block(mesh, model, p, eps_p, tau, prev, theta, radius=1.0, **kw):
    obj, N = ch_incremental_functional(mesh, model, p, eps_p, tau, prev, theta)
    n = N.shape[1]
    y = brute_force_incremental_oracle(obj, -radius * np.ones(n), radius * np.ones(n), **kw)
    return prev.c + N @ y


def oracle_damage_block(mesh, model, p, eps_p, tau, prev, c, theta, **kw):
    obj = damage_incremental_functional(mesh, model, p, eps_p, tau, prev, c, theta)
    n = mesh.n_nodes
    return brute_force_incremental_oracle(obj, np.zeros(n), prev.z, constraint_lower=np.ones(n, bool),
                                          constraint_upper=np.ones(n, bool), **kw)


# ---------------------------------------------------------------------------
# Aggregate check
# ---------------------------------------------------------------------------

@dataclass
class CheckSummary:
    reports: list
    gaps: np.ndarray
    mass: np.ndarray
    positivity: PositivityReport
    constraints: dict
    splitting: dict

    @property
    def failures(self):
        return [r for r in self.reports if not r.passed]

    @property
    def passed(self):
        return (not self.failures and float(np.max(self.gaps, initial=0.0)) <= 1e-10
                and self.mass_ok and self.positivity.passed and all(self.constraints.values())
                and all(v >= -1e-12 for v in self.splitting.values()))

    @property
    def mass_ok(self):
        Ml_scale = 1.0 + abs(self.mass[0]) if len(self.mass) else 1.0
        return bool(np.all(np.abs(np.diff(self.mass)) <= 1e-10 * Ml_scale)) if len(self.mass) > 1 else True


def check_all(traj, windows="all"):
    reports = energy_reports(traj, windows)
    reports += entropy_reports(traj, windows=windows)
    ed, vi, gaps = damage_reports(traj, windows=windows)
    reports += ed + vi
    return CheckSummary(reports, gaps, mass_defect(traj), positivity_report(traj),
                        constraint_report(traj), trajectory_splitting_check(traj))

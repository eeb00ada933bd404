"""Constitutive closures, regularizations and convex-concave splittings.

All functions are vectorized over leading array axes.  Strain-like inputs
carry two trailing axes of size ``d`` (symmetric ``d x d`` tensors).
Models are frozen dataclasses and safe to share between threads.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ResolventDivergence


# ---------------------------------------------------------------------------
# Regularization: Yosida index and smoothed truncation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularizationParams:
    """Yosida index ``omega_reg`` and the half-width of the truncation.

    The truncation is the identity on ``(-M_R, M_R)`` and is blended with a
    quintic smoothstep to the constant ``M_R + 1/2`` outside
    ``(-M_R - 1, M_R + 1)``.
    """

    omega_reg: float = 1e-3
    trunc_halfwidth: float = 10.0

    @property
    def trunc_max(self):
        return self.trunc_halfwidth + 0.5

    # sup |R'| and sup |R''| of the blend
    trunc_d1_max = 1.0
    trunc_d2_max = 30.0 / 16.0


def _smoothstep(t):
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def truncation(c, params):
    """Return ``(R(c), R'(c), R''(c))`` for the smoothed truncation."""
    c = np.asarray(c, dtype=float)
    s = np.abs(c)
    sgn = np.where(c < 0, -1.0, 1.0)
    t = np.clip(s - params.trunc_halfwidth, 0.0, 1.0)
    primitive = t**4 * (2.5 - 3.0 * t + t**2)
    r = np.where(s < params.trunc_halfwidth, c,
                 sgn * (params.trunc_halfwidth + t - primitive))
    r1 = 1.0 - _smoothstep(t)
    r2 = -sgn * 30.0 * t**2 * (1.0 - t) ** 2
    return r, r1, r2


# ---------------------------------------------------------------------------
# Concentration potential phi = beta_hat + gamma
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConcentrationPotential:
    """Mixing potential ``phi = beta_hat + gamma``.

    ``kind='polynomial'`` uses ``beta_hat(c) = c**4/4``; ``kind='indicator'``
    uses the indicator of ``[c_lo, c_hi]``.  ``gamma`` is the quadratic
    ``g0 + g1*c + g2*c**2`` and ``lambda_gamma`` bounds ``gamma''`` from above.
    """

    kind: str = "polynomial"
    c_lo: float = -1.0
    c_hi: float = 1.0
    gamma: tuple = (0.25, 0.0, -0.5)
    lambda_gamma: float = 0.0

    def validate(self):
        errs = []
        if self.kind not in ("polynomial", "indicator"):
            errs.append(f"potential kind {self.kind!r} not in {{polynomial, indicator}}")
        if self.kind == "indicator" and not (self.c_lo <= 0.0 <= self.c_hi and self.c_lo < self.c_hi):
            errs.append("Hypothesis (I): indicator bounds need c_lo <= 0 <= c_hi, c_lo < c_hi "
                        "(beta_hat(0) = 0)")
        if self.lambda_gamma < 0:
            errs.append("Hypothesis (I): lambda_gamma must be >= 0")
        if 2.0 * self.gamma[2] > self.lambda_gamma + 1e-14:
            errs.append("Hypothesis (I): gamma'' = 2*g2 exceeds lambda_gamma "
                        "(gamma is not lambda_gamma-concave)")
        if self.kind == "polynomial" and not math.isfinite(self.lower_bound()):
            errs.append("Hypothesis (I): phi is not bounded below")
        return errs

    def beta_hat(self, c):
        c = np.asarray(c, dtype=float)
        if self.kind == "polynomial":
            return 0.25 * c**4
        inside = (c >= self.c_lo) & (c <= self.c_hi)
        return np.where(inside, 0.0, np.inf)

    def resolvent(self, c, omega):
        """Solve ``r + omega*beta(r) = c`` for ``r``."""
        c = np.asarray(c, dtype=float)
        if self.kind == "indicator":
            return np.clip(c, self.c_lo, self.c_hi)
        return _cubic_resolvent(c, omega)

    def gamma_value(self, c):
        g0, g1, g2 = self.gamma
        return g0 + g1 * c + g2 * c * c

    def gamma_d1(self, c):
        return self.gamma[1] + 2.0 * self.gamma[2] * np.asarray(c, dtype=float)

    def gamma_d2(self):
        return 2.0 * self.gamma[2]

    def lower_bound(self):
        """A finite lower bound of ``phi`` on its domain (sampled, not rigorous)."""
        if self.kind == "indicator":
            xs = np.linspace(self.c_lo, self.c_hi, 2001)
        else:
            xs = np.linspace(-10.0, 10.0, 20001)
        return float(np.min(self.beta_hat(xs) + self.gamma_value(xs)))


def _cubic_resolvent(c, omega, tol=1e-14, maxit=100):
    # r + omega*r^3 = c; r has the sign of c and |r| <= |c|
    lo = np.minimum(c, 0.0)
    hi = np.maximum(c, 0.0)
    r = np.where(np.abs(c) * omega > 1.0, np.cbrt(c / omega), c)
    r = np.clip(r, lo, hi)
    for _ in range(maxit):
        f = r + omega * r**3 - c
        lo = np.where(f < 0, r, lo)
        hi = np.where(f > 0, r, hi)
        step = f / (1.0 + 3.0 * omega * r * r)
        rn = r - step
        outside = (rn < lo) | (rn > hi)
        rn = np.where(outside, 0.5 * (lo + hi), rn)
        if np.all(np.abs(rn - r) <= tol * (1.0 + np.abs(r))):
            return rn
        r = rn
    raise ResolventDivergence("cubic resolvent Newton iteration did not converge")


def yosida(c, params, pot):
    """Yosida approximation ``beta_omega(c) = (c - J(c)) / omega_reg``."""
    c = np.asarray(c, dtype=float)
    w = params.omega_reg
    return (c - pot.resolvent(c, w)) / w


def yosida_derivative(c, params, pot):
    """Derivative (a Newton derivative for the indicator) of ``beta_omega``."""
    c = np.asarray(c, dtype=float)
    w = params.omega_reg
    if pot.kind == "indicator":
        return np.where((c < pot.c_lo) | (c > pot.c_hi), 1.0 / w, 0.0)
    r = pot.resolvent(c, w)
    dr = 1.0 / (1.0 + 3.0 * w * r * r)
    return (1.0 - dr) / w


def beta_hat_omega(c, params, pot):
    """Moreau envelope of ``beta_hat``; convex with derivative ``beta_omega``."""
    c = np.asarray(c, dtype=float)
    w = params.omega_reg
    r = pot.resolvent(c, w)
    if pot.kind == "indicator":
        return (c - r) ** 2 / (2.0 * w)
    return 0.25 * r**4 + (c - r) ** 2 / (2.0 * w)


def phi_omega(c, params, pot):
    return beta_hat_omega(c, params, pot) + pot.gamma_value(np.asarray(c, dtype=float))


def phi_splitting_drive(c_new, c_old, params, pot):
    """Convex part at ``c_new`` plus concave part at ``c_old``, differentiated."""
    lam = pot.lambda_gamma
    return (yosida(c_new, params, pot) + lam * np.asarray(c_new, dtype=float)
            + pot.gamma_d1(c_old) - lam * np.asarray(c_old, dtype=float))


def phi_splitting_drive_derivative(c_new, params, pot):
    """d/dc_new of :func:`phi_splitting_drive`."""
    return yosida_derivative(c_new, params, pot) + pot.lambda_gamma


# ---------------------------------------------------------------------------
# Damage potential sigma
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DamagePotential:
    """``sigma(z) = sum_j coeffs[j] * z**j`` with degree at most four."""

    coeffs: tuple = (0.0, 0.0)

    def validate(self):
        if len(self.coeffs) > 5:
            return ["Hypothesis (II): sigma must be a polynomial of degree <= 4"]
        return []

    @property
    def poly(self):
        return np.polynomial.Polynomial(np.asarray(self.coeffs, dtype=float))

    @property
    def second_derivative_bound(self):
        """``L_sigma = max_{z in [0,1]} |sigma''(z)|`` (exact: sigma'' is quadratic)."""
        d2 = self.poly.deriv(2)
        cand = [0.0, 1.0]
        crit = d2.deriv(1)
        if crit.degree() >= 1:
            cand += [float(r.real) for r in crit.roots() if abs(r.imag) < 1e-14 and 0.0 <= r.real <= 1.0]
        return float(max(abs(d2(x)) for x in cand))

    def value(self, z):
        return self.poly(np.asarray(z, dtype=float))

    def d1(self, z):
        return self.poly.deriv(1)(np.asarray(z, dtype=float))

    def d2(self, z):
        return self.poly.deriv(2)(np.asarray(z, dtype=float))

    def convex_part(self, z):
        z = np.asarray(z, dtype=float)
        return self.value(z) + 0.5 * self.second_derivative_bound * z * z

    def concave_part(self, z):
        z = np.asarray(z, dtype=float)
        return -0.5 * self.second_derivative_bound * z * z

    def splitting_drive(self, z_new, z_old):
        L = self.second_derivative_bound
        return self.d1(z_new) + L * np.asarray(z_new, dtype=float) - L * np.asarray(z_old, dtype=float)

    def splitting_drive_derivative(self, z_new):
        return self.d2(z_new) + self.second_derivative_bound


# ---------------------------------------------------------------------------
# Elastic energy density W = 1/2 b(c,z) C(eps - eps*(c)):(eps - eps*(c))
# ---------------------------------------------------------------------------

def _default_b():
    return (((0, 2), 1.0),)


@dataclass(frozen=True)
class ElasticModel:
    """Isotropic elasticity with damage/concentration coupling.

    ``b_coeffs`` holds ``((i, j), coeff)`` pairs of the polynomial
    ``b(c, z) = sum coeff * c**i * z**j``.  The viscosity tensor is
    ``viscosity_factor * C``; ``a(c, z) = a0 + a_z * z``.
    """

    lame_lambda: float = 10.0
    lame_mu: float = 10.0
    viscosity_factor: float = 0.1
    b_coeffs: tuple = field(default_factory=_default_b)
    eigenstrain_coeff: float = 0.0
    a0: float = 1.0
    a_z: float = 0.0

    def validate(self, dim=2):
        errs = []
        if self.lame_mu <= 0 or dim * self.lame_lambda + 2 * self.lame_mu <= 0:
            errs.append("ellipticity: need lame_mu > 0 and d*lame_lambda + 2*lame_mu > 0")
        if self.viscosity_factor <= 0:
            errs.append("Hypothesis (V): viscosity_factor must be > 0 (V = omega*C, omega > 0)")
        if self.a0 <= 0:
            errs.append("Hypothesis (IV): a0 must be > 0")
        if self.a0 + min(self.a_z, 0.0) <= 0:
            errs.append("Hypothesis (IV): a(c,z) must stay >= a0 > 0 on z in [0,1]")
        cs = np.linspace(-10.5, 10.5, 43)
        zs = np.linspace(0.0, 1.0, 21)
        C, Z = np.meshgrid(cs, zs)
        bvals = self.b_poly(C, Z)[0]
        if np.min(bvals) < -1e-12:
            errs.append("Hypothesis (V): b(c,z) must be >= 0")
        return errs

    @property
    def b_array(self):
        imax = max(i for (i, _), _ in self.b_coeffs)
        jmax = max(j for (_, j), _ in self.b_coeffs)
        arr = np.zeros((imax + 1, jmax + 1))
        for (i, j), v in self.b_coeffs:
            arr[i, j] += v
        return arr

    @property
    def b0(self):
        zs = np.linspace(0.0, 1.0, 101)
        cs = np.linspace(-10.5, 10.5, 211)
        C, Z = np.meshgrid(cs, zs)
        return float(np.max(self.b_poly(C, Z)[0]))

    def b_poly(self, c, z):
        """Return ``(b, b_c, b_z, b_cc, b_zz, b_cz)``."""
        c = np.asarray(c, dtype=float)
        z = np.asarray(z, dtype=float)
        out = [np.zeros(np.broadcast(c, z).shape) for _ in range(6)]
        for (i, j), v in self.b_coeffs:
            ci = c**i
            zj = z**j
            out[0] = out[0] + v * ci * zj
            if i >= 1:
                out[1] = out[1] + v * i * c ** (i - 1) * zj
            if j >= 1:
                out[2] = out[2] + v * j * ci * z ** (j - 1)
            if i >= 2:
                out[3] = out[3] + v * i * (i - 1) * c ** (i - 2) * zj
            if j >= 2:
                out[4] = out[4] + v * j * (j - 1) * ci * z ** (j - 2)
            if i >= 1 and j >= 1:
                out[5] = out[5] + v * i * j * c ** (i - 1) * z ** (j - 1)
        return tuple(out)

    def apply_C(self, eps):
        d = eps.shape[-1]
        tr = np.trace(eps, axis1=-2, axis2=-1)
        return self.lame_lambda * tr[..., None, None] * np.eye(d) + 2.0 * self.lame_mu * eps

    def trace_CI(self, d):
        """``C I : I``."""
        return d * (d * self.lame_lambda + 2.0 * self.lame_mu)

    def viscosity(self, c, z):
        return self.a0 + self.a_z * np.asarray(z, dtype=float) + 0.0 * np.asarray(c, dtype=float)


def _raw_terms(c, eps, z, model):
    eps = np.asarray(eps, dtype=float)
    d = eps.shape[-1]
    alpha = model.eigenstrain_coeff
    e = eps - alpha * np.asarray(c, dtype=float)[..., None, None] * np.eye(d)
    Ce = model.apply_C(e)
    Q = np.sum(Ce * e, axis=(-2, -1))
    trCe = np.trace(Ce, axis1=-2, axis2=-1)
    b, bc, bz, bcc, bzz, _ = model.b_poly(c, z)
    CI = (d * model.lame_lambda + 2.0 * model.lame_mu) * np.eye(d)
    return dict(
        W=0.5 * b * Q,
        W_c=0.5 * bc * Q - b * alpha * trCe,
        W_cc=0.5 * bcc * Q - 2.0 * bc * alpha * trCe + b * alpha**2 * model.trace_CI(d),
        W_z=0.5 * bz * Q,
        W_zz=0.5 * bzz * Q,
        W_eps=b[..., None, None] * Ce,
        W_epsc=bc[..., None, None] * Ce - (b * alpha)[..., None, None] * CI,
        W_epsz=bz[..., None, None] * Ce,
        Q=Q,
        trCe=trCe,
    )


def eval_W(c, eps, z, model, params=None):
    """Elastic energy density; with ``params`` the truncated ``W(R(c), eps, z)``."""
    if params is not None:
        c = truncation(c, params)[0]
    return _raw_terms(c, eps, z, model)["W"]


def eval_W_derivatives(c, eps, z, model, params=None):
    """Return ``(W_c, W_z, W_eps, W_cc, W_zz, W_epsc, W_epsz)``.

    Without ``params`` these are the exact partial derivatives of ``W``; with
    ``params`` the chain rule through the truncation is applied.
    """
    if params is None:
        t = _raw_terms(c, eps, z, model)
        return t["W_c"], t["W_z"], t["W_eps"], t["W_cc"], t["W_zz"], t["W_epsc"], t["W_epsz"]
    r, r1, r2 = truncation(c, params)
    t = _raw_terms(r, eps, z, model)
    W_c = r1 * t["W_c"]
    W_cc = r1 * r1 * t["W_cc"] + r2 * t["W_c"]
    W_epsc = r1[..., None, None] * t["W_epsc"]
    return W_c, t["W_z"], t["W_eps"], W_cc, t["W_zz"], W_epsc, t["W_epsz"]


def _poly_abs_bound(coeffs, radius):
    # sum_n |a_n| * radius**n over the last axis
    n = np.arange(coeffs.shape[-1])
    return np.sum(np.abs(coeffs) * radius**n, axis=-1)


def c_split_bound(eps, z, model, params):
    """Upper bound of ``sup_c |W^omega_cc(c, eps, z)|``.

    ``W^omega_cc = R'^2 W_cc(R) + R'' W_c(R)`` and ``|R(c)| <= R_max``, so the
    bound is ``sup|W_cc| + sup|R''| sup|W_c|`` over ``|r| <= R_max``, each
    polynomial in ``r`` bounded coefficient-wise.  For ``b`` independent of
    ``c`` the ``W_cc`` part is exact.
    """
    eps = np.asarray(eps, dtype=float)
    z = np.asarray(z, dtype=float)
    d = eps.shape[-1]
    alpha = model.eigenstrain_coeff
    Ceps = model.apply_C(eps)
    q0 = np.sum(Ceps * eps, axis=(-2, -1))
    q1 = -2.0 * alpha * np.trace(Ceps, axis1=-2, axis2=-1)
    q2 = alpha**2 * model.trace_CI(d) * np.ones_like(q0)
    barr = model.b_array
    # beta_i(z) = sum_j b_ij z^j
    beta = np.stack([np.polynomial.polynomial.polyval(z, barr[i]) * np.ones_like(q0)
                     for i in range(barr.shape[0])], axis=-1)
    q = np.stack([q0, q1, q2], axis=-1)
    nb = beta.shape[-1]
    P = np.zeros(q0.shape + (nb + 2,))
    for i in range(nb):
        for k in range(3):
            P[..., i + k] += 0.5 * beta[..., i] * q[..., k]
    n = np.arange(P.shape[-1])
    Pc = (n[1:] * P[..., 1:])
    Pcc = (n[2:] * (n[2:] - 1) * P[..., 2:]) if P.shape[-1] > 2 else np.zeros(q0.shape + (1,))
    R = params.trunc_max
    return _poly_abs_bound(Pcc, R) + params.trunc_d2_max * _poly_abs_bound(Pc, R)


def z_split_bound(c, eps, model, params):
    """``sup_{z in [0,1]} |W^omega_zz(c, eps, z)|`` bounded coefficient-wise in ``z``.

    Exact whenever ``b_zz`` is a single monomial in ``z`` (e.g. ``b = z**2``).
    """
    r = truncation(c, params)[0]
    eps = np.asarray(eps, dtype=float)
    d = eps.shape[-1]
    e = eps - model.eigenstrain_coeff * r[..., None, None] * np.eye(d)
    Q = np.sum(model.apply_C(e) * e, axis=(-2, -1))
    barr = model.b_array
    total = np.zeros(np.shape(r))
    for j in range(2, barr.shape[1]):
        coef = np.polynomial.polynomial.polyval(r, barr[:, j]) * j * (j - 1)
        total = total + np.abs(coef)
    return 0.5 * total * Q


def W_splitting_drives(c_new, c_old, z_new, z_old, eps_old, eps_new, params, model):
    """Discrete drives replacing ``W_c``, ``W_z`` and ``W_eps`` in one time step.

    ``drive_c`` is the convex part of the c-split at ``c_new`` plus the
    concave part at ``c_old`` (both with ``eps_old, z_old``); ``drive_z``
    is the z-split at ``(c_new, eps_old)`` with convex part at ``z_new`` and
    concave part at ``z_old``; ``stress_part`` is ``W_eps(c_new, eps_new, z_new)``.
    """
    Wc_new = eval_W_derivatives(c_new, eps_old, z_old, model, params)[0]
    L1 = c_split_bound(eps_old, z_old, model, params)
    drive_c = Wc_new + L1 * (np.asarray(c_new, dtype=float) - np.asarray(c_old, dtype=float))
    Wz_new = eval_W_derivatives(c_new, eps_old, z_new, model, params)[1]
    L3 = z_split_bound(c_new, eps_old, model, params)
    drive_z = Wz_new + L3 * (np.asarray(z_new, dtype=float) - np.asarray(z_old, dtype=float))
    stress = eval_W_derivatives(c_new, eps_new, z_new, model, params)[2]
    return drive_c, drive_z, stress


# ---------------------------------------------------------------------------
# Heat conduction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeatModel:
    """``K(theta) = c0 (1 + theta**kappa)`` with truncation level ``M``."""

    c0: float = 1.0
    c1: float = 1.0
    kappa: float = 1.5
    rho: float = 0.1
    M: float = math.inf

    def validate(self):
        errs = []
        if not self.c0 > 0:
            errs.append("Hypothesis (III): c0 must be > 0")
        if self.c1 < self.c0:
            errs.append("Hypothesis (III): c1 must be >= c0")
        if not self.kappa > 1:
            errs.append(f"Hypothesis (III): kappa > 1 required (got {self.kappa})")
        if not self.rho > 0:
            errs.append("thermal expansion rho must be > 0")
        if not self.M > 0:
            errs.append("truncation level M must be > 0")
        return errs


def eval_K(theta, heat):
    theta = np.asarray(theta, dtype=float)
    return heat.c0 * (1.0 + theta**heat.kappa)


def eval_K_derivative(theta, heat):
    theta = np.asarray(theta, dtype=float)
    return heat.c0 * heat.kappa * theta ** (heat.kappa - 1.0)


def eval_T_M(theta, heat):
    return np.clip(np.asarray(theta, dtype=float), 0.0, heat.M)


def eval_K_M(theta, heat):
    return eval_K(eval_T_M(theta, heat), heat)


def eval_K_M_derivative(theta, heat):
    theta = np.asarray(theta, dtype=float)
    inside = (theta > 0.0) & (theta < heat.M)
    return np.where(inside, eval_K_derivative(np.clip(theta, 0.0, heat.M), heat), 0.0)


# ---------------------------------------------------------------------------
# Aggregate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialModel:
    """All constitutive closures used by the scheme."""

    potential: ConcentrationPotential = field(default_factory=ConcentrationPotential)
    elastic: ElasticModel = field(default_factory=ElasticModel)
    heat: HeatModel = field(default_factory=HeatModel)
    damage: DamagePotential = field(default_factory=DamagePotential)
    reg: RegularizationParams = field(default_factory=RegularizationParams)
    m0: float = 1.0
    m_z: float = 0.0

    def validate(self, dim=2):
        errs = []
        errs += self.potential.validate()
        errs += self.elastic.validate(dim)
        errs += self.heat.validate()
        errs += self.damage.validate()
        if not self.reg.omega_reg > 0:
            errs.append("Yosida index omega_reg must be > 0")
        if not self.reg.trunc_halfwidth > 0:
            errs.append("truncation half-width must be > 0")
        if not self.m0 > 0:
            errs.append("Hypothesis (II): mobility m0 must be > 0")
        if self.m_z < 0:
            errs.append("Hypothesis (II): m(c,z) = m0 + m_z*z must stay >= m0 (m_z >= 0)")
        return errs

    def mobility(self, c, z):
        return self.m0 + self.m_z * np.asarray(z, dtype=float) + 0.0 * np.asarray(c, dtype=float)

    def viscosity(self, c, z):
        return self.elastic.viscosity(c, z)

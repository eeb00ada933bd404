import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq

from thermophase import material as mat
from thermophase import monitors

REG = mat.RegularizationParams()
BAR_1D = mat.ElasticModel(lame_lambda=0.0, lame_mu=0.5, eigenstrain_coeff=0.1)  # C e = e in 1D


def _eps1(e):
    return np.array([[e]])


# --- W and its derivatives ------------------------------------------------------------


def test_W_vanishes_at_eigenstrain():
    model = mat.ElasticModel(eigenstrain_coeff=0.1)
    eps = 0.1 * 0.3 * np.eye(2)
    assert mat.eval_W(0.3, eps, 0.7, model) == pytest.approx(0.0, abs=1e-15)


def test_W_vanishes_when_fully_damaged():
    model = mat.ElasticModel(eigenstrain_coeff=0.1)
    eps = np.array([[0.3, 0.1], [0.1, -0.4]])
    assert mat.eval_W(0.8, eps, 0.0, model) == 0.0


def test_W_bar_value():
    assert mat.eval_W(0.0, _eps1(0.2), 1.0, BAR_1D) == pytest.approx(0.02, rel=1e-14)


def test_W_z_bar_value():
    W_z = mat.eval_W_derivatives(0.0, _eps1(0.2), 1.0, BAR_1D)[1]
    assert W_z == pytest.approx(0.04, rel=1e-14)


def test_W_eps_and_W_z_vanish_at_eigenstrain():
    model = mat.ElasticModel(eigenstrain_coeff=0.2)
    c = -0.4
    out = mat.eval_W_derivatives(c, 0.2 * c * np.eye(2), 0.6, model)
    assert np.allclose(out[2], 0.0, atol=1e-15)
    assert out[1] == pytest.approx(0.0, abs=1e-15)


def test_z_split_bound_bar_value():
    assert mat.z_split_bound(0.0, _eps1(0.2), BAR_1D, REG) == pytest.approx(0.04, rel=1e-14)


def _random_states(rng, n, dim=2):
    c = rng.uniform(-1, 1, n)
    z = rng.uniform(0, 1, n)
    A = rng.uniform(-1, 1, (n, dim, dim))
    eps = 0.5 * (A + np.swapaxes(A, 1, 2))
    return c, eps, z


COUPLED = mat.ElasticModel(b_coeffs=(((0, 2), 1.0), ((2, 1), 0.3), ((2, 2), 0.2)),
                           eigenstrain_coeff=0.15)


@pytest.mark.parametrize("params", [None, REG], ids=["plain", "truncated"])
def test_W_derivatives_match_central_differences(rng, params):
    model = COUPLED
    c, eps, z = _random_states(rng, 1000)
    h = 1e-5
    W = lambda c_, e_, z_: mat.eval_W(c_, e_, z_, model, params)
    Wc, Wz, We, Wcc, Wzz, Wec, Wez = mat.eval_W_derivatives(c, eps, z, model, params)
    der = lambda c_, e_, z_: mat.eval_W_derivatives(c_, e_, z_, model, params)

    def close(a, b):
        err = np.abs(a - b) / np.maximum(1.0, np.abs(a))
        assert np.max(err) <= 1e-6

    close(Wc, (W(c + h, eps, z) - W(c - h, eps, z)) / (2 * h))
    close(Wz, (W(c, eps, z + h) - W(c, eps, z - h)) / (2 * h))
    close(Wcc, (der(c + h, eps, z)[0] - der(c - h, eps, z)[0]) / (2 * h))
    close(Wzz, (der(c, eps, z + h)[1] - der(c, eps, z - h)[1]) / (2 * h))
    close(Wec, (der(c + h, eps, z)[2] - der(c - h, eps, z)[2]) / (2 * h))
    close(Wez, (der(c, eps, z + h)[2] - der(c, eps, z - h)[2]) / (2 * h))
    for i in range(2):
        for j in range(2):
            E = np.zeros((2, 2))
            E[i, j] = E[j, i] = 1.0
            fd = (W(c, eps + h * E, z) - W(c, eps - h * E, z)) / (2 * h)
            an = np.sum(We * E, axis=(-2, -1))
            close(an, fd)


def test_W_nonnegative_and_zero_set(rng):
    model = mat.ElasticModel(eigenstrain_coeff=0.1)
    c, eps, z = _random_states(rng, 10_000)
    W = mat.eval_W(c, eps, z, model)
    assert np.all(W >= 0)
    assert np.all(mat.eval_W(c, 0.1 * c[:, None, None] * np.eye(2), z, model) <= 1e-15)


def test_coupled_fixture_is_admissible():
    assert COUPLED.validate() == []
    bad = mat.ElasticModel(b_coeffs=(((0, 2), 1.0), ((1, 1), 0.2)))
    assert any("b(c,z) must be >= 0" in e for e in bad.validate())


@given(st.floats(-3, 3), st.floats(0, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_W_nonnegative_property(c, z, a, b, d):
    eps = np.array([[a, b], [b, d]])
    assert mat.eval_W(c, eps, z, COUPLED, REG) >= 0.0


# --- Yosida approximation ---------------------------------------------------------------


def test_yosida_indicator_examples():
    pot = mat.ConcentrationPotential(kind="indicator")
    assert mat.yosida(0.5, REG, pot) == 0.0
    reg = mat.RegularizationParams(omega_reg=0.1)
    assert mat.yosida(1.2, reg, pot) == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("omega", [1e-3, 0.1, 10.0])
def test_yosida_polynomial_at_zero(omega):
    pot = mat.ConcentrationPotential()
    assert mat.yosida(0.0, mat.RegularizationParams(omega_reg=omega), pot) == 0.0


@given(st.floats(-50, 50), st.floats(-50, 50), st.sampled_from(["polynomial", "indicator"]),
       st.sampled_from([1e-3, 0.1, 1.0]))
def test_yosida_monotone_and_lipschitz(x, y, kind, omega):
    pot = mat.ConcentrationPotential(kind=kind)
    reg = mat.RegularizationParams(omega_reg=omega)
    bx, by = mat.yosida(x, reg, pot), mat.yosida(y, reg, pot)
    assert (bx - by) * (x - y) >= -1e-9 * (1 + abs(x - y))
    assert abs(bx - by) <= abs(x - y) / omega * (1 + 1e-9) + 1e-9


@given(st.floats(-5, 5))
def test_yosida_derivative_matches_difference(c):
    pot = mat.ConcentrationPotential()
    reg = mat.RegularizationParams(omega_reg=0.05)
    h = 1e-6
    fd = (mat.yosida(c + h, reg, pot) - mat.yosida(c - h, reg, pot)) / (2 * h)
    assert mat.yosida_derivative(c, reg, pot) == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_resolvent_solves_cubic(rng):
    c = rng.uniform(-100, 100, 1000)
    r = mat.ConcentrationPotential().resolvent(c, 0.3)
    assert np.max(np.abs(r + 0.3 * r**3 - c)) <= 1e-10 * np.max(np.abs(c))


def test_moreau_envelope_derivative_is_yosida(rng):
    pot = mat.ConcentrationPotential()
    c = rng.uniform(-3, 3, 200)
    h = 1e-6
    fd = (mat.beta_hat_omega(c + h, REG, pot) - mat.beta_hat_omega(c - h, REG, pot)) / (2 * h)
    assert np.allclose(fd, mat.yosida(c, REG, pot), rtol=1e-6, atol=1e-7)


# --- splitting drives -------------------------------------------------------------------


def test_phi_drive_indicator_without_concave_part():
    pot = mat.ConcentrationPotential(kind="indicator", gamma=(0.0, 0.0, 0.0))
    for c_old in (-3.0, 0.0, 0.7):
        assert mat.phi_splitting_drive(0.5, c_old, REG, pot) == 0.0


@pytest.mark.parametrize("omega", [1e-3, 1e-6])
def test_phi_drive_at_critical_point(omega):
    # the critical points of phi_omega tend to +-1 as omega -> 0; locate them by bracketing
    pot = mat.ConcentrationPotential()
    reg = mat.RegularizationParams(omega_reg=omega)
    dphi = lambda c: float(mat.yosida(c, reg, pot) + pot.gamma_d1(c))
    for lo, hi in ((0.5, 1.5), (-1.5, -0.5)):
        c_star = brentq(dphi, lo, hi, xtol=1e-15)
        assert abs(abs(c_star) - 1.0) <= 3 * omega
        assert mat.phi_splitting_drive(c_star, c_star, reg, pot) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("kind", ["polynomial", "indicator"])
def test_phi_splitting_estimate_random_pairs(rng, kind):
    pot = mat.ConcentrationPotential(kind=kind, lambda_gamma=0.5 if kind == "indicator" else 0.0)
    reg = mat.RegularizationParams(omega_reg=0.01)
    cn, co = rng.uniform(-2, 2, (2, 10_000))
    slack = (mat.phi_splitting_drive(cn, co, reg, pot) * (cn - co)
             - (mat.phi_omega(cn, reg, pot) - mat.phi_omega(co, reg, pot)))
    assert np.min(slack / (1 + np.abs(mat.phi_omega(cn, reg, pot)))) >= -1e-12


def test_W_splitting_trivial_when_nothing_moves():
    c, z = np.array([0.3]), np.array([0.8])
    eps = np.array([[[0.1, 0.02], [0.02, -0.05]]])
    sl = monitors.splitting_slacks(c, c, z, z, eps, eps, mat.MaterialModel())
    for key in ("W_c", "W_z", "W_eps"):
        assert sl[key][0] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("elastic", [mat.ElasticModel(eigenstrain_coeff=0.1), COUPLED],
                         ids=["default", "coupled"])
def test_W_splitting_estimate_random_samples(rng, elastic):
    n = 10_000
    cn, co = rng.uniform(-1, 1, (2, n))
    zn, zo = rng.uniform(0, 1, (2, n))
    A, B = rng.uniform(-1, 1, (2, n, 2, 2))
    en, eo = 0.5 * (A + np.swapaxes(A, 1, 2)), 0.5 * (B + np.swapaxes(B, 1, 2))
    for e in (en, eo):
        nrm = np.sqrt(np.sum(e * e, axis=(-2, -1)))[:, None, None]
        e /= np.maximum(1.0, nrm)
    dc, dz, stress = mat.W_splitting_drives(cn, co, zn, zo, eo, en, REG, elastic)
    W = lambda c, e, z: mat.eval_W(c, e, z, elastic, REG)
    lhs = W(cn, en, zn) - W(co, eo, zo)
    rhs = dc * (cn - co) + dz * (zn - zo) + np.sum(stress * (en - eo), axis=(-2, -1))
    assert np.min(rhs - lhs) >= -1e-12


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2,
                                                                      max_size=2),
       st.sampled_from([2.0, 3.0, 4.0, 2.5]))
def test_standard_convexity_estimate(x, y, p):
    s = monitors.p_power_slack(np.array(x), np.array(y), p)
    assert s >= -1e-12 * (1 + np.linalg.norm(x) ** p + np.linalg.norm(y) ** p)


def test_truncation_identity_inside_and_bounded(rng):
    c = rng.uniform(-9.9, 9.9, 1000)
    r, r1, r2 = mat.truncation(c, REG)
    assert np.array_equal(r, c) and np.all(r1 == 1.0) and np.all(r2 == 0.0)
    far = rng.uniform(-1e3, 1e3, 1000)
    r, r1, r2 = mat.truncation(far, REG)
    assert np.all(np.abs(r) <= REG.trunc_max + 1e-12)
    assert np.all(np.abs(r1) <= REG.trunc_d1_max + 1e-12)
    assert np.all(np.abs(r2) <= REG.trunc_d2_max + 1e-12)


def test_truncation_derivatives_match_differences(rng):
    c = rng.uniform(9.5, 11.5, 500) * rng.choice([-1, 1], 500)
    h = 1e-6
    r, r1, r2 = mat.truncation(c, REG)
    assert np.allclose(r1, (mat.truncation(c + h, REG)[0] - mat.truncation(c - h, REG)[0]) / (2 * h),
                       atol=1e-6)
    assert np.allclose(r2, (mat.truncation(c + h, REG)[1] - mat.truncation(c - h, REG)[1]) / (2 * h),
                       atol=1e-5)


def test_damage_potential_split_bound():
    sig = mat.DamagePotential((0.0, 0.0, 0.0, 1.0))  # z^3, sigma'' = 6z
    assert sig.second_derivative_bound == pytest.approx(6.0)
    assert mat.DamagePotential((0.5, -0.5)).second_derivative_bound == 0.0


def test_damage_splitting_estimate(rng):
    sig = mat.DamagePotential((0.1, -0.3, 0.8, -0.9, 0.4))
    zn, zo = rng.uniform(0, 1, (2, 10_000))
    slack = sig.splitting_drive(zn, zo) * (zn - zo) - (sig.value(zn) - sig.value(zo))
    assert np.min(slack) >= -1e-13


# --- heat closures ----------------------------------------------------------------------


def test_K_examples():
    heat = mat.HeatModel(c0=1.0, kappa=1.5)
    assert mat.eval_K(4.0, heat) == pytest.approx(9.0, rel=1e-15)
    assert mat.eval_K(0.0, mat.HeatModel(c0=2.5, c1=3.0)) == 2.5


def test_T_M_clamp():
    heat = mat.HeatModel(M=2.0)
    assert mat.eval_T_M(5.0, heat) == 2.0
    assert mat.eval_T_M(-1.0, heat) == 0.0


@given(st.floats(-1e6, 1e6), st.floats(0.1, 1e3))
def test_K_M_bounded_below(r, M):
    heat = mat.HeatModel(c0=0.7, c1=0.7, M=M)
    assert mat.eval_K_M(r, heat) >= heat.c0
    assert 0.0 <= mat.eval_T_M(r, heat) <= M


@given(st.floats(0, 100))
def test_K_growth_bounds(theta):
    heat = mat.HeatModel(c0=0.8, c1=1.2, kappa=1.7)
    K = mat.eval_K(theta, heat)
    g = 1 + theta**heat.kappa
    assert heat.c0 * g <= K * (1 + 1e-15) and K <= heat.c1 * g


def test_heat_hypothesis_message():
    errs = mat.HeatModel(kappa=0.5).validate()
    assert any("Hypothesis (III)" in e and "kappa > 1" in e for e in errs)


# --- model admissibility ----------------------------------------------------------------


def test_default_model_is_admissible():
    for d in (1, 2, 3):
        assert mat.MaterialModel().validate(d) == []


def test_elastic_tensor_coercive(rng):
    model = mat.ElasticModel()
    A = rng.uniform(-1, 1, (1000, 3, 3))
    xi = 0.5 * (A + np.swapaxes(A, 1, 2))
    lhs = np.sum(model.apply_C(xi) * xi, axis=(-2, -1))
    assert np.all(lhs >= 2 * model.lame_mu * np.sum(xi * xi, axis=(-2, -1)) - 1e-12)


def test_default_b_bounds():
    model = mat.ElasticModel()
    zs = np.linspace(0, 1, 101)
    b = model.b_poly(np.zeros_like(zs), zs)[0]
    assert np.all((b >= 0) & (b <= model.b0))
    assert model.b0 == 1.0


def test_potential_bounded_below():
    pot = mat.ConcentrationPotential()
    assert math.isfinite(pot.lower_bound())
    assert pot.lower_bound() == pytest.approx(0.0, abs=1e-6)  # (c^2 - 1)^2 / 4 at c = +-1


def test_concave_gamma_check():
    errs = mat.ConcentrationPotential(gamma=(0, 0, 0.5), lambda_gamma=0.1).validate()
    assert any("Hypothesis (I)" in e for e in errs)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_bvp

from mkvfbsde.errors import ConfigError, DomainError
from mkvfbsde.meanfield import MeanFieldVector
from mkvfbsde.models import (
    MODEL_NAMES,
    LognormalParams,
    PriceImpactParams,
    build_model,
    lognormal_exact_law,
    lognormal_linear,
    lognormal_moments,
    lognormal_quadratic,
    lognormal_reference,
    phi_source,
    population_model,
    price_impact_mean_path,
    price_impact_pontryagin,
    price_impact_reference,
    price_impact_weak,
    reference_mean,
)

P = PriceImpactParams()


# --- price impact -----------------------------------------------------------------

def test_pontryagin_coefficients():
    m = price_impact_pontryagin(P)
    x = np.ones((1, 10))
    u = MeanFieldVector(np.zeros(10), np.zeros(10), np.zeros(0))
    np.testing.assert_allclose(m.f(0, x, x, None, u), 2.0)
    np.testing.assert_allclose(m.g(x, None), 0.3)
    np.testing.assert_allclose(m.b(0, x, x, None, u), -1.5)
    assert (m.d, m.k, m.widths) == (10, 10, (10, 10, 0))


def test_weak_coefficients():
    m = price_impact_weak(P)
    assert m.g(np.ones((1, 10)), None)[0, 0] == pytest.approx(1.5)
    u0 = MeanFieldVector(np.zeros(10), np.zeros(1), np.zeros(10))
    assert m.f(0, np.zeros((1, 10)), np.zeros((1, 1)), np.zeros((1, 1, 10)), u0)[0, 0] == 0.0
    x = np.zeros((1, 10))
    x[0, 0] = 1.0
    z = np.zeros((1, 1, 10))
    z[0, 0, 0] = 0.7
    assert m.f(0, x, np.zeros((1, 1)), z, u0)[0, 0] == pytest.approx(1.75)


def _bvp_oracle(p, T):
    """Independent solve of the expected system with a collocation BVP solver."""

    def rhs(t, s):
        x, y = s
        return np.vstack([-y / p.c_alpha, -(p.c_X * x + p.gamma / p.c_alpha * y)])

    def bc(sa, sb):
        return np.array([sa[0] - p.x0, sb[1] - p.c_g * sb[0]])

    ts = np.linspace(0, T, 50)
    sol = solve_bvp(rhs, bc, ts, np.vstack([np.ones_like(ts), np.zeros_like(ts)]), tol=1e-8,
                    max_nodes=100000)
    assert sol.success
    return sol


@pytest.mark.parametrize("T", [0.25, 0.75, 1.0, 1.5])
def test_reference_matches_collocation_oracle(T):
    sol = _bvp_oracle(P, T)
    assert price_impact_reference(P, T) == pytest.approx(sol.sol(T)[0], abs=1e-6)
    path = price_impact_mean_path(P, T)
    for t in (0.0, T / 3, T / 2):
        assert path(t) == pytest.approx(tuple(sol.sol(t)), abs=1e-6)


@pytest.mark.parametrize("T,published", [(0.25, 0.7709), (0.75, 0.1978), (1.0, 0.0811), (1.5, 0.0125)])
def test_reference_reproduces_published_row(T, published):
    assert abs(price_impact_reference(P, T) - published) <= 5e-4


def test_reference_limits():
    assert price_impact_reference(P, 0) == 1.0
    assert price_impact_reference(P, 1e-8) == pytest.approx(1.0, abs=1e-6)
    free = PriceImpactParams(c_X=0.0, gamma=0.0, c_g=0.0)
    assert price_impact_reference(free, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_price_impact_param_validation():
    with pytest.raises(ConfigError):
        PriceImpactParams(c_alpha=0)
    with pytest.raises(ConfigError):
        PriceImpactParams(sigma=-1)


# --- population -------------------------------------------------------------------

def test_population_coefficients():
    m = population_model(0.5)
    assert m.f(0, None, None, None, MeanFieldVector(np.zeros(1), np.zeros(0), np.zeros(0)))[0] == 0.0
    assert m.g(np.ones((1, 1)), None)[0, 0] == pytest.approx(math.pi / 4)
    assert m.sigma(0, None, None) == 1.0
    assert (m.d, m.k) == (1, 1)


# --- log-normal -------------------------------------------------------------------

LP = LognormalParams()


def test_moments_at_zero():
    assert lognormal_moments(LP, 0.0) == pytest.approx((1.0, 1.0, 0.0, 0.0, 0.4, 0.16))


def test_moment_values():
    mx, mx2, *_ = lognormal_moments(LP, 1.0)
    assert mx == pytest.approx(1.10517, abs=1e-5)
    assert mx2 == pytest.approx(math.exp(0.36), abs=1e-12)


@pytest.mark.parametrize("T,published", [(0.25, 1.0253), (0.75, 1.0779), (1.0, 1.1052), (1.5, 1.1618)])
def test_lognormal_reference_published(T, published):
    assert abs(lognormal_reference(LP, T) - published) <= 5e-5


def test_moments_against_monte_carlo():
    rng = np.random.default_rng(0)
    p = LognormalParams(d=3, xi=1.3)
    t, n = 0.8, 400_000
    W = rng.standard_normal((n, p.d)) * math.sqrt(t)
    X = p.xi * np.exp((p.a - p.sigma**2 / 2) * t + p.sigma * W)
    Y = math.exp(p.alpha * t) * np.log(X).sum(axis=1)
    mx, mx2, my, my2, _, _ = lognormal_moments(p, t)
    assert X[:, 0].mean() == pytest.approx(mx, rel=5e-3)
    assert (X[:, 0] ** 2).mean() == pytest.approx(mx2, rel=1e-2)
    assert Y.mean() == pytest.approx(my, abs=1e-2)
    assert (Y**2).mean() == pytest.approx(my2, rel=1e-2)


def test_phi_source_values():
    ones = np.ones((1, 10))
    assert phi_source(LP, 0.0, ones)[0, 0] == pytest.approx(0.2)
    assert phi_source(LP, 0.7, ones)[0, 0] == pytest.approx(math.exp(0.35) * 0.2)
    flat = LognormalParams(alpha=0.0)
    assert phi_source(flat, 3.0, ones)[0, 0] == pytest.approx(0.2)
    with pytest.raises(DomainError):
        phi_source(LP, 0.0, np.array([[1.0] * 9 + [0.0]]))


def _exact_point(p, t, rng, B=1000):
    X = np.exp(rng.normal(0.0, 0.5, size=(B, p.d)))
    ea = math.exp(p.alpha * t)
    Y = ea * np.log(X).sum(axis=1, keepdims=True)
    Z = np.full((B, 1, p.d), p.sigma * ea)
    return X, Y, Z


@pytest.mark.parametrize("quadratic", [False, True])
@pytest.mark.parametrize("t", [0.0, 0.3, 1.2])
def test_compensator_cancellation(quadratic, t):
    rng = np.random.default_rng(17)
    m = (lognormal_quadratic if quadratic else lognormal_linear)(LP, 1.5)
    X, Y, Z = _exact_point(LP, t, rng)
    u = lognormal_exact_law(LP, quadratic)(t)
    drift = m.b(t, X, Y, Z, u)
    driver = m.f(t, X, Y, Z, u)
    np.testing.assert_allclose(drift, LP.a * X, rtol=0, atol=1e-12 * (1 + np.abs(Y).max() ** 2))
    np.testing.assert_allclose(driver, -phi_source(LP, t, X), rtol=0, atol=1e-12 * (1 + np.abs(Y).max() ** 2))


def test_zero_quadratic_coefficient_matches_linear():
    rng = np.random.default_rng(3)
    p = LognormalParams(c_coef=0.0)
    lin, quad = lognormal_linear(p, 1.0), lognormal_quadratic(p, 1.0)
    X = np.exp(rng.normal(0, 0.3, size=(20, 10)))
    Y = rng.normal(size=(20, 1))
    Z = rng.normal(size=(20, 1, 10))
    ul = MeanFieldVector(rng.normal(size=10), rng.normal(size=1), rng.normal(size=10))
    uq = MeanFieldVector(np.concatenate([ul.uX, rng.normal(size=10)]), np.concatenate([ul.uY, [0.3]]),
                         np.concatenate([ul.uZ, rng.normal(size=10)]))
    np.testing.assert_allclose(quad.b(0.4, X, Y, Z, uq), lin.b(0.4, X, Y, Z, ul), atol=1e-13)
    np.testing.assert_allclose(quad.f(0.4, X, Y, Z, uq), lin.f(0.4, X, Y, Z, ul), atol=1e-13)


def test_zero_coupling_is_plain_gbm():
    rng = np.random.default_rng(8)
    p = LognormalParams(b_coef=0.0)
    m = lognormal_linear(p, 1.0)
    X = np.exp(rng.normal(0, 0.3, size=(5, 10)))
    u = MeanFieldVector(rng.normal(size=10), rng.normal(size=1), rng.normal(size=10))
    np.testing.assert_allclose(m.b(0.2, X, rng.normal(size=(5, 1)), rng.normal(size=(5, 1, 10)), u), p.a * X)


def test_quadratic_phi_widths():
    m = lognormal_quadratic(LP, 1.0)
    assert m.widths == (20, 2, 20)
    X = np.full((2, 10), 2.0)
    np.testing.assert_array_equal(m.phi1(X)[0], [2.0] * 10 + [4.0] * 10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.floats(0, 2))
def test_cancellation_property(seed, t):
    rng = np.random.default_rng(seed)
    p = LognormalParams(d=4)
    m = lognormal_quadratic(p, 2.0)
    X, Y, Z = _exact_point(p, t, rng, B=16)
    u = lognormal_exact_law(p, True)(t)
    scale = 1e-12 * (1 + np.abs(Y).max() ** 2)
    assert np.abs(m.b(t, X, Y, Z, u) - p.a * X).max() <= scale


def test_lognormal_param_validation():
    with pytest.raises(ConfigError):
        LognormalParams(sigma=0.0)
    with pytest.raises(ConfigError):
        LognormalParams(xi=-1.0)


# --- registry ---------------------------------------------------------------------

@pytest.mark.parametrize("name", MODEL_NAMES)
def test_build_every_model(name):
    m = build_model(name, 0.5)
    assert m.name == name
    assert m.describe()["name"] == name


def test_build_model_rejects_unknowns():
    with pytest.raises(ConfigError):
        build_model("nope", 1.0)
    with pytest.raises(ConfigError):
        build_model("population", 1.0, kappa=2)


def test_reference_mean_dispatch():
    assert reference_mean(build_model("price_impact_weak", 0.25), 0.25) == pytest.approx(0.770931, abs=1e-6)
    assert reference_mean(build_model("lognormal_quadratic", 1.0), 1.0) == pytest.approx(math.exp(0.1))
    assert reference_mean(build_model("population", 1.0), 1.0) is None

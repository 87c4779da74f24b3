import dataclasses
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mkvfbsde import autodiff as ad
from mkvfbsde.errors import ConfigError
from mkvfbsde.meanfield import RingBuffer
from mkvfbsde.models import (
    LognormalParams,
    ModelDefinition,
    _identity,
    _unused,
    PriceImpactParams,
    lognormal_exact_law,
    lognormal_linear,
    lognormal_quadratic,
    population_model,
    price_impact_mean_path,
    price_impact_pontryagin,
)
from mkvfbsde.nn import network_forward, network_init
from mkvfbsde.sde import Constant, Gaussian, RngStream, TimeGrid
from mkvfbsde.solvers import (
    DirectLaw,
    FixedLaw,
    SolverConfig,
    _net_seed,
    forward_sweep,
    initial_moments,
    local_forward,
    solve,
    solve_direct,
    solve_dynamic,
    solve_local,
    solve_with_law,
    y0_evaluator,
    z_evaluator,
)


def _toy(b=None, f=None, g=None, d=1, initial=Constant(0.0), sigma=1.0):
    """Law-free model on d=k=1 pieces; defaults are all zero."""
    return ModelDefinition(
        "toy", d, 1,
        b or (lambda t, x, y, z, u: 0.0 * x),
        lambda t, x, uX: sigma,
        f or (lambda t, x, y, z, u: 0.0 * y),
        g or (lambda x, uX: 0.0 * x[:, :1]),
        _identity, _unused, _unused, (d, 0, 0), initial,
    )


SMALL = dict(batch_size=64, iterations=5, eval_batch=256, hidden_width=6)


# --- configuration ----------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    dict(scheme="euler"), dict(batch_size=0), dict(iterations=-1), dict(penalty=-0.1),
    dict(learning_rate=0.0), dict(buffer_depth=0), dict(warm_start="later"), dict(hidden_width=0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SolverConfig(**bad)


def test_default_width_is_d_plus_ten():
    assert SolverConfig().width(10) == 20
    assert SolverConfig(hidden_width=7).width(10) == 7


# --- forward sweep ----------------------------------------------------------------

def test_zero_model_zero_network_loss_is_zero():
    m = _toy()
    grid = TimeGrid(1.0, 4)
    y_net = network_init([1, 1], 0)
    y_net.weights[0][:] = 0.0
    z_net = network_init([2, 1], 0)
    z_net.weights[0][:] = 0.0
    sweep = forward_sweep(m, grid, y0_evaluator(y_net), z_evaluator(z_net, 1, 1), DirectLaw(m), 8, RngStream(0))
    assert float(sweep.loss) == 0.0


def test_single_step_hand_expansion():
    """N=1 decoupled model: loss = mean (Y0 - f dt + z sqrt(dt) delta - g(X1))^2."""
    m = _toy(b=lambda t, x, y, z, u: 0.5 * x + 0.0 * y, f=lambda t, x, y, z, u: 2.0 * y,
             g=lambda x, uX: ad.square(x), initial=Gaussian(0.3, 0.5))
    grid = TimeGrid(0.2, 1)
    y_net, z_net = network_init([1, 4, 1], 1), network_init([2, 4, 1], 2)
    rng = RngStream(9)
    sweep = forward_sweep(m, grid, y0_evaluator(y_net), z_evaluator(z_net, 1, 1), DirectLaw(m), 16, rng, ("k",))

    x0 = 0.3 + math.sqrt(0.5) * rng.substream("k", "xi").standard_normal((16, 1))
    delta = rng.substream("k", 0).standard_normal((16, 1))
    y0 = network_forward(y_net, x0)
    z0 = network_forward(z_net, np.hstack([np.zeros((16, 1)), x0]))
    dt = 0.2
    x1 = x0 + 0.5 * x0 * dt + math.sqrt(dt) * delta
    y1 = y0 - 2.0 * y0 * dt + z0 * math.sqrt(dt) * delta
    expected = np.mean((y1 - x1**2) ** 2)
    assert float(sweep.loss) == pytest.approx(expected, rel=1e-12)


def _riccati(p, T):
    """eta with eta' = eta^2 / c_alpha - c_X, eta(T) = c_g, solved backwards."""
    sol = solve_ivp(lambda t, e: e**2 / p.c_alpha - p.c_X, (T, 0.0), [p.c_g], dense_output=True,
                    rtol=1e-11, atol=1e-12)
    return lambda t: float(sol.sol(t)[0])


def _analytic_evaluators(p, T, N):
    """Affine solution Y = eta X + chi; Z uses eta at the end of each step."""
    eta = _riccati(p, T)
    mean = price_impact_mean_path(p, T)
    dt = T / N

    def y0_fn(x):
        xbar, ybar = mean(0.0)
        return eta(0.0) * x + (ybar - eta(0.0) * xbar)

    def z_fn(t, x):
        return np.broadcast_to(eta(min(t + dt, T)) * p.sigma * np.eye(p.d), (np.shape(x)[0], p.d, p.d))

    return y0_fn, z_fn, mean


def test_analytic_solution_has_small_terminal_loss():
    p = PriceImpactParams()
    T, N = 0.25, 25
    m = price_impact_pontryagin(p)
    y0_fn, z_fn, mean = _analytic_evaluators(p, T, N)
    sweep = forward_sweep(m, TimeGrid(T, N), y0_fn, z_fn, DirectLaw(m), 10**4, RngStream(1))
    assert float(sweep.loss) < 1e-3
    # the mean-field solution also reproduces the ODE mean path
    assert sweep.X_T.mean() == pytest.approx(mean(T)[0], abs=5e-3)


def test_analytic_solution_loss_is_second_order_in_dt():
    p = PriceImpactParams()
    m = price_impact_pontryagin(p)
    loss = {}
    for N in (25, 100):
        y0_fn, z_fn, _ = _analytic_evaluators(p, 0.25, N)
        loss[N] = float(forward_sweep(m, TimeGrid(0.25, N), y0_fn, z_fn, DirectLaw(m), 4000, RngStream(2)).loss)
    # 4x finer grid: squared path error drops by ~16
    assert 8 < loss[25] / loss[100] < 32


def _exact_evaluators(p, quadratic=False):
    def y0_fn(x):
        return ad.sum_(ad.log(x), axis=1, keepdims=True)

    def z_fn(t, x):
        B = np.shape(ad.value(x))[0]
        return np.full((B, 1, p.d), p.sigma * math.exp(p.alpha * t))

    return y0_fn, z_fn


@pytest.mark.parametrize("quadratic", [False, True])
def test_exact_solution_loss_is_euler_floor(quadratic):
    p = LognormalParams()
    losses = {}
    for N in (25, 100):
        T = 0.25
        m = (lognormal_quadratic if quadratic else lognormal_linear)(p, T)
        y0_fn, z_fn = _exact_evaluators(p)
        law = FixedLaw(m, lognormal_exact_law(p, quadratic), T)
        sweep = forward_sweep(m, TimeGrid(T, N), y0_fn, z_fn, law, 4000, RngStream(3))
        losses[N] = float(sweep.loss)
    # first-order weak/strong error: the floor shrinks roughly like dt
    assert losses[100] < losses[25]
    assert losses[100] < 2e-3


def test_direct_law_terminal_mean_is_taped():
    m = population_model(1.0)
    tape = ad.Tape()
    X = tape.leaf(np.array([[1.0], [3.0]]))
    out = DirectLaw(m).terminal(X)
    assert isinstance(out, ad.Var)
    np.testing.assert_array_equal(out.value, [2.0])


def test_initial_moments_constant_is_exact():
    m = lognormal_quadratic(LognormalParams(xi=1.5), 1.0)
    u = initial_moments(m, 10, RngStream(0))
    np.testing.assert_array_equal(u.uX, [1.5] * 10 + [2.25] * 10)
    np.testing.assert_array_equal(u.uY, [0.0, 0.0])


# --- global schemes ------------------------------------------------------------------

def test_zero_iterations_records_one_loss_with_initial_networks():
    m = population_model(0.5)
    grid = TimeGrid(1.0, 5)
    cfg = SolverConfig(scheme="direct", iterations=0, **{k: v for k, v in SMALL.items() if k != "iterations"})
    r = solve(m, grid, cfg)
    assert len(r.losses) == 1 and r.iterations_done == 0
    y_net = network_init([1, 6, 6, 6, 1], _net_seed(cfg.seed, 1))
    z_net = network_init([2, 6, 6, 6, 1], _net_seed(cfg.seed, 2))
    hand = forward_sweep(m, grid, y0_evaluator(y_net), z_evaluator(z_net, 1, 1), DirectLaw(m), 64,
                         RngStream(cfg.seed), ("train", 0))
    assert r.losses[0] == float(hand.loss)
    assert r.y0[0] == pytest.approx(float(network_forward(y_net, np.ones(1))[0]), rel=1e-12)


@pytest.mark.parametrize("scheme", ["direct", "dynamic", "expectation", "local"])
def test_reruns_are_bit_identical(scheme):
    m = population_model(0.5)
    grid = TimeGrid(1.0, 4)
    cfg = SolverConfig(scheme=scheme, law_samples=200, **SMALL)
    a, b = solve(m, grid, cfg).to_dict(), solve(m, grid, cfg).to_dict()
    a.pop("duration"), b.pop("duration")
    assert a == b


@pytest.mark.parametrize("scheme", ["direct", "dynamic", "expectation", "local"])
def test_losses_nonnegative_and_report_shape(scheme):
    m = price_impact_pontryagin(PriceImpactParams(d=2))
    grid = TimeGrid(0.25, 5)
    r = solve(m, grid, SolverConfig(scheme=scheme, law_samples=200, **SMALL))
    assert r.status == "max-iter"
    assert len(r.losses) == 5 and all(l >= 0 and math.isfinite(l) for l in r.losses)
    assert len(r.x_T) == 2 and r.x_T_mean == pytest.approx(np.mean(r.x_T))
    assert len(r.law_trajectory) == grid.N
    assert r.config["scheme"] == scheme


def test_law_free_model_direct_equals_dynamic():
    m = _toy(b=lambda t, x, y, z, u: -y + 0.0 * x, f=lambda t, x, y, z, u: x + 0.0 * y,
             g=lambda x, uX: ad.arctan(x), initial=Constant(1.0))
    grid = TimeGrid(1.0, 6)
    cfg = SolverConfig(**SMALL)
    d, y = solve_direct(m, grid, cfg), solve_dynamic(m, grid, cfg)
    assert d.losses == y.losses
    assert d.x_T == y.x_T and d.y0 == y.y0


def test_divergence_is_recorded_not_raised():
    blowup = _toy(b=lambda t, x, y, z, u: 1e200 * (1.0 + ad.square(x)) + 0.0 * y, initial=Constant(1.0))
    r = solve(blowup, TimeGrid(1.0, 5), SolverConfig(**SMALL))
    assert r.diverged
    assert r.diverged_at["iteration"] == 0 and r.diverged_at["step"] is not None
    assert "iteration 0" in r.message
    assert r.x_T is None


def test_loss_tolerance_stops_early():
    m = population_model(0.1)
    r = solve(m, TimeGrid(1.0, 4), SolverConfig(loss_tol=1e6, **SMALL))
    assert r.status == "converged" and r.iterations_done == 1


def test_population_decoupled_y0_matches_monte_carlo():
    """rho = 0: X is Brownian with mean 1, and dY = arctan(1) dt + Z dW gives
    Y0 = E[arctan X_T] - arctan(1) T."""
    m = population_model(0.0)
    grid = TimeGrid(1.0, 10)
    r = solve(m, grid, SolverConfig(scheme="direct", batch_size=256, iterations=400, learning_rate=1e-2,
                                     eval_batch=1000, hidden_width=8))
    w = np.random.default_rng(0).standard_normal(10**6)
    oracle = np.arctan(1.0 + w).mean() - math.atan(1.0)
    assert r.y0[0] == pytest.approx(oracle, abs=0.03)


def test_exact_law_substitution_matches_direct_scale():
    """Frozen exact moments and the batch estimate give comparable losses at the optimum."""
    p = LognormalParams(d=3)
    T = 0.25
    m = lognormal_linear(p, T)
    grid = TimeGrid(T, 10)
    y0_fn, z_fn = _exact_evaluators(p)
    exact = forward_sweep(m, grid, y0_fn, z_fn, FixedLaw(m, lognormal_exact_law(p, False), T), 2000, RngStream(0))
    batch = forward_sweep(m, grid, y0_fn, z_fn, DirectLaw(m), 2000, RngStream(0))
    assert float(batch.loss) == pytest.approx(float(exact.loss), rel=0.2, abs=1e-3)
    r = solve_with_law(m, grid, SolverConfig(**SMALL), lognormal_exact_law(p, False))
    assert r.status == "max-iter"


# --- local scheme ----------------------------------------------------------------------

def test_local_forward_statistics():
    m = price_impact_pontryagin(PriceImpactParams(d=2))
    grid = TimeGrid(0.25, 5)
    cfg = SolverConfig(hidden_width=4)
    ys = [network_init([2, 4, 2], i) for i in range(5)]
    zs = [network_init([2, 4, 4], 10 + i) for i in range(5)]
    buf = RingBuffer(6, 3, initial_moments(m, 10, RngStream(0)))
    fw = local_forward(m, grid, ys, zs, buf, 0, 500, RngStream(0), ("f",))
    assert len(fw.mean) == len(fw.var) == len(fw.laws) == grid.N + 1
    np.testing.assert_array_equal(fw.mean[0], [1.0, 1.0])
    np.testing.assert_array_equal(fw.var[0], [0.0, 0.0])
    assert all(np.all(v >= 0) for v in fw.var)
    del cfg


def test_local_one_step_regresses_conditional_expectation():
    """N=1, g(x) = x^2, no drift: Y^0(x) -> E[(x + sqrt(dt) xi)^2] = x^2 + dt."""
    m = _toy(g=lambda x, uX: ad.square(x), initial=Gaussian(0.0, 1.0))
    grid = TimeGrid(0.1, 1)
    cfg = SolverConfig(scheme="local", batch_size=256, iterations=1, inner_steps=3000, learning_rate=1e-2,
                       law_samples=4000, hidden_width=12, eval_batch=1000)
    r = solve_local(m, grid, cfg)
    assert r.status == "max-iter"
    # Y0 summary averages Y^0 over the initial law: E[x^2] + dt = 1.1
    assert r.y0[0] == pytest.approx(1.1, abs=0.06)


def test_local_warm_start_variants_run():
    m = price_impact_pontryagin(PriceImpactParams(d=2))
    grid = TimeGrid(0.25, 4)
    base = SolverConfig(scheme="local", law_samples=300, **SMALL)
    a = solve(m, grid, base)
    b = solve(m, grid, dataclasses.replace(base, warm_start="next"))
    assert a.status == b.status == "max-iter"
    assert a.losses != b.losses


def test_local_positive_state_resampling_survives():
    p = LognormalParams(d=2)
    m = lognormal_linear(p, 0.25)
    r = solve(m, TimeGrid(0.25, 5), SolverConfig(scheme="local", law_samples=500, **SMALL))
    assert r.status == "max-iter"

"""Training schemes for McKean-Vlasov FBSDEs.

Three global schemes share one merged network ``Z(t, x)`` and an initial
value network ``Y0(x)`` and differ only in how the mean-field term is
estimated along the simulated paths:

* ``direct``: empirical moments of the current batch, differentiated through;
* ``dynamic``: current batch moments blended with a ring buffer of the last
  ``M`` batches, treated as a constant;
* ``expectation``: a network ``Psi(t)`` drives the dynamics and is pulled
  towards the batch moments by a quadratic penalty.

The ``local`` scheme trains one (Y, Z) network pair per time step on
one-step regression problems, solved backwards in time after a forward pass
that estimates the law of X.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError
from .meanfield import (
    MeanFieldVector,
    RingBuffer,
    batch_moments,
    blend,
    dynamic_update,
    law_network_eval,
    penalty_loss,
)
from .models import ModelDefinition
from .nn import NetworkParams, adam_init, adam_step, backward, network_forward, network_init
from .sde import (
    Constant,
    RngStream,
    TimeGrid,
    euler_backward_step,
    euler_forward_step,
    gaussian_increments,
    sample_initial,
)

log = logging.getLogger(__name__)

SCHEMES = ("direct", "dynamic", "expectation", "local")


@dataclass
class SolverConfig:
    scheme: str = "dynamic"
    batch_size: int = 200
    iterations: int = 2000
    buffer_depth: int = 100
    law_samples: int = 50000
    inner_steps: int = 1
    penalty: float = 10.0
    learning_rate: float = 1e-3
    seed: int = 0
    hidden_width: int | None = None
    hidden_layers: int = 3
    eval_batch: int = 10000
    # stop early once the training loss falls below this value (0 disables)
    loss_tol: float = 0.0
    # local scheme: "previous" = same step, last outer iteration; "next" = step i+1
    warm_start: str = "previous"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        for name in ("batch_size", "buffer_depth", "law_samples", "inner_steps", "hidden_layers",
                     "eval_batch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be nonnegative, got {self.iterations}")
        if self.penalty < 0:
            raise ConfigError(f"penalty must be nonnegative, got {self.penalty}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be positive, got {self.hidden_width}")
        if self.warm_start not in ("previous", "next"):
            raise ConfigError(f"warm_start must be 'previous' or 'next', got {self.warm_start!r}")

    def width(self, d: int) -> int:
        return d + 10 if self.hidden_width is None else self.hidden_width

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunReport:
    scheme: str
    model: dict
    grid: dict
    config: dict
    status: str = "max-iter"
    losses: list[float] = field(default_factory=list)
    x_T: list[float] | None = None
    x_T_mean: float | None = None
    x_T_sd: float | None = None
    y0: list[float] | None = None
    law_trajectory: list[dict] | None = None
    iterations_done: int = 0
    message: str | None = None
    diverged_at: dict | None = None
    duration: float = 0.0

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# network wrappers

def _layers(n_in: int, n_out: int, cfg: SolverConfig, d: int) -> list[int]:
    return [n_in] + [cfg.width(d)] * cfg.hidden_layers + [n_out]


def _net_seed(seed: int, *tag: int) -> int:
    return int(np.random.SeedSequence([seed, *tag]).generate_state(1)[0])


def y0_evaluator(params: NetworkParams, tape=None):
    def y0(x):
        return network_forward(params, x, tape)

    return y0


def z_evaluator(params: NetworkParams, k: int, d: int, tape=None):
    """Merged network ``Z(t, x)``: input ``(t, x)``, output reshaped to (B, k, d)."""

    def z(t, x):
        B = np.shape(ad.value(x))[0]
        inp = ad.concat([np.full((B, 1), t), x], axis=1)
        return ad.reshape(network_forward(params, inp, tape), (B, k, d))

    return z


# --------------------------------------------------------------------------
# law providers

class DirectLaw:
    """Batch moments of the current particles, taped when the particles are."""

    def __init__(self, model):
        self.model = model

    def at(self, i, t, X, Y, Z):
        return batch_moments(self.model, X, Y, Z)

    def terminal(self, X):
        return ad.mean(self.model.phi1(X), axis=0)


class DynamicLaw(DirectLaw):
    """Batch moments blended with the ring buffer; constant w.r.t. parameters.

    With ``update=False`` the buffer is only read (used for evaluation runs).
    """

    def __init__(self, model, buffer: RingBuffer, m: int, update: bool = True):
        super().__init__(model)
        self.buffer = buffer
        self.m = m
        self.update = update

    def at(self, i, t, X, Y, Z):
        u = batch_moments(self.model, ad.value(X), ad.value(Y), ad.value(Z))
        if self.update:
            return dynamic_update(self.buffer, i, u, self.m)
        return blend(self.buffer, i, u)


class NetworkLaw(DirectLaw):
    """Moments read from the law network; batch moments are kept for the penalty."""

    def __init__(self, model, psi_rows: MeanFieldVector):
        super().__init__(model)
        self.rows = psi_rows
        self.moments: list[MeanFieldVector] = []

    def at(self, i, t, X, Y, Z):
        self.moments.append(batch_moments(self.model, X, Y, Z))
        return MeanFieldVector(self.rows.uX[i], self.rows.uY[i], self.rows.uZ[i])


class FixedLaw(DirectLaw):
    """Moments given by a function of time, e.g. a closed-form oracle."""

    def __init__(self, model, law_fn, T: float):
        super().__init__(model)
        self.law_fn = law_fn
        self.T = T

    def at(self, i, t, X, Y, Z):
        return self.law_fn(t)

    def terminal(self, X):
        return self.law_fn(self.T).uX


# --------------------------------------------------------------------------
# forward sweep

@dataclass
class Sweep:
    loss: object
    X_T: np.ndarray
    Y_0: np.ndarray
    laws: list[MeanFieldVector]


def forward_sweep(model: ModelDefinition, grid: TimeGrid, y0_fn, z_fn, law, B: int,
                  rng: RngStream, key=(), tape=None) -> Sweep:
    """Simulate B particles forward and return the terminal loss.

    ``law`` supplies the mean-field term at every step. The loss is
    ``mean_j |Y_N^j - g(X_N^j, xbar_N)|^2`` with ``xbar_N`` from
    ``law.terminal``. Everything is recorded on ``tape`` when given, through
    whatever the evaluators and the law provider put on it.
    """
    d, dt = model.d, grid.dt
    X = sample_initial(model.initial, B, d, rng.substream(*key, "xi"))
    Y = y0_fn(X)
    Y_0 = np.array(ad.value(Y))
    laws = []
    for i in range(grid.N):
        t = grid.t(i)
        Z = z_fn(t, X)
        u = law.at(i, t, X, Y, Z)
        laws.append(u)
        delta = gaussian_increments(B, d, rng.substream(*key, i))
        X_next = euler_forward_step(model, t, X, Y, Z, u, delta, dt, step=i)
        Y = euler_backward_step(model, t, X, Y, Z, u, delta, dt, step=i)
        X = X_next
    G = model.g(X, law.terminal(X))
    loss = ad.mean(ad.sqnorm(Y - G, axis=1))
    return Sweep(loss, np.array(ad.value(X)), Y_0, laws)


# --------------------------------------------------------------------------
# helpers shared by all schemes

def initial_moments(model: ModelDefinition, R: int, rng: RngStream) -> MeanFieldVector:
    """``(E[phi1(xi)], phi2(0), phi3(0))``; exact for a constant initial law."""
    n = 1 if isinstance(model.initial, Constant) else R
    xi = sample_initial(model.initial, n, model.d, rng.substream("initial-law"))
    return MeanFieldVector(
        np.mean(model.phi1(xi), axis=0),
        np.asarray(model.phi2(np.zeros((1, model.k))))[0],
        np.asarray(model.phi3(np.zeros((1, model.k, model.d))))[0],
    )


def _new_report(model, grid, cfg) -> RunReport:
    return RunReport(
        scheme=cfg.scheme,
        model=model.describe(),
        grid={"T": grid.T, "N": grid.N, "dt": grid.dt},
        config=dataclasses.asdict(cfg),
    )


def _summarize(report: RunReport, X_T: np.ndarray, Y_0: np.ndarray, laws, grid) -> None:
    per_coord = X_T.mean(axis=0)
    report.x_T = per_coord.tolist()
    report.x_T_mean = float(per_coord.mean())
    report.x_T_sd = float(per_coord.std())
    report.y0 = Y_0.mean(axis=0).tolist()
    if laws is not None:
        traj = []
        for i, u in enumerate(laws):
            u = u.values()
            traj.append({
                "step": i,
                "t": grid.t(i),
                "uX": np.atleast_1d(u.uX).tolist(),
                "uY": np.atleast_1d(u.uY).tolist(),
                "uZ": np.atleast_1d(u.uZ).tolist(),
            })
        report.law_trajectory = traj


def _diverged(report: RunReport, err: DivergenceError, m: int) -> RunReport:
    err.locate(iteration=m)
    report.status = "diverged"
    report.message = str(err)
    report.diverged_at = {"iteration": err.iteration, "step": err.step}
    log.warning("run diverged: %s", err)
    return report


def _finite_loss(loss_value: float, m: int) -> float:
    if not math.isfinite(loss_value):
        raise DivergenceError("non-finite loss", iteration=m)
    return loss_value


# --------------------------------------------------------------------------
# global schemes

def _solve_global(model: ModelDefinition, grid: TimeGrid, cfg: SolverConfig, law_override=None) -> RunReport:
    start = time.perf_counter()
    report = _new_report(model, grid, cfg)
    d, k = model.d, model.k
    rng = RngStream(cfg.seed)
    y_net = network_init(_layers(d, k, cfg, d), _net_seed(cfg.seed, 1))
    z_net = network_init(_layers(d + 1, k * d, cfg, d), _net_seed(cfg.seed, 2))
    nets = [y_net, z_net]
    widths = model.widths
    if cfg.scheme == "expectation":
        nets.append(network_init(_layers(1, sum(widths), cfg, d), _net_seed(cfg.seed, 3)))
    buffer = None
    if cfg.scheme == "dynamic":
        buffer = RingBuffer(grid.N + 1, cfg.buffer_depth, initial_moments(model, cfg.law_samples, rng))
    adam = adam_init(nets)

    def make_law(m, tape, update=True):
        if law_override is not None:
            return law_override
        if cfg.scheme == "direct":
            return DirectLaw(model)
        if cfg.scheme == "dynamic":
            return DynamicLaw(model, buffer, m, update)
        rows = law_network_eval(nets[2], grid.times, widths, tape)
        return NetworkLaw(model, rows)

    def objective(m, tape, B, key, update=True):
        law = make_law(m, tape, update)
        sweep = forward_sweep(model, grid, y0_evaluator(nets[0], tape), z_evaluator(nets[1], k, d, tape),
                              law, B, rng, key, tape)
        loss = sweep.loss
        if cfg.scheme == "expectation" and law_override is None:
            loss = loss + penalty_loss(nets[2], grid, law.moments, cfg.penalty, tape)
        return loss, sweep

    m = 0
    with np.errstate(all="ignore"):
        try:
            if cfg.iterations == 0:
                loss, _ = objective(0, None, cfg.batch_size, ("train", 0), update=False)
                report.losses.append(_finite_loss(float(loss), 0))
            for m in range(cfg.iterations):
                tape = ad.Tape()
                loss, _ = objective(m, tape, cfg.batch_size, ("train", m))
                lv = _finite_loss(float(ad.value(loss)), m)
                report.losses.append(lv)
                grads = backward(tape, loss, nets)
                nets, adam = adam_step(nets, grads, adam, cfg.learning_rate, iteration=m)
                report.iterations_done = m + 1
                if cfg.loss_tol > 0 and lv < cfg.loss_tol:
                    report.status = "converged"
                    break
            final = objective(cfg.iterations, None, cfg.eval_batch, ("eval",), update=False)[1]
        except DivergenceError as err:
            report.duration = time.perf_counter() - start
            return _diverged(report, err, m)
    _summarize(report, final.X_T, final.Y_0, final.laws, grid)
    report.duration = time.perf_counter() - start
    return report


def solve_direct(model: ModelDefinition, grid: TimeGrid, cfg: SolverConfig) -> RunReport:
    return _solve_global(model, grid, cfg.replace(scheme="direct"))


def solve_dynamic(model: ModelDefinition, grid: TimeGrid, cfg: SolverConfig) -> RunReport:
    return _solve_global(model, grid, cfg.replace(scheme="dynamic"))


def solve_expectation(model: ModelDefinition, grid: TimeGrid, cfg: SolverConfig) -> RunReport:
    return _solve_global(model, grid, cfg.replace(scheme="expectation"))


def solve_with_law(model: ModelDefinition, grid: TimeGrid, cfg: SolverConfig, law_fn) -> RunReport:
    """Global training with the mean-field term frozen to ``law_fn(t)``."""
    return _solve_global(model, grid, cfg.replace(scheme="direct"),
                         law_override=FixedLaw(model, law_fn, grid.T))


# --------------------------------------------------------------------------
# local scheme

@dataclass
class LocalForward:
    """Statistics of the forward pass: per-step mean, variance and blended law."""

    mean: list[np.ndarray]
    var: list[np.ndarray]
    laws: list[MeanFieldVector]
    X_T: np.ndarray


def local_forward(model, grid, y_nets, z_nets, buffer: RingBuffer, m: int, R: int,
                  rng: RngStream, key, update: bool = True) -> LocalForward:
    d, k, dt = model.d, model.k, grid.dt
    X = sample_initial(model.initial, R, d, rng.substream(*key, "xi"))
    means, variances, laws = [], [], []
    for i in range(grid.N + 1):
        t = grid.t(i)
        mu = X.mean(axis=0)
        # shifted two-pass variance; clamp rounding negatives
        var = np.maximum(((X - mu) ** 2).mean(axis=0), 0.0)
        means.append(mu)
        variances.append(var)
        if i < grid.N:
            Y = network_forward(y_nets[i], X)
            Z = network_forward(z_nets[i], X).reshape(R, k, d)
        else:
            Y = model.g(X, np.mean(model.phi1(X), axis=0))
            Z = np.zeros((R, k, d))
        u = batch_moments(model, X, Y, Z)
        u_t = dynamic_update(buffer, i, u, m) if update else blend(buffer, i, u)
        laws.append(u_t)
        if i < grid.N:
            delta = gaussian_increments(R, d, rng.substream(*key, i))
            X = euler_forward_step(model, t, X, Y, Z, u_t, delta, dt, step=i)
    return LocalForward(means, variances, laws, X)


def solve_local(model: ModelDefinition, grid: TimeGrid, cfg: SolverConfig) -> RunReport:
    """Per-step networks trained backwards on one-step regressions.

    Each outer iteration runs a forward pass with ``law_samples`` particles
    to estimate the mean and variance of X_i and update the law buffer, then
    for i = N-1..0 takes ``inner_steps`` Adam steps on

        mean_j |f(t_i, x_i, Y^i(x_i), Z^i(x_i), u_i) dt + Y_{i+1}
                - Y^i(x_i) - sqrt(dt) Z^i(x_i) Xi_j|^2

    with x_i ~ N(mean_i, diag var_i), x_{i+1} the Euler step from x_i (held
    fixed during differentiation) and Y_{i+1} = Y^{i+1}(x_{i+1}), or the
    terminal condition at the last step.
    """
    cfg = cfg.replace(scheme="local")
    start = time.perf_counter()
    report = _new_report(model, grid, cfg)
    d, k, dt, N = model.d, model.k, grid.dt, grid.N
    B, sqdt = cfg.batch_size, math.sqrt(grid.dt)
    rng = RngStream(cfg.seed)
    y_nets = [network_init(_layers(d, k, cfg, d), _net_seed(cfg.seed, 10, i)) for i in range(N)]
    z_nets = [network_init(_layers(d, k * d, cfg, d), _net_seed(cfg.seed, 11, i)) for i in range(N)]
    adams = [adam_init([y_nets[i], z_nets[i]]) for i in range(N)]
    buffer = RingBuffer(N + 1, cfg.buffer_depth, initial_moments(model, cfg.law_samples, rng))

    m = 0
    with np.errstate(all="ignore"):
        try:
            for m in range(cfg.iterations):
                fw = local_forward(model, grid, y_nets, z_nets, buffer, m, cfg.law_samples, rng,
                                   ("local-forward", m))
                total = 0.0
                for i in reversed(range(N)):
                    t, u_i = grid.t(i), fw.laws[i]
                    if cfg.warm_start == "next" and i < N - 1:
                        theta = [y_nets[i + 1].copy(), z_nets[i + 1].copy()]
                    else:
                        theta = [y_nets[i], z_nets[i]]
                    sd = np.sqrt(fw.var[i])
                    for h in range(cfg.inner_steps):
                        gen = rng.substream("local-backward", m, i, h)
                        theta_draw = gen.standard_normal((B, d))
                        xi_draw = gen.standard_normal((B, d))
                        x = fw.mean[i] + sd * theta_draw
                        if model.positive_state:
                            # Gaussian proxy can leave the positive orthant
                            x = np.abs(x)
                        y_c = network_forward(theta[0], x)
                        z_c = network_forward(theta[1], x).reshape(B, k, d)
                        x_next = euler_forward_step(model, t, x, y_c, z_c, u_i, xi_draw, dt, step=i)
                        if i == N - 1:
                            target = model.g(x_next, fw.laws[N].uX)
                        else:
                            target = network_forward(y_nets[i + 1], x_next)

                        tape = ad.Tape()
                        y = network_forward(theta[0], x, tape)
                        z = ad.reshape(network_forward(theta[1], x, tape), (B, k, d))
                        drift = model.f(t, x, y, z, u_i)
                        noise = ad.sum_(z * (sqdt * xi_draw[:, None, :]), axis=2)
                        resid = drift * dt + target - y - noise
                        loss = ad.mean(ad.sqnorm(resid, axis=1))
                        lv = _finite_loss(float(ad.value(loss)), m)
                        grads = backward(tape, loss, theta)
                        theta, adams[i] = adam_step(theta, grads, adams[i], cfg.learning_rate, iteration=m)
                    total += lv
                    y_nets[i], z_nets[i] = theta
                report.losses.append(total)
                report.iterations_done = m + 1
                if cfg.loss_tol > 0 and total < cfg.loss_tol:
                    report.status = "converged"
                    break
            final = local_forward(model, grid, y_nets, z_nets, buffer, m, cfg.eval_batch, rng,
                                  ("eval",), update=False)
        except DivergenceError as err:
            report.duration = time.perf_counter() - start
            return _diverged(report, err, m)
    xi = sample_initial(model.initial, cfg.eval_batch, d, rng.substream("eval", "xi"))
    _summarize(report, final.X_T, network_forward(y_nets[0], xi), final.laws[:N], grid)
    report.duration = time.perf_counter() - start
    return report


SOLVERS = {
    "direct": solve_direct,
    "dynamic": solve_dynamic,
    "expectation": solve_expectation,
    "local": solve_local,
}


def solve(model: ModelDefinition, grid: TimeGrid, cfg: SolverConfig) -> RunReport:
    return SOLVERS[cfg.scheme](model, grid, cfg)

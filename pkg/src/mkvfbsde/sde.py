"""Time grid, random streams and Euler-Maruyama steps for the coupled system."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"step count N must be a positive integer, got {self.N}")

    @classmethod
    def from_dt(cls, T: float, dt: float) -> "TimeGrid":
        if not dt > 0:
            raise ConfigError(f"dt must be positive, got {dt}")
        n = round(T / dt)
        if n < 1 or not math.isclose(n * dt, T, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigError(f"dt={dt} does not divide T={T}")
        return cls(T, n)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.array([self.t(i) for i in range(self.N + 1)])

    def t(self, i: int) -> float:
        return i * self.T / self.N


@dataclass
class PathBatch:
    """Particles at time index ``i``: X (B, d), Y (B, k), Z (B, k, d)."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    i: int


class RngStream:
    """Counter-based random source with independent keyed substreams.

    ``substream(*key)`` returns a fresh Philox generator whose state depends
    only on ``(seed, key)``; a block such as the Brownian increments of one
    (iteration, time step) is drawn from its own substream, so draws do not
    depend on evaluation order or worker count.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def substream(self, *key) -> np.random.Generator:
        words = tuple(_key_word(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=words)
        return np.random.Generator(np.random.Philox(ss))


def _key_word(k) -> int:
    if isinstance(k, str):
        return int.from_bytes(k.encode()[:8].ljust(8, b"\0"), "little")
    return int(k)


@dataclass(frozen=True)
class Constant:
    x0: tuple[float, ...] | float


@dataclass(frozen=True)
class Gaussian:
    mean: tuple[float, ...] | float
    var: tuple[float, ...] | float = 1.0


def sample_initial(law, B: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if B < 1 or d < 1:
        raise ConfigError(f"batch size and dimension must be positive, got B={B}, d={d}")
    if isinstance(law, Constant):
        return np.broadcast_to(np.asarray(law.x0, dtype=float), (B, d)).copy()
    if isinstance(law, Gaussian):
        mean = np.broadcast_to(np.asarray(law.mean, dtype=float), (d,))
        sd = np.sqrt(np.broadcast_to(np.asarray(law.var, dtype=float), (d,)))
        return mean + sd * rng.standard_normal((B, d))
    raise ConfigError(f"unsupported initial law {law!r}")


def gaussian_increments(B: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws; the Brownian increment is ``sqrt(dt) * delta``."""
    if B < 1 or d < 1:
        raise ConfigError(f"batch size and dimension must be positive, got B={B}, d={d}")
    return rng.standard_normal((B, d))


def _check_finite(x, what: str, step: int | None):
    if not np.all(np.isfinite(ad.value(x))):
        raise DivergenceError(f"non-finite {what}", step=step)


def euler_forward_step(model, t, X, Y, Z, u, delta, dt, step: int | None = None):
    """``X + b dt + sigma sqrt(dt) delta`` with diagonal diffusion."""
    try:
        drift = model.b(t, X, Y, Z, u)
        vol = model.sigma(t, X, u.uX)
    except DivergenceError as err:
        raise err.locate(step=step)
    X_next = X + drift * dt + vol * (math.sqrt(dt) * delta)
    _check_finite(X_next, "forward state", step)
    return X_next


def euler_backward_step(model, t, X, Y, Z, u, delta, dt, step: int | None = None):
    """``Y - f dt + Z sqrt(dt) delta``; Z is (B, k, d) and acts on delta row-wise."""
    try:
        driver = model.f(t, X, Y, Z, u)
    except DivergenceError as err:
        raise err.locate(step=step)
    noise = ad.sum_(Z * (math.sqrt(dt) * delta[:, None, :]), axis=2)
    Y_next = Y - driver * dt + noise
    _check_finite(Y_next, "backward state", step)
    return Y_next

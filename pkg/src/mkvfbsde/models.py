"""Benchmark McKean-Vlasov FBSDEs and their reference values.

Every coefficient function is batched: ``x`` is (B, d), ``y`` is (B, k),
``z`` is (B, k, d) and ``u`` is a :class:`~mkvfbsde.meanfield.MeanFieldVector`.
They are built from :mod:`mkvfbsde.autodiff` primitives, so they can be
evaluated on plain arrays or on taped variables.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from . import autodiff as ad
from .errors import ConfigError, DomainError
from .sde import Constant, Gaussian


@dataclass(frozen=True)
class ModelDefinition:
    name: str
    d: int
    k: int
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    phi1: Callable
    phi2: Callable
    phi3: Callable
    widths: tuple[int, int, int]
    initial: Constant | Gaussian
    params: object = None
    # states must stay positive (log coefficients); used by the local resampler
    positive_state: bool = False
    meta: dict = field(default_factory=dict)

    def describe(self) -> dict:
        out = {"name": self.name, "d": self.d, "k": self.k}
        if self.params is not None:
            out["params"] = asdict(self.params)
        out.update(self.meta)
        return out


def _batch(a) -> int:
    return np.shape(ad.value(a))[0]


def _identity(a):
    return a


def _flatten(a):
    return ad.reshape(a, (_batch(a), -1))


def _unused(a):
    return np.zeros((_batch(a), 0))


# --------------------------------------------------------------------------
# price impact (mean-field game of controls)

@dataclass(frozen=True)
class PriceImpactParams:
    c_alpha: float = 2.0 / 3.0
    c_X: float = 2.0
    c_g: float = 0.3
    gamma: float = 2.0
    sigma: float = 0.7
    x0: float = 1.0
    d: int = 10

    def __post_init__(self):
        if not self.c_alpha > 0:
            raise ConfigError(f"c_alpha must be positive, got {self.c_alpha}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.d < 1:
            raise ConfigError(f"d must be positive, got {self.d}")


def price_impact_pontryagin(p: PriceImpactParams) -> ModelDefinition:
    """Y is the gradient of the value function (k = d); E[Y] enters the driver."""
    inv_ca = 1.0 / p.c_alpha
    coupling = p.gamma / p.c_alpha

    def b(t, x, y, z, u):
        return -inv_ca * y

    def sigma(t, x, uX):
        return p.sigma

    def f(t, x, y, z, u):
        return p.c_X * x + coupling * u.uY

    def g(x, uX):
        return p.c_g * x

    return ModelDefinition(
        "price_impact_pontryagin", p.d, p.d, b, sigma, f, g,
        _identity, _identity, _unused, (p.d, p.d, 0), Constant(p.x0), p,
    )


def price_impact_weak(p: PriceImpactParams) -> ModelDefinition:
    """Y is the value function (k = 1); E[Z] enters the driver."""
    inv_s = 1.0 / p.sigma

    def zrow(z):
        return z[:, 0, :]

    def b(t, x, y, z, u):
        return (-inv_s / p.c_alpha) * zrow(z)

    def sigma(t, x, uX):
        return p.sigma

    def f(t, x, y, z, u):
        running = 0.5 * p.c_X * ad.sqnorm(x, axis=1, keepdims=True)
        cross = (p.gamma / p.c_alpha) * ad.sum_(x * (u.uZ * inv_s), axis=1, keepdims=True)
        control = (0.5 / p.c_alpha) * ad.sqnorm(zrow(z) * inv_s, axis=1, keepdims=True)
        return running + cross + control

    def g(x, uX):
        return 0.5 * p.c_g * ad.sqnorm(x, axis=1, keepdims=True)

    return ModelDefinition(
        "price_impact_weak", p.d, 1, b, sigma, f, g,
        _identity, _identity, _flatten, (p.d, 1, p.d), Constant(p.x0), p,
    )


def price_impact_mean_path(p: PriceImpactParams, T: float):
    """(x_bar, y_bar) as functions of t for the expected Pontryagin system.

    Taking expectations coordinatewise gives the linear two-point problem
    ``x' = -y / c_alpha``, ``y' = -(c_X x + gamma / c_alpha y)``,
    ``x(0) = x0``, ``y(T) = c_g x(T)``, solved by shooting on ``y(0)``
    with the matrix exponential.
    """
    A = np.array([[0.0, -1.0 / p.c_alpha], [-p.c_X, -p.gamma / p.c_alpha]])
    P = expm(A * T)
    denom = P[1, 1] - p.c_g * P[0, 1]
    if abs(denom) < 1e-14:
        raise ArithmeticError("singular shooting system")
    y0 = (p.c_g * P[0, 0] - P[1, 0]) * p.x0 / denom
    start = np.array([p.x0, y0])

    def at(t):
        s = expm(A * t) @ start
        return float(s[0]), float(s[1])

    return at


def price_impact_reference(p: PriceImpactParams, T: float) -> float:
    """E[X_T] (any coordinate) of the price impact equilibrium."""
    if T == 0:
        return float(p.x0)
    return price_impact_mean_path(p, T)(T)[0]


# --------------------------------------------------------------------------
# one-dimensional population model

@dataclass(frozen=True)
class PopulationParams:
    rho: float = 1.0
    x0: float = 1.0
    sigma: float = 1.0


def population_model(rho: float, x0: float = 1.0, sigma: float = 1.0) -> ModelDefinition:
    p = PopulationParams(rho, x0, sigma)

    def b(t, x, y, z, u):
        return -p.rho * y

    def vol(t, x, uX):
        return p.sigma

    def f(t, x, y, z, u):
        return -ad.arctan(u.uX)

    def g(x, uX):
        return ad.arctan(x)

    return ModelDefinition(
        "population", 1, 1, b, vol, f, g,
        _identity, _unused, _unused, (1, 0, 0), Constant(p.x0), p,
    )


# --------------------------------------------------------------------------
# log-normal models with explicit solution

@dataclass(frozen=True)
class LognormalParams:
    a: float = 0.1
    sigma: float = 0.4
    alpha: float = 0.5
    xi: float = 1.0
    b_coef: float = 0.1
    c_coef: float = 0.1
    d: int = 10

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not self.xi > 0:
            raise ConfigError(f"xi must be positive, got {self.xi}")
        if self.d < 1:
            raise ConfigError(f"d must be positive, got {self.d}")


def lognormal_moments(p: LognormalParams, t: float) -> tuple[float, ...]:
    """Exact moments (E[X^i], E[(X^i)^2], E[Y], E[Y^2], E[Z^i], E[(Z^i)^2]) at time t."""
    drift = math.log(p.xi) + (p.a - 0.5 * p.sigma**2) * t
    ea = math.exp(p.alpha * t)
    mean_x = p.xi * math.exp(p.a * t)
    mean_x2 = p.xi**2 * math.exp((2 * p.a + p.sigma**2) * t)
    mean_y = ea * p.d * drift
    mean_y2 = ea**2 * ((p.d * drift) ** 2 + p.d * p.sigma**2 * t)
    mean_z = p.sigma * ea
    mean_z2 = p.sigma**2 * ea**2
    return mean_x, mean_x2, mean_y, mean_y2, mean_z, mean_z2


def _log_prod(x):
    xv = ad.value(x)
    if not np.all(xv > 0):
        raise DomainError("nonpositive state in log-product")
    return ad.sum_(ad.log(x), axis=-1, keepdims=True)


def phi_source(p: LognormalParams, t: float, x):
    """Source term ``e^{alpha t} (alpha * sum_i log x^i + sum_i (a - sigma^2/2))``.

    ``x`` is one state vector or a batch of rows; the result keeps a trailing
    axis of length one for batches.
    """
    ea = math.exp(p.alpha * t)
    return ea * (p.alpha * _log_prod(x) + p.d * (p.a - 0.5 * p.sigma**2))


def _lognormal(p: LognormalParams, T: float, quadratic: bool, name: str) -> ModelDefinition:
    d = p.d
    bc, cc = p.b_coef, (p.c_coef if quadratic else 0.0)

    def zrow(z):
        return ad.reshape(z, (_batch(z), d))

    def b(t, x, y, z, u):
        ea = math.exp(p.alpha * t)
        y_ex = ea * _log_prod(x)
        z_ex = p.sigma * ea
        mx, mx2, my, my2, mz, mz2 = lognormal_moments(p, t)
        zr = zrow(z)
        lin = (y + zr + u.uX[:d] + u.uY[0:1] + u.uZ[:d]) - (y_ex + z_ex + mx + my + mz)
        out = p.a * x + bc * lin
        if quadratic:
            sq = (ad.square(y) + ad.square(zr) + u.uX[d:] + u.uY[1:2] + u.uZ[d:]) - (
                ad.square(y_ex) + z_ex**2 + mx2 + my2 + mz2
            )
            out = out + cc * sq
        return out

    def sigma(t, x, uX):
        return p.sigma * x

    def f(t, x, y, z, u):
        ea = math.exp(p.alpha * t)
        y_ex = ea * _log_prod(x)
        z_ex = p.sigma * ea
        mx, mx2, my, my2, mz, mz2 = lognormal_moments(p, t)
        zr = zrow(z)
        lin = (
            y + ad.mean(zr, axis=1, keepdims=True) + ad.mean(u.uX[:d]) + u.uY[0:1] + ad.mean(u.uZ[:d])
        ) - (y_ex + z_ex + mx + my + mz)
        dy = phi_source(p, t, x) + bc * lin
        if quadratic:
            sq = (
                ad.square(y)
                + ad.mean(ad.square(zr), axis=1, keepdims=True)
                + ad.mean(u.uX[d:])
                + u.uY[1:2]
                + ad.mean(u.uZ[d:])
            ) - (ad.square(y_ex) + z_ex**2 + mx2 + my2 + mz2)
            dy = dy + cc * sq
        return -dy

    terminal_scale = math.exp(p.alpha * T)

    def g(x, uX):
        return terminal_scale * _log_prod(x)

    if quadratic:
        def phi1(x):
            return ad.concat([x, ad.square(x)], axis=1)

        def phi2(y):
            return ad.concat([y, ad.square(y)], axis=1)

        def phi3(z):
            zr = zrow(z)
            return ad.concat([zr, ad.square(zr)], axis=1)

        widths = (2 * d, 2, 2 * d)
    else:
        phi1, phi2, phi3 = _identity, _identity, zrow
        widths = (d, 1, d)

    return ModelDefinition(
        name, d, 1, b, sigma, f, g, phi1, phi2, phi3, widths, Constant(p.xi), p,
        positive_state=True, meta={"T": T},
    )


def lognormal_linear(p: LognormalParams, T: float) -> ModelDefinition:
    """Log-normal model coupled linearly in (Y, Z) and their means.

    The terminal condition ``e^{alpha T} log prod x^i`` depends on the horizon.
    """
    return _lognormal(p, T, False, "lognormal_linear")


def lognormal_quadratic(p: LognormalParams, T: float) -> ModelDefinition:
    """Log-normal model with additional quadratic coupling (coefficient ``c_coef``)."""
    return _lognormal(p, T, True, "lognormal_quadratic")


def lognormal_exact_law(p: LognormalParams, quadratic: bool):
    """Exact mean-field vector as a function of t, in the models' phi layout."""
    from .meanfield import MeanFieldVector

    d = p.d

    def at(t):
        mx, mx2, my, my2, mz, mz2 = lognormal_moments(p, t)
        if quadratic:
            return MeanFieldVector(
                np.concatenate([np.full(d, mx), np.full(d, mx2)]),
                np.array([my, my2]),
                np.concatenate([np.full(d, mz), np.full(d, mz2)]),
            )
        return MeanFieldVector(np.full(d, mx), np.array([my]), np.full(d, mz))

    return at


def lognormal_reference(p: LognormalParams, T: float) -> float:
    return p.xi * math.exp(p.a * T)


# --------------------------------------------------------------------------
# registry used by the config loader and CLI

MODEL_NAMES = (
    "price_impact_pontryagin",
    "price_impact_weak",
    "population",
    "lognormal_linear",
    "lognormal_quadratic",
)

PARAM_TYPES = {
    "price_impact_pontryagin": PriceImpactParams,
    "price_impact_weak": PriceImpactParams,
    "population": PopulationParams,
    "lognormal_linear": LognormalParams,
    "lognormal_quadratic": LognormalParams,
}


def build_model(name: str, T: float, **overrides) -> ModelDefinition:
    if name not in PARAM_TYPES:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    ptype = PARAM_TYPES[name]
    known = {f.name for f in dataclasses.fields(ptype)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown parameter(s) for {name}: {', '.join(unknown)}")
    params = ptype(**overrides)
    if name == "price_impact_pontryagin":
        return price_impact_pontryagin(params)
    if name == "price_impact_weak":
        return price_impact_weak(params)
    if name == "population":
        return population_model(params.rho, params.x0, params.sigma)
    if name == "lognormal_linear":
        return lognormal_linear(params, T)
    return lognormal_quadratic(params, T)


def reference_mean(model: ModelDefinition, T: float) -> float | None:
    """Known E[X_T] for the benchmark, or None when no oracle exists."""
    if model.name.startswith("price_impact"):
        return price_impact_reference(model.params, T)
    if model.name.startswith("lognormal"):
        return lognormal_reference(model.params, T)
    return None

"""Estimators of the mean-field term u_t = (E[phi1(X)], E[phi2(Y)], E[phi3(Z)])."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .nn import NetworkParams, network_forward


@dataclass
class MeanFieldVector:
    """Moments at one time step. Entries may be arrays or taped ``Var``s."""

    uX: object
    uY: object
    uZ: object

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(int(np.size(ad.value(c))) for c in (self.uX, self.uY, self.uZ))

    def flat(self):
        """The three components concatenated (taped if any component is)."""
        return ad.concat([self.uX, self.uY, self.uZ], axis=0)

    def values(self) -> "MeanFieldVector":
        return MeanFieldVector(
            np.array(ad.value(self.uX)), np.array(ad.value(self.uY)), np.array(ad.value(self.uZ))
        )

    @classmethod
    def from_flat(cls, vec, widths) -> "MeanFieldVector":
        a, b, c = widths
        if np.shape(ad.value(vec))[-1] != a + b + c:
            raise ConfigError(f"vector width {np.shape(ad.value(vec))[-1]} != {a + b + c}")
        return cls(vec[..., :a], vec[..., a : a + b], vec[..., a + b : a + b + c])


def batch_moments(model, X, Y, Z) -> MeanFieldVector:
    """Empirical means of the model's test functions over the batch (axis 0)."""
    return MeanFieldVector(
        ad.mean(model.phi1(X), axis=0),
        ad.mean(model.phi2(Y), axis=0),
        ad.mean(model.phi3(Z), axis=0),
    )


class RingBuffer:
    """Last ``M`` batch moments per time index, stored flat as ``(n_steps, M, width)``."""

    def __init__(self, n_steps: int, M: int, init: MeanFieldVector):
        if M < 1:
            raise ConfigError(f"buffer depth M must be positive, got {M}")
        self.M = M
        self.widths = init.widths
        row = np.asarray(ad.value(init.flat()), dtype=float)
        self.data = np.broadcast_to(row, (n_steps, M, row.size)).copy()

    def mean(self, i: int) -> np.ndarray:
        return self.data[i].mean(axis=0)

    def write(self, i: int, m: int, u: MeanFieldVector) -> None:
        self.data[i, m % self.M] = ad.value(u.flat())


def blend(buffer: RingBuffer, i: int, u_i: MeanFieldVector) -> MeanFieldVector:
    """``(sum_r zeta[i, r] + u_i) / (M + 1)`` without touching the buffer."""
    cur = np.asarray(ad.value(u_i.flat()), dtype=float)
    blended = (buffer.data[i].sum(axis=0) + cur) / (buffer.M + 1)
    return MeanFieldVector.from_flat(blended, buffer.widths)


def dynamic_update(buffer: RingBuffer, i: int, u_i: MeanFieldVector, m: int) -> MeanFieldVector:
    """Blend ``u_i`` with the stored moments, then store it in slot ``m % M``.

    The result is a plain array: no gradient flows through it.
    """
    out = blend(buffer, i, u_i)
    buffer.write(i, m, u_i)
    return out


def law_network_eval(psi: NetworkParams, t, widths, tape: ad.Tape | None = None):
    """Split ``psi(t)`` into (uX, uY, uZ). ``t`` may be a scalar or a 1-D array of times."""
    if psi.n_in != 1 or psi.n_out != sum(widths):
        raise ConfigError(
            f"law network must map 1 -> {sum(widths)}, got {psi.n_in} -> {psi.n_out}"
        )
    ts = np.asarray(t, dtype=float)
    out = network_forward(psi, ts.reshape(-1, 1), tape)
    if ts.ndim == 0:
        out = out[0]
    return MeanFieldVector.from_flat(out, widths)


def penalty_loss(psi: NetworkParams, grid, moments, lam: float, tape: ad.Tape | None = None):
    """``(lam / N) * sum_i ||psi(t_i) - moments[i]||^2`` over ``i = 0..N-1``.

    ``moments`` holds one :class:`MeanFieldVector` per step (taped or not).
    """
    if lam < 0:
        raise ConfigError(f"penalty weight must be nonnegative, got {lam}")
    n = len(moments)
    if n != grid.N:
        raise ConfigError(f"expected {grid.N} moment vectors, got {n}")
    ts = grid.times[:n].reshape(-1, 1)
    psi_out = network_forward(psi, ts, tape)
    target = ad.concat([ad.reshape(m.flat(), (1, -1)) for m in moments], axis=0)
    return lam / n * ad.sqnorm(psi_out - target)

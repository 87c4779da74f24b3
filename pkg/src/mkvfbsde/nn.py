"""Dense tanh networks, their gradients and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError, UsageError


@dataclass(eq=False)
class NetworkParams:
    """Weights and biases of a feedforward network.

    ``weights[l]`` has shape ``(layer_sizes[l+1], layer_sizes[l])``. Hidden
    layers use tanh, the output layer is the identity.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        _check_sizes(self.layer_sizes)
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ConfigError("number of weight/bias arrays does not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[l + 1], self.layer_sizes[l]):
                raise ConfigError(f"weight {l} has shape {w.shape}")
            if b.shape != (self.layer_sizes[l + 1],):
                raise ConfigError(f"bias {l} has shape {b.shape}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in the order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, layer_sizes: Sequence[int], arrays: Sequence[np.ndarray]) -> "NetworkParams":
        return cls(list(layer_sizes), list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_arrays(self.layer_sizes, [a.copy() for a in self.arrays()])

    def tobytes(self) -> bytes:
        return b"".join(a.tobytes() for a in self.arrays())

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def _check_sizes(layer_sizes):
    if len(layer_sizes) < 2 or any(int(n) != n or n < 1 for n in layer_sizes):
        raise ConfigError(f"invalid layer_sizes {list(layer_sizes)}")


def network_init(layer_sizes: Sequence[int], seed: int) -> NetworkParams:
    """Glorot-uniform weights on ``[-sqrt(6/(fan_in+fan_out)), +...]``, zero biases."""
    _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(list(layer_sizes), weights, biases)


def network_forward(params: NetworkParams, x, tape: ad.Tape | None = None):
    """Evaluate the network on one input vector or a batch of rows.

    With a tape, the parameters are registered as leaves of that tape (once
    per tape) and every intermediate is recorded.
    """
    if np.shape(ad.value(x))[-1] != params.n_in:
        raise ConfigError(
            f"input width {np.shape(ad.value(x))[-1]} does not match network input {params.n_in}"
        )
    arrays = params.arrays() if tape is None else tape.watch(params, params.arrays())
    n_layers = len(params.weights)
    h = x
    for l in range(n_layers):
        h = ad.affine(h, arrays[2 * l], arrays[2 * l + 1])
        if l < n_layers - 1:
            h = ad.tanh(h)
    return h


def backward(
    tape: ad.Tape, loss, params: Sequence[NetworkParams] | None = None
) -> list[NetworkParams]:
    """Gradients of ``loss`` shaped like the networks.

    Returned in the order of ``params`` (zeros for a network the tape never
    saw), or in watch order when ``params`` is omitted.
    """
    if params is None:
        params = [owner for owner, _ in tape.watched]
    leaves, slots = [], []
    for p in params:
        vs = tape.leaves_of(p)
        slots.append(None if vs is None else (len(leaves), len(vs)))
        if vs is not None:
            leaves.extend(vs)
    flat = tape.gradients(loss, leaves)
    out = []
    for p, slot in zip(params, slots):
        if slot is None:
            arrays = [np.zeros_like(a) for a in p.arrays()]
        else:
            arrays = flat[slot[0] : slot[0] + slot[1]]
        out.append(NetworkParams.from_arrays(p.layer_sizes, arrays))
    return out


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[NetworkParams], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    arrays = [a for p in params for a in p.arrays()]
    return AdamState(
        0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], beta1, beta2, eps
    )


def adam_step(
    params: Sequence[NetworkParams],
    grads: Sequence[NetworkParams],
    state: AdamState,
    lr: float,
    iteration: int | None = None,
) -> tuple[list[NetworkParams], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    Raises :class:`DivergenceError` if any gradient entry is non-finite.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise UsageError("params and grads differ in length")
    g_flat = [g for gp in grads for g in gp.arrays()]
    if len(g_flat) != len(state.m):
        raise UsageError("Adam state does not match the parameter set")
    for g in g_flat:
        if not np.all(np.isfinite(g)):
            it = state.step if iteration is None else iteration
            raise DivergenceError("non-finite gradient", iteration=it)

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_m, new_v, new_params = [], [], []
    pos = 0
    for p in params:
        arrays = []
        for a in p.arrays():
            g = g_flat[pos]
            m = b1 * state.m[pos] + (1.0 - b1) * g
            v = b2 * state.v[pos] + (1.0 - b2) * (g * g)
            arrays.append(a - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
            new_m.append(m)
            new_v.append(v)
            pos += 1
        new_params.append(NetworkParams.from_arrays(p.layer_sizes, arrays))
    return new_params, AdamState(t, new_m, new_v, b1, b2, state.eps)

"""Small fully-connected networks with hand-written reverse mode.

Inputs may be a single vector ``(d,)`` or a batch ``(n, d)``; parameter
gradients from :func:`mlp_backward` are summed over the batch rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("sigmoid", "identity")
FORMAT_MAGIC = b"HPMLP"
FORMAT_VERSION = 1


@dataclass
class MlpParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"
    hidden_activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation != "relu":
            raise ValueError("only relu hidden activations are supported")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight/bias arrays does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expected}")

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_activation,
            self.hidden_activation,
        )

    def arrays(self) -> list[np.ndarray]:
        """Weights then biases, in the serialization order."""
        return [*self.weights, *self.biases]

    def same_architecture(self, other: "MlpParams") -> bool:
        return self.layer_sizes == other.layer_sizes and self.output_activation == other.output_activation

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def scaled(self, factor: float) -> "MlpGrads":
        return MlpGrads([w * factor for w in self.weights], [b * factor for b in self.biases])


def init_mlp(layer_sizes: Sequence[int], output_activation: str, rng: np.random.Generator) -> MlpParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(tuple(layer_sizes), weights, biases, output_activation)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input shape {x.shape} incompatible with input dim {params.layer_sizes[0]}")
    return xb, single


def _forward(params: MlpParams, xb: np.ndarray):
    """Return (output, activations) where activations[i] is the input of layer i."""
    acts = [xb]
    h = xb
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = _sigmoid(z) if params.output_activation == "sigmoid" else z
    return h, acts


@dataclass
class ForwardCache:
    """Output and layer inputs of a batched forward pass, reusable by :func:`mlp_backward`."""

    output: np.ndarray
    activations: list[np.ndarray]


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    xb, single = _as_batch(params, x)
    out, _ = _forward(params, xb)
    return out[0] if single else out


def mlp_forward_cached(params: MlpParams, x) -> ForwardCache:
    """Batched forward pass that keeps what the backward pass needs (2D input only)."""
    xb, single = _as_batch(params, x)
    if single:
        raise ShapeError("mlp_forward_cached expects a batch")
    return ForwardCache(*_forward(params, xb))


def mlp_backward(params: MlpParams, x, upstream, cache: ForwardCache | None = None) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns parameter gradients (summed over batch rows) and the gradient with
    respect to ``x`` (same shape as ``x``). ``cache`` must come from
    :func:`mlp_forward_cached` on the same parameters and input.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=float)
    g = g[None, :] if single and g.ndim == 1 else g
    if g.shape != (xb.shape[0], params.layer_sizes[-1]):
        raise ShapeError(f"upstream shape {np.shape(upstream)} does not match output shape")
    if cache is None:
        out, acts = _forward(params, xb)
    else:
        out, acts = cache.output, cache.activations
    if params.output_activation == "sigmoid":
        g = g * out * (1.0 - out)
    n_layers = len(params.weights)
    dw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        a_in = acts[i]
        dw[i] = g.T @ a_in
        db[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = g * (a_in > 0.0)
    return MlpGrads(dw, db), (g[0] if single else g)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, 0, learning_rate, **kwargs)


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One Adam descent step; returns fresh parameter and optimizer objects."""
    garrs = grads.arrays()
    parrs = params.arrays()
    if len(garrs) != len(parrs) or any(g.shape != p.shape for g, p in zip(garrs, parrs)):
        raise ShapeError("gradient shapes do not match parameters")
    n_layers = len(params.weights)
    for i, g in enumerate(garrs):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {i % n_layers}", layer=i % n_layers)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, p_new = [], [], []
    for p, g, m, v in zip(parrs, garrs, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p_new.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        m_new.append(m)
        v_new.append(v)
    new_params = MlpParams(
        params.layer_sizes, p_new[:n_layers], p_new[n_layers:], params.output_activation, params.hidden_activation
    )
    new_state = AdamState(m_new, v_new, t, state.learning_rate, b1, b2, state.epsilon)
    return new_params, new_state


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """Polyak averaging ``tau * online + (1 - tau) * target``."""
    if not target.same_architecture(online):
        raise ShapeError(f"architecture mismatch: {target.layer_sizes} vs {online.layer_sizes}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 1.0:
        return online.copy()
    if tau == 0.0:
        return target.copy()
    return MlpParams(
        target.layer_sizes,
        [tau * o + (1.0 - tau) * t for t, o in zip(target.weights, online.weights)],
        [tau * o + (1.0 - tau) * t for t, o in zip(target.biases, online.biases)],
        target.output_activation,
        target.hidden_activation,
    )


def params_to_bytes(params: MlpParams) -> bytes:
    """Versioned little-endian float64 layout: header, row-major weights, then biases."""
    sizes = params.layer_sizes
    header = FORMAT_MAGIC + struct.pack(
        "<IIB", FORMAT_VERSION, len(sizes), ACTIVATIONS.index(params.output_activation)
    )
    header += struct.pack(f"<{len(sizes)}I", *sizes)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    return header + body


def params_from_bytes(blob: bytes) -> MlpParams:
    if not blob.startswith(FORMAT_MAGIC):
        raise ValueError("not a serialized MlpParams blob")
    off = len(FORMAT_MAGIC)
    version, n_sizes, act = struct.unpack_from("<IIB", blob, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {version}")
    off += struct.calcsize("<IIB")
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, off)
    off += 4 * n_sizes
    flat = np.frombuffer(blob, dtype="<f8", offset=off)
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos: pos + fan_in * fan_out].reshape(fan_out, fan_in).astype(float))
        pos += fan_in * fan_out
    for fan_out in sizes[1:]:
        biases.append(flat[pos: pos + fan_out].astype(float))
        pos += fan_out
    if pos != flat.size:
        raise ValueError("trailing bytes in serialized parameters")
    return MlpParams(tuple(sizes), weights, biases, ACTIVATIONS[act])

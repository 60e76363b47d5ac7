"""Dense-network numeric core: layers, analytic backprop, Adam, gradient checking.

Everything operates on float64 numpy arrays. Inputs to ``forward`` may be a
single vector or a batch (rows are samples).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid", "softplus")

CHECKPOINT_MAGIC = b"PMUFNN\x00\x01"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class TrainingDivergenceError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator. Callers own it; nothing here touches global state."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, fan_in: int, fan_out: int, activation: str, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        return cls(w, np.zeros(fan_out), activation)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def build_stack(sizes: Sequence[int], activations: Sequence[str], rng) -> list[DenseLayer]:
    if len(activations) != len(sizes) - 1:
        raise DimensionError("need one activation per layer")
    return [
        DenseLayer.init(sizes[k], sizes[k + 1], activations[k], rng)
        for k in range(len(sizes) - 1)
    ]


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(kind)


def activation_slope(out: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation expressed through its output."""
    if kind == "linear":
        return np.ones_like(out)
    if kind == "relu":
        return (out > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "sigmoid":
        return out * (1.0 - out)
    if kind == "softplus":
        return -np.expm1(-out)
    raise ValueError(kind)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(layers: Sequence[DenseLayer], x: np.ndarray) -> list[np.ndarray]:
    """Run the stack and return ``[input, out_1, ..., out_L]``.

    The last entry is the network output. ``x`` may be 1-D (one sample) or
    2-D (batch x features).
    """
    x = np.asarray(x, dtype=np.float64)
    acts = [x]
    for k, layer in enumerate(layers):
        h = acts[-1]
        if h.shape[-1] != layer.fan_in:
            raise DimensionError(
                f"layer {k}: expected {layer.fan_in} inputs, got {h.shape[-1]}"
            )
        acts.append(activate(h @ layer.weights.T + layer.bias, layer.activation))
    return acts


def backward(layers: Sequence[DenseLayer], acts: Sequence[np.ndarray], grad_out: np.ndarray):
    """Backpropagate ``grad_out`` (dLoss/dOutput) through a stack.

    Returns ``(grads, grad_input)`` where ``grads[k] = (dW_k, db_k)``. For a
    batch, parameter gradients are summed over rows, so the caller's
    ``grad_out`` should already carry any 1/B factor.
    """
    if len(acts) != len(layers) + 1:
        raise DimensionError("activations do not match the layer stack")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise DimensionError(f"output gradient {g.shape} vs output {acts[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        delta = g * activation_slope(acts[k + 1], layer.activation)
        inp = acts[k]
        if delta.ndim == 1:
            dW = np.outer(delta, inp)
            db = delta.copy()
        else:
            dW = delta.T @ inp
            db = delta.sum(axis=0)
        grads[k] = (dW, db)
        g = delta @ layer.weights
    return grads, g


def parameters(layers: Sequence[DenseLayer]) -> list[np.ndarray]:
    out = []
    for layer in layers:
        out.extend((layer.weights, layer.bias))
    return out


def flatten_grads(grads) -> list[np.ndarray]:
    out = []
    for dW, db in grads:
        out.extend((dW, db))
    return out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def copy(self) -> "AdamState":
        return AdamState(
            [a.copy() for a in self.m], [a.copy() for a in self.v],
            self.step, self.beta1, self.beta2, self.eps,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_gradient(fn: Callable[[], float], param: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``fn`` with respect to every entry of ``param`` (perturbed in place)."""
    out = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = out.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = fn()
        flat[idx] = orig - h
        fm = fn()
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2.0 * h)
    return out


def grad_check(layers: Sequence[DenseLayer],
               loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               x: np.ndarray, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(output)`` must return ``(loss, dloss/doutput)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = parameters(layers)
    if not params:
        return 0.0
    acts = forward(layers, x)
    _, g_out = loss_fn(acts[-1])
    grads, _ = backward(layers, acts, g_out)
    analytic = flatten_grads(grads)

    def f():
        return loss_fn(forward(layers, x)[-1])[0]

    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numeric_gradient(f, p, h)
        worst = max(worst, relative_error(ga, gn, floor))
    return worst


# -- checkpoint container -------------------------------------------------

def _write_stack(buf: io.BytesIO, name: str, layers: Sequence[DenseLayer]) -> None:
    enc = name.encode()
    buf.write(struct.pack("<H", len(enc)))
    buf.write(enc)
    buf.write(struct.pack("<I", len(layers)))
    for layer in layers:
        act = layer.activation.encode()
        buf.write(struct.pack("<IIH", layer.fan_out, layer.fan_in, len(act)))
        buf.write(act)
        buf.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def _read_stack(buf: io.BytesIO) -> tuple[str, list[DenseLayer]]:
    (nlen,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, nlen).decode()
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    layers = []
    for _ in range(count):
        out, inp, alen = struct.unpack("<IIH", _read_exact(buf, 10))
        act = _read_exact(buf, alen).decode()
        w = np.frombuffer(_read_exact(buf, 8 * out * inp), dtype="<f8").reshape(out, inp)
        b = np.frombuffer(_read_exact(buf, 8 * out), dtype="<f8")
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), act))
    return name, layers


def dump_checkpoint(sections: dict[str, Sequence[DenseLayer]], meta: dict,
                    arrays: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize named layer stacks plus JSON metadata and loose float arrays.

    Layout: magic, u32 version, u32 meta length, meta JSON, u32 section count,
    sections, u32 array count, arrays. All floats little-endian float64.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    mj = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mj)))
    buf.write(mj)
    buf.write(struct.pack("<I", len(sections)))
    for name in sections:
        _write_stack(buf, name, sections[name])
    arrays = arrays or {}
    buf.write(struct.pack("<I", len(arrays)))
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8").reshape(-1)
        enc = name.encode()
        buf.write(struct.pack("<HI", len(enc), a.size))
        buf.write(enc)
        buf.write(a.tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes):
    """Inverse of :func:`dump_checkpoint`; returns ``(sections, meta, arrays)``."""
    buf = io.BytesIO(data)
    if _read_exact(buf, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a pmufusion checkpoint")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", _read_exact(buf, 4))
    meta = json.loads(_read_exact(buf, mlen).decode())
    (nsec,) = struct.unpack("<I", _read_exact(buf, 4))
    sections = {}
    for _ in range(nsec):
        name, layers = _read_stack(buf)
        sections[name] = layers
    (narr,) = struct.unpack("<I", _read_exact(buf, 4))
    arrays = {}
    for _ in range(narr):
        nlen, size = struct.unpack("<HI", _read_exact(buf, 6))
        name = _read_exact(buf, nlen).decode()
        arrays[name] = np.frombuffer(_read_exact(buf, 8 * size), dtype="<f8").astype(np.float64)
    return sections, meta, arrays

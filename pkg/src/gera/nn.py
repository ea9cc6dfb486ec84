"""Minimal differentiable blocks: dense layers, ReLU, point max-pooling,
a recording tape for reverse-mode gradients, and Adam.

The tape is deliberately restricted to the fixed registration graph (a
few MLP chains joined by pooling and concatenation); there is no general
autodiff. Everything runs in float64 so analytic gradients can be checked
against central finite differences at tight tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .io import FormatError

NET_MAGIC = b"GERANET"
NET_VERSION = 1


@dataclass(eq=False)  # identity semantics: layers are parameter holders
class DenseLayer:
    """Affine map y = x @ W.T + b."""

    weights: NDArray[np.float64]  # (out, in)
    biases: NDArray[np.float64]  # (out,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("layer parameters must be finite")
        self.weights = w
        self.biases = b

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]


def he_uniform_layer(in_width: int, out_width: int, rng: np.random.Generator) -> DenseLayer:
    """Fan-in scaled uniform init, biases at zero."""
    bound = np.sqrt(6.0 / in_width)
    return DenseLayer(
        weights=rng.uniform(-bound, bound, size=(out_width, in_width)),
        biases=np.zeros(out_width),
    )


class Tape:
    """Forward recording for one reverse pass; consumable exactly once."""

    def __init__(self):
        self.entries: list[tuple] = []
        self.consumed = False

    def backward(self, grad_output: NDArray[np.float64]):
        """Walk the recorded chain in reverse.

        Returns (input_gradient, {layer: (dW, db)}). Raises on reuse.
        """
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        self.consumed = True
        grad = np.asarray(grad_output, dtype=np.float64)
        param_grads: dict[int, tuple[DenseLayer, np.ndarray, np.ndarray]] = {}
        for entry in reversed(self.entries):
            kind = entry[0]
            if kind == "dense":
                _, layer, x = entry
                dw = grad.T @ x
                db = grad.sum(axis=0)
                if id(layer) in param_grads:
                    _, adw, adb = param_grads[id(layer)]
                    adw += dw
                    adb += db
                else:
                    param_grads[id(layer)] = (layer, dw, db)
                grad = grad @ layer.weights
            elif kind == "relu":
                grad = grad * entry[1]
            elif kind == "maxpool":
                _, argmax, n_rows = entry
                spread = np.zeros((n_rows, grad.shape[-1]))
                spread[argmax, np.arange(grad.shape[-1])] = grad
                grad = spread
            else:
                raise RuntimeError(f"unknown tape entry {kind!r}")
        return grad, {layer: (dw, db) for layer, dw, db in param_grads.values()}


def dense_forward(
    layer: DenseLayer, x: NDArray[np.float64], tape: Tape | None = None
) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_width:
        raise ValueError(f"input shape {x.shape} does not match layer in-width {layer.in_width}")
    if tape is not None:
        tape.entries.append(("dense", layer, x))
    return x @ layer.weights.T + layer.biases


def relu(x: NDArray[np.float64], tape: Tape | None = None) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    if tape is not None:
        tape.entries.append(("relu", x > 0))
    return np.maximum(x, 0.0)


def maxpool_points(features: NDArray[np.float64], tape: Tape | None = None) -> NDArray[np.float64]:
    """Columnwise max over point rows; gradient flows to the first argmax."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"expected a non-empty (M, f) array, got shape {features.shape}")
    if tape is not None:
        tape.entries.append(("maxpool", features.argmax(axis=0), features.shape[0]))
    return features.max(axis=0)


@dataclass
class Mlp:
    """Dense stack with ReLU between layers; the last layer is linear
    unless final_relu is set (encoders keep their final activation)."""

    layers: list[DenseLayer]
    final_relu: bool = False

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width


def mlp_init(widths: tuple[int, ...], rng: np.random.Generator, final_relu: bool = False) -> Mlp:
    if len(widths) < 2:
        raise ValueError(f"need at least input and output widths, got {widths}")
    layers = [
        he_uniform_layer(widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)
    ]
    return Mlp(layers=layers, final_relu=final_relu)


def mlp_forward(mlp: Mlp, x: NDArray[np.float64], tape: Tape | None = None) -> NDArray[np.float64]:
    h = x
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        h = dense_forward(layer, h, tape)
        if i < last or mlp.final_relu:
            h = relu(h, tape)
    return h


@dataclass
class AdamState:
    """Bias-corrected Adam moments for an ordered parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[NDArray[np.float64]] = field(default_factory=list)
    v: list[NDArray[np.float64]] = field(default_factory=list)


def adam_init(params: list[NDArray[np.float64]], lr: float) -> AdamState:
    return AdamState(
        lr=lr,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(
    params: list[NDArray[np.float64]],
    grads: list[NDArray[np.float64]],
    state: AdamState,
) -> tuple[list[NDArray[np.float64]], AdamState]:
    """Standard bias-corrected update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient, and state lengths differ")
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# Checkpoint: magic, u32 version, u32 encoder layer count, u32 decoder
# layer count, u32 (in, out) per layer, then per layer W row-major + b
# as little-endian float64.
_NET_HEADER = struct.Struct("<7sIII")


def save_network(path: str | Path, encoder: Mlp, decoder: Mlp) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _NET_HEADER.pack(
                NET_MAGIC, NET_VERSION, len(encoder.layers), len(decoder.layers)
            )
        )
        all_layers = encoder.layers + decoder.layers
        for layer in all_layers:
            fh.write(struct.pack("<II", layer.in_width, layer.out_width))
        for layer in all_layers:
            fh.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())


def load_network(path: str | Path) -> tuple[Mlp, Mlp]:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _NET_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, n_enc, n_dec = _NET_HEADER.unpack_from(raw)
    if magic != NET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != NET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = _NET_HEADER.size
    shapes = []
    for _ in range(n_enc + n_dec):
        if offset + 8 > len(raw):
            raise FormatError(f"{path}: truncated layer table")
        w_in, w_out = struct.unpack_from("<II", raw, offset)
        shapes.append((w_in, w_out))
        offset += 8
    layers = []
    for w_in, w_out in shapes:
        n_bytes = (w_in * w_out + w_out) * 8
        if offset + n_bytes > len(raw):
            raise FormatError(f"{path}: truncated parameter payload")
        w = np.frombuffer(raw, dtype="<f8", count=w_in * w_out, offset=offset)
        offset += w_in * w_out * 8
        b = np.frombuffer(raw, dtype="<f8", count=w_out, offset=offset)
        offset += w_out * 8
        layers.append(DenseLayer(weights=w.reshape(w_out, w_in).copy(), biases=b.copy()))
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return (
        Mlp(layers=layers[:n_enc], final_relu=True),
        Mlp(layers=layers[n_enc:], final_relu=False),
    )

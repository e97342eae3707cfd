"""Minimal deterministic differentiable-compute kernel.

Dense layers with analytic gradients, numerically stable softmax,
cross-entropy, and an SGD-momentum optimizer.  Everything is float64 and
seeded: desk-scale networks are tiny, so reproducibility and gradient
checks dominate speed.  There is no general autodiff graph; each layer
type has a hand-written backward pass.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DivergenceError,
    FormatError,
    InputShapeError,
    StaleTapeError,
    TruncationError,
    ValidationError,
)

ACTIVATIONS = ("tanh", "relu", "identity")

CHECKPOINT_MAGIC = b"LRETv1"
COMPONENT_TAGS = ("enc", "att", "clf", "met")


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ValidationError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise InputShapeError("layer expects a 2-d weight and 1-d bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise InputShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValidationError("layer parameters must be finite")


def flatten_arrays(arrays: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Copy arrays into one flat float64 buffer; return it plus shaped views."""
    flat = np.empty(sum(a.size for a in arrays))
    views = []
    off = 0
    for a in arrays:
        view = flat[off : off + a.size].reshape(a.shape)
        view[...] = a
        views.append(view)
        off += a.size
    return flat, views


class DenseNet:
    """Feed-forward stack of affine+activation layers.

    ``version`` counts in-place parameter mutations; forward tapes record
    it so a backward pass against a mutated net fails loudly instead of
    silently producing wrong gradients.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValidationError("DenseNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise InputShapeError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers
        self.version = 0
        self._flat: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def flatten(self) -> np.ndarray:
        """Repack all parameters as views into one flat buffer (idempotent).

        Updating the flat buffer in place updates the layers, so a single
        optimizer pass can cover the whole net.  Values are unchanged.
        """
        if self._flat is None:
            flat, views = flatten_arrays(self.params())
            for i, layer in enumerate(self.layers):
                layer.weight = views[2 * i]
                layer.bias = views[2 * i + 1]
            self._flat = flat
        return self._flat

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


@dataclass
class Tape:
    """Activation record from one forward pass."""

    net_id: int
    net_version: int
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    outputs: list[np.ndarray]
    squeezed: bool


@dataclass
class GradientBundle:
    """Per-parameter gradients mirroring a DenseNet, plus d(loss)/d(input)."""

    layer_grads: list[tuple[np.ndarray, np.ndarray]]
    dx: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for dw, db in self.layer_grads:
            out.append(dw)
            out.append(db)
        return out


def init_dense(
    dims: list[int], activations: list[str], rng: np.random.Generator
) -> DenseNet:
    """Glorot-uniform initialized net: dims = [in, h1, ..., out]."""
    if len(activations) != len(dims) - 1:
        raise ValidationError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


def forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate the net on a vector or a (rows = samples) matrix.

    Returns the output and a tape sufficient for ``backward``.
    """
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InputShapeError(
            f"input has {x.shape[-1] if x.ndim else 0} features, net expects {net.input_dim}"
        )
    pre: list[np.ndarray] = []
    outs: list[np.ndarray] = []
    a = x
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        a = _apply_activation(layer.activation, z)
        pre.append(z)
        outs.append(a)
    y = a[0] if squeezed else a
    return y, Tape(id(net), net.version, x, pre, outs, squeezed)


def backward(net: DenseNet, tape: Tape, upstream: np.ndarray) -> GradientBundle:
    """Backpropagate ``upstream`` = d(loss)/d(output) through the tape.

    Gradients are summed over the batch dimension.
    """
    if tape.net_id != id(net) or tape.net_version != net.version:
        raise StaleTapeError("tape does not match the net's current parameters")
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeezed:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise InputShapeError(
            f"upstream shape {g.shape} != output shape {tape.outputs[-1].shape}"
        )
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        act = layer.activation
        if act == "identity":
            dz = g
        elif act == "relu":
            dz = g * (tape.pre_activations[idx] > 0.0)
        else:  # tanh
            a = tape.outputs[idx]
            dz = g * (1.0 - a * a)
        prev = tape.inputs if idx == 0 else tape.outputs[idx - 1]
        layer_grads[idx] = (dz.T @ prev, dz.sum(axis=0))
        g = dz @ layer.weight
    dx = g[0] if tape.squeezed else g
    return GradientBundle(layer_grads, dx)


@dataclass
class OptimizerState:
    """SGD-momentum state over an ordered parameter list."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)
    _scratch: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValidationError("optimizer hyperparameters must be nonnegative")

    def ensure_velocity(self, params: list[np.ndarray]) -> None:
        if not self.velocity:
            self.velocity = [np.zeros_like(p) for p in params]
        if len(self.velocity) != len(params) or any(
            v.shape != p.shape for v, p in zip(self.velocity, params)
        ):
            raise InputShapeError("velocity shapes do not match the parameter set")
        if len(self._scratch) != len(params):
            self._scratch = [np.empty_like(p) for p in params]


def sgd_momentum_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState
) -> tuple[list[np.ndarray], OptimizerState]:
    """In-place coupled-L2 SGD-momentum update.

    v <- momentum * v - lr * (g + weight_decay * theta); theta <- theta + v.
    Weight decay is added into the gradient (classical formulation), not
    decoupled from the momentum buffer.
    """
    if len(params) != len(grads):
        raise InputShapeError("params and grads differ in length")
    state.ensure_velocity(params)
    lr = state.learning_rate
    wd = state.weight_decay
    for p, g, v, buf in zip(params, grads, state.velocity, state._scratch):
        if p.shape != g.shape:
            raise InputShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        # a non-finite entry makes the sum non-finite; cheaper than isfinite().all()
        if not math.isfinite(float(g.sum())):
            raise DivergenceError("non-finite gradient in optimizer step")
        v *= state.momentum
        if wd != 0.0:
            np.multiply(p, lr * wd, out=buf)
            v -= buf
        np.multiply(g, lr, out=buf)
        v -= buf
        p += v
    return params, state


def softmax_stable(scores: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax over a nonempty 1-d score vector."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValidationError("softmax expects a nonempty 1-d vector")
    if not np.isfinite(s).all():
        raise ValidationError("softmax scores must be finite")
    e = np.exp(s - s.max())
    return e / e.sum()


def cross_entropy(
    probs: np.ndarray, onehot: np.ndarray, clamp: float = 1e-12
) -> tuple[float, np.ndarray]:
    """Cross-entropy of a probability vector against a one-hot target.

    Returns (loss, gradient w.r.t. the pre-softmax scores), the latter
    being probs - onehot.  The log is clamped at ``clamp`` to avoid -inf
    on saturated predictions.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise InputShapeError("probs and onehot must be 1-d vectors of equal length")
    loss = float(-(y * np.log(np.maximum(p, clamp))).sum())
    return loss, p - y


# --- parameter checkpoint file -------------------------------------------
#
# Layout (see docs/FORMATS.md):
#   magic  b"LRETv1\n"
#   header uint32 little-endian byte length, then UTF-8 JSON:
#          {"scale": ..., "component": ..., "arrays": [{"name", "shape"}...],
#           "meta": {...}}
#   data   for each array in header order: row-major float64 little-endian


def save_checkpoint(
    path,
    scale: str,
    component: str,
    arrays: list[tuple[str, np.ndarray]],
    meta: dict | None = None,
) -> None:
    if component not in COMPONENT_TAGS:
        raise ValidationError(f"component tag must be one of {COMPONENT_TAGS}")
    header = {
        "scale": scale,
        "component": component,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[str, str, list[tuple[str, np.ndarray]], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    prefix = CHECKPOINT_MAGIC + b"\n"
    if not data.startswith(prefix):
        raise FormatError(f"{path}: not a parameter checkpoint")
    off = len(prefix)
    if len(data) < off + 4:
        raise TruncationError(f"{path}: missing header length")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + hlen:
        raise TruncationError(f"{path}: truncated header")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    off += hlen
    component = header.get("component")
    if component not in COMPONENT_TAGS:
        raise FormatError(f"{path}: bad component tag {component!r}")
    arrays: list[tuple[str, np.ndarray]] = []
    for spec in header["arrays"]:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(data) < off + nbytes:
            raise TruncationError(f"{path}: truncated array {spec['name']!r}")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(shape)
        arrays.append((spec["name"], arr.astype(np.float64)))
        off += nbytes
    return header.get("scale", ""), component, arrays, header.get("meta", {})


def dense_net_arrays(net: DenseNet) -> tuple[list[tuple[str, np.ndarray]], dict]:
    arrays = []
    for i, layer in enumerate(net.layers):
        arrays.append((f"layer{i}/weight", layer.weight))
        arrays.append((f"layer{i}/bias", layer.bias))
    meta = {"activations": [l.activation for l in net.layers]}
    return arrays, meta


def dense_net_from_arrays(
    arrays: list[tuple[str, np.ndarray]], meta: dict
) -> DenseNet:
    activations = meta["activations"]
    by_name = dict(arrays)
    layers = []
    for i, act in enumerate(activations):
        layers.append(
            Layer(by_name[f"layer{i}/weight"], by_name[f"layer{i}/bias"], act)
        )
    return DenseNet(layers)


def params_fingerprint(param_lists: list[list[np.ndarray]]) -> str:
    """Stable hex digest of parameter values and shapes (model identity)."""
    crc = 0
    for params in param_lists:
        for p in params:
            crc = zlib.crc32(repr(p.shape).encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p, dtype="<f8").tobytes(), crc)
    return f"{crc:08x}"

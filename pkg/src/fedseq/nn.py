"""Minimal dense/convolutional network engine with manual backprop.

All parameters of a model live in one flat float64 vector accompanied by
a layout that says which slice belongs to which layer and whether that
layer is part of the feature extractor or of the classifier head. The
split is what lets the distribution approximators read classifier
weights without knowing the architecture.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import SeedKey, stream, PHASE_INIT

FEATURE = "feature"
CLASSIFIER = "classifier"

MODE_ALL = "all"
MODE_LAST2 = "last2"
MODE_LAST = "last"


class ShapeError(ValueError):
    """Parameters or inputs disagree with the model spec."""

    def __init__(self, layer: str, message: str):
        self.layer = layer
        super().__init__(f"layer {layer!r}: {message}")


class NonFiniteError(ArithmeticError):
    """Forward pass produced inf/nan activations."""

    def __init__(self, layer_index: int):
        self.layer_index = layer_index
        super().__init__(f"non-finite activations at layer index {layer_index}")


@dataclass(frozen=True)
class LayerLayout:
    name: str
    role: str
    offset: int
    length: int


@dataclass
class ParamVector:
    """Flat parameter vector plus its per-layer layout."""

    values: np.ndarray
    layout: tuple[LayerLayout, ...]

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        self.layout = tuple(self.layout)
        expected = 0
        for entry in self.layout:
            if entry.role not in (FEATURE, CLASSIFIER):
                raise ValueError(f"unknown role {entry.role!r} in layer {entry.name!r}")
            if entry.offset != expected:
                raise ValueError(
                    f"layout not contiguous at layer {entry.name!r}: "
                    f"offset {entry.offset}, expected {expected}"
                )
            expected += entry.length
        if expected != self.values.size:
            raise ValueError(
                f"layout covers {expected} values but vector has {self.values.size}"
            )
        if not any(e.role == CLASSIFIER for e in self.layout):
            raise ValueError("layout needs at least one classifier layer")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def layer_values(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset : entry.offset + entry.length]
        raise KeyError(name)

    def classifier_entries(self) -> tuple[LayerLayout, ...]:
        return tuple(e for e in self.layout if e.role == CLASSIFIER)

    # -- checkpoint format: layout header, then raw little-endian float64 --

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<I", len(self.layout))]
        for entry in self.layout:
            name = entry.name.encode("utf-8")
            role = 1 if entry.role == CLASSIFIER else 0
            parts.append(struct.pack("<I", len(name)))
            parts.append(name)
            parts.append(struct.pack("<BII", role, entry.offset, entry.length))
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @staticmethod
    def from_bytes(raw: bytes) -> "ParamVector":
        pos = 0
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        layout = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            role, offset, length = struct.unpack_from("<BII", raw, pos)
            pos += 9
            layout.append(
                LayerLayout(name, CLASSIFIER if role else FEATURE, offset, length)
            )
        values = np.frombuffer(raw[pos:], dtype="<f8").astype(np.float64)
        return ParamVector(values, tuple(layout))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def load(path) -> "ParamVector":
        with open(path, "rb") as fh:
            return ParamVector.from_bytes(fh.read())


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``kind`` is either ``mlp`` (dense layers only) or ``small-cnn``
    (3x3-conv/relu/avgpool blocks in front of the dense head, which
    needs ``image_shape`` as channels/height/width). ``hidden`` lists
    dense hidden widths. ``classifier_layers`` says how many trailing
    dense layers carry the classifier role; by default all of them for
    the cnn (conv stack is the feature extractor) and up to two for the
    mlp.
    """

    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int
    kind: str = "mlp"
    image_shape: tuple[int, int, int] | None = None
    conv_channels: tuple[int, ...] = (8, 16)
    classifier_layers: int | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind not in ("mlp", "small-cnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "small-cnn":
            if self.image_shape is None:
                raise ValueError("small-cnn needs image_shape=(C, H, W)")
            c, h, w = self.image_shape
            if c * h * w != self.input_dim:
                raise ValueError("image_shape does not multiply out to input_dim")
            factor = 2 ** len(self.conv_channels)
            if h % factor or w % factor:
                raise ValueError("image sides must be divisible by 2 per conv block")

    def dense_dims(self) -> tuple[int, ...]:
        if self.kind == "mlp":
            first = self.input_dim
        else:
            c, h, w = self.image_shape  # type: ignore[misc]
            factor = 2 ** len(self.conv_channels)
            first = self.conv_channels[-1] * (h // factor) * (w // factor)
        return (first, *self.hidden, self.num_classes)

    def num_dense(self) -> int:
        return len(self.hidden) + 1

    def resolved_classifier_layers(self) -> int:
        n = self.classifier_layers
        if n is None:
            n = self.num_dense() if self.kind == "small-cnn" else min(2, self.num_dense())
        if not 1 <= n <= self.num_dense():
            raise ValueError("classifier_layers out of range")
        return n

    def layout(self) -> tuple[LayerLayout, ...]:
        entries: list[LayerLayout] = []
        offset = 0
        if self.kind == "small-cnn":
            cin = self.image_shape[0]  # type: ignore[index]
            for i, cout in enumerate(self.conv_channels):
                length = cout * cin * 9 + cout
                entries.append(LayerLayout(f"conv{i + 1}", FEATURE, offset, length))
                offset += length
                cin = cout
        dims = self.dense_dims()
        n_dense = self.num_dense()
        n_clf = self.resolved_classifier_layers()
        for i in range(n_dense):
            length = dims[i] * dims[i + 1] + dims[i + 1]
            role = CLASSIFIER if i >= n_dense - n_clf else FEATURE
            entries.append(LayerLayout(f"fc{i + 1}", role, offset, length))
            offset += length
        return tuple(entries)

    def param_count(self) -> int:
        layout = self.layout()
        return layout[-1].offset + layout[-1].length


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "inputs", np.ascontiguousarray(self.inputs, dtype=np.float64)
        )
        object.__setattr__(
            self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64)
        )
        if self.inputs.ndim != 2:
            raise ValueError("batch inputs must be 2-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on batch size")
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must hold at least one sample")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class OptimizerState:
    """SGD state: velocity buffer plus hyperparameters."""

    velocity: np.ndarray
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    @staticmethod
    def fresh(params: ParamVector, lr: float, momentum: float = 0.0,
              weight_decay: float = 0.0) -> "OptimizerState":
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        return OptimizerState(np.zeros_like(params.values), lr, momentum, weight_decay)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def init_params(spec: ModelSpec, seed: SeedKey) -> ParamVector:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    rng = stream(seed, PHASE_INIT)
    layout = spec.layout()
    values = np.empty(spec.param_count(), dtype=np.float64)
    fan_ins = _fan_ins(spec)
    for entry, fan_in in zip(layout, fan_ins):
        bound = 1.0 / math.sqrt(fan_in)
        values[entry.offset : entry.offset + entry.length] = rng.uniform(
            -bound, bound, entry.length
        )
    return ParamVector(values, layout)


def _fan_ins(spec: ModelSpec) -> list[int]:
    fans: list[int] = []
    if spec.kind == "small-cnn":
        cin = spec.image_shape[0]  # type: ignore[index]
        for cout in spec.conv_channels:
            fans.append(cin * 9)
            cin = cout
    dims = spec.dense_dims()
    fans.extend(dims[i] for i in range(spec.num_dense()))
    return fans


def _check_layout(params: ParamVector, spec: ModelSpec) -> None:
    expected = spec.layout()
    if params.layout == expected:
        return
    for got, want in zip(params.layout, expected):
        if got != want:
            raise ShapeError(want.name, f"expected {want}, got {got}")
    raise ShapeError(
        expected[-1].name,
        f"layout has {len(params.layout)} layers, spec wants {len(expected)}",
    )


def _dense_views(params: ParamVector, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    dims = spec.dense_dims()
    views = []
    dense_entries = [e for e in params.layout if e.name.startswith("fc")]
    for i, entry in enumerate(dense_entries):
        d_in, d_out = dims[i], dims[i + 1]
        chunk = params.values[entry.offset : entry.offset + entry.length]
        views.append((chunk[: d_in * d_out].reshape(d_in, d_out), chunk[d_in * d_out :]))
    return views


def _conv_views(params: ParamVector, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    views = []
    cin = spec.image_shape[0]  # type: ignore[index]
    conv_entries = [e for e in params.layout if e.name.startswith("conv")]
    for entry, cout in zip(conv_entries, spec.conv_channels):
        chunk = params.values[entry.offset : entry.offset + entry.length]
        views.append((chunk[: cout * cin * 9].reshape(cout, cin, 9), chunk[cout * cin * 9 :]))
        cin = cout
    return views


def _im2col3(x: np.ndarray) -> np.ndarray:
    """3x3 neighborhoods with zero padding 1, stride 1: (B,C,9,H,W)."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
            k += 1
    return cols


def _col2im3(dcols: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c = dcols.shape[0], dcols.shape[1]
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, k]
            k += 1
    return dxp[:, :, 1 : 1 + h, 1 : 1 + w]


def _forward(params: ParamVector, spec: ModelSpec, inputs: np.ndarray,
             keep: bool) -> tuple[np.ndarray, list]:
    """Shared forward pass; caches intermediates when ``keep`` is set."""
    if inputs.shape[1] != spec.input_dim:
        raise ShapeError("input", f"got width {inputs.shape[1]}, spec wants {spec.input_dim}")
    caches: list = []
    layer_idx = 0
    h = inputs
    if spec.kind == "small-cnn":
        c, hh, ww = spec.image_shape  # type: ignore[misc]
        x = h.reshape(-1, c, hh, ww)
        for kernel, bias in _conv_views(params, spec):
            cols = _im2col3(x)
            z = np.einsum("bckij,ock->boij", cols, kernel) + bias[None, :, None, None]
            if not np.isfinite(z).all():
                raise NonFiniteError(layer_idx)
            relu_mask = z > 0
            a = z * relu_mask
            bsz, co, ph, pw = a.shape
            pooled = a.reshape(bsz, co, ph // 2, 2, pw // 2, 2).mean(axis=(3, 5))
            if keep:
                caches.append(("conv", cols, relu_mask, a.shape))
            x = pooled
            layer_idx += 1
        h = x.reshape(x.shape[0], -1)
        if keep:
            caches.append(("flatten", x.shape))
    dense = _dense_views(params, spec)
    for i, (w, b) in enumerate(dense):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"fc{i + 1}", f"input width {h.shape[1]} vs weight rows {w.shape[0]}")
        z = h @ w + b
        if not np.isfinite(z).all():
            raise NonFiniteError(layer_idx)
        last = i == len(dense) - 1
        if keep:
            caches.append(("dense", h, None if last else (z > 0)))
        h = z if last else z * (z > 0)
        layer_idx += 1
    return h, caches


def forward(params: ParamVector, spec: ModelSpec, batch: Batch) -> np.ndarray:
    """Logits, shape (batch, num_classes)."""
    _check_layout(params, spec)
    logits, _ = _forward(params, spec, batch.inputs, keep=False)
    return logits


def loss_and_grad(params: ParamVector, spec: ModelSpec, batch: Batch) -> tuple[float, ParamVector]:
    """Mean cross-entropy over the batch and its gradient."""
    _check_layout(params, spec)
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError("labels out of range")
    logits, caches = _forward(params, spec, batch.inputs, keep=True)
    n = len(batch)
    probs = softmax(logits)
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-300).mean())

    grad = np.zeros_like(params.values)
    dense_entries = [e for e in params.layout if e.name.startswith("fc")]
    conv_entries = [e for e in params.layout if e.name.startswith("conv")]

    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    # dense stack, deepest first
    dense_caches = [c for c in caches if c[0] == "dense"]
    for i in range(len(dense_caches) - 1, -1, -1):
        _, h_in, relu_mask = dense_caches[i]
        entry = dense_entries[i]
        d_in = h_in.shape[1]
        gw = h_in.T @ delta
        gb = delta.sum(axis=0)
        grad[entry.offset : entry.offset + gw.size] = gw.ravel()
        grad[entry.offset + gw.size : entry.offset + entry.length] = gb
        if i > 0 or conv_entries:
            w = params.values[entry.offset : entry.offset + gw.size].reshape(d_in, -1)
            delta = delta @ w.T
            if i > 0:
                delta = delta * dense_caches[i - 1][2]

    if conv_entries:
        flat_shape = next(c[1] for c in caches if c[0] == "flatten")
        dx = delta.reshape(flat_shape)
        conv_caches = [c for c in caches if c[0] == "conv"]
        kernels = _conv_views(params, spec)
        for i in range(len(conv_caches) - 1, -1, -1):
            _, cols, relu_mask, a_shape = conv_caches[i]
            bsz, co, ph, pw = a_shape
            # avgpool backward: spread evenly over the 2x2 window
            da = np.repeat(np.repeat(dx, 2, axis=2), 2, axis=3) / 4.0
            dz = da * relu_mask
            kernel, _bias = kernels[i]
            entry = conv_entries[i]
            gk = np.einsum("boij,bckij->ock", dz, cols)
            gb = dz.sum(axis=(0, 2, 3))
            grad[entry.offset : entry.offset + gk.size] = gk.ravel()
            grad[entry.offset + gk.size : entry.offset + entry.length] = gb
            if i > 0:
                dcols = np.einsum("boij,ock->bckij", dz, kernel)
                dx = _col2im3(dcols, ph, pw)
    return loss, ParamVector(grad, params.layout)


def sgd_step(params: ParamVector, grad: ParamVector, opt: OptimizerState) -> ParamVector:
    """v <- m*v + (g + wd*theta); theta <- theta - lr*v. Mutates opt."""
    if grad.values.shape != params.values.shape:
        raise ValueError("gradient and parameters disagree on length")
    if opt.velocity.shape != params.values.shape:
        raise ValueError("optimizer buffer and parameters disagree on length")
    effective = grad.values + opt.weight_decay * params.values
    opt.velocity = opt.momentum * opt.velocity + effective
    return ParamVector(params.values - opt.lr * opt.velocity, params.layout)


def cosine_annealing_lr(t: int, horizon: int, base_lr: float) -> float:
    """0.5 * base * (1 + cos(pi*t/T)); base at t=0, zero at t=T."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if t < 0 or t > horizon:
        raise ValueError(f"round {t} outside [0, {horizon}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / horizon))


def extract_classifier(params: ParamVector, mode: str = MODE_ALL) -> np.ndarray:
    """Concatenated values of the selected classifier layers, deepest last."""
    entries = params.classifier_entries()
    if mode == MODE_ALL:
        chosen = entries
    elif mode == MODE_LAST:
        chosen = entries[-1:]
    elif mode == MODE_LAST2:
        if len(entries) < 2:
            raise ValueError("mode 'last2' needs at least two classifier layers")
        chosen = entries[-2:]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.concatenate(
        [params.values[e.offset : e.offset + e.length] for e in chosen]
    )

"""Minimal dense-tensor layer engine with reverse-mode gradients.

Layers operate on NHWC float32 arrays and support a fixed vocabulary:
2-D convolution (stride 1, same padding), dense, batch normalization,
2x2 max pooling, dropout, ReLU/ELU activations, and a softmax
cross-entropy head. Every layer exposes ``forward`` returning the output
plus an explicit cache, and ``backward`` consuming that cache, so a model
in eval mode stays immutable and gradient passes are reentrant. Gradients
are available with respect to parameters and with respect to the input,
which is what gradient-based attacks consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Mode = Literal["train", "eval"]


class ShapeMismatchError(ValueError):
    """Input shape incompatible with a layer; names the layer and shapes."""

    def __init__(self, layer_index: int, layer_name: str, expected, actual):
        self.layer_index = layer_index
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"layer {layer_index} ({layer_name}): expected input shape "
            f"{self.expected}, got {self.actual}"
        )


# ---------------------------------------------------------------------------
# Layer kinds (architecture description, no state)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    kh: int
    kw: int
    out_channels: int
    l2: float = 1e-4

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1 or self.out_channels < 1:
            raise ValueError("conv kernel dims and channel count must be positive")


@dataclass(frozen=True)
class Dense:
    out_dim: int

    def __post_init__(self):
        if self.out_dim < 1:
            raise ValueError("dense output dim must be positive")


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.99
    eps: float = 1e-5


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class Activation:
    fn: Literal["relu", "elu"]

    def __post_init__(self):
        if self.fn not in ("relu", "elu"):
            raise ValueError(f"unknown activation {self.fn!r}")


LayerKind = Conv2D | Dense | BatchNorm | MaxPool2x2 | Dropout | Activation

_KIND_TAGS = {
    Conv2D: "conv2d",
    Dense: "dense",
    BatchNorm: "batchnorm",
    MaxPool2x2: "maxpool2x2",
    Dropout: "dropout",
    Activation: "activation",
}


def kind_to_dict(kind: LayerKind) -> dict:
    d = {"kind": _KIND_TAGS[type(kind)]}
    if isinstance(kind, Conv2D):
        d.update(kh=kind.kh, kw=kind.kw, out_channels=kind.out_channels, l2=kind.l2)
    elif isinstance(kind, Dense):
        d.update(out_dim=kind.out_dim)
    elif isinstance(kind, BatchNorm):
        d.update(momentum=kind.momentum, eps=kind.eps)
    elif isinstance(kind, Dropout):
        d.update(rate=kind.rate)
    elif isinstance(kind, Activation):
        d.update(fn=kind.fn)
    return d


def kind_from_dict(d: dict) -> LayerKind:
    tag = d.get("kind")
    if tag == "conv2d":
        return Conv2D(d["kh"], d["kw"], d["out_channels"], d.get("l2", 1e-4))
    if tag == "dense":
        return Dense(d["out_dim"])
    if tag == "batchnorm":
        return BatchNorm(d.get("momentum", 0.99), d.get("eps", 1e-5))
    if tag == "maxpool2x2":
        return MaxPool2x2()
    if tag == "dropout":
        return Dropout(d["rate"])
    if tag == "activation":
        return Activation(d["fn"])
    raise ValueError(f"unknown layer kind tag {tag!r}")


# ---------------------------------------------------------------------------
# Layer implementations
# ---------------------------------------------------------------------------


def _he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class ConvLayer:
    """Stride-1 cross-correlation with same padding. Kernel layout (kh,kw,inC,outC)."""

    def __init__(self, kind: Conv2D, in_shape, rng: np.random.Generator):
        h, w, c = in_shape
        self.kind = kind
        self.kernel = _he_uniform(rng, kind.kh * kind.kw * c, (kind.kh, kind.kw, c, kind.out_channels))
        self.bias = np.zeros(kind.out_channels, dtype=np.float32)
        self.in_shape = (h, w, c)
        self.out_shape = (h, w, kind.out_channels)
        # same padding for stride 1: total pad = k - 1, extra row/col goes after
        self.pads = ((kind.kh - 1) // 2, kind.kh // 2, (kind.kw - 1) // 2, kind.kw // 2)

    def tensors(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def trainable(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def forward(self, x, mode: Mode, rng):
        pt, pb, pl, pr = self.pads
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        win = _windows(xp, self.kind.kh, self.kind.kw)
        y = np.tensordot(win, self.kernel.astype(x.dtype), axes=([3, 4, 5], [0, 1, 2]))
        y += self.bias.astype(x.dtype)
        return y, {"win": win, "x_shape": x.shape}

    def backward(self, dy, cache, with_param_grads=True):
        kh, kw = self.kind.kh, self.kind.kw
        grads = None
        if with_param_grads:
            dk = np.tensordot(cache["win"], dy, axes=([0, 1, 2], [0, 1, 2]))
            # L2 kernel regularizer contributes to the training loss and its gradient
            dk = dk + 2.0 * self.kind.l2 * self.kernel.astype(dy.dtype)
            grads = {"kernel": dk, "bias": dy.sum(axis=(0, 1, 2))}
        pt, pb, pl, pr = self.pads
        dyp = np.pad(dy, ((0, 0), (kh - 1 - pt, kh - 1 - pb), (kw - 1 - pl, kw - 1 - pr), (0, 0)))
        kflip = self.kernel[::-1, ::-1].astype(dy.dtype)  # (kh,kw,inC,outC) flipped spatially
        dwin = _windows(dyp, kh, kw)
        dx = np.tensordot(dwin, kflip, axes=([3, 4, 5], [0, 1, 3]))
        return dx, grads

    def reg_loss(self):
        return self.kind.l2 * float(np.sum(self.kernel.astype(np.float64) ** 2))


def _windows(x, kh, kw):
    """Sliding (kh,kw) windows of an NHWC array: (N, H', W', kh, kw, C) view."""
    n, h, w, c = x.shape
    sn, sh, sw, sc = x.strides
    shape = (n, h - kh + 1, w - kw + 1, kh, kw, c)
    strides = (sn, sh, sw, sh, sw, sc)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides, writeable=False)


class DenseLayer:
    """Affine map on flattened features."""

    def __init__(self, kind: Dense, in_shape, rng: np.random.Generator):
        self.kind = kind
        self.in_shape = tuple(in_shape)
        in_dim = int(np.prod(in_shape))
        self.weight = _he_uniform(rng, in_dim, (in_dim, kind.out_dim))
        self.bias = np.zeros(kind.out_dim, dtype=np.float32)
        self.out_shape = (kind.out_dim,)

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}

    trainable = tensors

    def forward(self, x, mode: Mode, rng):
        flat = x.reshape(x.shape[0], -1)
        y = flat @ self.weight.astype(x.dtype) + self.bias.astype(x.dtype)
        return y, {"flat": flat, "x_shape": x.shape}

    def backward(self, dy, cache, with_param_grads=True):
        grads = None
        if with_param_grads:
            grads = {"weight": cache["flat"].T @ dy, "bias": dy.sum(axis=0)}
        dx = (dy @ self.weight.T.astype(dy.dtype)).reshape(cache["x_shape"])
        return dx, grads

    def reg_loss(self):
        return 0.0


class BatchNormLayer:
    """Per-feature normalization; running stats via exponential moving average."""

    def __init__(self, kind: BatchNorm, in_shape, rng: np.random.Generator):
        self.kind = kind
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(in_shape)
        nfeat = in_shape[-1]
        self.gamma = np.ones(nfeat, dtype=np.float32)
        self.beta = np.zeros(nfeat, dtype=np.float32)
        self.running_mean = np.zeros(nfeat, dtype=np.float32)
        self.running_var = np.ones(nfeat, dtype=np.float32)

    def tensors(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def trainable(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, mode: Mode, rng):
        axes = tuple(range(x.ndim - 1))
        if mode == "train":
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.kind.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(np.float32)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(np.float32)
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.kind.eps)
        xhat = (x - mean) * inv_std
        y = self.gamma.astype(x.dtype) * xhat + self.beta.astype(x.dtype)
        return y, {"xhat": xhat, "inv_std": inv_std, "mode": mode, "axes": axes}

    def backward(self, dy, cache, with_param_grads=True):
        xhat, inv_std, axes = cache["xhat"], cache["inv_std"], cache["axes"]
        grads = None
        if with_param_grads:
            grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        g = self.gamma.astype(dy.dtype)
        if cache["mode"] == "eval":
            return dy * g * inv_std, grads
        # train mode: batch statistics depend on x
        cnt = np.prod([dy.shape[a] for a in axes])
        dxhat = dy * g
        dx = inv_std / cnt * (
            cnt * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, grads

    def reg_loss(self):
        return 0.0


class MaxPoolLayer:
    """2x2 max pooling, stride 2. Ties route gradient to the first (row-major) max."""

    def __init__(self, kind: MaxPool2x2, in_shape, rng: np.random.Generator):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool2x2 needs even spatial dims, got {(h, w)}")
        self.kind = kind
        self.in_shape = (h, w, c)
        self.out_shape = (h // 2, w // 2, c)

    def tensors(self):
        return {}

    trainable = tensors

    def forward(self, x, mode: Mode, rng):
        n, h, w, c = x.shape
        win = (
            x.reshape(n, h // 2, 2, w // 2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, h // 2, w // 2, c, 4)
        )
        idx = np.argmax(win, axis=-1)  # first max in row-major window order
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, {"idx": idx, "x_shape": x.shape}

    def backward(self, dy, cache, with_param_grads=True):
        n, h, w, c = cache["x_shape"]
        dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, cache["idx"][..., None], dy[..., None], axis=-1)
        dx = (
            dwin.reshape(n, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, h, w, c)
        )
        return dx, None

    def reg_loss(self):
        return 0.0


class DropoutLayer:
    """Inverted dropout; identity in eval mode. Mask comes from the pass rng."""

    def __init__(self, kind: Dropout, in_shape, rng: np.random.Generator):
        self.kind = kind
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(in_shape)

    def tensors(self):
        return {}

    trainable = tensors

    def forward(self, x, mode: Mode, rng):
        if mode == "eval" or self.kind.rate == 0.0:
            return x, {"mask": None}
        if rng is None:
            raise ValueError("train-mode dropout requires a pass rng")
        keep = 1.0 - self.kind.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask, {"mask": mask}

    def backward(self, dy, cache, with_param_grads=True):
        if cache["mask"] is None:
            return dy, None
        return dy * cache["mask"], None

    def reg_loss(self):
        return 0.0


class ActivationLayer:
    def __init__(self, kind: Activation, in_shape, rng: np.random.Generator):
        self.kind = kind
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(in_shape)

    def tensors(self):
        return {}

    trainable = tensors

    def forward(self, x, mode: Mode, rng):
        if self.kind.fn == "relu":
            return np.maximum(x, 0), {"x": x}
        y = np.where(x > 0, x, np.expm1(x))
        return y, {"x": x}

    def backward(self, dy, cache, with_param_grads=True):
        x = cache["x"]
        if self.kind.fn == "relu":
            return dy * (x > 0), None
        return dy * np.where(x > 0, np.ones_like(x), np.exp(x)), None

    def reg_loss(self):
        return 0.0


_IMPLS = {
    Conv2D: ConvLayer,
    Dense: DenseLayer,
    BatchNorm: BatchNormLayer,
    MaxPool2x2: MaxPoolLayer,
    Dropout: DropoutLayer,
    Activation: ActivationLayer,
}


def build_layer(kind: LayerKind, in_shape, rng: np.random.Generator):
    return _IMPLS[type(kind)](kind, in_shape, rng)


# ---------------------------------------------------------------------------
# Network: an ordered layer stack ending in logits
# ---------------------------------------------------------------------------


@dataclass
class PassRecord:
    """Recorded intermediates of one forward pass; consumed by backward."""

    mode: Mode
    logits: np.ndarray
    caches: list = field(repr=False, default_factory=list)
    input_shape: tuple = ()


class Network:
    """Layer stack mapping an NHWC image batch to logits."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)

    def forward(self, x: np.ndarray, mode: Mode = "eval", rng=None) -> PassRecord:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(-1, "input", ("N",) + self.input_shape, x.shape)
        caches = []
        out = x
        for i, layer in enumerate(self.layers):
            if tuple(out.shape[1:]) != layer.in_shape:
                raise ShapeMismatchError(
                    i, type(layer).__name__, ("N",) + layer.in_shape, out.shape
                )
            out, cache = layer.forward(out, mode, rng)
            caches.append(cache)
        return PassRecord(mode=mode, logits=out, caches=caches, input_shape=x.shape)

    def backward(self, record: PassRecord, dlogits: np.ndarray, with_param_grads=True):
        """Backprop an upstream gradient on the logits.

        Returns (param_grads, input_grad); param_grads is a per-layer list of
        dicts (None for parameterless layers), including the L2 kernel
        regularizer term on conv kernels when param grads are requested.
        """
        if len(record.caches) != len(self.layers):
            raise ValueError("pass record does not match this network")
        if dlogits.shape != record.logits.shape:
            raise ValueError(
                f"dlogits shape {dlogits.shape} != logits shape {record.logits.shape}"
            )
        grads = [None] * len(self.layers)
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(d, record.caches[i], with_param_grads)
            grads[i] = g
        return grads, d

    def reg_loss(self) -> float:
        return float(sum(layer.reg_loss() for layer in self.layers))

    def loss_pass(self, x, labels, mode: Mode = "train", rng=None, include_reg=True):
        """Forward + mean softmax cross-entropy (+ kernel regularizer)."""
        record = self.forward(x, mode, rng)
        loss = cross_entropy(record.logits, labels)
        if include_reg:
            loss += self.reg_loss()
        return loss, record

    def loss_grads(self, record: PassRecord, labels, with_param_grads=True):
        """Gradients of the scalar loss of ``loss_pass`` wrt params and input."""
        dlogits = cross_entropy_dlogits(record.logits, labels)
        return self.backward(record, dlogits, with_param_grads)

    def tensors(self):
        """(name, array) pairs for every state tensor, in layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.tensors().items():
                out.append((f"layers.{i}.{name}", arr))
        return out

    def trainable_refs(self):
        """(layer_index, tensor_name) for every trainable tensor, in order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in layer.trainable():
                out.append((i, name))
        return out


def build_network(kinds, input_shape, rng: np.random.Generator) -> Network:
    layers = []
    shape = tuple(input_shape)
    for kind in kinds:
        layer = build_layer(kind, shape, rng)
        shape = layer.out_shape
        layers.append(layer)
    return Network(layers, input_shape)


# ---------------------------------------------------------------------------
# Softmax cross-entropy head
# ---------------------------------------------------------------------------


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"label {int(bad)} out of range [0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy: average of -log(prob of true class)."""
    labels = _check_labels(labels, logits.shape[-1])
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    nll = logsumexp - z[np.arange(len(labels)), labels]
    return float(nll.mean())


def cross_entropy_dlogits(logits: np.ndarray, labels) -> np.ndarray:
    """Gradient of mean softmax cross-entropy wrt the logits."""
    labels = _check_labels(labels, logits.shape[-1])
    p = softmax_probs(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """-log(prob of true class) per row, no batch mean."""
    labels = _check_labels(labels, logits.shape[-1])
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    return logsumexp - z[np.arange(len(labels)), labels]

"""Model specs, the two reference CNN architectures, inference rules, checkpoints.

A classifier over k base classes can carry k, 2k, or 3k output units. The
extra blocks hold designated target classes: class ``i + k`` (and ``i + 2k``
for the triple variant) is trained on copies of class-``i`` inputs, and the
decision rule sums each class's probability across blocks before the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .engine import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2x2,
    Network,
    build_network,
    kind_from_dict,
    kind_to_dict,
    softmax_probs,
)

CHECKPOINT_MAGIC = b"TGFCKPT1"


class CheckpointError(container.ContainerError):
    """Checkpoint file unreadable or inconsistent with its own manifest."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: layer sequence plus output-class structure."""

    layers: tuple
    input_shape: tuple  # (H, W, C)
    base_classes: int
    class_multiplier: int = 1
    arch: str = "custom"

    def __post_init__(self):
        if self.class_multiplier not in (1, 2, 3):
            raise ValueError(f"class multiplier must be 1, 2 or 3, got {self.class_multiplier}")
        if self.base_classes < 2:
            raise ValueError("need at least two base classes")
        final = self.layers[-1]
        if not isinstance(final, Dense) or final.out_dim != self.num_outputs:
            raise ValueError(
                f"final layer must be Dense({self.num_outputs}) for "
                f"k={self.base_classes}, multiplier={self.class_multiplier}"
            )

    @property
    def num_outputs(self) -> int:
        return self.base_classes * self.class_multiplier

    def to_dict(self) -> dict:
        return {
            "layers": [kind_to_dict(k) for k in self.layers],
            "input_shape": list(self.input_shape),
            "base_classes": self.base_classes,
            "class_multiplier": self.class_multiplier,
            "arch": self.arch,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            layers=tuple(kind_from_dict(x) for x in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            base_classes=int(d["base_classes"]),
            class_multiplier=int(d["class_multiplier"]),
            arch=d.get("arch", "custom"),
        )


def build_mnist_spec(multiplier: int = 1) -> ModelSpec:
    """28x28x1 CNN: two ReLU conv blocks, one pool, dense head."""
    layers = (
        Conv2D(3, 3, 32), Activation("relu"),
        BatchNorm(),
        Conv2D(3, 3, 64), Activation("relu"),
        BatchNorm(),
        MaxPool2x2(),
        Dropout(0.25),
        Dense(128), Activation("relu"),
        Dropout(0.5),
        Dense(10 * multiplier),
    )
    return ModelSpec(layers, (28, 28, 1), 10, multiplier, arch="mnist")


def build_cifar_spec(multiplier: int = 1) -> ModelSpec:
    """32x32x3 CNN: three ELU conv blocks with rising width and dropout."""

    def block(channels, rate):
        return (
            Conv2D(3, 3, channels), Activation("elu"),
            BatchNorm(),
            Conv2D(3, 3, channels), Activation("elu"),
            BatchNorm(),
            MaxPool2x2(),
            Dropout(rate),
        )

    layers = block(32, 0.2) + block(64, 0.3) + block(128, 0.4) + (Dense(10 * multiplier),)
    return ModelSpec(layers, (32, 32, 3), 10, multiplier, arch="cifar10")


def build_toy_spec(multiplier: int = 1) -> ModelSpec:
    """The 28x28 architecture scaled down to 8x8x1 inputs and 4 classes."""
    layers = (
        Conv2D(3, 3, 8), Activation("relu"),
        BatchNorm(),
        Conv2D(3, 3, 16), Activation("relu"),
        BatchNorm(),
        MaxPool2x2(),
        Dropout(0.25),
        Dense(32), Activation("relu"),
        Dropout(0.5),
        Dense(4 * multiplier),
    )
    return ModelSpec(layers, (8, 8, 1), 4, multiplier, arch="toy")


ARCH_BUILDERS = {
    "mnist": build_mnist_spec,
    "cifar10": build_cifar_spec,
    "toy": build_toy_spec,
}


class Model:
    """A spec plus its learned layer states and training provenance."""

    def __init__(self, spec: ModelSpec, network: Network, provenance: dict | None = None):
        self.spec = spec
        self.network = network
        self.provenance = dict(provenance or {})

    @property
    def base_classes(self) -> int:
        return self.spec.base_classes

    @property
    def multiplier(self) -> int:
        return self.spec.class_multiplier

    def forward(self, x, mode="eval", rng=None):
        return self.network.forward(x, mode, rng)

    def predict_logits(self, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
        out = []
        for start in range(0, len(batch), chunk):
            rec = self.network.forward(batch[start : start + chunk], "eval", None)
            out.append(rec.logits)
        return np.concatenate(out, axis=0)

    def predict_probs(self, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Eval-mode class probabilities over all k*multiplier outputs."""
        return softmax_probs(self.predict_logits(batch, chunk))

    def infer_class(self, batch: np.ndarray) -> np.ndarray:
        """Predicted base class via the block-sum decision rule."""
        return infer_class_from_probs(self.predict_probs(batch), self.base_classes)

    def tensors(self):
        return self.network.tensors()


def infer_class_from_probs(probs: np.ndarray, base_classes: int) -> np.ndarray:
    """argmax over i of sum_j probs[:, i + j*k]; ties go to the lowest index."""
    n, total = probs.shape
    if total % base_classes:
        raise ValueError(f"{total} outputs not a multiple of k={base_classes}")
    folded = probs.reshape(n, total // base_classes, base_classes).sum(axis=1)
    return folded.argmax(axis=1)


def init_model(spec: ModelSpec, seed: int, provenance: dict | None = None) -> Model:
    rng = np.random.default_rng(seed)
    net = build_network(spec.layers, spec.input_shape, rng)
    prov = {"init_seed": seed}
    prov.update(provenance or {})
    return Model(spec, net, prov)


def save_checkpoint(model: Model, path) -> None:
    meta = {"spec": model.spec.to_dict(), "provenance": model.provenance}
    container.write_container(path, CHECKPOINT_MAGIC, meta, model.tensors())


def load_checkpoint(path) -> Model:
    try:
        meta, arrays = container.read_container(path, CHECKPOINT_MAGIC)
    except container.ContainerVersionError:
        raise
    except container.ContainerError as e:
        raise CheckpointError(str(e)) from e
    spec = ModelSpec.from_dict(meta["spec"])
    model = init_model(spec, seed=0, provenance=meta.get("provenance", {}))
    expected = model.tensors()
    if len(expected) != len(arrays):
        raise CheckpointError(
            f"{path}: checkpoint holds {len(arrays)} tensors, spec needs {len(expected)}"
        )
    for i, (layer) in enumerate(model.network.layers):
        for name in layer.tensors():
            full = f"layers.{i}.{name}"
            if full not in arrays:
                raise CheckpointError(f"{path}: missing tensor {full!r}")
            arr = arrays[full]
            current = layer.tensors()[name]
            if arr.shape != current.shape:
                raise CheckpointError(
                    f"{path}: tensor {full!r} has shape {arr.shape}, spec needs {current.shape}"
                )
            setattr(layer, name, arr)
    return model

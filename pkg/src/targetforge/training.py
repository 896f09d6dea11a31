"""Training procedures: plain, duplicate-batch with designated classes,
adversarial-sample baselines, and the triple-batch combination.

The duplicate-batch procedure appends a copy of every batch labeled with the
designated class index ``y + k``; the variant that consumes adversarial
samples generates them against the current model state (eval-mode forward)
each step and labels them ``y + k`` as well. The comparison baseline appends
adversarial samples labeled with the unchanged ground truth. The combined
procedure triples the batch: originals as ``y``, duplicated originals as
``y + k``, attack samples as ``y + 2k``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, UAP, config_to_dict, reduce_iterations, run_attack
from .data import Dataset, batches
from .engine import _check_labels
from .model import Model, ModelSpec, init_model

DEFENSES = ("unsecured", "target_clean", "target_adv", "adv_train", "target_combined")

DEFENSE_MULTIPLIER = {
    "unsecured": 1,
    "adv_train": 1,
    "target_clean": 2,
    "target_adv": 2,
    "target_combined": 3,
}

_NEEDS_ATTACK = ("target_adv", "adv_train", "target_combined")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    defense: str = "unsecured"
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    attack: AttackConfig | None = None
    # iteration cap applied to CW/ZOO when generating samples inside training
    train_attack_iterations: int = 100
    log_path: str | None = None

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.defense in _NEEDS_ATTACK and self.attack is None:
            raise ValueError(f"defense {self.defense!r} needs an attack config")
        if self.attack is not None and isinstance(self.attack, UAP):
            raise ValueError("UAP cannot be generated per-batch during training")

    @property
    def multiplier(self) -> int:
        return DEFENSE_MULTIPLIER[self.defense]


class Adam:
    """Adam updates over the network's trainable tensors, fixed order."""

    def __init__(self, network, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.network = network
        self.refs = network.trainable_refs()
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(self._get(r)) for r in self.refs]
        self.v = [np.zeros_like(self._get(r)) for r in self.refs]
        self.t = 0

    def _get(self, ref):
        i, name = ref
        return getattr(self.network.layers[i], name)

    def step(self, param_grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for j, (i, name) in enumerate(self.refs):
            g = param_grads[i][name].astype(np.float32)
            self.m[j] = self.beta1 * self.m[j] + (1 - self.beta1) * g
            self.v[j] = self.beta2 * self.v[j] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[j] / b1c) / (np.sqrt(self.v[j] / b2c) + self.eps)
            layer = self.network.layers[i]
            setattr(layer, name, (getattr(layer, name) - update).astype(np.float32))


def train_step(model: Model, images, labels, optimizer: Adam, rng) -> float:
    """One optimizer update from the gradient of (cross-entropy + L2 reg)."""
    _check_labels(labels, model.spec.num_outputs)
    loss, record = model.network.loss_pass(images, labels, mode="train", rng=rng)
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss} on batch of {len(images)} "
            f"(labels {np.unique(labels).tolist()})"
        )
    grads, _ = model.network.loss_grads(record, labels)
    optimizer.step(grads)
    return loss


def _clean_accuracy(model: Model, dataset: Dataset, limit: int | None = 2000) -> float:
    n = len(dataset) if limit is None else min(limit, len(dataset))
    preds = model.infer_class(dataset.images[:n])
    return float((preds == dataset.labels[:n]).mean())


def _make_batch(defense: str, x, y, k: int, attack_fn):
    """Assemble the step's training batch and labels for a defense."""
    if defense == "unsecured":
        return x, y
    if defense == "target_clean":
        return np.concatenate([x, x]), np.concatenate([y, y + k])
    if defense == "target_adv":
        adv = attack_fn(x, y)
        return np.concatenate([x, adv]), np.concatenate([y, y + k])
    if defense == "adv_train":
        adv = attack_fn(x, y)
        return np.concatenate([x, adv]), np.concatenate([y, y])
    if defense == "target_combined":
        adv = attack_fn(x, y)
        return np.concatenate([x, x, adv]), np.concatenate([y, y + k, y + 2 * k])
    raise ValueError(defense)


def train_model(spec: ModelSpec, train_data: Dataset, cfg: TrainConfig,
                eval_data: Dataset | None = None, log=None) -> Model:
    """Run the configured training procedure and return the trained model.

    Emits one JSON line per epoch (loss, clean accuracy) to ``cfg.log_path``
    or the ``log`` callable when given.
    """
    if spec.class_multiplier != cfg.multiplier:
        raise ValueError(
            f"defense {cfg.defense!r} needs class multiplier {cfg.multiplier}, "
            f"spec has {spec.class_multiplier}"
        )
    k = spec.base_classes
    provenance = {
        "defense": cfg.defense,
        "dataset": train_data.name,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "attack": config_to_dict(cfg.attack) if cfg.attack else None,
    }
    model = init_model(spec, cfg.seed, provenance)
    optimizer = Adam(model.network, lr=cfg.learning_rate)
    pass_rng = np.random.default_rng([cfg.seed, 1])

    train_attack = None
    if cfg.attack is not None and cfg.defense in _NEEDS_ATTACK:
        train_attack = reduce_iterations(cfg.attack, cfg.train_attack_iterations)

    log_file = open(cfg.log_path, "w") if cfg.log_path else None
    fallback_count = 0  # attack-unsuccessful slots fall back to the clean sample
    try:
        for epoch in range(cfg.epochs):
            losses = []
            for step, (x, y) in enumerate(batches(train_data, cfg.batch_size,
                                                  seed=cfg.seed + 7919 * epoch)):
                def attack_fn(bx, by, _e=epoch, _s=step):
                    nonlocal fallback_count
                    batch = run_attack(model, bx, by, train_attack,
                                       seed=_mix_seed(cfg.seed, _e, _s))
                    fallback_count += int(((~batch.success) & (batch.linf == 0)).sum())
                    return batch.adversarial

                bx, by = _make_batch(cfg.defense, x, y, k, attack_fn)
                if cfg.defense == "adv_train":
                    # the baseline never references designated class indices
                    _check_labels(by, k)
                losses.append(train_step(model, bx, by, optimizer, pass_rng))
            entry = {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "clean_accuracy": _clean_accuracy(model, eval_data or train_data),
            }
            line = json.dumps(entry, sort_keys=True)
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()
            if log:
                log(line)
    finally:
        if log_file:
            log_file.close()
    if fallback_count:
        model.provenance["attack_fallbacks"] = fallback_count
    return model


def _mix_seed(seed: int, epoch: int, step: int) -> int:
    return (seed * 1_000_003 + epoch * 10_007 + step) % (2**31 - 1)


# Entry points named after the procedures; all share the loop above.


def train_unsecured(spec, data, cfg, **kw) -> Model:
    assert cfg.defense == "unsecured"
    return train_model(spec, data, cfg, **kw)


def target_train_clean(spec, data, cfg, **kw) -> Model:
    assert cfg.defense == "target_clean"
    return train_model(spec, data, cfg, **kw)


def target_train_adv(spec, data, cfg, **kw) -> Model:
    assert cfg.defense == "target_adv"
    return train_model(spec, data, cfg, **kw)


def adversarial_train(spec, data, cfg, **kw) -> Model:
    assert cfg.defense == "adv_train"
    return train_model(spec, data, cfg, **kw)


def target_train_combined(spec, data, cfg, **kw) -> Model:
    assert cfg.defense == "target_combined"
    return train_model(spec, data, cfg, **kw)

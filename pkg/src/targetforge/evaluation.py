"""Robustness metrics and report files.

Accuracy is always computed through the model's block-sum decision rule;
the raw argmax over all outputs appears only in the designated-class rate,
where it is the object of study.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AdvBatch, AttackConfig, config_digest, config_label, config_to_dict, run_attack
from .data import Dataset
from .model import Model


@dataclass
class AttackEntry:
    attack: dict
    digest: str
    label: str
    n_samples: int
    clean_accuracy: float
    robust_accuracy: float
    designated_class_rate: float | None
    mean_l2: float
    mean_linf: float
    success_rate: float


@dataclass
class TransferEntry:
    source: str
    target: str
    attack: dict
    digest: str
    label: str
    n_samples: int
    accuracy: float


@dataclass
class EvalReport:
    model: dict
    dataset: str
    n_samples: int
    clean_accuracy: float
    entries: list = field(default_factory=list)
    transfer: list = field(default_factory=list)
    informational: bool = False

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "n_samples": self.n_samples,
            "clean_accuracy": self.clean_accuracy,
            "entries": [vars(e).copy() for e in self.entries],
            "transfer": [vars(t).copy() for t in self.transfer],
            "informational": self.informational,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        rep = EvalReport(
            model=d["model"],
            dataset=d["dataset"],
            n_samples=d["n_samples"],
            clean_accuracy=d["clean_accuracy"],
            informational=d.get("informational", False),
        )
        rep.entries = [AttackEntry(**e) for e in d.get("entries", [])]
        rep.transfer = [TransferEntry(**t) for t in d.get("transfer", [])]
        return rep


def select_samples(dataset: Dataset, n: int | None, seed: int) -> np.ndarray:
    """Fixed-seed sample indices; full set (in order) when n is None."""
    if n is None or n >= len(dataset):
        return np.arange(len(dataset), dtype=np.int64)
    rng = np.random.default_rng([seed, len(dataset)])
    return np.sort(rng.choice(len(dataset), size=n, replace=False)).astype(np.int64)


def clean_accuracy(model: Model, dataset: Dataset, n: int | None = None, seed: int = 0) -> float:
    idx = select_samples(dataset, n, seed)
    preds = model.infer_class(dataset.images[idx])
    return float((preds == dataset.labels[idx]).mean())


def _attack_chunked(model, images, labels, cfg, seed, indices, workers, train_data=None):
    """Run an attack over sample chunks, optionally in threads.

    Per-sample computations are row-independent, so chunked and whole-batch
    runs produce identical bytes.
    """
    if workers is None or workers <= 1 or len(images) <= 32:
        return run_attack(model, images, labels, cfg, seed=seed,
                          source_indices=indices, train_data=train_data)
    bounds = np.array_split(np.arange(len(images)), workers)
    bounds = [b for b in bounds if len(b)]

    def job(rows):
        return run_attack(model, images[rows], labels[rows], cfg, seed=seed,
                          source_indices=indices[rows], train_data=train_data)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(job, bounds))
    return AdvBatch(
        adversarial=np.concatenate([p.adversarial for p in parts]),
        source_indices=np.concatenate([p.source_indices for p in parts]),
        l2=np.concatenate([p.l2 for p in parts]),
        linf=np.concatenate([p.linf for p in parts]),
        success=np.concatenate([p.success for p in parts]),
    )


def evaluate_attack(model: Model, cfg: AttackConfig, dataset: Dataset,
                    n: int | None = None, seed: int = 0, workers: int | None = None,
                    train_data=None) -> tuple[AttackEntry, AdvBatch]:
    """Attack fixed-seed samples and measure accuracy under the decision rule."""
    idx = select_samples(dataset, n, seed)
    images, labels = dataset.images[idx], dataset.labels[idx]
    batch = _attack_chunked(model, images, labels, cfg, seed, idx, workers, train_data)
    preds = model.infer_class(batch.adversarial)
    robust = float((preds == labels).mean())
    clean = float((model.infer_class(images) == labels).mean())
    rate = None
    if model.multiplier >= 2:
        rate = designated_class_rate(model, batch, labels)
    entry = AttackEntry(
        attack=config_to_dict(cfg),
        digest=config_digest(cfg),
        label=config_label(cfg),
        n_samples=int(len(idx)),
        clean_accuracy=clean,
        robust_accuracy=robust,
        designated_class_rate=rate,
        mean_l2=float(batch.l2.mean()),
        mean_linf=float(batch.linf.mean()),
        success_rate=float(batch.success.mean()),
    )
    return entry, batch


def robust_accuracy(model: Model, cfg: AttackConfig, dataset: Dataset,
                    n: int | None = None, seed: int = 0, workers: int | None = None,
                    train_data=None) -> float:
    entry, _ = evaluate_attack(model, cfg, dataset, n, seed, workers, train_data)
    return entry.robust_accuracy


def designated_class_rate(model: Model, batch: AdvBatch, ground_truth) -> float | None:
    """Among attack-successful samples, fraction whose raw argmax is true+k.

    Returns None (not 0) when no sample was successful; raises for models
    without designated classes.
    """
    if model.multiplier < 2:
        raise ValueError("designated-class rate undefined for a single-block classifier")
    ground_truth = np.asarray(ground_truth)
    mask = batch.success
    if not mask.any():
        return None
    raw = model.predict_probs(batch.adversarial[mask]).argmax(axis=1)
    designated = ground_truth[mask] + model.base_classes
    return float((raw == designated).mean())


def transferability_eval(source: Model, target: Model, cfg: AttackConfig,
                         dataset: Dataset, n: int | None = None, seed: int = 0,
                         workers: int | None = None, train_data=None) -> TransferEntry:
    """Accuracy of ``target`` on samples crafted against ``source``."""
    if source.spec.input_shape != target.spec.input_shape:
        raise ValueError("source and target input shapes differ")
    if source.base_classes != target.base_classes:
        raise ValueError("source and target base class counts differ")
    idx = select_samples(dataset, n, seed)
    images, labels = dataset.images[idx], dataset.labels[idx]
    batch = _attack_chunked(source, images, labels, cfg, seed, idx, workers, train_data)
    preds = target.infer_class(batch.adversarial)
    return TransferEntry(
        source=source.provenance.get("defense", "?"),
        target=target.provenance.get("defense", "?"),
        attack=config_to_dict(cfg),
        digest=config_digest(cfg),
        label=config_label(cfg),
        n_samples=int(len(idx)),
        accuracy=float((preds == labels).mean()),
    )


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

_CSV_FIELDS = [
    "model", "dataset", "attack", "digest", "n_samples", "clean_accuracy",
    "robust_accuracy", "designated_class_rate", "mean_l2", "mean_linf",
    "success_rate",
]


def emit_report(report: EvalReport, path, fmt: str = "json") -> None:
    """Write a report with stable field ordering (reruns are byte-identical)."""
    if fmt == "json":
        with open(path, "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return
    if fmt == "csv":
        model_tag = report.model.get("defense", "?")
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            for e in report.entries:
                writer.writerow({
                    "model": model_tag,
                    "dataset": report.dataset,
                    "attack": e.label,
                    "digest": e.digest,
                    "n_samples": e.n_samples,
                    "clean_accuracy": e.clean_accuracy,
                    "robust_accuracy": e.robust_accuracy,
                    "designated_class_rate": e.designated_class_rate,
                    "mean_l2": e.mean_l2,
                    "mean_linf": e.mean_linf,
                    "success_rate": e.success_rate,
                })
        return
    raise ValueError(f"unknown report format {fmt!r}")


def load_report(path) -> EvalReport:
    with open(path) as f:
        return EvalReport.from_dict(json.load(f))

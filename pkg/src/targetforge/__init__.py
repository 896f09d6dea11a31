"""Robust training with designated target classes, and the attacks to test it."""

from .attacks import (
    BIM,
    CW,
    UAP,
    ZOO,
    AdvBatch,
    AttackConfig,
    DeepFool,
    FGSM,
    PGD,
    run_attack,
)
from .data import Dataset, load_dataset, make_toy_dataset
from .evaluation import (
    EvalReport,
    designated_class_rate,
    emit_report,
    robust_accuracy,
    transferability_eval,
)
from .model import (
    Model,
    ModelSpec,
    build_cifar_spec,
    build_mnist_spec,
    build_toy_spec,
    infer_class_from_probs,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, train_model

__version__ = "0.1.0"

__all__ = [
    "AdvBatch", "AttackConfig", "BIM", "CW", "DeepFool", "FGSM", "PGD", "UAP", "ZOO",
    "Dataset", "EvalReport", "Model", "ModelSpec", "TrainConfig",
    "build_cifar_spec", "build_mnist_spec", "build_toy_spec",
    "designated_class_rate", "emit_report", "infer_class_from_probs", "init_model",
    "load_checkpoint", "load_dataset", "make_toy_dataset", "robust_accuracy",
    "run_attack", "save_checkpoint", "train_model", "transferability_eval",
]

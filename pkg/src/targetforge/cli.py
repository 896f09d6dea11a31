"""Operator CLI: train, attack, eval, transfer, reproduce, defaults, fetch-data.

Runs are driven by a JSON config file; seeds are mandatory so that reruns
with the same config produce byte-identical checkpoints and reports. The
``TARGETFORGE_DATA_DIR`` environment variable overrides the dataset root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .attacks import (
    UAP,
    AttackConfig,
    config_from_dict,
    config_label,
    run_attack,
    save_adv_batch,
)
from .data import DataError, Dataset, fetch_dataset, load_dataset
from .evaluation import (
    EvalReport,
    clean_accuracy,
    emit_report,
    evaluate_attack,
    select_samples,
    transferability_eval,
)
from .model import ARCH_BUILDERS, Model, load_checkpoint, save_checkpoint
from .training import DEFENSE_MULTIPLIER, DEFENSES, TrainConfig, train_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ConfigError(ValueError):
    """Invalid run config; carries every validation failure at once."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


DEFAULT_CONFIG = {
    "seed": 7,
    "dataset": {"name": "toy", "dir": None},
    "model": {"arch": "toy"},
    "train": {
        "defense": "target_clean",
        "epochs": 12,
        "batch_size": 128,
        "learning_rate": 1e-3,
        "attack": None,
        "train_attack_iterations": 100,
    },
    "attacks": [
        {"kind": "deepfool", "max_iterations": 50, "overshoot": 0.02},
        {"kind": "cw", "norm": "l2", "kappa": 0.0, "max_iterations": 100,
         "binary_search_steps": 9, "initial_const": 1e-3, "learning_rate": 1e-2},
        {"kind": "fgsm", "epsilon": 0.3},
        {"kind": "pgd", "epsilon": 0.3, "alpha": 0.01, "steps": 40, "random_start": True},
    ],
    "eval": {"n_samples": 200, "seed": 11},
    "output_dir": "runs/toy",
    "workers": None,
}


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _data_dir(cfg_dir):
    env = os.environ.get("TARGETFORGE_DATA_DIR")
    return Path(env) if env else (Path(cfg_dir) if cfg_dir else None)


class RunConfig:
    def __init__(self, raw: dict, base_dir: Path):
        self.raw = raw
        self.base_dir = base_dir
        problems = []

        self.seed = raw.get("seed")
        if not isinstance(self.seed, int):
            problems.append("seed: required integer (reproducibility is mandatory)")

        ds = raw.get("dataset", {})
        self.dataset_name = ds.get("name")
        if self.dataset_name not in ("toy", "mnist", "cifar10"):
            problems.append(f"dataset.name: {self.dataset_name!r} not one of toy|mnist|cifar10")
        self.dataset_dir = _data_dir(ds.get("dir"))
        if self.dataset_name in ("mnist", "cifar10") and self.dataset_dir is None:
            problems.append(
                "dataset.dir: required for mnist/cifar10 (or set TARGETFORGE_DATA_DIR)"
            )

        arch = raw.get("model", {}).get("arch", self.dataset_name)
        self.arch = arch
        if arch not in ARCH_BUILDERS:
            problems.append(f"model.arch: {arch!r} not one of {sorted(ARCH_BUILDERS)}")

        tr = raw.get("train", {})
        self.defense = tr.get("defense", "unsecured")
        if self.defense not in DEFENSES:
            problems.append(f"train.defense: {self.defense!r} not one of {DEFENSES}")
        self.train_attack = None
        if tr.get("attack") is not None:
            try:
                self.train_attack = config_from_dict(tr["attack"])
            except (ValueError, TypeError) as e:
                problems.append(f"train.attack: {e}")
        self.train_kwargs = {
            "epochs": tr.get("epochs", 12),
            "batch_size": tr.get("batch_size", 128),
            "learning_rate": tr.get("learning_rate", 1e-3),
            "train_attack_iterations": tr.get("train_attack_iterations", 100),
        }
        if self.defense in DEFENSES and isinstance(self.seed, int):
            try:
                self.train_config()
            except ValueError as e:
                problems.append(f"train: {e}")

        self.attacks = []
        for i, entry in enumerate(raw.get("attacks", [])):
            try:
                self.attacks.append(config_from_dict(entry))
            except (ValueError, TypeError) as e:
                problems.append(f"attacks[{i}]: {e}")

        ev = raw.get("eval", {})
        self.eval_n = ev.get("n_samples")
        self.eval_seed = ev.get("seed", 11)
        self.output_dir = base_dir / raw.get("output_dir", "runs/out")
        self.workers = raw.get("workers")

        if problems:
            raise ConfigError(problems)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            defense=self.defense,
            seed=self.seed,
            attack=self.train_attack,
            log_path=None,
            **self.train_kwargs,
        )

    def load_data(self):
        try:
            return load_dataset(self.dataset_name, self.dataset_dir, seed=0)
        except DataError:
            raise
        except OSError as e:
            raise DataError(str(e)) from e

    def build_spec(self):
        return ARCH_BUILDERS[self.arch](DEFENSE_MULTIPLIER[self.defense])


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError([f"config file {path} is not valid JSON: {e}"])
    return RunConfig(raw, path.parent)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train, test = cfg.load_data()
    spec = cfg.build_spec()
    tc = cfg.train_config()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    tc.log_path = str(cfg.output_dir / f"{cfg.defense}.train.jsonl")
    model = train_model(spec, train, tc, eval_data=test,
                        log=lambda line: print(line, file=sys.stderr))
    ckpt = cfg.output_dir / f"{cfg.defense}.ckpt"
    save_checkpoint(model, ckpt)
    print(str(ckpt))
    return EXIT_OK


def _resolve_attack(cfg: RunConfig, index: int) -> AttackConfig:
    if not cfg.attacks:
        raise ConfigError(["attacks: list is empty"])
    if not 0 <= index < len(cfg.attacks):
        raise ConfigError([f"--attack-index {index} out of range [0, {len(cfg.attacks)})"])
    return cfg.attacks[index]


def _attack_inputs(cfg: RunConfig, model: Model, dataset: Dataset):
    idx = select_samples(dataset, cfg.eval_n, cfg.eval_seed)
    return dataset.images[idx], dataset.labels[idx], idx


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    attack = _resolve_attack(cfg, args.attack_index)
    model = load_checkpoint(args.checkpoint)
    train, test = cfg.load_data()
    images, labels, idx = _attack_inputs(cfg, model, test)
    batch = run_attack(model, images, labels, attack, seed=cfg.eval_seed,
                       source_indices=idx,
                       train_data=(train.images, train.labels) if isinstance(attack, UAP) else None)
    save_adv_batch(args.out, batch, labels, attack)
    print(json.dumps({
        "out": str(args.out),
        "attack": config_label(attack),
        "n_samples": int(len(labels)),
        "success_rate": float(batch.success.mean()),
        "mean_l2": float(batch.l2.mean()),
        "mean_linf": float(batch.linf.mean()),
    }, sort_keys=True))
    return EXIT_OK


def _evaluate_model(cfg: RunConfig, model: Model, train: Dataset, test: Dataset) -> EvalReport:
    report = EvalReport(
        model=model.provenance,
        dataset=cfg.dataset_name,
        n_samples=len(select_samples(test, cfg.eval_n, cfg.eval_seed)),
        clean_accuracy=clean_accuracy(model, test, cfg.eval_n, cfg.eval_seed),
    )
    for attack in cfg.attacks:
        entry, _ = evaluate_attack(
            model, attack, test, cfg.eval_n, cfg.eval_seed, cfg.workers,
            train_data=(train.images, train.labels) if isinstance(attack, UAP) else None,
        )
        report.entries.append(entry)
    return report


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    train, test = cfg.load_data()
    report = _evaluate_model(cfg, model, train, test)
    emit_report(report, args.out, fmt=args.format)
    print(str(args.out))
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = load_config(args.config)
    attack = _resolve_attack(cfg, args.attack_index)
    source = load_checkpoint(args.source)
    target = load_checkpoint(args.target)
    train, test = cfg.load_data()
    entry = transferability_eval(
        source, target, attack, test, cfg.eval_n, cfg.eval_seed, cfg.workers,
        train_data=(train.images, train.labels) if isinstance(attack, UAP) else None,
    )
    report = EvalReport(
        model={"source": source.provenance, "target": target.provenance},
        dataset=cfg.dataset_name,
        n_samples=entry.n_samples,
        clean_accuracy=clean_accuracy(target, test, cfg.eval_n, cfg.eval_seed),
        transfer=[entry],
    )
    emit_report(report, args.out, fmt="json")
    print(str(args.out))
    return EXIT_OK


def cmd_defaults(args) -> int:
    print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fetch_data(args) -> int:
    fetch_dataset(args.dataset, args.dir, trust_first=args.trust_first_fetch,
                  progress=lambda msg: print(msg, file=sys.stderr))
    print(str(args.dir))
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce presets
# ---------------------------------------------------------------------------


def _toy_preset() -> dict:
    pgd_toy = {"kind": "pgd", "epsilon": 0.15, "alpha": 0.03, "steps": 10,
               "random_start": True}
    return {
        "dataset": "toy",
        "arch": "toy",
        "seed": 7,
        "eval_n": 200,
        "epochs": {"unsecured": 8, "target_clean": 12, "target_adv": 12, "adv_train": 8},
        "train_attack": pgd_toy,
        "minimizing_attacks": [
            {"kind": "deepfool"},
            {"kind": "cw", "norm": "l2", "kappa": 0.0, "max_iterations": 100},
        ],
        "budget_attacks": [
            {"kind": "fgsm", "epsilon": 0.15},
            pgd_toy,
        ],
        "informational": False,
    }


def _mnist_preset() -> dict:
    pgd_mnist = {"kind": "pgd", "epsilon": 0.3, "alpha": 0.01, "steps": 40,
                 "random_start": True}
    return {
        "dataset": "mnist",
        "arch": "mnist",
        "seed": 7,
        "eval_n": 1000,
        "epochs": {"unsecured": 20, "target_clean": 20, "target_adv": 20, "adv_train": 20},
        "train_attack": pgd_mnist,
        "minimizing_attacks": [
            {"kind": "cw", "norm": "l2", "kappa": 0.0, "max_iterations": 1000},
            {"kind": "cw", "norm": "l2", "kappa": 0.0, "max_iterations": 10000,
             "_full_only": True},
            {"kind": "cw", "norm": "l2", "kappa": 0.0, "max_iterations": 100000,
             "_full_only": True},
            {"kind": "cw", "norm": "linf", "kappa": 0.0, "max_iterations": 1000},
            {"kind": "deepfool"},
            {"kind": "zoo", "max_iterations": 3000, "initial_const": 0.01,
             "coord_batch": 128, "_n": 200},
            {"kind": "uap", "xi": 0.3, "max_outer_iterations": 10},
        ],
        "budget_attacks": [
            {"kind": "cw", "norm": "l2", "kappa": 40.0, "max_iterations": 1000},
            pgd_mnist,
            {"kind": "fgsm", "epsilon": 0.3},
        ],
        "informational": False,
    }


def _cifar_preset() -> dict:
    pgd_cifar = {"kind": "pgd", "epsilon": 8 / 255, "alpha": 2 / 255, "steps": 7,
                 "random_start": True}
    preset = _mnist_preset()
    preset.update({
        "dataset": "cifar10",
        "arch": "cifar10",
        "eval_n": 1000,
        "epochs": {"unsecured": 50, "target_clean": 50, "target_adv": 50, "adv_train": 50},
        "train_attack": pgd_cifar,
        "informational": True,  # full-scale cifar numbers are not acceptance targets
    })
    preset["budget_attacks"] = [
        {"kind": "cw", "norm": "l2", "kappa": 40.0, "max_iterations": 1000},
        pgd_cifar,
        {"kind": "fgsm", "epsilon": 0.3},
    ]
    preset["minimizing_attacks"] = [
        dict(entry) for entry in preset["minimizing_attacks"]
    ]
    for entry in preset["minimizing_attacks"]:
        if entry["kind"] == "zoo":
            entry["max_iterations"] = 1000
        if entry["kind"] == "uap":
            entry["xi"] = 10 / 255
    return preset


PRESETS = {"toy": _toy_preset, "mnist": _mnist_preset, "cifar10": _cifar_preset}


def _preset_rows(preset, full: bool):
    """(model, attack dict or None, n) rows of the reproduction table."""
    rows = []
    minimizing = [a for a in preset["minimizing_attacks"]
                  if full or not a.get("_full_only")]
    skipped = [a for a in preset["minimizing_attacks"]
               if not full and a.get("_full_only")]
    for model_name in ("target_clean", "unsecured"):
        rows.append((model_name, None, preset["eval_n"]))
        for a in minimizing:
            rows.append((model_name, a, a.get("_n", preset["eval_n"])))
    for model_name in ("target_adv", "adv_train", "unsecured"):
        for a in preset["budget_attacks"]:
            rows.append((model_name, a, preset["eval_n"]))
    transfers = [("unsecured", "target_clean", a) for a in minimizing
                 if a["kind"] != "uap"]
    return rows, transfers, skipped


def _clean_attack_dict(a: dict) -> dict:
    return {k: v for k, v in a.items() if not k.startswith("_")}


def cmd_reproduce(args) -> int:
    preset = PRESETS[args.preset]()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, transfers, skipped = _preset_rows(preset, args.full)

    if args.dry_run:
        plan = {
            "preset": args.preset,
            "informational": preset["informational"],
            "rows": [
                {"model": m, "attack": config_label(config_from_dict(_clean_attack_dict(a)))
                 if a else "clean", "n_samples": n}
                for m, a, n in rows
            ],
            "transfers": [
                {"source": s, "target": t,
                 "attack": config_label(config_from_dict(_clean_attack_dict(a)))}
                for s, t, a in transfers
            ],
            "skipped_without_full": [
                config_label(config_from_dict(_clean_attack_dict(a))) for a in skipped
            ],
        }
        plan_path = out / "plan.json"
        plan_path.write_text(json.dumps(plan, indent=2, sort_keys=True) + "\n")
        print(str(plan_path))
        return EXIT_OK

    data_dir = _data_dir(args.data_dir)
    if preset["dataset"] != "toy" and data_dir is None:
        raise DataError(
            f"{preset['dataset']} needs --data-dir or TARGETFORGE_DATA_DIR; "
            "download with `targetforge fetch-data`"
        )
    train, test = load_dataset(preset["dataset"], data_dir, seed=0)

    builder = ARCH_BUILDERS[preset["arch"]]
    seed = preset["seed"]
    train_attack = config_from_dict(preset["train_attack"])
    models: dict[str, Model] = {}
    for defense in ("unsecured", "target_clean", "target_adv", "adv_train"):
        tc = TrainConfig(
            defense=defense,
            epochs=preset["epochs"][defense],
            batch_size=128,
            seed=seed,
            attack=train_attack if defense in ("target_adv", "adv_train") else None,
            log_path=str(out / f"{defense}.train.jsonl"),
        )
        spec = builder(tc.multiplier)
        print(f"training {defense} ({tc.epochs} epochs)", file=sys.stderr)
        models[defense] = train_model(spec, train, tc, eval_data=test)
        save_checkpoint(models[defense], out / f"{defense}.ckpt")

    reports = {name: EvalReport(model=m.provenance, dataset=preset["dataset"],
                                n_samples=preset["eval_n"],
                                clean_accuracy=clean_accuracy(m, test, preset["eval_n"],
                                                              seed=seed),
                                informational=preset["informational"])
               for name, m in models.items()}
    for model_name, attack_dict, n in rows:
        if attack_dict is None:
            continue
        attack = config_from_dict(_clean_attack_dict(attack_dict))
        model = models[model_name]
        print(f"evaluating {model_name} vs {config_label(attack)}", file=sys.stderr)
        entry, _ = evaluate_attack(
            model, attack, test, n, seed=seed, workers=args.workers,
            train_data=(train.images, train.labels) if isinstance(attack, UAP) else None,
        )
        reports[model_name].entries.append(entry)
    for source, target, attack_dict in transfers:
        attack = config_from_dict(_clean_attack_dict(attack_dict))
        print(f"transfer {source} -> {target} via {config_label(attack)}", file=sys.stderr)
        entry = transferability_eval(models[source], models[target], attack, test,
                                     preset["eval_n"], seed=seed, workers=args.workers)
        reports[target].transfer.append(entry)

    for name, report in reports.items():
        emit_report(report, out / f"report.{name}.json", fmt="json")
        emit_report(report, out / f"report.{name}.csv", fmt="csv")
    print(str(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="targetforge",
                                description="Duplicate-batch robust training and attack suite")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model per the config")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("attack", help="craft adversarial samples from a checkpoint")
    a.add_argument("--config", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--attack-index", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_attack)

    e = sub.add_parser("eval", help="robust accuracy report for a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.set_defaults(fn=cmd_eval)

    tr = sub.add_parser("transfer", help="cross-model attack transfer report")
    tr.add_argument("--config", required=True)
    tr.add_argument("--source", required=True)
    tr.add_argument("--target", required=True)
    tr.add_argument("--attack-index", type=int, default=0)
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_transfer)

    r = sub.add_parser("reproduce", help="full train+eval experiment suite")
    r.add_argument("--preset", choices=sorted(PRESETS), required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--data-dir", default=None)
    r.add_argument("--dry-run", action="store_true",
                   help="write the plan (rows to be computed) and exit")
    r.add_argument("--full", action="store_true",
                   help="include the 10K/100K-iteration attack rows")
    r.add_argument("--workers", type=int, default=os.cpu_count())
    r.set_defaults(fn=cmd_reproduce)

    d = sub.add_parser("defaults", help="print the default config")
    d.set_defaults(fn=cmd_defaults)

    f = sub.add_parser("fetch-data", help="download a dataset with sha256 verification")
    f.add_argument("--dataset", choices=("mnist", "cifar10"), required=True)
    f.add_argument("--dir", required=True)
    f.add_argument("--trust-first-fetch", action="store_true",
                   help="record the digest of files without a pinned sha256")
    f.set_defaults(fn=cmd_fetch_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - boundary of the CLI
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

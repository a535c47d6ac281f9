"""Command-line entry point: ``train``, ``eval`` and ``report``.

A run directory holds ``config.resolved``, ``metrics.jsonl`` (one JSON record
per epoch), ``checkpoint.npz``, ``report.json``, ``summary.txt`` and
``weights_curve.csv``; ``report`` adds PNG figures next to them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from selpda import __version__
from selpda.checkpoint import load_checkpoint, read_meta
from selpda.data import PartialTaskSpec, generate_synthetic_task, load_folder_dataset, standardize
from selpda.errors import ConfigurationError, ContractError, TrainingError
from selpda.evaluation import evaluate
from selpda.networks import BackboneSpec, NetworkConfig
from selpda.plotting import read_weights_curve, render_run, write_weights_curve
from selpda.selection import ClassWeights
from selpda.serialization import from_dict, to_dict
from selpda.trainer import TrainConfig, Trainer, build_bundle

logger = logging.getLogger("selpda")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2, 3
CHECKPOINT = "checkpoint.npz"
SUMMARY_HEADER = ("task", "method", "seed", "epochs", "acc", "acc_restricted", "shared_pred", "shared_true")


@dataclass(frozen=True)
class FolderTask:
    """Directory-per-class source and target roots; target classes must be a subset."""

    source_root: str
    target_root: str
    source_classes: tuple[str, ...]
    target_classes: tuple[str, ...]
    image_size: int = 32
    channels: int = 3


@dataclass(frozen=True)
class TaskConfig:
    synthetic: PartialTaskSpec | None = None
    folder: FolderTask | None = None
    data_seed: int | None = None
    standardize: bool = True

    def validate(self):
        if (self.synthetic is None) == (self.folder is None):
            raise ConfigurationError("task needs exactly one of 'synthetic' or 'folder'")
        if self.synthetic is not None:
            self.synthetic.validate()
        else:
            src, tgt = self.folder.source_classes, self.folder.target_classes
            if not tgt or not set(tgt) < set(src):
                raise ConfigurationError("folder target_classes must be a non-empty strict subset of source_classes")

    @property
    def name(self):
        if self.synthetic is not None:
            s = self.synthetic
            return f"synthetic{len(s.source_classes)}->{len(s.target_classes)}"
        return f"{Path(self.folder.source_root).name}->{Path(self.folder.target_root).name}"


@dataclass(frozen=True)
class NetworkOptions:
    """Network widths; the class count and image shape come from the task."""

    content_dim: int = 256
    style_dim: int = 64
    decoder_width: int = 32
    discriminator_width: int = 256
    backbone: BackboneSpec = field(default_factory=BackboneSpec)


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkOptions = field(default_factory=NetworkOptions)
    output_dir: str = "runs/default"
    eval_only: bool = False
    checkpoint: str | None = None
    dtype: str = "float32"

    def validate(self):
        self.task.validate()
        self.train.validate()
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        if self.eval_only and not self.checkpoint:
            raise ConfigurationError("eval_only requires a checkpoint path")
        return self


def load_run_config(path) -> RunConfig:
    """Parse a JSON run configuration (or a ``config.resolved`` file)."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict) and "selpda_version" in data and "config" in data:
        data = data["config"]
    return from_dict(RunConfig, data).validate()


@dataclass
class PreparedTask:
    source: object
    target: object
    labels: np.ndarray
    target_classes: list[int]
    n_classes: int


def prepare_task(task: TaskConfig, seed: int) -> PreparedTask:
    """Materialize datasets; both domains are standardized with source statistics."""
    if task.synthetic is not None:
        spec = task.synthetic
        source, target, labels = generate_synthetic_task(spec, seed)
        target_classes, n_classes = spec.target_indices(), len(spec.source_classes)
    else:
        f = task.folder
        source = load_folder_dataset(f.source_root, f.source_classes, f.image_size, f.channels)
        target, labels = load_folder_dataset(f.target_root, f.target_classes, f.image_size, f.channels,
                                             label_names=f.source_classes).as_target()
        target_classes = [list(f.source_classes).index(c) for c in f.target_classes]
        n_classes = len(f.source_classes)
    if task.standardize:
        mean, std = source.images.mean(axis=(0, 2, 3)), source.images.std(axis=(0, 2, 3))
        source, target = standardize(source, mean, std), standardize(target, mean, std)
    return PreparedTask(source, target, labels, target_classes, n_classes)


def network_config(config: RunConfig, prepared: PreparedTask) -> NetworkConfig:
    widths = {f.name: getattr(config.network, f.name) for f in dataclasses.fields(NetworkOptions)}
    return NetworkConfig(prepared.n_classes, tuple(prepared.source.image_shape), **widths)


def _stamp(config: RunConfig):
    return {
        "selpda_version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "config": to_dict(config),
    }


def _append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _write_json(path, obj):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2) + "\n")
    os.replace(tmp, path)


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summary_row(task_name, config: RunConfig, report) -> dict:
    det = report.get("shared_detection") or {}
    fmt = lambda v: "-" if v is None else f"{v:.2f}"  # noqa: E731
    return {
        "task": task_name,
        "method": "selective" if config.train.binarize else "pinned-weights",
        "seed": str(config.train.seed),
        "epochs": str(config.train.epochs),
        "acc": fmt(report["accuracy"]),
        "acc_restricted": fmt(report.get("restricted_accuracy")),
        "shared_pred": ",".join(map(str, det.get("predicted_shared", []))) or "-",
        "shared_true": ",".join(map(str, det.get("true_shared", []))) or "-",
    }


def format_table(rows) -> str:
    cells = [SUMMARY_HEADER] + [tuple(r[k] for k in SUMMARY_HEADER) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(SUMMARY_HEADER))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def _dtype(config):
    return getattr(torch, config.dtype)


def _evaluate(bundle, prepared, class_weights, binarize):
    return evaluate(bundle, prepared.target, prepared.labels, class_weights if binarize else None,
                    prepared.target_classes)


def _finish(out, config, prepared, report, records):
    _write_json(out / "report.json", report.to_dict())
    row = summary_row(config.task.name, config, report.to_dict())
    (out / "summary.txt").write_text(format_table([row]) + "\n")
    write_weights_curve(records, out / "weights_curve.csv")
    print(format_table([row]))


def run_train(config: RunConfig) -> int:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigurationError(f"output directory not writable: {out}")
    if config.eval_only:
        return run_eval(config, config.checkpoint, out)

    seed = config.train.seed if config.task.data_seed is None else config.task.data_seed
    prepared = prepare_task(config.task, seed)
    _write_json(out / "config.resolved", _stamp(config))
    metrics = out / "metrics.jsonl"
    metrics.write_text("")

    trainer = Trainer(build_bundle(network_config(config, prepared), config.train.seed, _dtype(config)), config.train)
    records = []

    def on_epoch(record):
        records.append(record.to_dict())
        _append_jsonl(metrics, record.to_dict())

    try:
        trainer.fit(prepared.source, prepared.target, on_epoch, checkpoint_path=out / CHECKPOINT)
    except TrainingError as exc:
        print(f"training aborted at epoch {trainer.state.epoch + 1}: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(json.dumps(exc.report.to_dict()), file=sys.stderr)
        return EXIT_TRAINING
    if not (out / CHECKPOINT).exists():
        trainer.save(out / CHECKPOINT)
    report = _evaluate(trainer.bundle, prepared, trainer.state.class_weights, config.train.binarize)
    _finish(out, config, prepared, report, records)
    return EXIT_OK


def run_eval(config: RunConfig, checkpoint, out=None) -> int:
    """Score a stored checkpoint on the configured target set."""
    checkpoint = Path(checkpoint)
    out = Path(out) if out is not None else checkpoint.parent
    meta = read_meta(checkpoint)
    train_cfg = config.train if meta.get("train_config") is None else from_dict(TrainConfig, meta["train_config"])
    seed = train_cfg.seed if config.task.data_seed is None else config.task.data_seed
    prepared = prepare_task(config.task, seed)
    bundle, meta = load_checkpoint(checkpoint)
    if bundle.config.n_classes != prepared.n_classes or tuple(bundle.config.image_shape) != prepared.source.image_shape:
        raise ContractError("checkpoint network does not match the configured task")
    saved = (meta.get("state") or {}).get("class_weights")
    weights = ClassWeights.from_dict(saved) if saved else ClassWeights.uniform(prepared.n_classes)
    report = _evaluate(bundle, prepared, weights, train_cfg.binarize)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def run_report(run_dir) -> int:
    run_dir = Path(run_dir)
    config = load_run_config(run_dir / "config.resolved")
    report = json.loads((run_dir / "report.json").read_text())
    records = read_metrics(run_dir / "metrics.jsonl")
    curve = run_dir / "weights_curve.csv"
    if not curve.exists():
        write_weights_curve(records, curve)
    read_weights_curve(curve)
    print(format_table([summary_row(config.task.name, config, report)]))
    for path in render_run(records, run_dir):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="selpda", description="Selective-representation partial domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train (or evaluate-only) from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default=None, help="override output_dir")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured target set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="where to write report.json (default: checkpoint directory)")

    p = sub.add_parser("report", help="print the summary table and render figures for a run")
    p.add_argument("--run-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            config = load_run_config(args.config)
            changes = {}
            if args.seed is not None:
                changes["train"] = dataclasses.replace(config.train, seed=args.seed)
            if args.out is not None:
                changes["output_dir"] = args.out
            return run_train(dataclasses.replace(config, **changes))
        if args.command == "eval":
            return run_eval(load_run_config(args.config), args.checkpoint, args.out)
        return run_report(args.run_dir)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

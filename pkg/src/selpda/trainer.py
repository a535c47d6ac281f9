"""Two-step training loop.

Each epoch runs SGD over the total objective (step 1) and then refreshes the
class weights from target predictions (step 2). Gradient steps always consume
the hard 0/1 weights; during warm-up those are all ones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from selpda.checkpoint import load_checkpoint, save_checkpoint
from selpda.data import DomainDataset, batch_iterator, n_batches
from selpda.errors import ConfigurationError, ContractError, TrainingError
from selpda.losses import SIM_VARIANTS, LossReport, LossWeights, objective
from selpda.networks import NetworkBundle, NetworkConfig, grl_schedule
from selpda.selection import ClassWeights, binarize_weights, compute_soft_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_alpha: float = 10.0
    lr_beta: float = 0.75
    new_layer_lr_multiplier: float = 10.0
    lambda_recon: float = 1e-4
    lambda_diff: float = 0.0
    use_diff: bool = False
    epsilon_log: float = 1e-7
    grl_gamma: float = 10.0
    warmup_epochs: int = 2
    weight_update_period: int = 1
    binarize: bool = True
    seed: int = 0
    sim_variant: str = "printed"
    adv_strict_mode: bool = False

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs >= 0 and batch_size >= 1 required")
        if self.warmup_epochs < 1 or self.weight_update_period < 1:
            raise ConfigurationError("warmup_epochs and weight_update_period must be >= 1")
        if min(self.base_lr, self.new_layer_lr_multiplier, self.lr_alpha, self.lr_beta) <= 0:
            raise ConfigurationError("learning-rate parameters must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.sim_variant not in SIM_VARIANTS:
            raise ConfigurationError(f"sim_variant must be one of {SIM_VARIANTS}")
        self.loss_weights()

    def loss_weights(self):
        try:
            return LossWeights(self.lambda_recon, self.lambda_diff, self.epsilon_log)
        except ContractError as exc:
            raise ConfigurationError(str(exc)) from exc


def lr_schedule(progress: float, config: TrainConfig) -> float:
    """Annealed base rate ``lr0 / (1 + alpha * p) ** beta``; new layers get the multiplier on top."""
    if not 0.0 <= progress <= 1.0:
        raise ContractError(f"progress must lie in [0, 1], got {progress}")
    return config.base_lr / (1.0 + config.lr_alpha * progress) ** config.lr_beta


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    total_steps: int = 0
    class_weights: ClassWeights | None = None
    weight_history: list[ClassWeights] = field(default_factory=list)
    loss_history: list[LossReport] = field(default_factory=list)

    @property
    def progress(self):
        return min(1.0, self.step / self.total_steps) if self.total_steps else 0.0

    def to_dict(self):
        return {"epoch": self.epoch, "step": self.step, "total_steps": self.total_steps,
                "class_weights": None if self.class_weights is None else self.class_weights.to_dict()}


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: dict
    class_weights: dict
    lr: float
    grl_coeff: float

    def to_dict(self):
        return dict(self.__dict__)


def _mean_report(reports):
    keys = LossReport.__dataclass_fields__
    return LossReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


class Trainer:
    def __init__(self, bundle: NetworkBundle, config: TrainConfig):
        config.validate()
        self.bundle = bundle
        self.config = config
        self.loss_weights = config.loss_weights()
        pretrained, new = bundle.parameter_groups()
        groups = [{"params": new, "lr_mult": config.new_layer_lr_multiplier}]
        if pretrained:
            groups.append({"params": pretrained, "lr_mult": 1.0})
        self.optimizer = torch.optim.SGD(groups, lr=config.base_lr, momentum=config.momentum)
        self.state = TrainState(class_weights=ClassWeights.uniform(bundle.config.n_classes))

    def training_weights(self):
        """Class weights fed to the losses: the hard vector (all ones during warm-up)."""
        return self.state.class_weights.hard

    def _set_lr(self, progress):
        lr = lr_schedule(progress, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr * group["lr_mult"]
        return lr

    def train_step(self, source, target) -> LossReport:
        cfg, state = self.config, self.state
        self.bundle.train()
        self._set_lr(state.progress)
        grl = grl_schedule(state.progress, cfg.grl_gamma)
        total, report = objective(
            self.bundle, source, target, self.training_weights(), grl, self.loss_weights,
            sim_variant=cfg.sim_variant, adv_strict=cfg.adv_strict_mode, use_diff=cfg.use_diff,
        )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        state.step += 1
        return report

    def update_class_weights(self, target: DomainDataset) -> ClassWeights:
        """Recompute soft weights; binarize once ``warmup_epochs`` epochs have completed."""
        soft = compute_soft_weights(self.bundle, target)
        if self.config.binarize and self.state.epoch >= self.config.warmup_epochs:
            weights = binarize_weights(soft)
        else:
            weights = ClassWeights(soft, None, np.ones(len(soft)), [], False)
        self.state.class_weights = weights
        return weights

    def run_epoch(self, source: DomainDataset, target: DomainDataset) -> list[LossReport]:
        cfg, state = self.config, self.state
        epoch = state.epoch
        target_pass = 0
        target_batches = batch_iterator(target, cfg.batch_size, cfg.seed + 1, epoch * 1000)
        reports = []
        for source_batch in batch_iterator(source, cfg.batch_size, cfg.seed, epoch):
            target_batch = next(target_batches, None)
            if target_batch is None:
                target_pass += 1
                target_batches = batch_iterator(target, cfg.batch_size, cfg.seed + 1, epoch * 1000 + target_pass)
                target_batch = next(target_batches)
            reports.append(self.train_step(source_batch, target_batch))
        return reports

    def fit(self, source: DomainDataset, target: DomainDataset,
            on_epoch: Callable[[EpochRecord], None] | None = None,
            checkpoint_path=None, checkpoint_every: int = 1) -> list[EpochRecord]:
        cfg, state = self.config, self.state
        state.total_steps = cfg.epochs * n_batches(len(source), cfg.batch_size)
        records = []
        while state.epoch < cfg.epochs:
            reports = self.run_epoch(source, target)
            state.epoch += 1
            if state.epoch % cfg.weight_update_period == 0:
                self.update_class_weights(target)
            mean = _mean_report(reports)
            state.loss_history.append(mean)
            state.weight_history.append(state.class_weights)
            record = EpochRecord(state.epoch, state.step, mean.to_dict(), state.class_weights.to_dict(),
                                 lr_schedule(state.progress, cfg), grl_schedule(state.progress, cfg.grl_gamma))
            records.append(record)
            logger.info("epoch %d total=%.4f hard=%s", state.epoch, mean.total,
                        state.class_weights.hard.astype(int).tolist())
            if on_epoch is not None:
                on_epoch(record)
            if checkpoint_path is not None and (state.epoch % checkpoint_every == 0 or state.epoch == cfg.epochs):
                self.save(checkpoint_path)
        return records

    def save(self, path):
        save_checkpoint(path, self.bundle, self.config, self.state.to_dict(), self.optimizer)

    @classmethod
    def resume(cls, path, config: TrainConfig | None = None):
        bundle, meta = load_checkpoint(path)
        from selpda.serialization import from_dict

        trainer = cls(bundle, config or from_dict(TrainConfig, meta["train_config"]))
        load_checkpoint(path, bundle, trainer.optimizer)
        saved = meta["state"] or {}
        trainer.state.epoch = saved.get("epoch", 0)
        trainer.state.step = saved.get("step", 0)
        if saved.get("class_weights"):
            trainer.state.class_weights = ClassWeights.from_dict(saved["class_weights"])
        return trainer


@dataclass
class FitResult:
    bundle: NetworkBundle
    class_weights: ClassWeights
    weight_history: list[ClassWeights]
    loss_history: list[LossReport]
    records: list[EpochRecord]


def build_bundle(network_config: NetworkConfig, seed: int, dtype=torch.float32) -> NetworkBundle:
    torch.manual_seed(seed)
    return NetworkBundle(network_config).to(dtype)


def fit(config: TrainConfig, source: DomainDataset, target: DomainDataset,
        network_config: NetworkConfig | None = None, on_epoch=None, checkpoint_path=None) -> FitResult:
    """Train a fresh bundle on ``source`` (labeled) and ``target`` (unlabeled)."""
    if network_config is None:
        network_config = NetworkConfig(n_classes=len(source.class_names), image_shape=tuple(source.image_shape))
    if tuple(source.image_shape) != tuple(target.image_shape):
        raise ContractError("source and target images differ in shape")
    trainer = Trainer(build_bundle(network_config, config.seed), config)
    try:
        records = trainer.fit(source, target, on_epoch, checkpoint_path)
    except TrainingError:
        logger.error("training aborted at epoch %d step %d", trainer.state.epoch, trainer.state.step)
        raise
    s = trainer.state
    return FitResult(trainer.bundle, s.class_weights, s.weight_history, s.loss_history, records)

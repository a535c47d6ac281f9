from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from selpda.data import DomainDataset, batch_iterator
from selpda.errors import ContractError
from selpda.selection import ClassWeights


@dataclass
class EvalReport:
    """Target accuracy (%) and class-selection diagnostics.

    ``accuracy`` is the argmax over all source classes; ``restricted_accuracy``
    limits the argmax to classes with hard weight 1 (``None`` when no
    binarized weights were supplied).
    """

    accuracy: float
    restricted_accuracy: float | None
    per_class_accuracy: dict[int, float]
    confusion: list[list[int]]
    n_samples: int
    class_weights: dict | None = None
    shared_detection: dict | None = None

    @property
    def primary_accuracy(self):
        return self.accuracy if self.restricted_accuracy is None else self.restricted_accuracy

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "restricted_accuracy": self.restricted_accuracy,
            "primary_accuracy": self.primary_accuracy,
            "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()},
            "confusion": self.confusion,
            "n_samples": self.n_samples,
            "class_weights": self.class_weights,
            "shared_detection": self.shared_detection,
        }


@torch.no_grad()
def predict_proba(bundle, dataset: DomainDataset, batch_size=256) -> np.ndarray:
    was_training = bundle.training
    bundle.eval()
    out = [bundle(bundle.as_tensor(b.images)).double().numpy() for b in batch_iterator(dataset, batch_size)]
    bundle.train(was_training)
    return np.concatenate(out)


def accuracy_report(probs, labels, class_weights: ClassWeights | None = None, target_classes=None) -> EvalReport:
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ContractError("empty target set")
    if probs.shape != (len(labels), probs.shape[1]) or labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ContractError("labels do not match the classifier's class count")
    n_classes = probs.shape[1]
    pred = probs.argmax(1)
    acc = 100.0 * float(np.mean(pred == labels))

    restricted = None
    hard = None if class_weights is None or class_weights.hard is None else np.asarray(class_weights.hard)
    if hard is not None:
        if len(hard) != n_classes:
            raise ContractError("class weight length does not match the classifier")
        masked = np.where(hard[None, :] > 0, probs, -np.inf)
        pred = masked.argmax(1)
        restricted = 100.0 * float(np.mean(pred == labels))

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    classes = sorted(set(labels.tolist())) if target_classes is None else list(target_classes)
    per_class = {}
    for c in classes:
        total = confusion[c].sum()
        per_class[int(c)] = 100.0 * float(confusion[c, c] / total) if total else float("nan")

    detection = None
    if hard is not None:
        predicted = set(np.flatnonzero(hard).tolist())
        truth = set(int(c) for c in classes)
        detection = {
            "predicted_shared": sorted(predicted),
            "true_shared": sorted(truth),
            "exact_match": predicted == truth,
            "precision": len(predicted & truth) / len(predicted) if predicted else 0.0,
            "recall": len(predicted & truth) / len(truth),
        }
    return EvalReport(acc, restricted, per_class, confusion.tolist(), len(labels),
                      None if class_weights is None else class_weights.to_dict(), detection)


def evaluate(bundle, target: DomainDataset, labels, class_weights: ClassWeights | None = None,
             target_classes=None) -> EvalReport:
    """Score ``bundle`` on the target set against held-out labels."""
    if len(target) == 0:
        raise ContractError("empty target set")
    if len(labels) != len(target):
        raise ContractError("one held-out label per target sample required")
    return accuracy_report(predict_proba(bundle, target), labels, class_weights, target_classes)

"""Class-weight computation and binarization by between-cluster variance.

Soft weights are the mean label-classifier output over the target set. They
are split into outlier (weight below ``t``) and shared (weight at or above
``t``) classes at the threshold maximizing the between-cluster variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from selpda.data import batch_iterator
from selpda.errors import ContractError

DEGENERATE_TOL = 1e-15
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ClusterStats:
    w_out: float
    w_share: float
    mu_out: float
    mu_share: float
    mu_total: float
    delta_sq: float


@dataclass
class ClassWeights:
    soft: np.ndarray
    threshold: float | None = None
    hard: np.ndarray | None = None
    variance_curve: list[tuple[float, float]] = field(default_factory=list)
    degenerate: bool = False

    @classmethod
    def uniform(cls, n_classes):
        return cls(np.full(n_classes, 1.0 / n_classes), None, np.ones(n_classes), [], False)

    @property
    def shared_classes(self):
        return [] if self.hard is None else [int(i) for i in np.flatnonzero(self.hard)]

    def to_dict(self):
        return {
            "soft": [float(v) for v in self.soft],
            "threshold": self.threshold,
            "hard": None if self.hard is None else [int(v) for v in self.hard],
            "variance_curve": [[float(t), float(v)] for t, v in self.variance_curve],
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d):
        hard = None if d.get("hard") is None else np.asarray(d["hard"], dtype=np.float64)
        return cls(np.asarray(d["soft"], dtype=np.float64), d.get("threshold"), hard,
                   [tuple(p) for p in d.get("variance_curve", [])], bool(d.get("degenerate", False)))


@torch.no_grad()
def compute_soft_weights(bundle, target, batch_size=256) -> np.ndarray:
    """Average label-classifier probabilities over the whole target set."""
    if len(target) == 0:
        raise ContractError("target set is empty")
    was_training = bundle.training
    bundle.eval()
    total = torch.zeros(bundle.config.n_classes, dtype=torch.float64)
    for batch in batch_iterator(target, batch_size):
        total += bundle(bundle.as_tensor(batch.images)).double().sum(0)
    bundle.train(was_training)
    return (total / len(target)).numpy()


def _check_soft(soft):
    soft = np.asarray(soft, dtype=np.float64)
    if soft.ndim != 1 or not np.all(np.isfinite(soft)) or np.any(soft < 0):
        raise ContractError("soft weights must be a finite nonnegative vector")
    return soft


def cluster_stats(soft, t: float) -> ClusterStats:
    soft = _check_soft(soft)
    out, share = soft[soft < t], soft[soft >= t]
    if len(out) == 0 or len(share) == 0:
        raise ContractError(f"threshold {t} leaves a cluster empty")
    w_out, w_share = len(out) / len(soft), len(share) / len(soft)
    mu_out, mu_share = out.sum() / len(out), share.sum() / len(share)
    mu_total = mu_out * w_out + mu_share * w_share
    delta_sq = (mu_out - mu_total) ** 2 * w_out + (mu_share - mu_total) ** 2 * w_share
    return ClusterStats(w_out, w_share, float(mu_out), float(mu_share), float(mu_total), float(delta_sq))


def otsu_threshold(soft):
    """Threshold maximizing between-cluster variance.

    Candidates are midpoints between consecutive distinct sorted weights, so
    every nonempty two-way split is reachable. Ties go to the smallest
    threshold. Returns ``(t, curve)``; ``t`` is ``None`` when no split has
    positive variance.
    """
    soft = _check_soft(soft)
    if len(soft) < 2:
        raise ContractError("need at least two classes")
    values = np.unique(soft)
    candidates = (values[:-1] + values[1:]) / 2
    # adjacent floats: the midpoint may round onto the lower value
    candidates = np.where(candidates > values[:-1], candidates, values[1:])
    curve = [(float(t), cluster_stats(soft, t).delta_sq) for t in candidates]
    if not curve:
        return None, curve
    scores = np.array([v for _, v in curve])
    top = scores.max()
    if top <= DEGENERATE_TOL:
        return None, curve
    # scores within rounding noise of the maximum count as ties
    best = int(np.flatnonzero(scores >= top * (1 - TIE_RTOL))[0])
    return curve[best][0], curve


def binarize_weights(soft) -> ClassWeights:
    """Hard 0/1 class weights; degenerate inputs mark every class shared."""
    soft = _check_soft(soft)
    t, curve = otsu_threshold(soft)
    if t is None:
        return ClassWeights(soft, None, np.ones(len(soft)), curve, True)
    return ClassWeights(soft, t, (soft >= t).astype(np.float64), curve, False)

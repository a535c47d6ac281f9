"""Training objectives.

Every source-side term is multiplied by the weight of the sample's class, so
a class with weight 0 contributes neither value nor gradient. Terms are batch
means unless ``reduction="sum"`` is requested.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from selpda.data import Batch, Domain
from selpda.errors import ContractError, TrainingError

SIM_VARIANTS = ("printed", "dsn")


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 1e-4
    lambda_diff: float = 0.0
    epsilon_log: float = 1e-7

    def __post_init__(self):
        if min(self.lambda_recon, self.lambda_diff, self.epsilon_log) < 0:
            raise ContractError("loss weights must be nonnegative")
        if not self.epsilon_log < 1e-3:
            raise ContractError("epsilon_log must be < 1e-3")


@dataclass(frozen=True)
class LossReport:
    recon: float
    class_: float
    adv: float
    ent: float
    diff: float
    total: float

    def to_dict(self):
        d = asdict(self)
        d["class"] = d.pop("class_")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["class_"] = d.pop("class")
        return cls(**d)


def _reduce(values, reduction):
    if reduction == "mean":
        return values.mean()
    if reduction == "sum":
        return values.sum()
    raise ContractError(f"unknown reduction {reduction!r}")


def sim_per_sample(x, x_hat, variant="printed"):
    """Per-sample scale-invariant similarity between ``x`` and its reconstruction.

    ``printed``: mean(d**2) + mean(|d|)**2. ``dsn``: mean(d**2) - mean(d)**2,
    which vanishes for a constant offset.
    """
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    d = (x - x_hat).reshape(x.shape[0], -1)
    k = d.shape[1]
    sq = d.pow(2).sum(1) / k
    if variant == "printed":
        return sq + d.abs().sum(1).pow(2) / k**2
    if variant == "dsn":
        return sq - d.sum(1).pow(2) / k**2
    raise ContractError(f"unknown sim variant {variant!r}")


def l_sim(x, x_hat, variant="printed"):
    return sim_per_sample(x, x_hat, variant).mean()


def _sample_weights(class_weights, labels):
    if labels is None:
        raise ContractError("source batch must carry labels")
    if labels.min() < 0 or labels.max() >= len(class_weights):
        raise ContractError("label out of range of class weights")
    return class_weights[labels]


def weighted_nll(probs, labels, sample_weights, eps=1e-7, reduction="mean"):
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    return _reduce(-sample_weights * torch.log(picked.clamp_min(eps)), reduction)


def adversarial_terms(d_source, d_target, sample_weights, eps=1e-7, strict=False, reduction="mean"):
    """Domain-classifier loss on source probabilities ``d_source`` and target ``d_target``.

    ``strict`` keeps the literal ``1 - log D(target)`` target term.
    """
    src = -sample_weights * torch.log(d_source.clamp(eps, 1 - eps))
    if strict:
        tgt = -(1 - torch.log(d_target.clamp(eps, 1 - eps)))
    else:
        tgt = -torch.log((1 - d_target).clamp(eps, 1 - eps))
    return _reduce(src, reduction) + _reduce(tgt, reduction)


def prediction_entropy(probs, eps=1e-7, reduction="mean"):
    """Shannon entropy per row, with ``0 * log 0 = 0``."""
    return _reduce(-(probs * torch.log(probs.clamp_min(eps))).sum(1), reduction)


def _normalize_codes(h):
    h = h - h.mean(0, keepdim=True)
    return h / h.norm(dim=1, keepdim=True).clamp_min(1e-12)


def l_diff(content, style):
    """Squared Frobenius norm of content^T style after batch-centering and row normalization.

    Accepts a single ``(content, style)`` pair or sequences of pairs (one per domain).
    """
    if torch.is_tensor(content):
        content, style = [content], [style]
    total = 0.0
    for hc, hp in zip(content, style):
        total = total + (_normalize_codes(hc).T @ _normalize_codes(hp)).pow(2).sum()
    return total


def _as_batch_tensors(bundle, batch: Batch):
    x = bundle.as_tensor(batch.images)
    y = None if batch.labels is None else torch.as_tensor(np.array(batch.labels), dtype=torch.long)
    return x, y


def _weights_tensor(bundle, class_weights):
    return torch.as_tensor(class_weights, dtype=bundle.dtype)


def l_recon(bundle, source: Batch, target: Batch, class_weights, variant="printed", reduction="mean"):
    xs, ys = _as_batch_tensors(bundle, source)
    xt, _ = _as_batch_tensors(bundle, target)
    w = _sample_weights(_weights_tensor(bundle, class_weights), ys)
    src = w * sim_per_sample(bundle.reconstruct(xs, Domain.SOURCE), xs, variant)
    tgt = sim_per_sample(bundle.reconstruct(xt, Domain.TARGET), xt, variant)
    return _reduce(src, reduction) + _reduce(tgt, reduction)


def l_class(bundle, source: Batch, class_weights, eps=1e-7, reduction="mean"):
    xs, ys = _as_batch_tensors(bundle, source)
    w = _sample_weights(_weights_tensor(bundle, class_weights), ys)
    return weighted_nll(bundle(xs), ys, w, eps, reduction)


def l_adv(bundle, source: Batch, target: Batch, class_weights, grl_coeff=1.0, eps=1e-7,
          strict=False, reduction="mean"):
    xs, ys = _as_batch_tensors(bundle, source)
    xt, _ = _as_batch_tensors(bundle, target)
    w = _sample_weights(_weights_tensor(bundle, class_weights), ys)
    d_s = bundle.discriminate(bundle.content(xs), grl_coeff)
    d_t = bundle.discriminate(bundle.content(xt), grl_coeff)
    return adversarial_terms(d_s, d_t, w, eps, strict, reduction)


def l_ent(bundle, target: Batch, eps=1e-7, reduction="mean"):
    xt, _ = _as_batch_tensors(bundle, target)
    return prediction_entropy(bundle(xt), eps, reduction)


def total_loss(recon, class_, adv, ent, weights: LossWeights, diff=None):
    """Combine loss terms (tensors or floats) into ``(total, LossReport)``.

    Raises :class:`TrainingError` naming the first non-finite term.
    """
    terms = {"recon": recon, "class": class_, "adv": adv, "ent": ent, "diff": 0.0 if diff is None else diff}
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
    total = weights.lambda_recon * recon + class_ + adv + ent
    if diff is not None:
        total = total + weights.lambda_diff * diff
    report = LossReport(values["recon"], values["class"], values["adv"], values["ent"],
                        values["diff"], float(total.detach()) if torch.is_tensor(total) else float(total))
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} loss ({value})", report)
    if not math.isfinite(report.total):
        raise TrainingError(f"non-finite total loss ({report.total})", report)
    return total, report


def objective(bundle, source: Batch, target: Batch, class_weights, grl_coeff, weights: LossWeights,
              sim_variant="printed", adv_strict=False, use_diff=False, reduction="mean"):
    """All terms from a single forward pass per domain; returns ``(total, LossReport)``."""
    eps = weights.epsilon_log
    xs, ys = _as_batch_tensors(bundle, source)
    xt, _ = _as_batch_tensors(bundle, target)
    w = _sample_weights(_weights_tensor(bundle, class_weights), ys)

    cs, ct = bundle.content(xs), bundle.content(xt)
    ss, st = bundle.style(xs, Domain.SOURCE), bundle.style(xt, Domain.TARGET)
    recon = (_reduce(w * sim_per_sample(bundle.decode(cs, ss, Domain.SOURCE), xs, sim_variant), reduction)
             + _reduce(sim_per_sample(bundle.decode(ct, st, Domain.TARGET), xt, sim_variant), reduction))
    cls = weighted_nll(bundle.label_classifier(cs), ys, w, eps, reduction)
    pt = bundle.label_classifier(ct)
    adv = adversarial_terms(bundle.discriminate(cs, grl_coeff), bundle.discriminate(ct, grl_coeff),
                            w, eps, adv_strict, reduction)
    ent = prediction_entropy(pt, eps, reduction)
    diff = l_diff([cs, ct], [ss, st]) if use_diff else None
    return total_loss(recon, cls, adv, ent, weights, diff)

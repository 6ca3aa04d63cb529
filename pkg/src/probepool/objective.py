"""Asymmetric multi-label loss and ranking metrics (AP / mAP / top-1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NoPositivesError


@dataclass(frozen=True)
class AslConfig:
    """Asymmetric loss constants. Defaults: no focusing on positives,
    strong down-weighting plus probability shift on negatives."""

    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("margin must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


def _safe_pow(base: np.ndarray, exponent: float) -> np.ndarray:
    # 0**0 -> 1 and 0**negative guarded; base is >= 0 here.
    if exponent == 0.0:
        return np.ones_like(base)
    return np.power(base, exponent)


def asl_loss(logits, labels, cfg: AslConfig = AslConfig()):
    """Asymmetric multi-label loss and its exact gradient.

    ``logits`` is (C,) or (B, C); ``labels`` is a matching {0,1} array.
    Positives contribute -(1-p)^g+ * log(p+eps); negatives shift the
    probability to p_m = max(p - margin, 0) and contribute
    -(p_m)^g- * log(1-p_m+eps). The loss is the mean over all entries, and
    ``dlogits`` is the gradient of that mean w.r.t. the logits.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    x = logits.astype(np.float64)
    y = labels.astype(np.float64)

    p = 1.0 / (1.0 + np.exp(-x))
    eps = cfg.eps

    one_minus_p = 1.0 - p
    loss_pos = -_safe_pow(one_minus_p, cfg.gamma_pos) * np.log(p + eps)
    # d/dp of the positive branch
    dpos = -_safe_pow(one_minus_p, cfg.gamma_pos) / (p + eps)
    if cfg.gamma_pos > 0.0:
        dpos = dpos + cfg.gamma_pos * _safe_pow(one_minus_p, cfg.gamma_pos - 1.0) * np.log(
            p + eps
        )

    pm = np.maximum(p - cfg.margin, 0.0)
    loss_neg = -_safe_pow(pm, cfg.gamma_neg) * np.log(1.0 - pm + eps)
    dneg = _safe_pow(pm, cfg.gamma_neg) / (1.0 - pm + eps)
    if cfg.gamma_neg > 0.0:
        pm_safe = np.where(pm > 0.0, pm, 1.0)
        dneg = dneg - cfg.gamma_neg * np.where(
            pm > 0.0, _safe_pow(pm_safe, cfg.gamma_neg - 1.0), 0.0
        ) * np.log(1.0 - pm + eps)
    dneg = np.where(p > cfg.margin, dneg, 0.0)  # p_m kink: flat below margin

    per_entry = y * loss_pos + (1.0 - y) * loss_neg
    dper_entry = y * dpos + (1.0 - y) * dneg
    n = per_entry.size
    loss = float(per_entry.sum() / n)
    dlogits = (dper_entry * p * one_minus_p / n).astype(logits.dtype, copy=False)
    return loss, dlogits


def average_precision(scores, labels) -> float:
    """AP with descending stable ordering: equal scores keep original order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise NoPositivesError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, scores.size + 1)
    return float((cum_hits[hits] / ranks[hits]).mean())


def mean_average_precision(scores, labels) -> float:
    """Macro mAP: mean of per-class AP over classes with >= 1 positive."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    aps = []
    for c in range(scores.shape[1]):
        if labels[:, c].sum() == 0:
            continue
        aps.append(average_precision(scores[:, c], labels[:, c]))
    if not aps:
        raise NoPositivesError("no class has a positive label")
    return float(np.mean(aps))


def top1_accuracy(scores, targets) -> float:
    """Fraction of rows whose argmax matches the integer target."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.ndim != 2 or targets.ndim != 1 or scores.shape[0] != targets.shape[0]:
        raise DimensionError(f"scores {scores.shape} vs targets {targets.shape}")
    return float((scores.argmax(axis=1) == targets).mean())

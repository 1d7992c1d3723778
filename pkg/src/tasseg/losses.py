"""Segmentation and boundary objectives."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import boundary_targets
from .tensor import ContractError, Tensor, log_softmax

SMOOTH_SIGMA = 1.0
SMOOTH_TAU = 4.0
SMOOTH_WEIGHT = 0.15
PROB_EPS = 1e-7


def median_frequency_weights(train_labels: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """``median(freq) / freq_c`` over classes present; absent classes get 1."""
    counts = np.zeros(num_classes, dtype=np.float64)
    total = 0
    for labels in train_labels:
        labels = np.asarray(labels)
        if labels.size and labels.max() >= num_classes:
            raise ContractError(f"label {labels.max()} outside [0, {num_classes})")
        counts += np.bincount(labels, minlength=num_classes)
        total += labels.size
    if total == 0:
        raise ContractError("empty training set")
    present = counts > 0
    freq = counts / total
    weights = np.ones(num_classes)
    weights[present] = np.median(freq[present]) / freq[present]
    return weights


def positive_weight(train_labels: Sequence[np.ndarray], radius: int = 0) -> float:
    """Total frames over boundary frames in the training set."""
    pos = total = 0.0
    for labels in train_labels:
        y = boundary_targets(labels, radius)
        pos += y.sum()
        total += y.size
    if pos == 0:
        raise ContractError("no boundary frames in the training set")
    return total / pos


def feature_similarity(features: np.ndarray, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """Gaussian kernel of adjacent-frame feature distance, length ``T - 1``."""
    x = np.asarray(features, dtype=np.float64)
    d2 = ((x[1:] - x[:-1]) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def gs_tmse(logits: Tensor, features: np.ndarray, sigma: float = SMOOTH_SIGMA,
            tau: float = SMOOTH_TAU) -> Tensor:
    """Truncated squared change of adjacent log-probabilities, down-weighted
    where consecutive feature rows differ."""
    if logits.shape[0] < 2:
        raise ContractError("smoothing loss needs at least two frames")
    return gs_tmse_logprob(log_softmax(logits, axis=1), features, sigma, tau)


def gs_tmse_logprob(logp: Tensor, features: np.ndarray, sigma: float = SMOOTH_SIGMA,
                    tau: float = SMOOTH_TAU) -> Tensor:
    t, c = logp.shape
    if t < 2:
        raise ContractError("smoothing loss needs at least two frames")
    delta = (logp[1:] - logp[:-1]).abs().clamp(hi=tau)
    kernel = feature_similarity(features, sigma).astype(logp.dtype)[:, None]
    return (delta * delta * kernel).sum() * (1.0 / (t * c))


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over frames of ``-w[y] log p[y]``."""
    t = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(t), labels] = np.asarray(weights, dtype=logits.dtype)[labels]
    return -(logp * onehot).sum() * (1.0 / t)


def action_segmentation_loss(stages: Sequence[Tensor], labels: np.ndarray,
                             weights: np.ndarray, features: np.ndarray,
                             smooth_weight: float = SMOOTH_WEIGHT,
                             parts: dict | None = None) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    total = None
    for g, logits in enumerate(stages):
        if logits.shape[0] != labels.size:
            raise ContractError(f"stage {g}: {logits.shape[0]} frames vs {labels.size} labels")
        cls = weighted_cross_entropy(logits, labels, weights)
        smo = gs_tmse(logits, features) if labels.size > 1 else cls * 0.0
        term = cls + smo * smooth_weight
        if parts is not None:
            parts.setdefault("cls", []).append(cls.item())
            parts.setdefault("smooth", []).append(smo.item())
        total = term if total is None else total + term
    return total * (1.0 / len(stages))


def boundary_regression_loss(stages: Sequence[Tensor], targets: np.ndarray,
                             pos_weight: float, parts: dict | None = None) -> Tensor:
    """Weighted binary cross-entropy over frames, averaged over stages.

    ``stages`` hold probabilities (``T`` or ``T x 1``), clamped away from
    0 and 1 before the logarithm.
    """
    y = np.asarray(targets, dtype=np.float64)
    total = None
    for g, probs in enumerate(stages):
        p = probs.reshape(-1)
        if p.shape[0] != y.size:
            raise ContractError(f"stage {g}: {p.shape[0]} frames vs {y.size} targets")
        p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
        yt = y.astype(p.dtype)
        ll = p.log() * (pos_weight * yt) + (1.0 - p).log() * (1.0 - yt)
        term = -ll.sum() * (1.0 / y.size)
        if parts is not None:
            parts.setdefault("boundary", []).append(term.item())
        total = term if total is None else total + term
    return total * (1.0 / len(stages))


@dataclass
class LossReport:
    total: float
    segmentation: float
    boundary: float
    boundary_weight: float
    per_stage: dict[str, list[float]] = field(default_factory=dict)
    epoch: int | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return json.dumps(d, sort_keys=True)


def total_loss(seg_stages: Sequence[Tensor], boundary_stages: Sequence[Tensor] | None,
               labels: np.ndarray, features: np.ndarray, weights: np.ndarray,
               pos_weight: float, boundary_weight: float = 1.0,
               smooth_weight: float = SMOOTH_WEIGHT,
               boundary_radius: int = 0) -> tuple[Tensor, LossReport]:
    """Segmentation loss plus ``boundary_weight`` times the boundary loss.

    ``boundary_stages`` are raw boundary logits per stage; pass ``None`` to
    train the segmentation branch alone.
    """
    parts: dict = {}
    seg = action_segmentation_loss(seg_stages, labels, weights, features, smooth_weight, parts)
    loss = seg
    br_value = 0.0
    if boundary_stages is not None and boundary_weight != 0.0:
        targets = boundary_targets(labels, boundary_radius)
        probs = [s.sigmoid() for s in boundary_stages]
        br = boundary_regression_loss(probs, targets, pos_weight, parts)
        br_value = br.item()
        loss = seg + br * boundary_weight
    report = LossReport(
        total=loss.item(),
        segmentation=seg.item(),
        boundary=br_value,
        boundary_weight=boundary_weight,
        per_stage=parts,
    )
    return loss, report

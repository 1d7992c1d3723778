"""Boundary branch and boundary-driven calibration of frame predictions."""
from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from .ase import Ase, AseConfig
from .data import Segment, segments_from_labels
from .tensor import ContractError, Tensor

BOUNDARY_THRESHOLD = 0.5


def boundary_model(config: AseConfig, seed: int = 0, dtype=np.float64) -> Ase:
    """An encoder-decoder stack shaped like the segmenter with a width-1 head."""
    return Ase(config, seed=seed, out_dim=1, dtype=dtype)


def prc_forward(features, model: Ase) -> list[Tensor]:
    """Per-stage boundary probabilities, each ``T x 1`` in (0, 1)."""
    return [logits.sigmoid() for logits in model(features)]


def select_boundaries(probs: Sequence[float], threshold: float = BOUNDARY_THRESHOLD) -> np.ndarray:
    """Mark local maxima above ``threshold``.

    A frame qualifies when it is at least as large as both neighbours (one
    neighbour at the edges).  On a plateau of equal values only its
    leftmost frame is kept.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    t = p.size
    out = np.zeros(t, dtype=np.int64)
    if t == 0:
        return out
    s = 0
    while s < t:
        e = s
        while e + 1 < t and p[e + 1] == p[s]:
            e += 1
        left_ok = s == 0 or p[s - 1] < p[s]
        right_ok = e == t - 1 or p[e + 1] < p[s]
        if left_ok and right_ok and p[s] > threshold:
            out[s] = 1
        s = e + 1
    return out


def _majority(values: np.ndarray) -> int:
    counts = Counter(values.tolist())
    top = max(counts.values())
    tied = [c for c, n in counts.items() if n == top]
    if len(tied) == 1:
        return tied[0]
    longest: dict[int, int] = {}
    for seg in segments_from_labels(values):
        longest[seg.label] = max(longest.get(seg.label, 0), seg.length)
    return min(tied, key=lambda c: (-longest[c], c))


def calibration_segments(pred: Sequence[int], boundaries: Sequence[int]) -> list[Segment]:
    """Pieces cut at boundary frames, each labelled by majority vote.

    A boundary at frame 0 opens the first piece and adds no cut.  Ties go to
    the label with the longest run inside the piece, then to the smallest
    class id.  Neighbouring pieces may end up with the same label.
    """
    pred = np.asarray(pred, dtype=np.int64)
    b = np.asarray(boundaries).reshape(-1)
    if pred.shape[0] != b.shape[0]:
        raise ContractError(f"prediction length {pred.size} != boundary length {b.size}")
    if pred.size == 0:
        return []
    cuts = [int(i) for i in np.flatnonzero(b) if i > 0]
    edges = [0, *cuts, pred.size]
    return [Segment(_majority(pred[s:e]), s, e) for s, e in zip(edges[:-1], edges[1:])]


def calibrate(pred: Sequence[int], boundaries: Sequence[int]) -> np.ndarray:
    """Reassign every frame the majority label of its boundary-delimited piece."""
    pieces = calibration_segments(pred, boundaries)
    out = np.empty(len(pred), dtype=np.int64)
    for label, s, e in pieces:
        out[s:e] = label
    return out


def refine(seg_stages: Sequence[Tensor], boundary_stages: Sequence[Tensor],
           threshold: float = BOUNDARY_THRESHOLD) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw final-stage prediction, selected boundaries, calibrated prediction."""
    raw = seg_stages[-1].data.argmax(axis=1)
    probs = boundary_stages[-1].data.reshape(-1)
    b = select_boundaries(probs, threshold)
    return raw, b, calibrate(raw, b)

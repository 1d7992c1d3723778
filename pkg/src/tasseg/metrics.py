"""Frame accuracy, segmental edit score and segmental F1@k."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import segments_from_labels
from .tensor import ContractError

OVERLAPS = (10, 25, 50)


def frame_accuracy(pred: Sequence[int], gt: Sequence[int]) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction length {pred.size} != ground truth length {gt.size}")
    if gt.size == 0:
        raise ContractError("empty ground truth")
    return 100.0 * float((pred == gt).mean())


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    row = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        prev, row = row, np.empty_like(row)
        row[0] = i
        for j in range(1, len(b) + 1):
            row[j] = min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1]))
    return int(row[-1])


def edit_score(pred: Sequence[int], gt: Sequence[int]) -> float:
    if len(gt) == 0:
        raise ContractError("empty ground truth")
    p = [s.label for s in segments_from_labels(pred)] if len(pred) else []
    g = [s.label for s in segments_from_labels(gt)]
    return 100.0 * (1.0 - levenshtein(p, g) / max(len(p), len(g)))


def _iou(p, g) -> float:
    inter = min(p.end, g.end) - max(p.start, g.start)
    if inter <= 0:
        return 0.0
    return inter / (max(p.end, g.end) - min(p.start, g.start))


def f1_counts(pred: Sequence[int], gt: Sequence[int], k: float,
              method: str = "optimal") -> tuple[int, int, int]:
    """True positives, false positives and false negatives at IoU threshold ``k``.

    A predicted segment can be a true positive only through a same-class
    ground-truth segment whose IoU strictly exceeds ``k / 100``; each
    ground-truth segment is used at most once.  ``method="optimal"`` takes a
    maximum matching over those pairs.  ``method="greedy"`` is the common
    benchmark routine (each prediction, in temporal order, grabs its best
    unmatched candidate) and can undercount on crowded same-class layouts.
    """
    psegs = segments_from_labels(pred) if len(pred) else []
    gsegs = segments_from_labels(gt) if len(gt) else []
    thr = k / 100.0
    edges = [
        [j for j, g in enumerate(gsegs) if g.label == p.label and _iou(p, g) > thr]
        for p in psegs
    ]
    if method == "greedy":
        used = [False] * len(gsegs)
        tp = 0
        for p, cand in zip(psegs, edges):
            best = [j for j in cand if not used[j]]
            if best:
                used[max(best, key=lambda j: (_iou(p, gsegs[j]), -j))] = True
                tp += 1
    elif method == "optimal":
        tp = _max_matching(edges, len(gsegs))
    else:
        raise ValueError(f"unknown matching method {method!r}")
    return tp, len(psegs) - tp, len(gsegs) - tp


def _max_matching(edges: list[list[int]], num_right: int) -> int:
    """Augmenting-path maximum bipartite matching."""
    owner = [-1] * num_right

    def augment(i: int, seen: list[bool]) -> bool:
        for j in edges[i]:
            if seen[j]:
                continue
            seen[j] = True
            if owner[j] < 0 or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    return sum(augment(i, [False] * num_right) for i in range(len(edges)))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 100.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def f1_at_k(pred: Sequence[int], gt: Sequence[int], k: float, method: str = "optimal") -> float:
    return f1_from_counts(*f1_counts(pred, gt, k, method))


@dataclass
class EvalReport:
    acc: float
    edit: float
    f1: dict[int, float]
    per_video: dict[str, dict] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def row(self) -> list[float]:
        return [self.f1[k] for k in OVERLAPS] + [self.edit, self.acc]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["f1"] = {str(k): v for k, v in self.f1.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, title: str = "") -> str:
        head = ["", "F1@10", "F1@25", "F1@50", "Edit", "Acc"]
        name = title or "all"
        rows = [(name, self)]
        rows += [(vid, _report_from_dict(d)) for vid, d in sorted(self.per_video.items())]
        width = max(len(head[0]), *(len(r[0]) for r in rows))
        lines = [head[0].ljust(width) + "".join(h.rjust(8) for h in head[1:])]
        for label, rep in rows:
            lines.append(label.ljust(width) + "".join(f"{x:8.2f}" for x in rep.row()))
        return "\n".join(lines) + "\n"


def _report_from_dict(d: dict) -> EvalReport:
    return EvalReport(d["acc"], d["edit"], {int(k): v for k, v in d["f1"].items()})


def evaluate_video(pred: Sequence[int], gt: Sequence[int]) -> dict:
    return {
        "acc": frame_accuracy(pred, gt),
        "edit": edit_score(pred, gt),
        "f1": {k: f1_at_k(pred, gt, k) for k in OVERLAPS},
        "frames": len(gt),
    }


def evaluate_corpus(pairs: Iterable[tuple[str, Sequence[int], Sequence[int]]]) -> EvalReport:
    """Frame accuracy pooled over all frames; edit and F1 averaged over videos."""
    per_video: dict[str, dict] = {}
    errors: dict[str, str] = {}
    correct = total = 0
    for vid, pred, gt in pairs:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            errors[vid] = f"length mismatch: prediction {pred.size}, ground truth {gt.size}"
            continue
        per_video[vid] = evaluate_video(pred, gt)
        correct += int((pred == gt).sum())
        total += gt.size
    if not per_video:
        raise ContractError("no evaluable videos")
    n = len(per_video)
    return EvalReport(
        acc=100.0 * correct / total,
        edit=sum(v["edit"] for v in per_video.values()) / n,
        f1={k: sum(v["f1"][k] for v in per_video.values()) / n for k in OVERLAPS},
        per_video=per_video,
        errors=errors,
    )


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    n = len(reports)
    return EvalReport(
        acc=sum(r.acc for r in reports) / n,
        edit=sum(r.edit for r in reports) / n,
        f1={k: sum(r.f1[k] for r in reports) / n for k in OVERLAPS},
    )

"""Label/segment conversions, clip sampling and cross-validation folds."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import ContractError

log = logging.getLogger(__name__)

WINDOW_LEN = 16


class Segment(NamedTuple):
    label: int
    start: int  # inclusive
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray  # T x D_in
    labels: np.ndarray  # T class ids
    fps: float = 15.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"{self.id}: {self.features.shape[0]} feature rows vs {len(self.labels)} labels"
            )

    @property
    def num_frames(self) -> int:
        return int(self.labels.shape[0])


def segments_from_labels(labels: Sequence[int]) -> list[Segment]:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("cannot segment an empty label sequence")
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return [Segment(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def labels_from_segments(segments: Sequence[Segment]) -> np.ndarray:
    if not segments:
        return np.zeros(0, dtype=np.int64)
    out = np.empty(segments[-1][2], dtype=np.int64)
    for label, start, end in segments:
        out[start:end] = label
    return out


def boundary_targets(labels: Sequence[int], radius: int = 0) -> np.ndarray:
    """1 at every segment start (frame 0 included), optionally widened."""
    labels = np.asarray(labels)
    y = np.zeros(labels.size, dtype=np.float64)
    y[0] = 1.0
    y[1:][labels[1:] != labels[:-1]] = 1.0
    if radius > 0:
        idx = np.flatnonzero(y)
        for r in range(1, radius + 1):
            y[np.clip(idx - r, 0, labels.size - 1)] = 1.0
            y[np.clip(idx + r, 0, labels.size - 1)] = 1.0
    return y


@dataclass(frozen=True)
class WindowSpec:
    ds: int
    ol: int
    window_len: int = WINDOW_LEN

    def __post_init__(self):
        if self.ds < 1 or self.ol < 1 or self.window_len < 1:
            raise ContractError(f"invalid window spec {self}")

    @property
    def span(self) -> int:
        return self.window_len * self.ds

    @property
    def stride(self) -> int:
        # ol=2 -> half-overlapping windows, ol=1 -> abutting windows
        return max(1, self.span // self.ol)


DEFAULT_WINDOWS = (WindowSpec(4, 2), WindowSpec(8, 1), WindowSpec(12, 1))


@dataclass
class Clip:
    video_id: str
    indices: np.ndarray
    labels: np.ndarray
    actions: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.actions)


def make_clip(video: VideoRecord, indices: np.ndarray) -> Clip:
    labels = video.labels[indices]
    actions = [seg.label for seg in segments_from_labels(labels)]
    return Clip(video.id, indices, labels, actions)


def window_starts(num_frames: int, spec: WindowSpec) -> np.ndarray:
    if num_frames < spec.span:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, num_frames - spec.span + 1, spec.stride, dtype=np.int64)


def sample_windows(video: VideoRecord, spec: WindowSpec, phase: int = 0) -> list[Clip]:
    """Fixed-length clips taking every ``ds``-th frame; partial tails are dropped.

    ``phase`` shifts every window start by that many frames, which lets
    feature extraction reach frames between the sampled ones.
    """
    t = video.num_frames - phase
    starts = window_starts(t, spec)
    if starts.size == 0:
        warnings.warn(
            f"video {video.id}: {video.num_frames} frames is shorter than one window span "
            f"({spec.span})",
            RuntimeWarning,
            stacklevel=2,
        )
        return []
    offsets = np.arange(spec.window_len) * spec.ds
    return [make_clip(video, phase + s + offsets) for s in starts]


def expected_window_count(num_frames: int, spec: WindowSpec) -> int:
    if num_frames < spec.span:
        return 0
    return (num_frames - spec.span) // spec.stride + 1


def make_folds(video_ids: Sequence[str], k: int = 4, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Shuffle once, then deal ids into ``k`` test sets of near-equal size."""
    ids = list(video_ids)
    if k < 2:
        raise ContractError("need at least two folds")
    if k > len(ids):
        raise ContractError(f"{k} folds requested for {len(ids)} videos")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    sizes = [len(ids) // k + (1 if i < len(ids) % k else 0) for i in range(k)]
    folds = []
    start = 0
    for size in sizes:
        test = shuffled[start : start + size]
        start += size
        test_set = set(test)
        train = [v for v in shuffled if v not in test_set]
        folds.append((sorted(train), sorted(test)))
    return folds

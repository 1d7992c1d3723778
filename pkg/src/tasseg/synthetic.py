"""Seeded stand-in for a CPR training corpus.

Labels follow a frame-level Markov chain that mostly walks through the
procedure in order; features are class centroids plus temporally smoothed
Gaussian noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .data import VideoRecord
from .tensor import ContractError

CPR_ACTIONS = (
    "checking scene safety",
    "kneeling beside the patient",
    "tapping the shoulders",
    "shouting to the patient",
    "checking for breathing",
    "declaring someone is sick",
    "calling emergency services",
    "locating the compression point",
    "performing chest compressions",
    "requesting professional assistance",
    "opening the airway",
    "giving rescue breaths",
    "checking the pulse",
    "using the defibrillator",
    "placing in recovery position",
)


def class_names(num_classes: int) -> list[str]:
    if num_classes <= len(CPR_ACTIONS):
        return list(CPR_ACTIONS[:num_classes])
    extra = [f"auxiliary action {i}" for i in range(len(CPR_ACTIONS), num_classes)]
    return list(CPR_ACTIONS) + extra


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 15
    num_videos: int = 99
    mean_frames: int = 500
    frame_jitter: float = 0.2
    feature_dim: int = 32
    centroid_scale: float = 1.0
    noise_scale: float = 1.1
    noise_smoothing: float = 2.0
    # expected segments per video = 1 + (T - 1) * (1 - self_transition) ~ 17 at T=500
    self_transition: float = 0.968
    p_advance: float = 0.85
    p_skip: float = 0.05
    p_repeat: float = 0.10
    fps: float = 15.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ContractError("generator needs at least 2 classes")
        if self.mean_frames < 2:
            raise ContractError("generator needs at least 2 frames per video")
        if self.num_videos < 1:
            raise ContractError("generator needs at least 1 video")
        if not 0.0 <= self.self_transition < 1.0:
            raise ContractError("self_transition must lie in [0, 1)")
        if not 0.0 <= self.frame_jitter < 1.0:
            raise ContractError("frame_jitter must lie in [0, 1)")
        probs = (self.p_advance, self.p_skip, self.p_repeat)
        if min(probs) < 0 or sum(probs) <= 0:
            raise ContractError("leave probabilities must be non-negative with a positive sum")
        if self.noise_scale < 0:
            raise ContractError("noise_scale must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "GeneratorConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ContractError(f"unknown generator keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                caster = int if f.type in ("int", int) else float
                kwargs[f.name] = caster(values[f.name])
        return cls(**kwargs)


def class_centroids(config: GeneratorConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0xC3])
    return rng.normal(0.0, config.centroid_scale, size=(config.num_classes, config.feature_dim))


def sample_labels(rng: np.random.Generator, num_frames: int, config: GeneratorConfig) -> np.ndarray:
    c = config.num_classes
    leave = np.array([config.p_advance, config.p_skip, config.p_repeat], dtype=np.float64)
    leave /= leave.sum()
    steps = np.array([1, 2, -1])
    if c == 2:
        # every move lands on the other class
        steps = np.array([1, 1, 1])
    labels = np.empty(num_frames, dtype=np.int64)
    current = 0
    stay = rng.random(num_frames) < config.self_transition
    moves = rng.choice(3, size=num_frames, p=leave)
    labels[0] = current
    for s in range(1, num_frames):
        if not stay[s]:
            current = (current + steps[moves[s]]) % c
        labels[s] = current
    return labels


def smoothed_noise(rng: np.random.Generator, num_frames: int, dim: int, scale: float,
                   smoothing: float) -> np.ndarray:
    white = rng.normal(size=(num_frames, dim))
    if smoothing > 0:
        white = gaussian_filter1d(white, smoothing, axis=0, mode="reflect")
        white /= white.std(axis=0, keepdims=True) + 1e-12
    return scale * white


def generate_synthetic(config: GeneratorConfig | None = None, seed: int | None = None) -> list[VideoRecord]:
    config = config or GeneratorConfig()
    if seed is not None:
        config = GeneratorConfig(**{**config.to_dict(), "seed": seed})
    config.validate()
    centroids = class_centroids(config)
    children = np.random.SeedSequence(config.seed).spawn(config.num_videos)
    videos = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        jitter = rng.uniform(-config.frame_jitter, config.frame_jitter)
        t = max(2, int(round(config.mean_frames * (1.0 + jitter))))
        labels = sample_labels(rng, t, config)
        noise = smoothed_noise(rng, t, config.feature_dim, config.noise_scale, config.noise_smoothing)
        feats = (centroids[labels] + noise).astype(np.float32)
        videos.append(VideoRecord(f"video_{i:03d}", feats, labels, config.fps))
    return videos


def nearest_centroid_accuracy(videos: list[VideoRecord], centroids: np.ndarray) -> float:
    """Frame accuracy of assigning each feature row to its closest centroid."""
    correct = total = 0
    for v in videos:
        d = ((v.features[:, None, :] - centroids[None]) ** 2).sum(-1)
        correct += int((d.argmin(1) == v.labels).sum())
        total += v.num_frames
    return 100.0 * correct / total

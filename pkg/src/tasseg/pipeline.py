"""Training and inference for the full pipeline on one fold."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .ase import Ase, AseConfig
from .data import DEFAULT_WINDOWS, VideoRecord, WindowSpec
from .losses import LossReport, median_frequency_weights, positive_weight, total_loss
from .metrics import EvalReport, evaluate_corpus
from .optim import AdamW
from .prc import boundary_model, refine
from .tensor import Tensor, backward, current_tape, no_grad
from .vfe import Vfe, VfeConfig, extract_features, train_vfe

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    ase: AseConfig = field(default_factory=AseConfig)
    vfe: VfeConfig = field(default_factory=VfeConfig)
    use_vfe: bool = True
    use_boundary: bool = True
    windows: tuple[WindowSpec, ...] = DEFAULT_WINDOWS
    epochs: int = 6
    lr: float = 5e-4
    weight_decay: float = 1e-5
    boundary_weight: float = 1.0
    smooth_weight: float = 0.15
    boundary_radius: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = [[w.ds, w.ol] for w in self.windows]
        d["vfe"] = self.vfe.to_dict()
        return d


@dataclass
class SegmenterState:
    ase: Ase
    prc: Ase | None
    optimizer: AdamW
    weights: np.ndarray
    pos_weight: float
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def parameters_by_name(self) -> dict[str, np.ndarray]:
        out = {f"ase.{k}": v for k, v in self.ase.state_dict().items()}
        if self.prc is not None:
            out.update({f"prc.{k}": v for k, v in self.prc.state_dict().items()})
        return out

    def full_state(self) -> dict[str, np.ndarray]:
        out = self.parameters_by_name()
        out.update({f"optim.{k}": v for k, v in self.optimizer.state_dict().items()})
        out["class_weights"] = self.weights.astype(np.float32)
        out["pos_weight"] = np.array([self.pos_weight], dtype=np.float32)
        out["epoch"] = np.array([self.epoch], dtype=np.float32)
        return out

    def load_full_state(self, state: dict[str, np.ndarray]) -> None:
        self.ase.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("ase.")})
        if self.prc is not None:
            self.prc.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("prc.")})
        self.optimizer.load_state_dict(
            {k[6:]: v for k, v in state.items() if k.startswith("optim.")}
        )
        # class and boundary weights are stored for inspection only; the caller
        # rebuilds them in float64 from the training split
        self.epoch = int(state["epoch"][0])


def new_segmenter(config: TrainConfig, train: Sequence[VideoRecord], in_dim: int,
                  dtype=np.float32) -> SegmenterState:
    """Fresh models and optimizer; with no ``train`` videos (inference only)
    the loss weights are left at 1."""
    ase_cfg = replace(config.ase, in_dim=in_dim)
    ase = Ase(ase_cfg, seed=config.seed, dtype=dtype)
    prc = boundary_model(ase_cfg, seed=config.seed + 1, dtype=dtype) if config.use_boundary else None
    params = ase.parameters() + (prc.parameters() if prc else [])
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    labels = [v.labels for v in train]
    if labels:
        weights = median_frequency_weights(labels, ase_cfg.num_classes)
        pw = positive_weight(labels, config.boundary_radius)
    else:
        weights, pw = np.ones(ase_cfg.num_classes), 1.0
    return SegmenterState(ase, prc, opt, weights, pw)


def train_epoch(state: SegmenterState, config: TrainConfig, train: Sequence[VideoRecord]) -> LossReport:
    """One pass over ``train`` (one video per step) in a seeded order."""
    rng = np.random.default_rng([config.seed, state.epoch, 0xA5E])
    order = rng.permutation(len(train))
    sums = {"total": 0.0, "segmentation": 0.0, "boundary": 0.0}
    dtype = state.ase.encoder.head.weight.dtype
    for i in order:
        v = train[i]
        current_tape().clear()
        state.optimizer.zero_grad()
        x = Tensor(v.features.astype(dtype))
        seg = state.ase(x)
        bnd = state.prc(x) if state.prc is not None else None
        loss, rep = total_loss(
            seg, bnd, v.labels, v.features, state.weights, state.pos_weight,
            boundary_weight=config.boundary_weight if bnd is not None else 0.0,
            smooth_weight=config.smooth_weight, boundary_radius=config.boundary_radius,
        )
        if not math.isfinite(rep.total):
            current_tape().clear()
            raise TrainingError(
                f"non-finite loss at epoch {state.epoch} on {v.id}: "
                f"segmentation={rep.segmentation} boundary={rep.boundary}"
            )
        backward(loss)
        state.optimizer.step()
        sums["total"] += rep.total
        sums["segmentation"] += rep.segmentation
        sums["boundary"] += rep.boundary
    n = max(len(train), 1)
    report = LossReport(
        total=sums["total"] / n,
        segmentation=sums["segmentation"] / n,
        boundary=sums["boundary"] / n,
        boundary_weight=config.boundary_weight if state.prc is not None else 0.0,
        epoch=state.epoch,
    )
    state.epoch += 1
    state.history.append(asdict(report))
    return report


@dataclass
class Prediction:
    raw: np.ndarray
    boundaries: np.ndarray | None
    calibrated: np.ndarray
    stage_predictions: list[np.ndarray]


def predict(state: SegmenterState, features: np.ndarray) -> Prediction:
    dtype = state.ase.encoder.head.weight.dtype
    with no_grad():
        x = Tensor(features.astype(dtype))
        seg = state.ase(x)
        stages = [s.data.argmax(axis=1) for s in seg]
        if state.prc is None:
            return Prediction(stages[-1], None, stages[-1].copy(), stages)
        bnd = [s.sigmoid() for s in state.prc(x)]
    raw, b, cal = refine(seg, bnd)
    return Prediction(raw, b, cal, stages)


def featurize(videos: Sequence[VideoRecord], vfe: Vfe | None,
              windows: Sequence[WindowSpec]) -> list[VideoRecord]:
    if vfe is None:
        return list(videos)
    scale = np.float32(vfe.config.feature_scale)
    return [VideoRecord(v.id, extract_features(v, vfe, windows) * scale, v.labels, v.fps)
            for v in videos]


@dataclass
class FoldResult:
    raw: EvalReport
    calibrated: EvalReport
    first_stage: EvalReport
    history: list[dict]
    seconds: float
    predictions: dict[str, Prediction] = field(default_factory=dict)
    state: SegmenterState | None = None
    vfe: Vfe | None = None


def run_fold(videos: Sequence[VideoRecord], train_ids: Sequence[str], test_ids: Sequence[str],
             class_names: Sequence[str], config: TrainConfig,
             log_fn: Callable[[dict], None] | None = None) -> FoldResult:
    """VFE pretraining (optional), feature extraction, joint training, evaluation."""
    t0 = time.time()
    by_id = {v.id: v for v in videos}
    train = [by_id[i] for i in train_ids]
    test = [by_id[i] for i in test_ids]
    history: list[dict] = []
    vfe = None
    if config.use_vfe:
        vfe, vh = train_vfe(train, class_names, config.vfe, config.windows, seed=config.seed,
                            log_fn=log_fn)
        history += vh
    train_f = featurize(train, vfe, config.windows)
    test_f = featurize(test, vfe, config.windows)
    state = new_segmenter(config, train_f, train_f[0].features.shape[1])
    for _ in range(config.epochs):
        rep = train_epoch(state, config, train_f)
        record = {"phase": "segment", **asdict(rep)}
        record.pop("extra", None)
        history.append(record)
        if log_fn:
            log_fn(record)
    preds = {v.id: predict(state, v.features) for v in test_f}
    raw = evaluate_corpus((v.id, preds[v.id].raw, v.labels) for v in test_f)
    cal = evaluate_corpus((v.id, preds[v.id].calibrated, v.labels) for v in test_f)
    first = evaluate_corpus((v.id, preds[v.id].stage_predictions[0], v.labels) for v in test_f)
    return FoldResult(raw, cal, first, history, time.time() - t0, preds, state, vfe)

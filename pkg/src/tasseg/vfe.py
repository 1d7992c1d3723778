"""Prompt-supervised clip encoder and frame-wise feature extraction.

A small vision transformer reads a 16-frame clip together with ``K``
learned ordinal slot tokens and one count token.  A text transformer
embeds the prompts.  Slot outputs are contrasted with semantic prompts,
their mean with the integrated prompt, and the count token with the
statistical prompt.  After training, the frame-token outputs averaged over
all windows touching a frame become that frame's feature.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import DEFAULT_WINDOWS, WINDOW_LEN, Clip, VideoRecord, WindowSpec, sample_windows
from .nn import Linear, Module, uniform_param
from .optim import AdamW
from .prompts import Tokenizer, integrated_prompt, semantic_prompt, statistical_prompt
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    backward,
    concat,
    current_tape,
    embedding,
    layer_norm,
    log_softmax,
    no_grad,
    softmax,
)

log = logging.getLogger(__name__)

LOSS_TERMS = ("sem", "integ", "stat")


@dataclass(frozen=True)
class VfeConfig:
    in_dim: int = 32
    width: int = 64
    num_slots: int = 4
    num_blocks: int = 2
    mlp_ratio: int = 2
    max_text_len: int = 96
    temperature: float = 0.07
    lr: float = 2e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 10
    # multiplier applied by the pipeline before segmentation
    feature_scale: float = 3.0
    losses: tuple[str, ...] = LOSS_TERMS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = list(self.losses)
        return d


# -- similarity and contrastive loss -------------------------------------------


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"cosine: dimension {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ContractError("cosine of a zero vector is undefined")
    return float(u @ v / (nu * nv))


def l2_normalize(z: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ((z * z).sum(axis=-1, keepdims=True) + eps).sqrt()
    return z / norm


def batch_similarity(zc: Tensor, zt: Tensor) -> Tensor:
    """``B x B`` matrix of cosines between rows of ``zc`` and rows of ``zt``."""
    zc = zc if isinstance(zc, Tensor) else Tensor(zc)
    zt = zt if isinstance(zt, Tensor) else Tensor(zt)
    if zc.ndim != 2 or zt.ndim != 2 or zc.shape != zt.shape:
        raise ContractError(f"batch_similarity: shapes {zc.shape} and {zt.shape} differ")
    return l2_normalize(zc) @ l2_normalize(zt).T


def _row_kl(sim: Tensor, target: np.ndarray, temperature: float) -> Tensor:
    """Mean over rows of KL(target_row || softmax(sim_row / temperature))."""
    rows = target.sum(axis=1, keepdims=True)
    if np.any(rows <= 0):
        raise ContractError("every ground-truth row needs at least one positive pair")
    p = target / rows
    logq = log_softmax(sim * (1.0 / temperature), axis=1)
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    const = plogp.sum()
    cross = (logq * p.astype(logq.dtype)).sum()
    return (cross * -1.0 + float(const)) * (1.0 / p.shape[0])


def kl_contrastive_loss(s_c: Tensor, s_t: Tensor, gt: np.ndarray,
                        temperature: float = 0.07) -> Tensor:
    """Average of the clip-to-text and text-to-clip row-normalised KL terms."""
    gt = np.asarray(gt, dtype=np.float64)
    s_c = s_c if isinstance(s_c, Tensor) else Tensor(s_c)
    s_t = s_t if isinstance(s_t, Tensor) else Tensor(s_t)
    if s_c.shape != gt.shape or s_t.shape != gt.T.shape:
        raise ContractError(f"similarity shapes {s_c.shape}/{s_t.shape} vs target {gt.shape}")
    return (_row_kl(s_c, gt, temperature) + _row_kl(s_t, gt.T, temperature)) * 0.5


def pairing_matrix(texts: Sequence[str]) -> np.ndarray:
    """1 where two rows carry the same prompt text, else 0."""
    arr = np.asarray(texts, dtype=object)
    return (arr[:, None] == arr[None, :]).astype(np.float64)


def contrast(zc: Tensor, zt: Tensor, texts: Sequence[str], temperature: float) -> Tensor:
    s = batch_similarity(zc, zt)
    return kl_contrastive_loss(s, s.T, pairing_matrix(texts), temperature)


# -- encoders ------------------------------------------------------------------


class TransformerBlock(Module):
    """Pre-norm single-head self-attention and MLP over ``B x N x D`` tokens."""

    def __init__(self, rng: np.random.Generator, width: int, mlp_ratio: int = 2):
        self.query = Linear(rng, width, width)
        self.key = Linear(rng, width, width)
        self.value = Linear(rng, width, width)
        self.proj = Linear(rng, width, width)
        self.fc1 = Linear(rng, width, width * mlp_ratio)
        self.fc2 = Linear(rng, width * mlp_ratio, width)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = layer_norm(x)
        q, k, v = self.query(h), self.key(h), self.value(h)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(q.shape[-1]))
        if key_mask is not None:
            scores = scores + np.where(key_mask, 0.0, -1e9).astype(x.dtype)[:, None, :]
        x = x + self.proj(softmax(scores, axis=-1) @ v)
        return x + self.fc2(self.fc1(layer_norm(x)).relu())


class VisionEncoder(Module):
    def __init__(self, rng: np.random.Generator, config: VfeConfig):
        d = config.width
        self.num_slots = config.num_slots
        self.input = Linear(rng, config.in_dim, d)
        self.slots = uniform_param(rng, (config.num_slots, d), d)
        self.count = uniform_param(rng, (1, d), d)
        self.pos = uniform_param(rng, (WINDOW_LEN + config.num_slots + 1, d), d)
        self.blocks = [TransformerBlock(rng, d, config.mlp_ratio) for _ in range(config.num_blocks)]

    def forward(self, clips: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """``B x 16 x D_in`` -> frame tokens, slot tokens, count token."""
        b, n, _ = clips.shape
        if n != WINDOW_LEN:
            raise ShapeError(f"clips must have {WINDOW_LEN} frames, got {n}")
        frames = self.input(clips)
        zeros = Tensor(np.zeros((b, 1, 1), dtype=frames.dtype))
        slots = self.slots.reshape(1, self.num_slots, -1) + zeros
        count = self.count.reshape(1, 1, -1) + zeros
        x = concat([frames, slots, count], axis=1) + self.pos
        for block in self.blocks:
            x = block(x)
        x = layer_norm(x)
        return x[:, :n], x[:, n : n + self.num_slots], x[:, n + self.num_slots]

    def project_raw(self, rows: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.input(Tensor(rows.astype(self.input.weight.dtype))).data


class TextEncoder(Module):
    def __init__(self, rng: np.random.Generator, config: VfeConfig, vocab_size: int):
        d = config.width
        self.embed = uniform_param(rng, (vocab_size, d), d)
        self.pos = uniform_param(rng, (config.max_text_len, d), d)
        self.blocks = [TransformerBlock(rng, d, config.mlp_ratio) for _ in range(config.num_blocks)]

    def forward(self, token_ids: Sequence[Sequence[int]]) -> Tensor:
        """Mean-pooled embedding per token sequence, ``B x D``."""
        lengths = np.array([len(t) for t in token_ids])
        if lengths.min() < 1:
            raise ContractError("empty prompt")
        width = int(lengths.max())
        if width > self.pos.shape[0]:
            raise ContractError(f"prompt of {width} tokens exceeds max_text_len {self.pos.shape[0]}")
        ids = np.zeros((len(token_ids), width), dtype=np.int64)
        for i, t in enumerate(token_ids):
            ids[i, : len(t)] = t
        mask = np.arange(width)[None, :] < lengths[:, None]
        x = embedding(self.embed, ids) + self.pos[:width]
        for block in self.blocks:
            x = block(x, mask)
        x = layer_norm(x)
        weights = (mask / lengths[:, None]).astype(x.dtype)[:, :, None]
        return (x * weights).sum(axis=1)


class Vfe(Module):
    def __init__(self, config: VfeConfig, class_names: Sequence[str], seed: int = 0,
                 dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.config = config
        self.class_names = list(class_names)
        self.tokenizer = Tokenizer(self.class_names)
        self.vision = VisionEncoder(rng, config)
        self.text = TextEncoder(rng, config, len(self.tokenizer))
        self.astype(dtype)

    @property
    def dtype(self):
        return self.vision.input.weight.dtype

    def encode_text(self, texts: Sequence[str]) -> Tensor:
        return self.text([self.tokenizer.encode(t) for t in texts])


# -- batches and the united loss ----------------------------------------------


@dataclass
class ClipBatch:
    frames: np.ndarray  # B x 16 x D_in
    actions: list[list[int]]

    def __len__(self) -> int:
        return len(self.actions)


def make_batch(clips: Sequence[Clip], videos: dict[str, VideoRecord]) -> ClipBatch:
    frames = np.stack([videos[c.video_id].features[c.indices] for c in clips])
    return ClipBatch(frames, [list(c.actions) for c in clips])


@dataclass
class VfeOutputs:
    slots: Tensor
    count: Tensor
    texts: dict[str, list[str]] = field(default_factory=dict)


def vfe_total_loss(model: Vfe, batch: ClipBatch, terms: Sequence[str] = LOSS_TERMS,
                   parts: dict | None = None) -> Tensor:
    """Sum of per-slot semantic terms plus the integrated and count terms."""
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown or not terms:
        raise ContractError(f"loss terms must be a non-empty subset of {LOSS_TERMS}, got {terms}")
    if "sem" not in terms and "integ" not in terms and "stat" not in terms:
        raise ContractError("no loss term selected")
    cfg = model.config
    names = model.class_names
    x = Tensor(batch.frames.astype(model.dtype))
    _, slots, count = model.vision(x)
    k = cfg.num_slots
    present = np.array([[i < len(a) for i in range(k)] for a in batch.actions])
    total = None

    def add(term: Tensor, key: str):
        nonlocal total
        total = term if total is None else total + term
        if parts is not None:
            parts[key] = parts.get(key, 0.0) + term.item()

    if "sem" in terms:
        texts, rows, slot_of = [], [], []
        for i in range(k):
            for b, acts in enumerate(batch.actions):
                if i < len(acts):
                    texts.append(semantic_prompt(i + 1, names[acts[i]]))
                    rows.append(b)
                    slot_of.append(i)
        zt = model.encode_text(texts)
        rows, slot_of = np.array(rows), np.array(slot_of)
        for i in range(k):
            sel = np.flatnonzero(slot_of == i)
            if sel.size == 0:
                continue
            zc = slots[rows[sel], i]
            add(contrast(zc, zt[sel], [texts[j] for j in sel], cfg.temperature), "sem")
    if "integ" in terms:
        texts = [integrated_prompt([names[a] for a in acts[:k]]) for acts in batch.actions]
        weights = present / present.sum(axis=1, keepdims=True)
        pooled = (slots * weights.astype(model.dtype)[:, :, None]).sum(axis=1)
        add(contrast(pooled, model.encode_text(texts), texts, cfg.temperature), "integ")
    if "stat" in terms:
        texts = [statistical_prompt(len(acts)) for acts in batch.actions]
        add(contrast(count, model.encode_text(texts), texts, cfg.temperature), "stat")
    return total


# -- training and extraction -----------------------------------------------------


def training_clips(videos: Sequence[VideoRecord], specs: Sequence[WindowSpec] = DEFAULT_WINDOWS,
                   rng: np.random.Generator | None = None) -> list[Clip]:
    """Clips from every window spec; with ``rng``, each video/spec gets a random phase."""
    clips: list[Clip] = []
    for v in videos:
        for spec in specs:
            if v.num_frames < spec.span:
                continue
            phase = 0
            if rng is not None:
                slack = v.num_frames - spec.span
                phase = int(rng.integers(0, min(spec.stride, slack + 1)))
            clips.extend(sample_windows(v, spec, phase))
    return clips


def train_vfe(videos: Sequence[VideoRecord], class_names: Sequence[str],
              config: VfeConfig = VfeConfig(), specs: Sequence[WindowSpec] = DEFAULT_WINDOWS,
              seed: int = 0, dtype=np.float32, log_fn=None) -> tuple[Vfe, list[dict]]:
    model = Vfe(config, class_names, seed=seed, dtype=dtype)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    by_id = {v.id: v for v in videos}
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([seed, epoch, 0x5FE])
        clips = training_clips(videos, specs, rng)
        order = rng.permutation(len(clips))
        parts: dict = {}
        total = 0.0
        steps = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [clips[i] for i in order[start : start + config.batch_size]]
            if len(chunk) < 2:
                continue
            current_tape().clear()
            opt.zero_grad()
            loss = vfe_total_loss(model, make_batch(chunk, by_id), config.losses, parts)
            backward(loss)
            opt.step()
            total += loss.item()
            steps += 1
        record = {"phase": "vfe", "epoch": epoch, "loss": total / max(steps, 1)}
        record.update({k: v / max(steps, 1) for k, v in parts.items()})
        history.append(record)
        if log_fn:
            log_fn(record)
        log.info("vfe epoch %d loss %.4f", epoch, record["loss"])
    return model, history


def extract_features(video: VideoRecord, model: Vfe,
                     specs: Sequence[WindowSpec] = DEFAULT_WINDOWS,
                     batch_size: int = 256) -> np.ndarray:
    """Frame-wise ``T x width`` features.

    Windows are enumerated at every start phase below ``ds`` so that each
    frame inside some window span is a sampled token of at least one clip.
    A frame's feature is the mean of its token outputs over all clips that
    sample it; frames no window reaches get the vision input projection of
    their raw row.
    """
    if not specs:
        raise ContractError("at least one window spec is required")
    t = video.num_frames
    d = model.config.width
    acc = np.zeros((t, d), dtype=np.float64)
    hits = np.zeros(t, dtype=np.int64)
    index_sets = []
    for spec in specs:
        for phase in range(spec.ds):
            if t - phase < spec.span:
                break
            for s in range(phase, t - spec.span + 1, spec.stride):
                index_sets.append(s + np.arange(spec.window_len) * spec.ds)
    with no_grad():
        for start in range(0, len(index_sets), batch_size):
            idx = np.stack(index_sets[start : start + batch_size])
            frames = Tensor(video.features[idx].astype(model.dtype))
            tokens, _, _ = model.vision(frames)
            np.add.at(acc, idx.reshape(-1), tokens.data.reshape(-1, d))
            np.add.at(hits, idx.reshape(-1), 1)
    out = np.empty((t, d), dtype=np.float32)
    seen = hits > 0
    out[seen] = acc[seen] / hits[seen, None]
    if not seen.all():
        out[~seen] = model.vision.project_raw(video.features[~seen])
    return out


def clip_embeddings(model: Vfe, batch: ClipBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with no_grad():
        frames, slots, count = model.vision(Tensor(batch.frames.astype(model.dtype)))
    return frames.data, slots.data, count.data


def retrieval_accuracy(model: Vfe, clips: Sequence[Clip], videos: dict[str, VideoRecord],
                       slot: int = 0) -> float:
    """Top-1 rate at which a clip's slot embedding is closest to its own
    semantic prompt among all distinct prompts for that slot."""
    clips = [c for c in clips if len(c.actions) > slot]
    if not clips:
        raise ContractError("no clip has an action at that slot")
    _, slots, _ = clip_embeddings(model, make_batch(clips, videos))
    names = model.class_names
    own = [semantic_prompt(slot + 1, names[c.actions[slot]]) for c in clips]
    candidates = sorted(set(semantic_prompt(slot + 1, n) for n in names))
    with no_grad():
        zt = model.encode_text(candidates).data
    sim = batch_similarity_np(slots[:, slot], zt)
    picked = [candidates[j] for j in sim.argmax(axis=1)]
    return 100.0 * float(np.mean([p == o for p, o in zip(picked, own)]))


def batch_similarity_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T

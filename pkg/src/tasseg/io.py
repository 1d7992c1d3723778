"""On-disk dataset layout.

::

    <root>/mapping.txt              "<id> <name>" per line
    <root>/groundTruth/<video>.txt  one class name per frame
    <root>/features/<video>.bin     feature matrix (see below)
    <root>/splits/{train,test}.split<k>.bundle   one "<video>.txt" per line
    <root>/generator.cfg            key = value generator settings
    <root>/manifest.json            seed, config hash, video ids

Feature files: magic ``b"TASFEAT\\0"``, u32 version (1), u32 T, u32 D, then
``T*D`` little-endian float32 values in row-major order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import VideoRecord, make_folds

FEATURE_MAGIC = b"TASFEAT\0"
FEATURE_VERSION = 1


class DatasetError(OSError):
    pass


def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {arr.shape}")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != FEATURE_MAGIC:
        raise DatasetError(f"{path}: not a feature file")
    version, t, d = struct.unpack_from("<III", buf, 8)
    if version != FEATURE_VERSION:
        raise DatasetError(f"{path}: unsupported feature version {version}")
    if len(buf) != 20 + 4 * t * d:
        raise DatasetError(f"{path}: expected {t}x{d} values, file size {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=20).reshape(t, d).copy()


def write_mapping(path: str | Path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{i} {n}\n" for i, n in enumerate(names)), encoding="utf-8")


def read_mapping(path: str | Path) -> list[str]:
    names: dict[int, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        idx, _, name = line.strip().partition(" ")
        names[int(idx)] = name
    if sorted(names) != list(range(len(names))):
        raise DatasetError(f"{path}: class ids are not contiguous from 0")
    return [names[i] for i in range(len(names))]


def write_labels(path: str | Path, labels: Iterable[int], names: Sequence[str]) -> None:
    Path(path).write_text("".join(names[int(c)] + "\n" for c in labels), encoding="utf-8")


def read_labels(path: str | Path, names: Sequence[str]) -> np.ndarray:
    index = {n: i for i, n in enumerate(names)}
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        if line not in index:
            raise DatasetError(f"{path}:{lineno}: unknown class {line!r}")
        out.append(index[line])
    return np.asarray(out, dtype=np.int64)


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_kv(path: str | Path, values: dict, header: str | None = None) -> None:
    lines = [f"# {header}\n"] if header else []
    lines += [f"{k} = {v}\n" for k, v in values.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def config_hash(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_dataset(root: str | Path, videos: Sequence[VideoRecord], names: Sequence[str],
                 folds: int = 4, seed: int = 0, meta: dict | None = None) -> None:
    root = Path(root)
    (root / "groundTruth").mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)
    write_mapping(root / "mapping.txt", names)
    for v in videos:
        write_labels(root / "groundTruth" / f"{v.id}.txt", v.labels, names)
        write_features(root / "features" / f"{v.id}.bin", v.features)
    if folds >= 2 and len(videos) >= folds:
        for k, (train, test) in enumerate(make_folds([v.id for v in videos], folds, seed), 1):
            for kind, ids in (("train", train), ("test", test)):
                (root / "splits" / f"{kind}.split{k}.bundle").write_text(
                    "".join(f"{i}.txt\n" for i in ids), encoding="utf-8"
                )
    manifest = {"videos": [v.id for v in videos], "num_classes": len(names), "seed": seed}
    manifest.update(meta or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def list_videos(root: str | Path) -> list[str]:
    root = Path(root)
    gt = root / "groundTruth"
    if not gt.is_dir():
        raise DatasetError(f"{root}: no groundTruth directory")
    return sorted(p.stem for p in gt.glob("*.txt"))


def load_video(root: str | Path, video_id: str, names: Sequence[str] | None = None,
               feature_dir: str = "features") -> VideoRecord:
    root = Path(root)
    names = names if names is not None else read_mapping(root / "mapping.txt")
    gt_path = root / "groundTruth" / f"{video_id}.txt"
    feat_path = root / feature_dir / f"{video_id}.bin"
    for p in (gt_path, feat_path):
        if not p.exists():
            raise DatasetError(f"missing file {p}")
    labels = read_labels(gt_path, names)
    feats = read_features(feat_path)
    if feats.shape[0] != labels.shape[0]:
        raise DatasetError(f"{video_id}: {feats.shape[0]} feature rows vs {labels.shape[0]} labels")
    return VideoRecord(video_id, feats, labels)


def load_dataset(root: str | Path, ids: Sequence[str] | None = None,
                 feature_dir: str = "features") -> tuple[list[VideoRecord], list[str]]:
    root = Path(root)
    names = read_mapping(root / "mapping.txt")
    ids = list_videos(root) if ids is None else ids
    return [load_video(root, i, names, feature_dir) for i in ids], names


def read_split(root: str | Path, kind: str, fold: int) -> list[str]:
    path = Path(root) / "splits" / f"{kind}.split{fold}.bundle"
    if not path.exists():
        raise DatasetError(f"missing split file {path}")
    return [line.strip().removesuffix(".txt") for line in path.read_text().splitlines() if line.strip()]

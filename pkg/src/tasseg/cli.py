"""Command-line entry point: generate, train, infer, evaluate.

Every command reads an optional ``key = value`` config file (``--config``);
flags override the file.  Progress is printed as JSON lines; failures print
one JSON line ``{"error": <category>, "message": ...}`` to stderr and exit
with the category's code.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io
from .ase import AseConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import WindowSpec, segments_from_labels
from .metrics import EvalReport, average_reports, evaluate_corpus
from .pipeline import (
    TrainConfig,
    TrainingError,
    featurize,
    new_segmenter,
    predict,
    train_epoch,
)
from .synthetic import GeneratorConfig, class_names, generate_synthetic
from .tensor import ContractError
from .vfe import Vfe, VfeConfig, train_vfe

EXIT_CODES = {
    "internal": 1,
    "config": 2,
    "path": 3,
    "data": 4,
    "unknown_video": 5,
    "training": 6,
    "evaluation": 7,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# -- configuration ---------------------------------------------------------------

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _bool(v: str) -> bool:
    if v.lower() not in _BOOL:
        raise ValueError(f"not a boolean: {v!r}")
    return _BOOL[v.lower()]


def _windows(v: str) -> tuple[WindowSpec, ...]:
    """``"4:2,8:1,12:1"`` -> ds/ol pairs."""
    out = []
    for part in v.split(","):
        ds, _, ol = part.strip().partition(":")
        out.append(WindowSpec(int(ds), int(ol or 1)))
    return tuple(out)


def _terms(v: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in v.split(",") if t.strip())


TRAIN_KEYS: dict[str, tuple[str, Callable]] = {
    # key: (TrainConfig / sub-config attribute path, parser)
    "epochs": ("epochs", int),
    "lr": ("lr", float),
    "weight_decay": ("weight_decay", float),
    "use_vfe": ("use_vfe", _bool),
    "use_boundary": ("use_boundary", _bool),
    "boundary_weight": ("boundary_weight", float),
    "smooth_weight": ("smooth_weight", float),
    "boundary_radius": ("boundary_radius", int),
    "windows": ("windows", _windows),
    "width": ("ase.width", int),
    "num_decoders": ("ase.num_decoders", int),
    "blocks_per_stage": ("ase.blocks_per_stage", int),
    "kernel_size": ("ase.kernel_size", int),
    "vfe_epochs": ("vfe.epochs", int),
    "vfe_lr": ("vfe.lr", float),
    "vfe_width": ("vfe.width", int),
    "vfe_slots": ("vfe.num_slots", int),
    "vfe_blocks": ("vfe.num_blocks", int),
    "vfe_batch_size": ("vfe.batch_size", int),
    "vfe_temperature": ("vfe.temperature", float),
    "vfe_losses": ("vfe.losses", _terms),
    "vfe_feature_scale": ("vfe.feature_scale", float),
}
GENERATOR_KEYS = {f for f in GeneratorConfig.__dataclass_fields__ if f != "seed"}
PATH_KEYS = {"data", "folds"}
KNOWN_KEYS = set(TRAIN_KEYS) | GENERATOR_KEYS | PATH_KEYS


def load_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    if not Path(path).is_file():
        raise CliError("path", f"config file not found: {path}")
    try:
        values = io.read_kv(path)
    except io.DatasetError as exc:
        raise CliError("config", str(exc)) from exc
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise CliError("config", f"unknown config keys: {', '.join(unknown)}")
    return values


def train_config(values: dict[str, str], seed: int) -> TrainConfig:
    cfg = TrainConfig(seed=seed)
    top: dict = {}
    ase: dict = {}
    vfe: dict = {}
    for key, raw in values.items():
        if key not in TRAIN_KEYS:
            continue
        attr, parse = TRAIN_KEYS[key]
        try:
            value = parse(raw)
        except (ValueError, ContractError) as exc:
            raise CliError("config", f"{key}: {exc}") from exc
        group, _, name = attr.rpartition(".")
        {"": top, "ase": ase, "vfe": vfe}[group][name] = value
    try:
        cfg = replace(cfg, ase=replace(cfg.ase, **ase), vfe=replace(cfg.vfe, **vfe), **top)
    except ContractError as exc:
        raise CliError("config", str(exc)) from exc
    if cfg.epochs < 1:
        raise CliError("config", "epochs must be >= 1")
    bad = set(cfg.vfe.losses) - {"sem", "integ", "stat"}
    if bad or not cfg.vfe.losses:
        raise CliError("config", "vfe_losses must be a non-empty subset of sem,integ,stat")
    return cfg


def train_config_from_dict(d: dict) -> TrainConfig:
    """Inverse of ``TrainConfig.to_dict`` for checkpoint metadata."""
    vfe = dict(d["vfe"])
    vfe["losses"] = tuple(vfe["losses"])
    return TrainConfig(
        ase=AseConfig(**d["ase"]),
        vfe=VfeConfig(**vfe),
        use_vfe=d["use_vfe"],
        use_boundary=d["use_boundary"],
        windows=tuple(WindowSpec(ds, ol) for ds, ol in d["windows"]),
        epochs=d["epochs"],
        lr=d["lr"],
        weight_decay=d["weight_decay"],
        boundary_weight=d["boundary_weight"],
        smooth_weight=d["smooth_weight"],
        boundary_radius=d["boundary_radius"],
        seed=d["seed"],
    )


def training_hash(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    d.pop("seed")
    return io.config_hash(d)


# -- helpers ---------------------------------------------------------------------


class JsonLog:
    def __init__(self, path: Path | None, quiet: bool = False):
        self.path = path
        self.quiet = quiet
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def __call__(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(line + "\n")
        if not self.quiet:
            print(line, flush=True)


def _data_root(args, values: dict[str, str]) -> Path:
    root = args.data or values.get("data")
    if root is None:
        raise CliError("config", "no dataset given (use --data or the 'data' key)")
    root = Path(root)
    if not (root / "mapping.txt").is_file():
        raise CliError("path", f"no dataset at {root} (mapping.txt missing)")
    return root


def _folds(root: Path, fold_arg: str | None, default_all: bool) -> list[int]:
    available = sorted(
        int(p.name.removeprefix("test.split").removesuffix(".bundle"))
        for p in (root / "splits").glob("test.split*.bundle")
    )
    if not available:
        raise CliError("path", f"no split files under {root / 'splits'}")
    if fold_arg is None:
        return available if default_all else available[:1]
    if fold_arg == "all":
        return available
    try:
        k = int(fold_arg)
    except ValueError as exc:
        raise CliError("config", f"--fold must be an integer or 'all', got {fold_arg!r}") from exc
    if k not in available:
        raise CliError("config", f"fold {k} not in available folds {available}")
    return [k]


def _load_videos(root: Path, ids: Sequence[str]):
    try:
        return io.load_dataset(root, ids)
    except (io.DatasetError, ContractError) as exc:
        raise CliError("data", str(exc)) from exc


def _vfe_state_path(fold_dir: Path) -> Path:
    return fold_dir / "vfe.ckpt"


def _restore_vfe(fold_dir: Path, cfg: TrainConfig, names: list[str]) -> Vfe:
    tensors, _ = load_checkpoint(_vfe_state_path(fold_dir))
    vfe = Vfe(cfg.vfe, names, seed=cfg.seed, dtype=np.float32)
    vfe.load_state_dict(tensors)
    return vfe


# -- commands --------------------------------------------------------------------


def cmd_generate(args, values: dict[str, str]) -> int:
    if args.out is None:
        raise CliError("config", "generate needs --out")
    gen_values = {k: v for k, v in values.items() if k in GENERATOR_KEYS}
    try:
        cfg = GeneratorConfig.from_dict({**gen_values, "seed": args.seed})
        folds = int(values.get("folds", 4))
        videos = generate_synthetic(cfg)
    except (ValueError, ContractError) as exc:
        raise CliError("config", str(exc)) from exc
    names = class_names(cfg.num_classes)
    settings = cfg.to_dict()
    seed = settings.pop("seed")
    chash = io.config_hash({**settings, "folds": folds})
    out = Path(args.out)
    io.save_dataset(out, videos, names, folds=folds, seed=seed,
                    meta={"config_hash": chash, "generator": settings, "folds": folds})
    io.write_kv(out / "generator.cfg", {**settings, "folds": folds, "seed": seed},
                header=f"config_hash={chash} seed={seed}")
    print(json.dumps({"command": "generate", "videos": len(videos), "classes": len(names),
                      "config_hash": chash, "seed": seed, "out": str(out)}, sort_keys=True))
    return 0


def _train_fold(root: Path, fold: int, cfg: TrainConfig, out: Path, resume: str | None,
                quiet: bool) -> dict:
    train_ids = io.read_split(root, "train", fold)
    test_ids = io.read_split(root, "test", fold)
    videos, names = _load_videos(root, train_ids)
    if not videos:
        raise CliError("data", f"fold {fold} has no training videos")
    # class count and input width come from the dataset, not the config file
    cfg = replace(cfg, ase=replace(cfg.ase, num_classes=len(names)),
                  vfe=replace(cfg.vfe, in_dim=int(videos[0].features.shape[1])))
    chash = training_hash(cfg)
    fold_dir = out / f"fold{fold}"
    ckpt_dir = fold_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log = JsonLog(fold_dir / "train.jsonl", quiet)
    meta = {"config_hash": chash, "seed": cfg.seed, "fold": fold, "classes": names,
            "train_config": cfg.to_dict(), "test_ids": test_ids}
    log({"event": "start", "fold": fold, "config_hash": chash, "seed": cfg.seed,
         "train_videos": len(videos), "resume": resume})

    vfe = None
    if cfg.use_vfe:
        if resume is not None:
            vfe = _restore_vfe(fold_dir, cfg, names)
        else:
            vfe, _ = train_vfe(videos, names, cfg.vfe, cfg.windows, seed=cfg.seed,
                               log_fn=lambda r: log({"fold": fold, **r}))
            save_checkpoint(_vfe_state_path(fold_dir), vfe.state_dict(),
                            {**meta, "kind": "vfe"})
    feats = featurize(videos, vfe, cfg.windows)
    state = new_segmenter(cfg, feats, feats[0].features.shape[1])
    if resume is not None:
        try:
            tensors, rmeta = load_checkpoint(resume)
        except (OSError, CheckpointError) as exc:
            raise CliError("path", f"cannot resume from {resume}: {exc}") from exc
        if rmeta.get("config_hash") != chash or rmeta.get("seed") != cfg.seed:
            raise CliError("config", f"{resume} was written with a different config or seed")
        state.load_full_state(tensors)

    while state.epoch < cfg.epochs:
        try:
            rep = train_epoch(state, cfg, feats)
        except TrainingError as exc:
            log({"event": "abort", "fold": fold, "reason": str(exc)})
            raise CliError("training", str(exc)) from exc
        record = {"phase": "segment", "fold": fold, **json.loads(rep.to_json())}
        record.pop("per_stage", None)
        log(record)
        save_checkpoint(ckpt_dir / f"epoch_{state.epoch:03d}.ckpt", state.full_state(),
                        {**meta, "kind": "segmenter", "epoch": state.epoch})
    save_checkpoint(fold_dir / "model.ckpt", state.full_state(),
                    {**meta, "kind": "segmenter", "epoch": state.epoch,
                     "in_dim": int(feats[0].features.shape[1])})
    log({"event": "done", "fold": fold, "epochs": state.epoch, "config_hash": chash})
    return {"fold": fold, "config_hash": chash, "seed": cfg.seed, "epochs": state.epoch}


def cmd_train(args, values: dict[str, str]) -> int:
    if args.out is None:
        raise CliError("config", "train needs --out")
    root = _data_root(args, values)
    cfg = train_config(values, args.seed)
    folds = _folds(root, args.fold, default_all=False)
    if args.resume is not None and len(folds) != 1:
        raise CliError("config", "--resume needs a single --fold")
    if args.resume is not None and not Path(args.resume).is_file():
        raise CliError("path", f"checkpoint not found: {args.resume}")
    for fold in folds:
        _train_fold(root, fold, cfg, Path(args.out), args.resume, args.quiet)
    return 0


def _restore_segmenter(fold_dir: Path):
    path = fold_dir / "model.ckpt"
    if not path.is_file():
        raise CliError("path", f"checkpoint not found: {path}")
    try:
        tensors, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError("data", str(exc)) from exc
    cfg = train_config_from_dict(meta["train_config"])
    names = meta["classes"]
    vfe = _restore_vfe(fold_dir, cfg, names) if cfg.use_vfe else None
    state = new_segmenter(cfg, [], meta["in_dim"])
    state.load_full_state(tensors)
    return state, vfe, cfg, meta


def _parse_ids(raw: str | None) -> list[str] | None:
    if raw is None:
        return None
    return [i for i in (s.strip() for s in raw.split(",")) if i]


def cmd_infer(args, values: dict[str, str]) -> int:
    if args.out is None:
        raise CliError("config", "infer needs --out (the training output directory)")
    root = _data_root(args, values)
    folds = _folds(root, args.fold, default_all=False)
    ids = _parse_ids(args.ids)
    if ids is not None and not ids:
        print(json.dumps({"command": "infer", "videos": 0, "note": "empty id list"}))
        return 0
    available = set(io.list_videos(root))
    if ids is not None:
        unknown = [i for i in ids if i not in available]
        if unknown:
            raise CliError("unknown_video", f"unknown video ids: {', '.join(unknown)}")
    for fold in folds:
        fold_dir = Path(args.out) / f"fold{fold}"
        state, vfe, cfg, meta = _restore_segmenter(fold_dir)
        fold_ids = ids if ids is not None else io.read_split(root, "test", fold)
        videos, names = _load_videos(root, fold_ids)
        feats = featurize(videos, vfe, cfg.windows)
        pred_dir = fold_dir / "predictions"
        for kind in ("raw", "calibrated"):
            (pred_dir / kind).mkdir(parents=True, exist_ok=True)
        summary = {}
        for v in feats:
            p = predict(state, v.features)
            io.write_labels(pred_dir / "raw" / f"{v.id}.txt", p.raw, names)
            io.write_labels(pred_dir / "calibrated" / f"{v.id}.txt", p.calibrated, names)
            summary[v.id] = {
                "frames": int(v.num_frames),
                "raw_segments": len(segments_from_labels(p.raw)),
                "calibrated_segments": len(segments_from_labels(p.calibrated)),
            }
        manifest = {"config_hash": meta["config_hash"], "seed": meta["seed"], "fold": fold,
                    "videos": summary}
        (pred_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        print(json.dumps({"command": "infer", "fold": fold, "videos": len(feats),
                          "config_hash": meta["config_hash"], "seed": meta["seed"]}, sort_keys=True))
    return 0


def _evaluate_dir(root: Path, pred_dir: Path, names: list[str]) -> EvalReport:
    pairs = []
    missing: dict[str, str] = {}
    for path in sorted(pred_dir.glob("*.txt")):
        vid = path.stem
        try:
            gt = io.read_labels(root / "groundTruth" / f"{vid}.txt", names)
            pred = io.read_labels(path, names)
        except (io.DatasetError, FileNotFoundError) as exc:
            missing[vid] = str(exc)
            continue
        pairs.append((vid, pred, gt))
    if not pairs:
        raise CliError("evaluation", f"no evaluable predictions in {pred_dir}")
    try:
        report = evaluate_corpus(pairs)
    except ContractError as exc:
        report = EvalReport(0.0, 0.0, {10: 0.0, 25: 0.0, 50: 0.0},
                            errors={vid: str(exc) for vid, _, _ in pairs})
    report.errors.update(missing)
    return report


def _write_report(base: Path, report: EvalReport, title: str, stamp: dict) -> None:
    payload = {**stamp, **report.to_dict()}
    base.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    header = " ".join(f"{k}={v}" for k, v in sorted(stamp.items()))
    base.with_suffix(".txt").write_text(f"# {header}\n" + report.table(title))


def cmd_evaluate(args, values: dict[str, str]) -> int:
    if args.out is None:
        raise CliError("config", "evaluate needs --out (the directory holding fold predictions)")
    root = _data_root(args, values)
    names = io.read_mapping(root / "mapping.txt")
    out = Path(args.out)
    fold_dirs = sorted(out.glob("fold*/predictions"))
    if args.fold not in (None, "all"):
        fold_dirs = [d for d in fold_dirs if d.parent.name == f"fold{args.fold}"]
    if not fold_dirs:
        raise CliError("path", f"no prediction directories under {out}")
    failed = {}
    for kind in ("raw", "calibrated"):
        per_fold = []
        for pred_dir in fold_dirs:
            fold_dir = pred_dir.parent
            manifest_path = pred_dir / "manifest.json"
            manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else {}
            stamp = {"config_hash": manifest.get("config_hash"), "seed": manifest.get("seed"),
                     "fold": fold_dir.name, "predictions": kind}
            report = _evaluate_dir(root, pred_dir / kind, names)
            _write_report(fold_dir / f"eval_{kind}", report, fold_dir.name, stamp)
            if report.errors:
                failed.update({f"{fold_dir.name}/{kind}/{k}": v for k, v in report.errors.items()})
            if report.per_video:
                per_fold.append((report, stamp))
        if per_fold:
            agg = average_reports([r for r, _ in per_fold])
            hashes = sorted({str(s["config_hash"]) for _, s in per_fold})
            seeds = sorted({str(s["seed"]) for _, s in per_fold})
            stamp = {"config_hash": ",".join(hashes), "seed": ",".join(seeds),
                     "folds": len(per_fold), "predictions": kind}
            _write_report(out / f"eval_{kind}", agg, f"mean of {len(per_fold)} folds", stamp)
            print(json.dumps({"command": "evaluate", "predictions": kind,
                              "row": dict(zip(["F1@10", "F1@25", "F1@50", "Edit", "Acc"],
                                              [round(x, 4) for x in agg.row()]))},
                             sort_keys=True))
    if failed:
        first = next(iter(failed))
        raise CliError("evaluation", f"{len(failed)} video(s) could not be evaluated, "
                                     f"first {first}: {failed[first]}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer,
            "evaluate": cmd_evaluate}


class _Parser(argparse.ArgumentParser):
    # usage errors go through the same one-line JSON channel as everything else
    def error(self, message: str):
        raise CliError("config", f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tasseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--fold", help="1-based fold number, or 'all'")
        p.add_argument("--device-threads", type=int, default=1,
                       help="BLAS thread limit (default 1)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset root (overrides the 'data' key)")
        p.add_argument("--quiet", action="store_true", help="do not echo log lines")
        if name == "train":
            p.add_argument("--resume", help="segmenter checkpoint to continue from")
        if name == "infer":
            p.add_argument("--ids", help="comma-separated video ids (default: the fold's test split)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        _fail(exc.category, str(exc))
        return EXIT_CODES[exc.category]
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    from threadpoolctl import threadpool_limits

    try:
        if args.device_threads < 1:
            raise CliError("config", "--device-threads must be >= 1")
        values = load_config(args.config)
        with threadpool_limits(limits=args.device_threads):
            return COMMANDS[args.command](args, values)
    except CliError as exc:
        _fail(exc.category, str(exc))
        return EXIT_CODES[exc.category]
    except (io.DatasetError, CheckpointError) as exc:
        _fail("data", str(exc))
        return EXIT_CODES["data"]
    except Exception as exc:  # noqa: BLE001
        _fail("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_CODES["internal"]


def _fail(category: str, message: str) -> None:
    line = json.dumps({"error": category, "message": " ".join(message.split())})
    print(line, file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

"""The ``mradnet`` command suite: synth / train / eval / infer / info / plot.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Errors are emitted as JSON lines on stderr. Every run with an output
directory writes a ``manifest.json`` recording the command, effective
configuration, seeds, and git-style content hashes of its inputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import (
    DEFAULT_CLASSES,
    ConfigError,
    EvalConfig,
    ModelConfig,
    TrainConfig,
    config_to_dict,
    load_config,
)
from .data import (
    DEFAULT_GT_SIGMA,
    DataError,
    gt_confmap,
    list_sequences,
    load_cruw_sequence,
    split_train_test,
    synthesize_dataset,
    window_dataset,
)
from .evalsuite import (
    Detection,
    evaluate_sequence,
    gt_window_predictor,
    model_predictor,
)
from .geometry import RadarGrid
from .model import ShapeError, build_model, count_flops, count_params
from .plotting import save_frame_png
from .serialization import read_npz, write_npz
from .training import NumericError, load_checkpoint, train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

PARAMS_TARGET = 4.93e6
GFLOPS_TARGET = 32.79


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def git_blob_sha1(path: Path) -> str:
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path: str | Path) -> str:
    """Git-style content hash: blob sha1 for files, tree-style for directories."""
    path = Path(path)
    if path.is_file():
        return git_blob_sha1(path)
    entries = []
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        entries.append(f"{f.relative_to(path)} {git_blob_sha1(f)}")
    return hashlib.sha1("\n".join(entries).encode()).hexdigest()


def resolve_seed(flag_value: int | None, default: int = 0) -> int:
    """Flag wins, then the MRADNET_SEED environment variable, then the default."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get("MRADNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MRADNET_SEED must be an integer, got {env!r}")
    return default


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.doc = {
            "command": command,
            "argv": sys.argv[1:],
            "started": _utc_now(),
            "inputs": {},
            "seeds": {},
            "effective_config": {},
            "outputs": [],
        }
        self.out_dir = Path(args.out) if getattr(args, "out", None) else None

    def add_input(self, name: str, path: str | Path | None):
        if path is not None and Path(path).exists():
            self.doc["inputs"][name] = {"path": str(path), "sha1": content_hash(path)}

    def write(self):
        if self.out_dir is None:
            return
        self.doc["finished"] = _utc_now()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "manifest.json").write_text(
            json.dumps(self.doc, indent=2, sort_keys=True) + "\n"
        )


def _gt_sigmas(classes=DEFAULT_CLASSES) -> list[float]:
    return [DEFAULT_GT_SIGMA.get(name, 3.0) for name in classes]


def _load_or_default(path, cls):
    return load_config(path, cls) if path else cls()


def write_detections_csv(path: Path, detections, class_names):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "class", "range_bin", "azimuth_bin", "score"])
        for d in detections:
            writer.writerow(
                [d.frame, class_names[d.class_id], d.range_bin, d.azimuth_bin, repr(d.score)]
            )


def read_detections_csv(path: Path, class_names) -> list[Detection]:
    ids = {name: i for i, name in enumerate(class_names)}
    out = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.DictReader(f), start=2):
            try:
                out.append(
                    Detection(
                        frame=int(row["frame"]),
                        class_id=ids[row["class"]],
                        range_bin=int(row["range_bin"]),
                        azimuth_bin=int(row["azimuth_bin"]),
                        score=float(row["score"]),
                    )
                )
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: bad detection row ({e})")
    return out


def _prepare_out_dir(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    manifest = Manifest("synth", args)
    overrides = {
        k: v
        for k, v in (
            ("sequences", args.sequences), ("frames", args.frames),
            ("objects", args.objects), ("seed", args.seed),
            ("noise_std", args.noise_std), ("height", args.height),
            ("width", args.width),
        )
        if v is not None
    }
    cfg = {"sequences": 2, "frames": 40, "objects": 2, "seed": None,
           "noise_std": 0.05, "height": 128, "width": 128}
    if args.config:
        manifest.add_input("config", args.config)
        file_cfg = json.loads(Path(args.config).read_text())
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(overrides)
    cfg["seed"] = resolve_seed(cfg["seed"])
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    grid = RadarGrid(height=cfg["height"], width=cfg["width"])
    names = synthesize_dataset(
        out, cfg["sequences"], cfg["frames"], cfg["objects"], cfg["seed"],
        grid=grid, noise_std=cfg["noise_std"],
    )
    manifest.doc["effective_config"] = cfg
    manifest.doc["seeds"]["data"] = cfg["seed"]
    manifest.doc["outputs"] = names
    manifest.write()
    print(f"wrote {len(names)} sequences to {out}")
    return 0


def _load_training_configs(args) -> tuple[ModelConfig, TrainConfig]:
    errors = []
    model_cfg, train_cfg = ModelConfig(), TrainConfig()
    try:
        model_cfg = _load_or_default(args.model_config, ModelConfig)
    except ConfigError as e:
        errors.append(f"model config: {e}")
    try:
        train_cfg = _load_or_default(args.train_config, TrainConfig)
    except ConfigError as e:
        errors.append(f"train config: {e}")
    if not errors:
        updates = {
            k: v
            for k, v in (
                ("epochs", args.epochs), ("batch_size", args.batch_size),
                ("lr0", args.lr0),
            )
            if v is not None
        }
        updates["seed"] = resolve_seed(args.seed, train_cfg.seed)
        train_cfg = replace(train_cfg, **updates)
        for cfg, label in ((model_cfg, "model config"), (train_cfg, "train config")):
            try:
                cfg.validate()
            except ConfigError as e:
                errors.append(f"{label}: {e}")
        if model_cfg.num_classes != len(DEFAULT_CLASSES):
            errors.append(
                f"model config: num_classes={model_cfg.num_classes} does not match "
                f"the {len(DEFAULT_CLASSES)} dataset classes"
            )
    if errors:
        raise ConfigError("; ".join(errors))
    return model_cfg, train_cfg


def _load_sequence_windows(data_dir, names, model_cfg, window, stride):
    windows = []
    sigmas = _gt_sigmas()
    for name in names:
        frames, annotations = load_cruw_sequence(Path(data_dir) / name)
        t, _, h, w, _ = frames.shape
        if (h, w) != (model_cfg.height, model_cfg.width):
            raise ConfigError(
                f"sequence {name} grid {h}x{w} does not match model "
                f"{model_cfg.height}x{model_cfg.width}"
            )
        gt = gt_confmap(annotations, t, model_cfg.num_classes, h, w, sigmas)
        windows.extend(window_dataset(frames, gt, window=window, stride=stride))
    return windows


def cmd_train(args) -> int:
    manifest = Manifest("train", args)
    resume_state = None
    if args.resume:
        manifest.add_input("resume", args.resume)
        resume_state = load_checkpoint(args.resume)
        model_cfg, train_cfg = resume_state.model_cfg, resume_state.train_cfg
        if args.epochs is not None:
            train_cfg = replace(train_cfg, epochs=args.epochs)
            resume_state.train_cfg = train_cfg
    else:
        model_cfg, train_cfg = _load_training_configs(args)
    manifest.add_input("model_config", args.model_config)
    manifest.add_input("train_config", args.train_config)
    manifest.add_input("data", args.data)

    names = list_sequences(args.data)
    split = None
    if args.split_seed is not None:
        train_names, held_out = split_train_test(names, args.split_seed)
        split = {"train": train_names, "test": held_out, "seed": args.split_seed}
        names = train_names
    windows = _load_sequence_windows(
        args.data, names, model_cfg, train_cfg.window, train_cfg.stride
    )
    if not windows:
        raise DataError("no training windows: all sequences shorter than the window size")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = train(model_cfg, windows, train_cfg, out_dir=out, resume_state=resume_state)
    manifest.doc["effective_config"] = {
        "model": config_to_dict(model_cfg), "train": config_to_dict(train_cfg),
    }
    manifest.doc["seeds"]["train"] = train_cfg.seed
    if split:
        manifest.doc["split"] = split
    manifest.doc["outputs"] = sorted(p.name for p in out.glob("checkpoint_epoch*.npz"))
    manifest.doc["final_step"] = state.step
    manifest.write()
    print(f"trained {state.epoch} epochs ({state.step} steps); checkpoints in {out}")
    return 0


def _aggregate_reports(reports: dict[str, dict], eval_cfg: EvalConfig) -> dict:
    rows = []
    for i, tau in enumerate(eval_cfg.ols_thresholds):
        tp = sum(r["per_threshold"][i]["tp"] for r in reports.values())
        fp = sum(r["per_threshold"][i]["fp"] for r in reports.values())
        fn = sum(r["per_threshold"][i]["fn"] for r in reports.values())
        rows.append(
            {
                "threshold": tau,
                "precision": tp / (tp + fp) if tp + fp else 0.0,
                "recall": tp / (tp + fn) if tp + fn else 0.0,
                "tp": tp, "fp": fp, "fn": fn,
            }
        )
    return {
        "ap": 100.0 * float(np.mean([r["precision"] for r in rows])),
        "ar": 100.0 * float(np.mean([r["recall"] for r in rows])),
        "per_threshold": rows,
    }


def _run_inference(args, manifest, need_annotations: bool):
    """Shared eval/infer driver; yields (name, frames, annotations, predictor)."""
    eval_cfg = _load_or_default(getattr(args, "eval_config", None), EvalConfig)
    manifest.add_input("eval_config", getattr(args, "eval_config", None))
    manifest.add_input("data", args.data)
    use_gt = getattr(args, "use_gt_as_pred", False)
    model = None
    if not use_gt:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --use-gt-as-pred is set")
        manifest.add_input("checkpoint", args.checkpoint)
        state = load_checkpoint(args.checkpoint)
        model = state.model
        if state.model_cfg.num_classes != len(eval_cfg.classes):
            raise ConfigError(
                f"checkpoint has {state.model_cfg.num_classes} classes, eval config "
                f"names {len(eval_cfg.classes)}"
            )
    names = list_sequences(args.data)
    sigmas = _gt_sigmas(eval_cfg.classes)
    per_seq = []
    for name in names:
        frames, annotations = load_cruw_sequence(Path(args.data) / name, eval_cfg.classes)
        t, _, h, w, _ = frames.shape
        if (h, w) != (eval_cfg.grid.height, eval_cfg.grid.width):
            raise ConfigError(
                f"sequence {name} grid {h}x{w} does not match eval grid "
                f"{eval_cfg.grid.height}x{eval_cfg.grid.width}"
            )
        if need_annotations and not annotations:
            raise DataError(f"sequence {name} has no annotations to evaluate against")
        if use_gt:
            gt = gt_confmap(annotations, t, len(eval_cfg.classes), h, w, sigmas)
            predictor = gt_window_predictor(gt, eval_cfg.window, eval_cfg.stride)
        else:
            predictor = model_predictor(model)
        per_seq.append((name, frames, annotations, predictor))
    return eval_cfg, per_seq


def cmd_eval(args) -> int:
    manifest = Manifest("eval", args)
    eval_cfg, per_seq = _run_inference(args, manifest, need_annotations=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name, frames, annotations, predictor in per_seq:
        report, detections = evaluate_sequence(frames, annotations, predictor, eval_cfg)
        reports[name] = report
        write_detections_csv(out / f"detections_{name}.csv", detections, eval_cfg.classes)
    metrics = {
        "config": config_to_dict(eval_cfg),
        "sequences": reports,
        "aggregate": _aggregate_reports(reports, eval_cfg),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest.doc["effective_config"] = config_to_dict(eval_cfg)
    manifest.doc["outputs"] = ["metrics.json"] + [f"detections_{n}.csv" for n in reports]
    manifest.write()
    agg = metrics["aggregate"]
    print(f"AP {agg['ap']:.2f}%  AR {agg['ar']:.2f}%  over {len(reports)} sequences")
    return 0


def cmd_infer(args) -> int:
    from .evalsuite import detect_peaks_multiclass, l_nms, sliding_window_confmaps

    manifest = Manifest("infer", args)
    eval_cfg, per_seq = _run_inference(args, manifest, need_annotations=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, frames, _, predictor in per_seq:
        per_frame = sliding_window_confmaps(frames, predictor, eval_cfg)
        if not per_frame:
            raise DataError(f"sequence {name} is shorter than the {eval_cfg.window}-frame window")
        covered = sorted(per_frame)
        detections = []
        for f in covered:
            detections.extend(l_nms(detect_peaks_multiclass(per_frame[f], f, eval_cfg), eval_cfg))
        detections.sort(key=lambda d: (d.frame, -d.score, d.class_id))
        write_npz(
            out / f"confmaps_{name}.npz",
            {
                "maps": np.stack([per_frame[f] for f in covered]).astype(np.float32),
                "frames": np.array(covered, dtype=np.int64),
            },
        )
        write_detections_csv(out / f"detections_{name}.csv", detections, eval_cfg.classes)
        outputs += [f"confmaps_{name}.npz", f"detections_{name}.csv"]
    manifest.doc["effective_config"] = config_to_dict(eval_cfg)
    manifest.doc["outputs"] = outputs
    manifest.write()
    print(f"inference over {len(per_seq)} sequences written to {out}")
    return 0


def cmd_info(args) -> int:
    model_cfg = _load_or_default(args.model_config, ModelConfig)
    model_cfg.validate()
    params = count_params(build_model(model_cfg, seed=0))
    flops = count_flops(model_cfg)
    report = {
        "config": config_to_dict(model_cfg),
        "params": params,
        "params_millions": params / 1e6,
        "flops": flops,
        "gflops": flops / 1e9,
        "published_targets": {"params_millions": 4.93, "gflops": 32.79},
        "deviation_pct": {
            "params": 100.0 * (params - PARAMS_TARGET) / PARAMS_TARGET,
            "flops": 100.0 * (flops / 1e9 - GFLOPS_TARGET) / GFLOPS_TARGET,
        },
        "notes": (
            "The published totals correspond to an undisclosed stage plan; this "
            "config is a reconstruction chosen to land near them. FLOPs count one "
            "multiply-accumulate as 2 FLOPs over convolutions, linear layers, and "
            "attention matmuls for one window at batch size 1; normalization, "
            "activations, and interpolation are excluded."
        ),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        manifest = Manifest("info", args)
        manifest.add_input("model_config", args.model_config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "info.json").write_text(text + "\n")
        manifest.doc["effective_config"] = report["config"]
        manifest.doc["outputs"] = ["info.json"]
        manifest.write()
    return 0


def cmd_plot(args) -> int:
    manifest = Manifest("plot", args)
    manifest.add_input("detections", args.detections)
    manifest.add_input("confmaps", args.confmaps)
    arrays = read_npz(args.confmaps)
    if "maps" not in arrays or "frames" not in arrays:
        raise DataError(f"{args.confmaps}: expected 'maps' and 'frames' arrays")
    maps, frame_ids = arrays["maps"], arrays["frames"]
    detections = read_detections_csv(Path(args.detections), DEFAULT_CLASSES)
    by_frame: dict[int, list[Detection]] = {}
    for d in detections:
        by_frame.setdefault(d.frame, []).append(d)
    wanted = set(args.frames) if args.frames else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, f in enumerate(frame_ids.tolist()):
        if wanted is not None and f not in wanted:
            continue
        name = f"frame_{f:06d}.png"
        save_frame_png(out / name, maps[i], by_frame.get(f, []), DEFAULT_CLASSES, scale=args.scale)
        outputs.append(name)
    manifest.doc["effective_config"] = {"scale": args.scale, "frames": sorted(wanted) if wanted else "all"}
    manifest.doc["outputs"] = outputs
    manifest.write()
    print(f"wrote {len(outputs)} plots to {out}")
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mradnet",
        description="Radar range-azimuth object detection: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic CRUW-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--config", help="JSON file with the same keys as the flags")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a CRUW-layout dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-config", dest="model_config")
    p.add_argument("--train-config", dest="train_config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--split-seed", dest="split_seed", type=int,
                   help="hold out a 9:1 sequence-level test split with this seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the GT oracle) on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--eval-config", dest="eval_config")
    p.add_argument("--use-gt-as-pred", dest="use_gt_as_pred", action="store_true",
                   help="oracle mode: feed ground-truth maps as predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run inference, dumping confidence maps and detections")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-config", dest="eval_config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("info", help="report parameter and FLOP counts for a model config")
    p.add_argument("--model-config", dest="model_config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("plot", help="render confidence-map heatmaps with detection overlays")
    p.add_argument("--detections", required=True)
    p.add_argument("--confmaps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, nargs="*")
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as e:
        return _fail("config", e, EXIT_CONFIG)
    except DataError as e:
        return _fail("data", e, EXIT_DATA)
    except NumericError as e:
        return _fail("numeric", e, EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())

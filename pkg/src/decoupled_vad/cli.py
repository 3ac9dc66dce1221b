"""Command-line entry point: gen-data, train, infer, eval, diagnose."""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .cons_stream import NumericError
from .datagen import (
    FeatureFormatError,
    InvalidSpecError,
    generate,
    load_split,
    read_manifest,
    save_features,
    write_manifest,
)
from .evaluation import (
    ABLATION_ROWS,
    IncompleteReportError,
    UndefinedMetricError,
    ablation_report,
    evaluate,
    write_plot_csv,
    write_rows_csv,
)
from .inference import read_score_csv, write_score_csv
from .nncore import GradientCheckError
from .pipeline import VARIANTS, row_inference, train_variant
from .training import TrainingError, stream_gradient_error, write_trace_csv

log = logging.getLogger("decoupled_vad")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
GRAD_TOLERANCE = 1e-4


class DataError(RuntimeError):
    pass


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise DataError(f"output path exists and is not a directory: {path}")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise DataError(f"output directory not empty: {path} (use --force)")
        shutil.rmtree(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc.strerror}") from exc
    return path


def _data_root(cfg: RunConfig) -> Path:
    return Path(cfg["data.features_dir"] or cfg["data.dir"])


def _load(cfg: RunConfig, split: str):
    root = _data_root(cfg)
    if not (root / "manifest.csv").is_file():
        raise DataError(f"no dataset manifest at {root / 'manifest.csv'} (run gen-data first)")
    data = load_split(root, split)
    if not data:
        raise DataError(f"dataset {root} has no {split!r} videos")
    return data


def cmd_gen_data(cfg: RunConfig, args) -> None:
    root = _prepare_dir(Path(cfg["data.dir"]), args.force)
    entries = []
    for split in ("train", "test"):
        (root / split).mkdir()
        for seq in generate(cfg.synth_spec(split)):
            rel = f"{split}/{seq.id}.dsf"
            save_features(seq, root / rel)
            entries.append({"id": seq.id, "split": split, "file": rel, "video_label": seq.video_label,
                            "kind": seq.kind, "T": seq.T, "D": seq.D})
    write_manifest(root / "manifest.csv", entries)
    log.info("wrote %d videos to %s", len(entries), root)


def cmd_train(cfg: RunConfig, args) -> None:
    data = _load(cfg, "train")
    out = Path(cfg["train.output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from exc
    variants = VARIANTS if args.stream == "all" else (args.stream,)
    for variant in variants:
        log.info("training %s", variant)
        model, trace, report = train_variant(variant, data, cfg)
        save_checkpoint(model, out / f"{variant}.dsm")
        write_trace_csv(out / f"{variant}_trace.csv", trace)
        if report is not None:
            write_trace_csv(out / f"{variant}_conflict.csv",
                            [{"step": r["step"], "loss_sens": r["loss_sens"], "loss_cons": r["loss_cons"],
                              "loss": r["loss"], "cosine": r["cosine"]} for r in trace])
            log.info("gradient cosine over shared parameters: mean %.4f, negative fraction %.3f",
                     report.mean, report.fraction_negative)


_ROW_MODELS = {"collaborative": ("sens", "cons"), "basic_ensemble": ("sens", "cons"),
               "sens_only": ("sens",), "cons_only": ("cons",), "unified": ("unified",),
               "tcn_only": ("tcn_only",), "gt_only": ("gt_only",), "no_gmp": ("no_gmp",)}


def cmd_infer(cfg: RunConfig, args) -> None:
    mode = args.mode or cfg["infer.mode"]
    rows = ABLATION_ROWS if mode == "all" else (mode,)
    ckpt_dir = Path(args.checkpoints or cfg["train.output_dir"])
    models = {}
    for row in rows:
        for variant in _ROW_MODELS[row]:
            if variant not in models:
                models[variant] = load_checkpoint(ckpt_dir / f"{variant}.dsm")
    test = _load(cfg, "test")
    out = _prepare_dir(Path(cfg["infer.output_dir"]), True)
    for row in rows:
        (out / row).mkdir()
        for seq in test:
            result = row_inference(row, models, seq.features, cfg["infer.window_len"], cfg["infer.stride"])
            write_score_csv(out / row / f"{seq.id}.csv", result, seq.frame_labels)
    log.info("scored %d videos x %d modes into %s", len(test), len(rows), out)


def _read_row(row_dir: Path) -> dict[str, dict]:
    return {p.stem: read_score_csv(p) for p in sorted(row_dir.glob("*.csv"))}


def _kinds(cfg: RunConfig) -> dict[str, str]:
    manifest = _data_root(cfg) / "manifest.csv"
    if not manifest.is_file():
        return {}
    return {e["id"]: e["kind"] for e in read_manifest(manifest) if e["split"] == "test"}


def _concat(videos: dict[str, dict], column: str, ids=None):
    ids = sorted(videos) if ids is None else ids
    s = np.concatenate([videos[i][column] for i in ids])
    y = np.concatenate([videos[i]["gt_label"] for i in ids])
    return s, y


def cmd_eval(cfg: RunConfig, args) -> None:
    score_dir = Path(args.scores or cfg["infer.output_dir"])
    if not score_dir.is_dir():
        raise DataError(f"score directory not found: {score_dir}")
    rows = {p.name: _read_row(p) for p in sorted(score_dir.iterdir()) if p.is_dir()}
    rows = {k: v for k, v in rows.items() if v}
    if not rows:
        raise DataError(f"no score files under {score_dir}")
    for name, videos in rows.items():
        if any(v["gt_label"] is None for v in videos.values()):
            raise DataError(f"{score_dir / name}: score files lack gt_label")
    out = _prepare_dir(Path(cfg["eval.output_dir"]), True)

    results = {name: evaluate(*_concat(videos, "s_final")) for name, videos in rows.items()}
    order = [r for r in ABLATION_ROWS if r in results] + sorted(set(results) - set(ABLATION_ROWS))
    table = [{"variant": r, "auc": results[r].auc, "ap": results[r].ap, "n_frames": results[r].n_frames,
              "n_positive": results[r].n_positive} for r in order]
    write_rows_csv(out / "metrics.csv", table)
    for r in table:
        print(f"{r['variant']:<16} AUC {r['auc']:.4f}  AP {r['ap']:.4f}")

    kinds = _kinds(cfg)
    if kinds and {"sens_only", "cons_only"} <= set(rows):
        spec_rows = []
        for row in ("sens_only", "cons_only"):
            for kind in ("transient", "sustained"):
                ids = sorted(i for i in rows[row] if kinds.get(i) in ("normal", kind))
                try:
                    value = evaluate(*_concat(rows[row], "s_final", ids)).auc
                except UndefinedMetricError:
                    continue
                spec_rows.append({"variant": row, "subset": kind, "auc": value})
        if spec_rows:
            write_rows_csv(out / "specialization.csv", spec_rows)

    if "collaborative" in rows:
        plot_dir = out / "plot"
        plot_dir.mkdir()
        for vid, v in rows["collaborative"].items():
            write_plot_csv(plot_dir / f"{vid}.csv", v["s_sens"], v["s_cons"], v["s_final"], v["gt_label"])

    try:
        report = ablation_report(results)
    except IncompleteReportError:
        if not args.partial:
            raise
        return
    write_rows_csv(out / "ablation.csv", report)


def cmd_diagnose(cfg: RunConfig, args) -> None:
    rows = []
    for kind in ("sens", "cons"):
        err = stream_gradient_error(kind, seed=cfg["seed"])
        rows.append({"check": f"gradient_rel_error_{kind}", "value": err})
        print(f"gradient check ({kind}): max relative error {err:.3e}")
    conflict = Path(cfg["train.output_dir"]) / "unified_conflict.csv"
    if conflict.is_file():
        with open(conflict, newline="") as fh:
            cos = np.array([float(r["cosine"]) for r in csv.DictReader(fh)])
        rows.append({"check": "conflict_mean_cosine", "value": float(cos.mean())})
        rows.append({"check": "conflict_fraction_negative", "value": float((cos < 0).mean())})
        print(f"unified gradient cosine: mean {cos.mean():.4f}, negative fraction {(cos < 0).mean():.3f}")
    out = Path(cfg["eval.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(out / "diagnose.csv", rows)
    worst = max(r["value"] for r in rows[:2])
    if not worst < GRAD_TOLERANCE:
        raise GradientCheckError(f"gradient check failed: relative error {worst:.3e} >= {GRAD_TOLERANCE}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="decoupled-vad", parents=[common],
                                     description="Decoupled two-stream weakly supervised anomaly scoring.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark")
    p = sub.add_parser("train", parents=[common], help="train one variant (or all)")
    p.add_argument("--stream", default="all", choices=("all",) + VARIANTS)
    p = sub.add_parser("infer", parents=[common], help="score the test split")
    p.add_argument("--mode", choices=tuple(_ROW_MODELS) + ("all",))
    p.add_argument("--checkpoints", metavar="DIR")
    p = sub.add_parser("eval", parents=[common], help="metrics, ablation table, plot data")
    p.add_argument("--scores", metavar="DIR")
    p.add_argument("--partial", action="store_true", help="allow missing ablation rows")
    sub.add_parser("diagnose", parents=[common], help="gradient checks and conflict summary")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.config = getattr(args, "config", None)
    args.force = getattr(args, "force", False)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FeatureFormatError, InvalidSpecError, CheckpointError, IncompleteReportError,
            UndefinedMetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericError, GradientCheckError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())

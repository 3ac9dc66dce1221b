"""End-to-end benchmark: train every variant, score the test split, compute metrics."""
from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

from .config import RunConfig
from .cons_stream import ConsistencyModel
from .datagen import FeatureSequence, generate
from .evaluation import ABLATION_ROWS, MetricResult, evaluate
from .inference import ScoreSeries, plan_windows, run_inference, stream_scores
from .sens_stream import SensitivityModel
from .training import UnifiedModel, train_stream, train_unified

log = logging.getLogger(__name__)

VARIANTS = ("sens", "cons", "no_gmp", "tcn_only", "gt_only", "unified")

# rows scored from the sens/cons pair via run_inference
_PAIR_ROWS = {"collaborative", "basic_ensemble", "sens_only", "cons_only"}
# single-model rows: row -> (variant, score-file column it fills)
_SINGLE_ROWS = {"unified": ("unified", None), "tcn_only": ("tcn_only", "sens"),
                "gt_only": ("gt_only", "sens"), "no_gmp": ("no_gmp", "cons")}


def build_model(variant: str, d: int, K: int, seed: int):
    if variant == "sens":
        return SensitivityModel(d, "full", seed=seed)
    if variant in ("tcn_only", "gt_only"):
        return SensitivityModel(d, variant, seed=seed)
    if variant in ("cons", "no_gmp"):
        return ConsistencyModel(d, K, seed=seed)
    if variant == "unified":
        return UnifiedModel(d, K, seed=seed)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def train_variant(variant: str, data: Sequence[FeatureSequence], cfg: RunConfig):
    """Returns ``(model, trace, conflict_report_or_None)``."""
    d = data[0].D
    model = build_model(variant, d, cfg["cons.K"], cfg["seed"])
    if variant == "unified":
        model, report, trace = train_unified(model, data, cfg.regime("unified"))
        return model, trace, report
    if variant in ("cons", "no_gmp"):
        regime = cfg.regime("cons")
        if variant == "no_gmp":
            regime.lambda_gmp = 0.0
        model, trace = train_stream(model, data, regime, "consistency")
    else:
        model, trace = train_stream(model, data, cfg.regime("sens"), "sensitivity")
    return model, trace, None


def row_inference(row: str, models: Mapping[str, object], features: np.ndarray,
                  window_len: int, stride: int) -> dict[str, ScoreSeries]:
    if row in _PAIR_ROWS:
        # single-stream rows only need their own model
        return run_inference(models.get("sens"), models.get("cons"), features, window_len, stride, row)
    if row not in _SINGLE_ROWS:
        raise ValueError(f"unknown ablation row {row!r}")
    variant, column = _SINGLE_ROWS[row]
    series = stream_scores(models[variant], features, plan_windows(features.shape[0], window_len, stride),
                           column or "fused")
    out = {"final": series}
    if column:
        out[column] = series
    return out


def score_split(rows: Sequence[str], models: Mapping[str, object], test: Sequence[FeatureSequence],
                window_len: int, stride: int) -> dict[str, dict[str, dict]]:
    return {row: {v.id: row_inference(row, models, v.features, window_len, stride) for v in test}
            for row in rows}


def metrics_for(final_scores: Mapping[str, np.ndarray], test: Sequence[FeatureSequence],
                kinds: Sequence[str] | None = None) -> MetricResult:
    """Frame-level metrics over concatenated videos, optionally restricted to
    normal videos plus anomalous videos of the given kinds."""
    s, y = [], []
    for v in test:
        if kinds is not None and v.kind != "normal" and v.kind not in kinds:
            continue
        s.append(final_scores[v.id])
        y.append(v.frame_labels)
    return evaluate(np.concatenate(s), np.concatenate(y))


def specialization(scores: Mapping[str, Mapping[str, np.ndarray]], test) -> dict[tuple[str, str], float]:
    out = {}
    for row in ("sens_only", "cons_only"):
        for kind in ("transient", "sustained"):
            out[(row, kind)] = metrics_for(scores[row], test, [kind]).auc
    return out


def run_benchmark(cfg: RunConfig) -> dict:
    """Train all variants on a fresh synthetic split and evaluate every ablation row."""
    train = generate(cfg.synth_spec("train"))
    test = generate(cfg.synth_spec("test"))
    models, conflict = {}, None
    for variant in VARIANTS:
        log.info("training %s (seed %d)", variant, cfg["seed"])
        models[variant], _, report = train_variant(variant, train, cfg)
        if report is not None:
            conflict = report
    scored = score_split(ABLATION_ROWS, models, test, cfg["infer.window_len"], cfg["infer.stride"])
    finals = {row: {vid: r["final"].values for vid, r in per.items()} for row, per in scored.items()}
    return {
        "metrics": {row: metrics_for(finals[row], test) for row in ABLATION_ROWS},
        "specialization": specialization(finals, test),
        "conflict": conflict,
        "models": models,
    }


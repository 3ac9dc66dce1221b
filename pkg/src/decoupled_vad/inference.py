"""Overlap-aware sliding-window aggregation and two-stream fusion."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import torch

from .nncore import DimensionError, InvalidParameterError

DEFAULT_WINDOW = 256
MODES = ("collaborative", "basic_ensemble", "sens_only", "cons_only")


class PlanError(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowPlan:
    N: int
    window_len: int
    stride: int
    windows: tuple[tuple[int, int], ...]


@dataclass
class ScoreSeries:
    values: np.ndarray
    stream: str
    coverage: np.ndarray

    def __len__(self):
        return len(self.values)


def plan_windows(N: int, window_len: int = DEFAULT_WINDOW, stride: Optional[int] = None) -> WindowPlan:
    stride = window_len // 2 if stride is None else stride
    if N < 1:
        raise InvalidParameterError(f"N must be >= 1, got {N}")
    if window_len < 1:
        raise InvalidParameterError(f"window_len must be >= 1, got {window_len}")
    if not 1 <= stride <= window_len:
        raise InvalidParameterError(f"stride must lie in [1, window_len], got {stride}")
    if N <= window_len:
        return WindowPlan(N, window_len, stride, ((0, N),))
    windows = []
    start = 0
    while start + window_len <= N:
        windows.append((start, start + window_len))
        start += stride
    if windows[-1][1] < N:
        windows.append((N - window_len, N))
    return WindowPlan(N, window_len, stride, tuple(windows))


def aggregate(per_window: Mapping[tuple[int, int], np.ndarray], plan: WindowPlan,
              stream: str = "sens") -> ScoreSeries:
    """Average every window's prediction over the frames it covers."""
    total = np.zeros(plan.N, dtype=np.float64)
    coverage = np.zeros(plan.N, dtype=np.int64)
    lo = np.full(plan.N, np.inf)
    hi = np.full(plan.N, -np.inf)
    for w in plan.windows:  # fixed summation order: window index
        start, end = w
        s = np.asarray(per_window[w], dtype=np.float64)
        if s.shape != (end - start,):
            raise DimensionError(f"window {w} has {s.shape[0]} scores, expected {end - start}")
        total[start:end] += s
        coverage[start:end] += 1
        np.minimum(lo[start:end], s, out=lo[start:end])
        np.maximum(hi[start:end], s, out=hi[start:end])
    if (coverage == 0).any():
        raise PlanError(f"frame {int(np.argmax(coverage == 0))} is not covered by any window")
    # a rounded mean can overshoot its inputs by an ulp; clip back
    return ScoreSeries(np.clip(total / coverage, lo, hi), stream, coverage)


def fuse(s_sens: ScoreSeries, s_cons: ScoreSeries) -> ScoreSeries:
    if len(s_sens) != len(s_cons):
        raise DimensionError(f"stream lengths differ: {len(s_sens)} vs {len(s_cons)}")
    values = (s_sens.values + s_cons.values) / 2
    return ScoreSeries(values, "fused", np.minimum(s_sens.coverage, s_cons.coverage))


def score_fn(model):
    """Map a model to ``features (T, D) -> scores (T,)`` regardless of stream kind."""

    def run(x: torch.Tensor) -> torch.Tensor:
        out = model(x)
        if isinstance(out, dict):
            return out["scores"]
        if isinstance(out, tuple):
            return out[0]
        return out

    return run


@torch.no_grad()
def stream_scores(model, features: np.ndarray, plan: WindowPlan, stream: str) -> ScoreSeries:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(features)).to(dtype)
    run = score_fn(model)
    per_window = {w: run(x[w[0]:w[1]]).double().numpy() for w in plan.windows}
    return aggregate(per_window, plan, stream)


def run_inference(model_sens, model_cons, features: np.ndarray, window_len: int = DEFAULT_WINDOW,
                  stride: Optional[int] = None, mode: str = "collaborative") -> dict[str, ScoreSeries]:
    """Score one video; returns the per-stream series and the final one under ``"final"``."""
    if mode not in MODES:
        raise InvalidParameterError(f"unknown inference mode {mode!r}; expected one of {MODES}")
    N = features.shape[0]
    if mode == "basic_ensemble":
        stride = window_len
    plan = plan_windows(N, window_len, stride)
    out = {}
    if mode != "cons_only":
        out["sens"] = stream_scores(model_sens, features, plan, "sens")
    if mode != "sens_only":
        out["cons"] = stream_scores(model_cons, features, plan, "cons")
    if mode in ("collaborative", "basic_ensemble"):
        out["final"] = fuse(out["sens"], out["cons"])
    else:
        out["final"] = out["sens"] if mode == "sens_only" else out["cons"]
    return out


SCORE_COLUMNS = ["frame_index", "s_sens", "s_cons", "s_final", "gt_label"]


def _fmt(v) -> str:
    return repr(float(v))


def write_score_csv(path, result: Mapping[str, ScoreSeries], gt: Optional[np.ndarray] = None) -> None:
    final = result["final"].values
    sens = result.get("sens")
    cons = result.get("cons")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for n in range(len(final)):
            w.writerow([
                n,
                _fmt(sens.values[n]) if sens is not None else "",
                _fmt(cons.values[n]) if cons is not None else "",
                _fmt(final[n]),
                int(gt[n]) if gt is not None else "",
            ])


def read_score_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_COLUMNS:
            raise ValueError(f"{path}: expected header {SCORE_COLUMNS}, got {reader.fieldnames}")
        rows = list(reader)

    def col(name, dtype=float):
        vals = [r[name] for r in rows]
        if any(v == "" for v in vals):
            return None
        return np.array([dtype(v) for v in vals])

    return {"s_sens": col("s_sens"), "s_cons": col("s_cons"), "s_final": col("s_final"),
            "gt_label": col("gt_label", int)}

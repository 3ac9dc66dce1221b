"""Frame-level AUC / AP and ablation-table assembly."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

ABLATION_ROWS = ("unified", "sens_only", "cons_only", "basic_ensemble", "collaborative",
                 "tcn_only", "gt_only", "no_gmp")


class UndefinedMetricError(ValueError):
    pass


class IncompleteReportError(KeyError):
    def __init__(self, missing: Sequence[str]):
        super().__init__(f"missing ablation variants: {', '.join(missing)}")
        self.missing = list(missing)


@dataclass
class MetricResult:
    auc: float
    ap: float
    n_frames: int
    n_positive: int


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    return s, y


def auc(scores, labels) -> float:
    """ROC area via the Mann-Whitney rank statistic, ties averaged."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative frames")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean precision at each positive's rank.

    Ranking is by descending score; tied scores keep their original order.
    """
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive frame")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


def evaluate(scores, labels) -> MetricResult:
    s, y = _prep(scores, labels)
    return MetricResult(auc(s, y), average_precision(s, y), int(y.size), int(y.sum()))


def ablation_report(results: Mapping[str, MetricResult]) -> list[dict]:
    missing = [r for r in ABLATION_ROWS if r not in results]
    if missing:
        raise IncompleteReportError(missing)
    return [{"variant": r, "auc": results[r].auc, "ap": results[r].ap,
             "n_frames": results[r].n_frames, "n_positive": results[r].n_positive}
            for r in ABLATION_ROWS]


def write_rows_csv(path, rows: list[dict]) -> None:
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in cols)])


PLOT_COLUMNS = ["frame_index", "s_sens", "s_cons", "s_final", "gt"]


def write_plot_csv(path, s_sens, s_cons, s_final, gt) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for n in range(len(s_final)):
            w.writerow([n, repr(float(s_sens[n])), repr(float(s_cons[n])), repr(float(s_final[n])),
                        int(gt[n])])

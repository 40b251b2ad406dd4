"""Extraction and rating metrics, multi-run aggregation and report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

AUC_POSITIVE_RATING = 4.0

HIGHER_IS_BETTER = {
    "precision_at_3": True, "recall_at_3": True, "f1": True,
    "rmse": False, "mae": False, "auc": True,
}


@dataclass(frozen=True)
class ExtractionMetrics:
    precision_at_3: float
    recall_at_3: float
    f1: float


@dataclass(frozen=True)
class RecMetrics:
    rmse: float
    mae: float
    auc: float


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def precision_recall_f1(pred: Sequence[str], truth: Iterable[str]) -> ExtractionMetrics:
    """Exact-match precision@K and recall against one record's ground truth."""
    truth = set(truth)
    if not pred or not truth:
        raise ValueError("prediction and ground truth must both be non-empty")
    hits = len(set(pred) & truth)
    p = hits / len(pred)
    r = hits / len(truth)
    return ExtractionMetrics(p, r, f1_score(p, r))


def extraction_metrics(preds: Sequence[Sequence[str]], truths: Sequence[Iterable[str]]) -> ExtractionMetrics:
    """Per-record precision and recall averaged over records; F1 from the averages."""
    if len(preds) != len(truths) or not preds:
        raise ValueError("need equally many (non-zero) predictions and truths")
    per = [precision_recall_f1(p, t) for p, t in zip(preds, truths)]
    p = float(np.mean([m.precision_at_3 for m in per]))
    r = float(np.mean([m.recall_at_3 for m in per]))
    return ExtractionMetrics(p, r, f1_score(p, r))


def rmse_mae(y, y_hat) -> tuple[float, float]:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.size == 0 or y.shape != y_hat.shape:
        raise ValueError("rmse_mae needs equal-length, non-empty inputs")
    err = y - y_hat
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def auc(raw_ratings, scores, threshold: float = AUC_POSITIVE_RATING) -> float:
    """Probability that a random positive (rating >= threshold) outscores a random
    negative, ties counting one half."""
    raw = np.asarray(raw_ratings, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    pos = raw >= threshold
    n_pos = int(pos.sum())
    n_neg = len(raw) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: only one class present after binarization")
    ranks = stats.rankdata(s)  # average ranks handle ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def rec_metrics(raw_ratings, y_hat) -> RecMetrics:
    raw = np.asarray(raw_ratings, dtype=np.float64)
    rmse, mae = rmse_mae((raw - 1.0) / 4.0, y_hat)
    try:
        a = auc(raw, y_hat)
    except ValueError:
        a = float("nan")
    return RecMetrics(rmse, mae, a)


# Aggregation ----------------------------------------------------------------


@dataclass(frozen=True)
class RunAggregate:
    mean: dict
    std: dict
    n_runs: int


def aggregate_runs(runs: Sequence[Mapping[str, float]]) -> RunAggregate:
    """Mean and sample (n-1) standard deviation per metric."""
    if len(runs) < 2:
        raise ValueError("aggregation needs at least 2 runs")
    keys = list(runs[0])
    arr = {k: np.array([float(r[k]) for r in runs]) for k in keys}
    return RunAggregate(
        mean={k: float(v.mean()) for k, v in arr.items()},
        std={k: float(v.std(ddof=1)) for k, v in arr.items()},
        n_runs=len(runs),
    )


def metrics_dict(*parts) -> dict:
    out = {}
    for part in parts:
        out.update(asdict(part))
    return out


def improvement_pct(model: float, baseline: float, higher_is_better: bool = True) -> float:
    """Improvement of ``model`` over ``baseline`` in percent, relative to the model's
    own value and signed so that a better model is positive."""
    gain = model - baseline if higher_is_better else baseline - model
    return 100.0 * gain / model


def significantly_better(a: RunAggregate, b: RunAggregate, metric: str, level: float = 0.95) -> bool:
    """One-sided Welch t-test from summary statistics: is ``a`` better than ``b``?"""
    ma, mb = a.mean[metric], b.mean[metric]
    sa, sb = a.std[metric], b.std[metric]
    if sa == 0 and sb == 0:
        return (ma > mb) if HIGHER_IS_BETTER.get(metric, True) else (ma < mb)
    _, p_two = stats.ttest_ind_from_stats(ma, sa, a.n_runs, mb, sb, b.n_runs, equal_var=False)
    better = (ma > mb) if HIGHER_IS_BETTER.get(metric, True) else (ma < mb)
    return bool(better and p_two / 2 < 1 - level)


# Reports --------------------------------------------------------------------

REPORT_COLUMNS = ("dataset", "variant", "metric", "mean", "std")


def write_report_csv(path, dataset: str, aggregates: Mapping[str, RunAggregate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for variant, agg in aggregates.items():
            for metric, mean in agg.mean.items():
                w.writerow([dataset, variant, metric, f"{mean:.6f}", f"{agg.std[metric]:.6f}"])


def format_table(aggregates: Mapping[str, RunAggregate], metrics: Sequence[str],
                 reference: str | None = None) -> str:
    """Plain-text table: mean per cell, std in parentheses on the line beneath,
    and an improvement row for ``reference`` against the best other variant."""
    name_w = max(12, *(len(v) for v in aggregates))
    col_w = 14
    lines = ["Variant".ljust(name_w) + "".join(m.rjust(col_w) for m in metrics)]
    lines.append("-" * len(lines[0]))
    for variant, agg in aggregates.items():
        star = {}
        if reference is not None and variant == reference:
            others = [a for v, a in aggregates.items() if v != reference]
            star = {m: all(significantly_better(agg, o, m) for o in others) if others else False
                    for m in metrics}
        lines.append(variant.ljust(name_w) + "".join(
            (f"{agg.mean[m]:.4f}" + ("*" if star.get(m) else "")).rjust(col_w) for m in metrics))
        lines.append(" " * name_w + "".join(f"({agg.std[m]:.4f})".rjust(col_w) for m in metrics))
    if reference is not None and reference in aggregates and len(aggregates) > 1:
        ref = aggregates[reference]
        cells = []
        for m in metrics:
            hib = HIGHER_IS_BETTER.get(m, True)
            others = [a.mean[m] for v, a in aggregates.items() if v != reference and not math.isnan(a.mean[m])]
            best = (max(others) if hib else min(others)) if others else float("nan")
            cells.append(f"{improvement_pct(ref.mean[m], best, hib):+.2f}%".rjust(col_w))
        lines.append("(Improvement)".ljust(name_w) + "".join(cells))
    return "\n".join(lines)

"""Evaluation metrics and repeated-run aggregation."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

DG_METRICS = ("w_f1", "r_at_10", "r_at_20")
HF_METRICS = ("auc", "f1")
METRIC_LABELS = {"w_f1": "w-F1", "r_at_10": "R@10", "r_at_20": "R@20", "auc": "AUC", "f1": "F1"}


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores; equal scores rank by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:k]


def recall_at_k(scores, truth, k: int, capped: bool = False) -> float:
    """Share of a sample's true codes found among its top-``k`` scores.

    Returns NaN when ``truth`` has no positives.  ``capped`` divides by
    ``min(k, #positives)`` instead of ``#positives``.
    """
    scores = np.asarray(scores)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise ValueError(f"scores shape {scores.shape} != truth shape {truth.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_pos = int(truth.sum())
    if n_pos == 0:
        return float("nan")
    hits = int(truth[top_k(scores, k)].sum())
    return hits / (min(k, n_pos) if capped else n_pos)


def mean_recall_at_k(scores, truth, k: int, capped: bool = False, counter: Counter | None = None) -> float:
    """Dataset Recall@k: mean over samples that have at least one positive."""
    scores = np.asarray(scores)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise ValueError(f"scores shape {scores.shape} != truth shape {truth.shape}")
    vals = []
    for s, t in zip(scores, truth):
        r = recall_at_k(s, t, k, capped)
        if math.isnan(r):
            if counter is not None:
                counter["recall_skipped"] += 1
            continue
        vals.append(r)
    if not vals:
        raise ValidationError("no sample has a positive label; Recall@k undefined")
    return float(np.mean(vals))


def _f1(tp: int, fp: int, fn: int) -> float:
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else 0.0


def weighted_f1(scores, truth, threshold: float = 0.5) -> float:
    """Per-label F1 over the dataset, averaged with weights proportional to label support.

    A score at or above ``threshold`` is a positive prediction.  Labels
    with no positives get zero weight.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise ValueError(f"scores shape {scores.shape} != truth shape {truth.shape}")
    support = truth.sum(axis=0)
    total = support.sum()
    if total == 0:
        raise ValidationError("truth matrix has no positives; weighted F1 undefined")
    pred = scores >= threshold
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    den = 2 * tp + fp + fn
    f1 = np.divide(2.0 * tp, den, out=np.zeros(den.shape), where=den > 0)
    return float((f1 * support).sum() / total)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores length {scores.size} != labels length {labels.size}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC AUC is undefined with a single class")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    # 2 * average rank (1-based) per tie group, kept integral
    ranks2 = np.empty(s.size, dtype=np.int64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks2[i:j + 1] = i + j + 2
        i = j + 1
    pos_rank2 = int(ranks2[labels[order]].sum())
    u2 = pos_rank2 - n_pos * (n_pos + 1)  # twice the U statistic
    return (u2 / 2) / (n_pos * n_neg)


def binary_f1(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores length {scores.size} != labels length {labels.size}")
    pred = scores >= threshold
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    if tp + fp + fn == 0:
        warnings.warn("no predicted and no actual positives; F1 reported as 0", stacklevel=2)
    return _f1(tp, fp, fn)


def task_metrics(task: str, scores, truth, threshold: float = 0.5, counter: Counter | None = None) -> dict:
    """Headline metrics for one task: w-F1/R@10/R@20 for DG, AUC/F1 for HF."""
    if task == "dg":
        return {"w_f1": weighted_f1(scores, truth, threshold),
                "r_at_10": mean_recall_at_k(scores, truth, 10, counter=counter),
                "r_at_20": mean_recall_at_k(scores, truth, 20, counter=counter)}
    if task == "hf":
        return {"auc": roc_auc(scores, truth), "f1": binary_f1(scores, truth, threshold)}
    raise ValidationError(f"unknown task {task!r}")


@dataclass
class MetricsReport:
    per_run: list[dict]
    seeds: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @property
    def n_runs(self) -> int:
        return len(self.per_run)

    @property
    def single_run(self) -> bool:
        return self.n_runs == 1

    def to_dict(self) -> dict:
        return {"n_runs": self.n_runs, "single_run": self.single_run, "seeds": self.seeds,
                "per_run": self.per_run, "mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(list(d["per_run"]), list(d["seeds"]), dict(d["mean"]), dict(d["std"]))


def aggregate_runs(runs: Sequence[Mapping[str, float]], seeds: Sequence | None = None) -> MetricsReport:
    """Mean and sample standard deviation (n - 1) of every metric across runs.

    Runs are reordered by seed so the report does not depend on completion
    order.  One run gives a standard deviation of 0.
    """
    if not runs:
        raise ValueError("aggregate_runs needs at least one run")
    seeds = list(seeds) if seeds is not None else list(range(len(runs)))
    if len(seeds) != len(runs):
        raise ValueError("one seed per run required")
    pairs = sorted(zip(seeds, runs), key=lambda p: p[0])
    seeds = [p[0] for p in pairs]
    per_run = [dict(p[1]) for p in pairs]
    keys = sorted(per_run[0])
    mean, std = {}, {}
    for k in keys:
        vals = sorted(float(r[k]) for r in per_run)  # sorted: sum order independent of run order
        mean[k] = math.fsum(vals) / len(vals)
        if len(vals) > 1:
            std[k] = math.sqrt(math.fsum((v - mean[k]) ** 2 for v in vals) / (len(vals) - 1))
        else:
            std[k] = 0.0
    return MetricsReport(per_run, seeds, mean, std)


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ({100 * std:.2f})"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned text table: first column left-aligned, the rest right-aligned."""
    cols = list(zip(*([header] + [list(r) for r in rows])))
    widths = [max(len(c) for c in col) for col in cols]

    def line(cells):
        out = [cells[0].ljust(widths[0])]
        out += [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join(out).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


def report_table(report: MetricsReport, name: str) -> str:
    keys = [k for k in DG_METRICS + HF_METRICS if k in report.mean]
    header = ["Model"] + [METRIC_LABELS[k] for k in keys]
    row = [name] + [format_cell(report.mean[k], report.std[k]) for k in keys]
    return format_table(header, [row])

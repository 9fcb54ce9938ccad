"""Multi-label metric suite: AUC, max-F1 thresholding, accuracy at that
threshold, average precision, and macro report assembly.

Conventions, fixed here and exercised against brute-force oracles in tests:
ties in AUC count half; the F1 scan uses `score >= threshold` cuts over the
distinct observed scores (plus an above-max cut) and breaks ties toward the
higher threshold; reported accuracy uses the strict rule `score > threshold`;
average precision breaks score ties by stable original order and flags them.
Classes without both a positive and a negative are excluded from aggregates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LABEL_POSITIVE, LABEL_UNOBSERVED


def _binary_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count half."""
    s, y = _binary_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def max_f1_threshold(scores, labels) -> tuple[float, float]:
    """Best F1 over all `score >= t` cuts; ties resolved toward the higher threshold.

    Candidate cuts are the distinct scores plus one cut above the maximum
    (predict nothing, F1 defined as 0).
    """
    s, y = _binary_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("max_f1_threshold needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_desc = s[order]
    y_desc = y[order]
    tp = np.cumsum(y_desc)
    pred = np.arange(1, len(s) + 1)
    best_thr = float(s_desc[0] + 1.0)
    best_f1 = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s_desc[j + 1] == s_desc[i]:
            j += 1
        # cut at t = s_desc[i]: everything with score >= t is predicted positive
        tp_here = int(tp[j])
        fp_here = int(pred[j]) - tp_here
        fn_here = n_pos - tp_here
        f1 = 2.0 * tp_here / (2.0 * tp_here + fp_here + fn_here) if tp_here else 0.0
        if f1 > best_f1:
            best_f1 = f1
            best_thr = float(s_desc[i])
        i = j + 1
    return best_thr, best_f1


def accuracy_at_threshold(scores, labels, threshold: float) -> float:
    """Fraction of samples where the strict decision `score > threshold` matches the label."""
    s, y = _binary_arrays(scores, labels)
    return float(((s > threshold).astype(np.int64) == y).mean())


def has_score_ties(scores) -> bool:
    s = np.asarray(scores, dtype=np.float64).ravel()
    return len(np.unique(s)) < len(s)


def average_precision(scores, labels) -> float:
    """Mean of precision-at-rank over positives, ranks by descending score (stable on ties)."""
    s, y = _binary_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    y_desc = y[order]
    hits = 0
    total = 0.0
    for rank, label in enumerate(y_desc, start=1):
        if label == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


@dataclass
class ClassMetrics:
    class_index: int
    n_pos: int
    n_neg: int
    evaluable: bool
    auc: float | None = None
    f1: float | None = None
    threshold: float | None = None
    acc: float | None = None
    ap: float | None = None
    tied_scores: bool = False


@dataclass
class MetricReport:
    aggregates: dict[str, float]
    per_class: list[ClassMetrics]
    excluded_classes: list[int]
    per_source: dict[int, dict]
    sample_counts: dict

    def to_dict(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "per_class": [asdict(c) for c in self.per_class],
            "excluded_classes": self.excluded_classes,
            "per_source": {str(k): v for k, v in self.per_source.items()},
            "sample_counts": self.sample_counts,
        }

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_index", "auc", "f1", "threshold", "acc", "ap", "n_pos", "n_neg", "evaluable", "tied_scores"])
        for c in self.per_class:
            writer.writerow(
                [c.class_index, c.auc, c.f1, c.threshold, c.acc, c.ap, c.n_pos, c.n_neg, c.evaluable, c.tied_scores]
            )
        return buf.getvalue()


def _class_metrics(class_index: int, scores: np.ndarray, labels: np.ndarray) -> ClassMetrics:
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return ClassMetrics(class_index=class_index, n_pos=n_pos, n_neg=n_neg, evaluable=False)
    threshold, f1 = max_f1_threshold(scores, labels)
    return ClassMetrics(
        class_index=class_index,
        n_pos=n_pos,
        n_neg=n_neg,
        evaluable=True,
        auc=roc_auc(scores, labels),
        f1=f1,
        threshold=threshold,
        acc=accuracy_at_threshold(scores, labels, threshold),
        ap=average_precision(scores, labels),
        tied_scores=has_score_ties(scores),
    )


def _aggregate(per_class: list[ClassMetrics]) -> dict[str, float | None]:
    evaluable = [c for c in per_class if c.evaluable]
    if not evaluable:
        return {"aAUC": None, "aF1": None, "aACC": None, "mAP": None, "n_classes": 0}
    return {
        "aAUC": float(np.mean([c.auc for c in evaluable])),
        "aF1": float(np.mean([c.f1 for c in evaluable])),
        "aACC": float(np.mean([c.acc for c in evaluable])),
        "mAP": float(np.mean([c.ap for c in evaluable])),
        "n_classes": len(evaluable),
    }


def compute_report(scores: np.ndarray, labels: np.ndarray, source_ids: np.ndarray | None = None) -> MetricReport:
    """Per-class and macro metrics from (N, c) scores and ternary labels.

    Unobserved entries are dropped per class.  Aggregates are unweighted
    means over classes with at least one positive and one negative.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must both be (N, c)")
    n, c = scores.shape
    if source_ids is None:
        source_ids = np.zeros(n, dtype=np.int64)
    source_ids = np.asarray(source_ids, dtype=np.int64)

    def table(row_mask: np.ndarray) -> list[ClassMetrics]:
        out = []
        for j in range(c):
            observed = row_mask & (labels[:, j] != LABEL_UNOBSERVED)
            y = (labels[observed, j] == LABEL_POSITIVE).astype(np.int64)
            out.append(_class_metrics(j, scores[observed, j], y))
        return out

    all_rows = np.ones(n, dtype=bool)
    per_class = table(all_rows)
    per_source: dict[int, dict] = {}
    counts_per_source: dict[str, int] = {}
    for sid in sorted(set(source_ids.tolist())):
        mask = source_ids == sid
        rows = table(mask)
        per_source[sid] = {
            "aggregates": _aggregate(rows),
            "per_class": [asdict(r) for r in rows],
            "n_samples": int(mask.sum()),
        }
        counts_per_source[str(sid)] = int(mask.sum())
    return MetricReport(
        aggregates=_aggregate(per_class),
        per_class=per_class,
        excluded_classes=[cm.class_index for cm in per_class if not cm.evaluable],
        per_source=per_source,
        sample_counts={"total": n, "per_source": counts_per_source},
    )


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AUC over classes with both label polarities; NaN when no class qualifies."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    values = []
    for j in range(scores.shape[1]):
        observed = labels[:, j] != LABEL_UNOBSERVED
        y = (labels[observed, j] == LABEL_POSITIVE).astype(np.int64)
        if 0 < y.sum() < len(y):
            values.append(roc_auc(scores[observed, j], y))
    return float(np.mean(values)) if values else float("nan")

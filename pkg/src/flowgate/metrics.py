"""Binary-classification metrics, ROC construction, and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FlowgateError


class LengthMismatch(FlowgateError):
    """Labels and scores have different lengths."""


class EmptyInput(FlowgateError):
    """Metrics require at least one sample."""


class SingleClass(FlowgateError):
    """AUC is undefined unless both classes are present."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    tnr: float
    tpr: float
    auc: float
    threshold: float
    confusion: ConfusionMatrix
    roc: list[tuple[float, float]]

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "tnr": self.tnr,
            "tpr": self.tpr,
            "auc": self.auc,
            "threshold": self.threshold,
            "tp": self.confusion.tp,
            "fp": self.confusion.fp,
            "tn": self.confusion.tn,
            "fn": self.confusion.fn,
        }


def _validate(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise LengthMismatch(f"labels {y.shape} vs scores {s.shape}")
    if y.size == 0:
        raise EmptyInput("no samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64), s


def confusion(labels, scores, threshold: float = 0.5) -> ConfusionMatrix:
    """Counts with the convention: predict positive when score >= threshold."""
    y, s = _validate(labels, scores)
    pred = s >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(pred & (y == 1))),
        fp=int(np.sum(pred & (y == 0))),
        tn=int(np.sum(~pred & (y == 0))),
        fn=int(np.sum(~pred & (y == 1))),
    )


def auc(labels, scores) -> float:
    """Probability a random positive outranks a random negative, ties at 1/2.

    Computed from midranks, which makes it exactly the trapezoidal area
    under the ROC curve.
    """
    y, s = _validate(labels, scores)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("both classes must be present")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(labels, scores) -> list[tuple[float, float]]:
    """ROC polyline from (0, 0) to (1, 1).

    One point per distinct score threshold (descending, >= convention),
    with both endpoints emitted explicitly, so the list always has
    ``n_distinct + 2`` rows.
    """
    y, s = _validate(labels, scores)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s_sorted):
        j = i
        while j + 1 < len(s_sorted) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int((y_sorted[i : j + 1] == 1).sum())
        fp += int((y_sorted[i : j + 1] == 0).sum())
        points.append(
            (fp / n_neg if n_neg else 0.0, tp / n_pos if n_pos else 0.0)
        )
        i = j + 1
    points.append((1.0, 1.0))
    return points


def metrics(labels, scores, threshold: float = 0.5) -> MetricsReport:
    """Full report: accuracy, F1, TNR, TPR, AUC, confusion, ROC points.

    F1 is the positive-class F1.  Degenerate denominators yield 0.0.
    """
    cm = confusion(labels, scores, threshold)
    total = cm.total
    accuracy = (cm.tp + cm.tn) / total
    f1_den = 2 * cm.tp + cm.fp + cm.fn
    f1 = 2 * cm.tp / f1_den if f1_den else 0.0
    tnr = cm.tn / (cm.tn + cm.fp) if (cm.tn + cm.fp) else 0.0
    tpr = cm.tp / (cm.tp + cm.fn) if (cm.tp + cm.fn) else 0.0
    try:
        auc_value = auc(labels, scores)
    except SingleClass:
        auc_value = float("nan")
    return MetricsReport(
        accuracy=accuracy,
        f1=f1,
        tnr=tnr,
        tpr=tpr,
        auc=auc_value,
        threshold=threshold,
        confusion=cm,
        roc=roc_points(labels, scores),
    )


def topk_accuracy(labels, score_matrix, k: int = 1) -> float:
    """Top-k accuracy for the multi-class head."""
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(score_matrix, dtype=np.float64)
    if y.size == 0:
        raise EmptyInput("no samples")
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise LengthMismatch(f"scores {s.shape} vs labels {y.shape}")
    topk = np.argsort(-s, axis=1)[:, :k]
    return float(np.mean([y[i] in topk[i] for i in range(len(y))]))


def emit_report(report: MetricsReport, out_dir: str | Path) -> dict[str, Path]:
    """Write metrics.json, roc.csv, and the two plot images.

    Re-emitting into the same directory overwrites and reproduces the same
    JSON bytes.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.json",
        "roc_csv": out / "roc.csv",
        "roc_plot": out / "roc.png",
        "confusion_plot": out / "confusion.png",
    }
    paths["metrics"].write_text(json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n")
    with open(paths["roc_csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        writer.writerows(report.roc)

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    xs, ys = zip(*report.roc)
    ax.plot(xs, ys, marker=".", label=f"AUC = {report.auc:.3f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(paths["roc_plot"], dpi=100)
    plt.close(fig)

    cm = report.confusion
    grid = np.array([[cm.tn, cm.fp], [cm.fn, cm.tp]], dtype=np.float64)
    rows = grid.sum(axis=1, keepdims=True)
    norm = np.divide(grid, rows, out=np.zeros_like(grid), where=rows > 0)
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    for (i, j), value in np.ndenumerate(grid):
        ax.text(j, i, f"{int(value)}\n({norm[i, j]:.2f})", ha="center", va="center")
    ax.set_xticks([0, 1], ["pred 0", "pred 1"])
    ax.set_yticks([0, 1], ["true 0", "true 1"])
    fig.tight_layout()
    fig.savefig(paths["confusion_plot"], dpi=100)
    plt.close(fig)
    return paths

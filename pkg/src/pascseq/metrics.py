"""ROC/AUC, Youden's J operating point, and thresholded accuracy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import MetricError


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; the first entry is +inf for the (0, 0) corner
    fpr: np.ndarray
    tpr: np.ndarray


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y.astype(np.int64)


def roc_curve(scores, labels) -> RocCurve:
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # one point per distinct score, so tied scores move the curve diagonally
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    return RocCurve(
        thresholds=np.r_[np.inf, s[last_of_group]],
        fpr=np.r_[0.0, fp / n_neg],
        tpr=np.r_[0.0, tp / n_pos],
    )


def auc(curve: RocCurve) -> float:
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    curve = roc_curve(scores, labels)
    return curve, auc(curve)


def youden_threshold(curve: RocCurve) -> tuple[float, float]:
    """Finite threshold maximizing TPR - FPR; ties go to the higher threshold."""
    j = curve.tpr[1:] - curve.fpr[1:]
    best = int(np.argmax(j))  # thresholds are descending, so first = highest
    return float(curve.thresholds[1:][best]), float(j[best])


@dataclass
class Confusion:
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def accuracy_at(scores, labels, threshold: float) -> Confusion:
    """Predict positive iff score >= threshold."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return Confusion((tp + tn) / max(y.size, 1), tp, fp, tn, fn)


def format_mean_std(values) -> str:
    v = np.asarray(values, dtype=np.float64)
    return f"{v.mean():.2f} ± {v.std():.2f}"


def write_roc_csv(curve: RocCurve, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow(["inf" if math.isinf(t) else repr(float(t)), repr(float(f)), repr(float(p))])


def write_roc_svg(curve: RocCurve, path, title: str = "ROC curve", auc_value: float | None = None) -> None:
    """Self-contained SVG with unit axes, the chance diagonal, and the curve."""
    size, pad = 400, 50
    span = size - 2 * pad

    def xy(f, t):
        return pad + f * span, size - pad - t * span

    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(f, t) for f, t in zip(curve.fpr, curve.tpr)))
    x0, y0 = xy(0, 0)
    x1, y1 = xy(1, 1)
    ticks = []
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        tx, _ = xy(v, 0)
        _, ty = xy(0, v)
        ticks.append(f'<text x="{tx:.1f}" y="{y0 + 18:.1f}" font-size="11" text-anchor="middle">{v:g}</text>')
        ticks.append(f'<text x="{x0 - 8:.1f}" y="{ty + 4:.1f}" font-size="11" text-anchor="end">{v:g}</text>')
    label = escape(title if auc_value is None else f"{title} (AUC = {auc_value:.3f})")
    svg = "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{x0}" y="{y1}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="gray" stroke-dasharray="4,4"/>',
        f'<polyline points="{pts}" fill="none" stroke="#b2182b" stroke-width="2"/>',
        *ticks,
        f'<text x="{size / 2}" y="{size - 12}" font-size="12" text-anchor="middle">False positive rate</text>',
        f'<text x="14" y="{size / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {size / 2})">True positive rate</text>',
        f'<text x="{size / 2}" y="24" font-size="13" text-anchor="middle">{label}</text>',
        "</svg>",
    ])
    Path(path).write_text(svg + "\n", encoding="utf-8")

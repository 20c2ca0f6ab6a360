"""GradCAM scores per input diagnosis, top codes and time-separation summaries."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import autodiff as ad
from .errors import FormatError, UsageError
from .nn import Model
from .preprocess import PAD_ID, EncodedCohort, EncodedPatient, from_days


@dataclass
class AttributionResult:
    patient_id: str
    scores: np.ndarray  # one per real token, in [0, 1]
    top_code: str
    top_score: float
    top_position: int
    top_date: dt.date
    time_separation_days: int

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "top_code": self.top_code,
            "top_score": self.top_score,
            "time_separation_days": self.time_separation_days,
            "scores": [float(s) for s in self.scores],
        }


def _check_alignment(patient: EncodedPatient) -> None:
    ids, n = patient.token_ids, patient.n_events
    if np.any(ids[n:] != PAD_ID) or np.any(ids[:n] == PAD_ID):
        raise UsageError(
            f"patient {patient.patient_id!r}: token ids must be {n} real tokens followed only by [PAD]"
        )


def gradcam(model: Model, patient: EncodedPatient) -> np.ndarray:
    """Max-scaled GradCAM over the conv1d output, one score per real token.

    The target is the raw positive-class logit in eval mode. Channel weights
    are the position-averaged gradients; the weighted map is averaged over
    channels, rectified, and divided by its maximum over real tokens.
    """
    if model.spec.architecture != "bi-lstm-cnn":
        raise UsageError(f"GradCAM needs the bi-lstm-cnn architecture, got {model.spec.architecture!r}")
    _check_alignment(patient)
    was_training = model.training
    model.eval()
    capture: dict = {}
    try:
        with ad.Tape() as tape:
            logits = model.forward(patient.token_ids[None], capture)
            target = ad.take(ad.take(logits, 0, axis=0), 1, axis=0)
        grads = ad.backward(tape, target)
    finally:
        model.training = was_training
    acts = capture["conv"].data[0]  # [C, K]
    dacts = grads[capture["conv"]][0]
    weights = dacts.mean(axis=1)
    cam = np.maximum((weights[:, None] * acts).mean(axis=0), 0.0)[: patient.n_events]
    peak = cam.max() if cam.size else 0.0
    return cam / peak if peak > 0 else np.zeros_like(cam)


def time_separation(event_date: dt.date, index_date: dt.date) -> int:
    """Signed days from the index date: negative before, positive after."""
    return (event_date - index_date).days


def top_code(scores: np.ndarray, patient: EncodedPatient) -> tuple[str, dt.date, int]:
    """Highest-scoring real position (earliest on ties) -> (code, event date, position)."""
    if patient.n_events == 0:
        raise UsageError(f"patient {patient.patient_id!r} has no real tokens")
    pos = int(np.argmax(scores[: patient.n_events]))
    return patient.codes[pos], patient.event_date(pos), pos


def attribute(model: Model, patient: EncodedPatient) -> AttributionResult | None:
    """GradCAM plus top code for one patient; None for an all-PAD patient."""
    if patient.n_events == 0:
        return None
    scores = gradcam(model, patient)
    code, date, pos = top_code(scores, patient)
    if patient.covid_index_date is None:
        raise UsageError(f"patient {patient.patient_id!r} has no COVID index date")
    return AttributionResult(patient.patient_id, scores, code, float(scores[pos]), pos, date,
                             time_separation(date, patient.covid_index_date))


def correctly_predicted_positives(model: Model, cohort: EncodedCohort, threshold: float) -> list[int]:
    probs = model.predict_proba(cohort.token_ids)
    labels = cohort.labels
    return [i for i in range(len(cohort)) if labels[i] == 1 and probs[i] >= threshold]


def attribute_cohort(model: Model, cohort: EncodedCohort, threshold: float) -> list[AttributionResult]:
    """Attributions for every patient labelled positive and predicted positive at ``threshold``."""
    out = []
    for i in correctly_predicted_positives(model, cohort, threshold):
        res = attribute(model, cohort.patients[i])
        if res is not None:
            out.append(res)
    return out


# --------------------------------------------------------------------- summary


@dataclass
class CohortSummary:
    counts: dict[str, int]
    separations: dict[str, list[int]]
    top: list[str]

    @property
    def total(self) -> int:
        return int(np.sum(list(self.counts.values()))) if self.counts else 0


def summarize(results: Iterable, top_n: int = 9) -> CohortSummary:
    """Group top codes; rank by patient count, then code string."""
    counts: dict[str, int] = defaultdict(int)
    seps: dict[str, list[int]] = defaultdict(list)
    for r in results:
        code = r["top_code"] if isinstance(r, dict) else r.top_code
        sep = r["time_separation_days"] if isinstance(r, dict) else r.time_separation_days
        counts[code] += 1
        seps[code].append(int(sep))
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    return CohortSummary(dict(counts), {c: sorted(v) for c, v in seps.items()}, ranked[:top_n])


def histogram(separations: Sequence[int], bin_days: int = 7) -> list[tuple[int, int, int]]:
    """Half-open ``[start, end)`` day bins aligned to multiples of ``bin_days`` (so 0 is an edge)."""
    if not separations:
        return []
    lo = math.floor(min(separations) / bin_days) * bin_days
    hi = math.floor(max(separations) / bin_days) * bin_days + bin_days
    edges = np.arange(lo, hi + bin_days, bin_days)
    counts, _ = np.histogram(separations, bins=edges)
    # np.histogram closes the last bin on the right; the top edge is exclusive here by construction
    return [(int(a), int(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


def negative_mass(bins: Sequence[tuple[int, int, int]]) -> float:
    total = np.sum([c for _, _, c in bins])
    neg = np.sum([c for _, end, c in bins if end <= 0])
    return float(neg / total) if total else 0.0


def _safe_name(code: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", code)


def write_attributions(results: Iterable[AttributionResult], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_attributions(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_summary(summary: CohortSummary, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code", "patient_count", "separations"])
        for code in summary.top:
            w.writerow([code, summary.counts[code], ";".join(str(s) for s in summary.separations[code])])


def write_histograms(summary: CohortSummary, out_dir, bin_days: int = 7) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for code in summary.top:
        path = out / f"hist_{_safe_name(code)}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_start", "bin_end", "count"])
            w.writerows(histogram(summary.separations[code], bin_days))
        paths.append(path)
    return paths


def write_distribution_svg(summary: CohortSummary, path) -> None:
    """Strip plot of time separations per top code, with the index date as the zero line."""
    codes = summary.top
    values = [s for c in codes for s in summary.separations[c]]
    lo, hi = (min(values + [0]), max(values + [0])) if values else (-1, 1)
    if hi == lo:
        hi = lo + 1
    left, width, row = 160, 480, 28
    height = 60 + row * max(len(codes), 1)

    def x(v):
        return left + (v - lo) / (hi - lo) * width

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 40}" height="{height}">',
        f'<rect width="{left + width + 40}" height="{height}" fill="white"/>',
        f'<line x1="{x(0):.1f}" y1="20" x2="{x(0):.1f}" y2="{height - 30}" stroke="black" stroke-dasharray="3,3"/>',
        f'<text x="{x(0):.1f}" y="14" font-size="11" text-anchor="middle">index date</text>',
        f'<text x="{left}" y="{height - 10}" font-size="11">{lo} days</text>',
        f'<text x="{left + width}" y="{height - 10}" font-size="11" text-anchor="end">{hi} days</text>',
    ]
    for i, code in enumerate(codes):
        y = 40 + i * row
        parts.append(
            f'<text x="{left - 8}" y="{y + 4}" font-size="11" text-anchor="end">'
            f"{escape(code)} (n={summary.counts[code]})</text>"
        )
        for s in summary.separations[code]:
            parts.append(f'<circle cx="{x(s):.1f}" cy="{y}" r="3" fill="#b2182b" fill-opacity="0.4"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def _shade(score: float) -> str:
    light, dark = np.array([255, 255, 255]), np.array([103, 0, 13])
    rgb = np.rint(light + (dark - light) * float(np.clip(score, 0.0, 1.0))).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def emit_heatmap(result: AttributionResult, patient: EncodedPatient, path, per_row: int = 8) -> None:
    """One cell per real token, darker for higher scores; index-date cells outlined in blue."""
    n = patient.n_events
    if len(result.scores) != n:
        raise UsageError(f"{len(result.scores)} scores for {n} real tokens")
    cw, ch, top = 120, 44, 40
    rows = max(1, math.ceil(n / per_row))
    w, h = cw * per_row + 20, top + rows * ch + 30
    index = patient.covid_index_date
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="10" y="24" font-size="14">GradCAM: {escape(patient.patient_id)} '
        f"(top {escape(result.top_code)}, {result.time_separation_days:+d} days)</text>",
    ]
    for i in range(n):
        s = float(result.scores[i])
        x, y = 10 + (i % per_row) * cw, top + (i // per_row) * ch
        on_index = index is not None and patient.event_dates[i] == (index - from_days(0)).days
        stroke = 'stroke="#2166ac" stroke-width="3"' if on_index else 'stroke="#999999" stroke-width="1"'
        parts.append(
            f'<rect class="cell" x="{x}" y="{y}" width="{cw - 4}" height="{ch - 4}" fill="{_shade(s)}" {stroke}>'
            f"<title>{escape(patient.codes[i])} {patient.event_date(i).isoformat()} score={s:.3f}</title></rect>"
        )
        colour = "white" if s > 0.6 else "black"
        parts.append(
            f'<text x="{x + 6}" y="{y + 17}" font-size="11" fill="{colour}">{escape(patient.codes[i][:16])}</text>'
        )
        parts.append(
            f'<text x="{x + 6}" y="{y + 32}" font-size="9" fill="{colour}">{patient.event_date(i).isoformat()}</text>'
        )
    parts.append(f'<text x="10" y="{h - 10}" font-size="11" fill="#2166ac">blue outline: COVID index date</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")

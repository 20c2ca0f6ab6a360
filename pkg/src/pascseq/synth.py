"""Synthetic cohorts with a planted, known risk signal.

Each of the ``n_risk_codes`` risk codes is planted before the index date
independently, with a per-code rate chosen so that a case carries at least
one with probability ``p_signal`` and a control with ``1 - p_signal``.
Everything else (background codes, dates, COVID events) is drawn
independently of the label, so the number of planted codes is a sufficient
statistic and the Bayes-optimal AUC has a closed form (see :func:`bayes_auc`).

In temporal mode every patient also gets a trigger code; planted codes sit
before it and label-independent decoy copies of risk codes sit after it, so
only order separates the classes beyond chance.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import asdict, dataclass, fields
from math import comb
from pathlib import Path

import numpy as np

from .errors import UsageError

COVID_PARENT = "CORONAVIRUS_INFECTION"
COVID_CHILDREN = ("COVID19_DIAGNOSIS", "COVID19_POSITIVE_TEST")
LEAK_CODE = "U09.9"
TRIGGER_CODE = "TRIGGER"
BASE_DATE = dt.date(2021, 1, 1)


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 600
    vocab_size: int = 300
    n_risk_codes: int = 8
    p_signal: float = 0.9
    case_fraction: float = 1 / 6
    min_events: int = 20
    max_events: int = 60
    pre_index_span_days: int = 3 * 365
    post_index_span_days: int = 90
    risk_offset_days: tuple[int, int] = (-365, -1)
    risk_separation: float = 3.0
    embedding_dim: int = 200
    child_code_rate: float = 0.2
    covid_repeat_rate: float = 0.3
    temporal: bool = False
    decoy_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "risk_offset_days", tuple(self.risk_offset_days))
        if not 0.5 < self.p_signal <= 1.0:
            raise UsageError(f"p_signal must be in (0.5, 1], got {self.p_signal}")
        for name in ("case_fraction", "child_code_rate", "covid_repeat_rate", "decoy_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UsageError(f"{name} must be a probability, got {getattr(self, name)}")
        if not 0 < self.case_fraction < 1:
            raise UsageError("case_fraction must be strictly between 0 and 1")
        if self.n_risk_codes < 1 or self.n_patients < 1 or self.embedding_dim < 1:
            raise UsageError("n_risk_codes, n_patients and embedding_dim must be positive")
        if self.n_background < 1:
            raise UsageError(
                f"vocab_size={self.vocab_size} leaves no room for background codes next to "
                f"{self.n_risk_codes} risk codes and the reserved codes"
            )
        if not 0 <= self.min_events <= self.max_events:
            raise UsageError("need 0 <= min_events <= max_events")
        lo, hi = self.risk_offset_days
        if not lo <= hi <= -1:
            raise UsageError(f"risk_offset_days must satisfy lo <= hi <= -1, got {self.risk_offset_days}")
        if self.temporal and hi - lo < 2:
            raise UsageError("temporal mode needs a risk window of at least 3 days")

    @property
    def n_background(self) -> int:
        return self.vocab_size - self.n_risk_codes - 1 - int(self.temporal)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown synth config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def per_code_rates(p_signal: float, n_risk: int) -> tuple[float, float]:
    """Per-code planting rates (cases, controls) giving P(>=1 code) = p and 1-p."""
    q_case = 1.0 - (1.0 - p_signal) ** (1.0 / n_risk)
    q_control = 1.0 - p_signal ** (1.0 / n_risk)
    return q_case, q_control


def bayes_auc(p_signal: float, n_risk: int) -> float:
    """AUC of the likelihood-ratio scorer, which ranks patients by planted-code count.

    With counts A ~ Bin(R, q_case) and B ~ Bin(R, q_control) this is
    P(A > B) + P(A = B) / 2.
    """
    q1, q0 = per_code_rates(p_signal, n_risk)
    pa = [comb(n_risk, a) * q1**a * (1 - q1) ** (n_risk - a) for a in range(n_risk + 1)]
    pb = [comb(n_risk, b) * q0**b * (1 - q0) ** (n_risk - b) for b in range(n_risk + 1)]
    total = 0.0
    for a in range(n_risk + 1):
        total += pa[a] * (sum(pb[:a]) + 0.5 * pb[a])
    return total


def code_names(config: SynthConfig) -> dict[str, list[str]]:
    return {
        "risk": [f"R{i:03d}" for i in range(config.n_risk_codes)],
        "background": [f"B{i:03d}" for i in range(config.n_background)],
        "trigger": [TRIGGER_CODE] if config.temporal else [],
    }


def _fmt(x: float) -> str:
    return repr(float(x))


def generate(config: SynthConfig, out_dir) -> dict[str, Path]:
    """Write events/labels/hierarchy/embeddings/code lists and ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(config.seed)
    names = code_names(config)
    risk, background = names["risk"], names["background"]
    children = {f"{b}.1": b for i, b in enumerate(background) if i % 4 == 0}
    child_of = {parent: child for child, parent in children.items()}
    q_case, q_control = per_code_rates(config.p_signal, config.n_risk_codes)
    lo, hi = config.risk_offset_days
    mid = (lo + hi) // 2

    events: list[tuple[str, str, str]] = []
    labels: list[tuple[str, int]] = []
    truth: dict[str, dict] = {}
    width = max(6, len(str(config.n_patients)))
    for n in range(config.n_patients):
        pid = f"P{n:0{width}d}"
        label = int(rng.random() < config.case_fraction)
        index = BASE_DATE + dt.timedelta(days=int(rng.integers(0, 365)))

        def at(offset: int) -> str:
            return (index + dt.timedelta(days=int(offset))).isoformat()

        rows = []
        n_bg = int(rng.integers(config.min_events, config.max_events + 1))
        codes = rng.integers(0, len(background), size=n_bg)
        offsets = rng.integers(-config.pre_index_span_days, config.post_index_span_days + 1, size=n_bg)
        use_child = rng.random(n_bg) < config.child_code_rate
        for c, off, ch in zip(codes, offsets, use_child):
            code = background[c]
            if ch and code in child_of:
                code = child_of[code]
            rows.append((pid, at(off), code))
        rows.append((pid, at(0), COVID_CHILDREN[int(rng.integers(0, 2))]))
        if rng.random() < config.covid_repeat_rate:
            rows.append((pid, at(int(rng.integers(0, 60))), COVID_CHILDREN[int(rng.integers(0, 2))]))

        q = q_case if label else q_control
        planted = rng.random(config.n_risk_codes) < q
        risk_hi = mid - 1 if config.temporal else hi
        planted_codes, planted_offsets = [], []
        for r in np.flatnonzero(planted):
            off = int(rng.integers(lo, risk_hi + 1))
            rows.append((pid, at(off), risk[r]))
            planted_codes.append(risk[r])
            planted_offsets.append(off)
        if config.temporal:
            rows.append((pid, at(mid), TRIGGER_CODE))
            decoys = rng.random(config.n_risk_codes) < config.decoy_rate
            for r in np.flatnonzero(decoys):
                rows.append((pid, at(int(rng.integers(mid + 1, hi + 1))), risk[r]))
        if label:
            rows.append((pid, at(int(rng.integers(28, 120))), LEAK_CODE))
        order = rng.permutation(len(rows))
        events.extend(rows[i] for i in order)
        labels.append((pid, label))
        truth[pid] = {"label": label, "planted": planted_codes, "planted_offsets": planted_offsets}

    embedded = [COVID_PARENT] + risk + background + names["trigger"]
    d = config.embedding_dim
    vectors = rng.normal(0.0, 1.0 / np.sqrt(d), size=(len(embedded), d))
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    vectors[1 : 1 + len(risk)] += config.risk_separation * direction

    paths = {
        "events": out / "events.csv",
        "labels": out / "labels.csv",
        "hierarchy": out / "hierarchy.csv",
        "embeddings": out / "embeddings.txt",
        "covid_codes": out / "covid_codes.txt",
        "leak_codes": out / "leak_codes.txt",
        "manifest": out / "manifest.json",
    }
    with paths["events"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "date", "code"])
        w.writerows(events)
    with paths["labels"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label"])
        w.writerows(labels)
    with paths["hierarchy"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["child", "parent"])
        w.writerows([(c, COVID_PARENT) for c in COVID_CHILDREN])
        w.writerows(sorted(children.items()))
    with paths["embeddings"].open("w", encoding="utf-8") as fh:
        fh.write(f"{len(embedded)} {d}\n")
        for code, vec in zip(embedded, vectors):
            fh.write(code + " " + " ".join(_fmt(v) for v in vec) + "\n")
    paths["covid_codes"].write_text("\n".join(COVID_CHILDREN) + "\n", encoding="utf-8")
    paths["leak_codes"].write_text(LEAK_CODE + "\n", encoding="utf-8")
    manifest = {
        "config": asdict(config),
        "codes": {
            "risk": risk,
            "covid": list(COVID_CHILDREN),
            "covid_parent": COVID_PARENT,
            "leak": [LEAK_CODE],
            "trigger": names["trigger"],
        },
        "per_code_rate": {"case": q_case, "control": q_control},
        "bayes_auc": bayes_auc(config.p_signal, config.n_risk_codes),
        "bayes_auc_formula": (
            "planted count A~Bin(R,q_case) for cases, B~Bin(R,q_control) for controls; "
            "AUC = P(A>B) + P(A=B)/2"
        ),
        "n_cases": int(sum(lab for _, lab in labels)),
        "patients": truth,
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths

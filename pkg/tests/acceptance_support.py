"""Shared pipeline for the acceptance experiments (synthetic cohort -> CV -> GradCAM)."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from pascseq import attribution as attr
from pascseq import preprocess as pp
from pascseq.metrics import roc_auc, youden_threshold
from pascseq.nn import Model, ModelSpec
from pascseq.synth import SynthConfig, generate
from pascseq.train import TrainConfig, assign_folds, cross_validate, run_fold

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def synth_cohort(config: SynthConfig, out_dir, max_len: int) -> tuple[pp.EncodedCohort, dict, list]:
    paths = generate(config, out_dir)
    records = pp.ingest_events(paths["events"], paths["labels"])
    cohort, excluded = pp.build_cohort(
        records,
        pp.load_hierarchy(paths["hierarchy"]),
        pp.load_embeddings(paths["embeddings"], dim=config.embedding_dim),
        pp.load_code_set(paths["covid_codes"]),
        pp.load_code_set(paths["leak_codes"]),
        45,
        max_len,
    )
    manifest = json.loads(Path(paths["manifest"]).read_text())
    return cohort, manifest, excluded


def top3_hit_rate(results, cohort: pp.EncodedCohort, manifest: dict) -> float:
    """Fraction of attributed patients with a planted code among their 3 highest-scoring tokens."""
    by_id = {p.patient_id: p for p in cohort.patients}
    hits = 0
    for r in results:
        patient = by_id[r.patient_id]
        planted = set(manifest["patients"][r.patient_id]["planted"])
        top = np.argsort(-r.scores, kind="stable")[:3]
        hits += any(patient.codes[i] in planted for i in top)
    return hits / len(results) if results else 0.0


@dataclass
class Criterion4Run:
    cohort: pp.EncodedCohort
    manifest: dict
    excluded: list
    spec: ModelSpec
    config: TrainConfig
    cv: object
    seconds: float


def model_spec(max_len: int, seed: int = 0) -> ModelSpec:
    return ModelSpec("bi-lstm-cnn", embedding_dim=200, hidden=32, conv_channels=64, max_len=max_len, seed=seed)


def attribute_fold(cv, fold, cohort: pp.EncodedCohort):
    model = cv.model_for(fold, cohort.embeddings)
    test = cohort.subset(fold.test_indices)
    return attr.attribute_cohort(model, test, fold.threshold), test


def shuffled_control(run: Criterion4Run, seed: int = 12345):
    """Same fold, same architecture and recipe, trained on permuted labels.

    Correct positives are judged against the true test labels at the control
    model's own Youden threshold.
    """
    ids, labels = run.cohort.token_ids, run.cohort.labels
    best = run.cv.best_fold
    shuffled = np.random.default_rng(seed).permutation(labels)
    assignment = assign_folds(labels, run.config.folds, run.config.seed)
    fold = run_fold(best.fold, ids, shuffled, run.cohort.embeddings, assignment, run.spec, run.config)
    model = Model.init(replace(run.spec, seed=run.spec.seed + best.fold), run.cohort.embeddings)
    model.load_state(fold.state)
    model.eval()
    test = run.cohort.subset(best.test_indices)
    scores = model.predict_proba(test.token_ids)
    threshold, _ = youden_threshold(roc_auc(scores, test.labels)[0])
    return attr.attribute_cohort(model, test, threshold), test


def run_criterion4(out_dir) -> Criterion4Run:
    import time

    synth_cfg = SynthConfig.from_json(CONFIGS / "acceptance_synth.json")
    train_cfg = TrainConfig.from_json(CONFIGS / "acceptance_train.json")
    cohort, manifest, excluded = synth_cohort(synth_cfg, out_dir, max_len=100)
    spec = model_spec(100, train_cfg.seed)
    start = time.perf_counter()
    cv = cross_validate(cohort.token_ids, cohort.labels, cohort.embeddings, spec, train_cfg)
    return Criterion4Run(cohort, manifest, excluded, spec, train_cfg, cv, time.perf_counter() - start)


RESULTS: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)
    return ok


def timesep_pipeline(out_dir) -> Path:
    """Run synth -> preprocess -> train -> evaluate -> attribute -> report through the CLI."""
    from pascseq.cli import main

    d = Path(out_dir)
    syn = d / "syn"
    steps = [
        ["synth", "--config", CONFIGS / "timesep_synth.json", "--out", syn],
        ["preprocess", "--events", syn / "events.csv", "--labels", syn / "labels.csv",
         "--hierarchy", syn / "hierarchy.csv", "--embeddings", syn / "embeddings.txt",
         "--covid-codes", syn / "covid_codes.txt", "--leak-codes", syn / "leak_codes.txt",
         "--embedding-dim", 200, "--max-len", 100, "--out", d / "cohort.bin"],
        ["train", "--cohort", d / "cohort.bin", "--arch", "bi-lstm-cnn", "--config", CONFIGS / "acceptance_train.json",
         "--hidden", 32, "--conv-channels", 64, "--out", d / "model.ckpt", "--log", d / "epochs.csv"],
        ["evaluate", "--model", d / "model.ckpt", "--cohort", d / "cohort.bin", "--metrics", d / "metrics.json",
         "--roc", d / "roc.csv"],
        ["attribute", "--model", d / "model.ckpt", "--cohort", d / "cohort.bin", "--threshold-from",
         d / "metrics.json", "--out", d / "attr.jsonl"],
        ["report", "--attributions", d / "attr.jsonl", "--out", d / "summary.csv", "--hist-dir", d / "hist"],
    ]
    for argv in steps:
        code = main([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited {code}")
    return d


def histogram_mass(hist_dir) -> dict[str, tuple[int, int]]:
    """Per histogram file: (count in bins ending at or before day 0, total count)."""
    import csv

    out = {}
    for path in sorted(Path(hist_dir).glob("hist_*.csv")):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        neg = sum(int(r["count"]) for r in rows if int(r["bin_end"]) <= 0)
        out[path.stem[5:]] = (neg, sum(int(r["count"]) for r in rows))
    return out


def output_files(root) -> dict[str, bytes]:
    """Every file under ``root`` except run manifests, which carry wall-clock fields."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith("run.json")}

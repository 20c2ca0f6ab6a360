"""Command-line entry point: ``pascseq <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Every successful run writes ``<primary output>.run.json`` describing how to
reproduce it.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import attribution as attr
from . import preprocess as pp
from .errors import FormatError, PascError, UsageError
from .metrics import accuracy_at, roc_auc, write_roc_csv, write_roc_svg, youden_threshold
from .nn import ARCHITECTURES, Model, ModelSpec, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate
from .train import REFERENCE_NOTE, TrainConfig, cross_validate, fit, split, write_epoch_log

log = logging.getLogger("pascseq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(payload: dict, path) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    os.replace(tmp, path)


def write_run_manifest(command: str, primary_output, config: dict, seed, inputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _digest(p) for p in inputs if p is not None and Path(p).is_file()},
        "tool_version": __version__,
        "started_at": dt.datetime.fromtimestamp(started, dt.timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    target = Path(primary_output)
    target = target / "run.json" if target.is_dir() else target.with_name(target.name + ".run.json")
    write_json_atomic(manifest, target)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("lr", "max_epochs", "seed", "batch_size", "folds")
                 if getattr(args, k, None) is not None}
    return replace(cfg, **overrides)


def _model_spec(args, cohort: pp.EncodedCohort, seed: int) -> ModelSpec:
    return ModelSpec(
        architecture=args.arch,
        embedding_dim=cohort.embeddings.shape[1],
        hidden=args.hidden,
        layers=args.layers,
        conv_channels=args.conv_channels,
        attention_width=args.attention_width,
        max_len=cohort.max_len,
        seed=seed,
    )


def _subset_indices(cohort: pp.EncodedCohort, metadata: dict, subset: str) -> np.ndarray:
    if subset == "all":
        return np.arange(len(cohort))
    info = metadata.get("split")
    if not info:
        raise UsageError("checkpoint carries no split; use --subset all")
    if info["n_patients"] != len(cohort):
        raise UsageError(f"checkpoint was trained on {info['n_patients']} patients, cohort has {len(cohort)}")
    parts = split(cohort.labels, info["ratios"], info["seed"])
    return parts[{"train": 0, "val": 1, "test": 2}[subset]]


# --------------------------------------------------------------- subcommands


def cmd_synth(args) -> None:
    config = SynthConfig.from_json(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    generate(config, args.out)
    return {"config": asdict(config), "seed": config.seed, "inputs": [args.config], "output": args.out}


def cmd_preprocess(args):
    records = pp.ingest_events(args.events, args.labels)
    hierarchy = pp.load_hierarchy(args.hierarchy)
    table = pp.load_embeddings(args.embeddings, dim=args.embedding_dim)
    covid = pp.load_code_set(args.covid_codes)
    leak = pp.load_code_set(args.leak_codes) if args.leak_codes else frozenset()
    cohort, excluded = pp.build_cohort(records, hierarchy, table, covid, leak, args.window_days, args.max_len)
    if not cohort.patients:
        raise FormatError("no patients left after preprocessing")
    pp.save_cohort(cohort, args.out)
    n_unk = int(np.sum(cohort.token_ids == pp.UNK_ID))
    print(f"encoded {len(cohort)} patients ({int(cohort.labels.sum())} positive), "
          f"excluded {len(excluded)}, {n_unk} [UNK] tokens -> {args.out}")
    config = {k: getattr(args, k) for k in ("window_days", "max_len", "embedding_dim")}
    config["excluded"] = [asdict(e) for e in excluded]
    inputs = [args.events, args.labels, args.hierarchy, args.embeddings, args.covid_codes, args.leak_codes]
    return {"config": config, "seed": None, "inputs": inputs, "output": args.out}


def cmd_train(args):
    cohort = pp.load_cohort(args.cohort)
    cfg = _train_config(args)
    spec = _model_spec(args, cohort, cfg.seed)
    ids, labels = cohort.token_ids, cohort.labels
    tr, va, te = split(labels, cfg.split, cfg.seed)
    model = Model.init(spec, cohort.embeddings)
    result = fit(model, ids[tr], labels[tr], ids[va], labels[va], cfg)
    meta = {
        "split": {"ratios": list(cfg.split), "seed": cfg.seed, "n_patients": len(cohort)},
        "train_config": cfg.to_dict(),
        "best_epoch": result.best_epoch,
    }
    if te.size and len(set(labels[te].tolist())) == 2:
        _, test_auc = roc_auc(model.predict_proba(ids[te]), labels[te])
        meta["test_auc"] = test_auc
        print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.4f}, test AUC {test_auc:.4f}")
    save_checkpoint(model, args.out, meta)
    if args.log:
        write_epoch_log(result.log, args.log)
    config = {"train": cfg.to_dict(), "model": asdict(spec)}
    return {"config": config, "seed": cfg.seed, "inputs": [args.cohort, args.config], "output": args.out}


def cmd_crossval(args):
    cohort = pp.load_cohort(args.cohort)
    cfg = _train_config(args)
    spec = _model_spec(args, cohort, cfg.seed)
    cv = cross_validate(cohort.token_ids, cohort.labels, cohort.embeddings, spec, cfg, workers=args.workers)
    report = cv.to_json()
    write_json_atomic(report, args.out)
    if args.log_dir:
        Path(args.log_dir).mkdir(parents=True, exist_ok=True)
        for f in cv.folds:
            write_epoch_log(f.log, Path(args.log_dir) / f"fold{f.fold}_epochs.csv")
    if args.model_dir:
        Path(args.model_dir).mkdir(parents=True, exist_ok=True)
        for f in cv.folds:
            save_checkpoint(cv.model_for(f, cohort.embeddings), Path(args.model_dir) / f"fold{f.fold}.ckpt",
                            {"fold": f.fold, "auc": f.auc, "threshold": f.threshold})
    print(f"{spec.architecture}: mean AUC ({cfg.folds}-fold CV) {report['mean_auc_table']}")
    for f in report["folds"]:
        print(f"  fold {f['fold']}: AUC {f['auc']:.4f}, accuracy@Youden {f['accuracy']:.4f}")
    config = {"train": cfg.to_dict(), "model": asdict(spec), "workers": args.workers}
    return {"config": config, "seed": cfg.seed, "inputs": [args.cohort, args.config], "output": args.out}


def cmd_evaluate(args):
    model, meta = load_checkpoint(args.model)
    cohort = pp.load_cohort(args.cohort)
    subset = args.subset or ("test" if meta.get("split") else "all")
    idx = _subset_indices(cohort, meta, subset)
    scores = model.predict_proba(cohort.token_ids[idx])
    labels = cohort.labels[idx]
    curve, auc_value = roc_auc(scores, labels)
    thr, j = youden_threshold(curve)
    conf = accuracy_at(scores, labels, thr)
    report = {
        "architecture": model.spec.architecture,
        "subset": subset,
        "n_patients": int(idx.size),
        "n_positive": int(labels.sum()),
        "auc": auc_value,
        "threshold": thr,
        "youden_j": j,
        **conf.as_dict(),
        "reference": {"published_auc_best_fold": 0.75, "published_accuracy": 0.7048,
                      "reproducible": False, "note": REFERENCE_NOTE},
    }
    if args.roc:
        write_roc_csv(curve, args.roc)
    if args.roc_svg:
        write_roc_svg(curve, args.roc_svg, title=model.spec.architecture, auc_value=auc_value)
    write_json_atomic(report, args.metrics)
    print(f"AUC {auc_value:.4f}, Youden threshold {thr:.4f} (J={j:.4f}), accuracy {conf.accuracy:.4f}")
    return {"config": {"subset": subset}, "seed": None, "inputs": [args.model, args.cohort], "output": args.metrics}


def _read_threshold(path) -> float:
    data = json.loads(Path(path).read_text())
    for key in ("threshold", "best_threshold"):
        if key in data:
            return float(data[key])
    raise FormatError(f"{path}: no 'threshold' or 'best_threshold' entry")


def cmd_attribute(args):
    model, meta = load_checkpoint(args.model)
    cohort = pp.load_cohort(args.cohort)
    idx = _subset_indices(cohort, meta, args.subset)
    threshold = _read_threshold(args.threshold_from)
    results = attr.attribute_cohort(model, cohort.subset(idx), threshold)
    attr.write_attributions(results, args.out)
    if args.heatmap_dir:
        out = Path(args.heatmap_dir)
        out.mkdir(parents=True, exist_ok=True)
        by_id = {p.patient_id: p for p in cohort.patients}
        for r in results[: args.max_heatmaps]:
            attr.emit_heatmap(r, by_id[r.patient_id], out / f"{attr._safe_name(r.patient_id)}.svg")
    if not results:
        log.warning("no correctly predicted positive patients at threshold %.4f", threshold)
    print(f"attributed {len(results)} correctly predicted positive patients -> {args.out}")
    config = {"threshold": threshold, "subset": args.subset, "max_heatmaps": args.max_heatmaps}
    return {"config": config, "seed": None, "inputs": [args.model, args.cohort, args.threshold_from],
            "output": args.out}


def cmd_report(args):
    results = attr.read_attributions(args.attributions)
    summary = attr.summarize(results, args.top)
    if not results:
        log.warning("attribution file is empty; writing an empty summary")
    attr.write_summary(summary, args.out)
    if args.hist_dir:
        attr.write_histograms(summary, args.hist_dir, args.bin_days)
        attr.write_distribution_svg(summary, Path(args.hist_dir) / "distribution.svg")
    for code in summary.top:
        seps = summary.separations[code]
        print(f"{code}: {summary.counts[code]} patients, median separation {int(np.median(seps))} days")
    config = {"top": args.top, "bin_days": args.bin_days}
    return {"config": config, "seed": None, "inputs": [args.attributions], "output": args.out}


# -------------------------------------------------------------------- parser


def _add_model_flags(p) -> None:
    p.add_argument("--arch", required=True, choices=ARCHITECTURES, help="model architecture")
    p.add_argument("--config", help="training config JSON (TrainConfig fields only)")
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--conv-channels", type=int, default=256)
    p.add_argument("--attention-width", type=int, default=128)
    p.add_argument("--lr", type=float, help="override the config learning rate")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pascseq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic planted-signal cohort")
    p.add_argument("--config", help="synth config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="encode raw events into a cohort file")
    p.add_argument("--events", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--covid-codes", required=True)
    p.add_argument("--leak-codes")
    p.add_argument("--window-days", type=int, default=45)
    p.add_argument("--max-len", type=int, default=1000)
    p.add_argument("--embedding-dim", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model on the 75:15:10 split")
    p.add_argument("--cohort", required=True)
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="epoch log CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--cohort", required=True)
    _add_model_flags(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--workers", type=int, default=1, help="folds run in parallel processes")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--log-dir", help="write one epoch log per fold")
    p.add_argument("--model-dir", help="write one checkpoint per fold")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("evaluate", help="AUC, Youden threshold and accuracy for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--subset", choices=("all", "train", "val", "test"),
                   help="patients to score (default: the checkpoint's test split when known)")
    p.add_argument("--roc", help="ROC CSV")
    p.add_argument("--roc-svg", help="ROC SVG")
    p.add_argument("--metrics", required=True, help="metrics JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", help="GradCAM attributions for correctly predicted positives")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--threshold-from", required=True, help="metrics JSON from evaluate or crossval")
    p.add_argument("--subset", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--out", required=True, help="attributions JSONL")
    p.add_argument("--heatmap-dir")
    p.add_argument("--max-heatmaps", type=int, default=25)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("report", help="top-code time-separation summary")
    p.add_argument("--attributions", required=True)
    p.add_argument("--top", type=int, default=9)
    p.add_argument("--out", required=True, help="summary CSV")
    p.add_argument("--hist-dir")
    p.add_argument("--bin-days", type=int, default=7)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        run = args.func(args)
    except PascError as exc:
        print(f"pascseq {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"pascseq {args.command}: {exc}", file=sys.stderr)
        return 2
    write_run_manifest(" ".join(["pascseq"] + list(argv if argv is not None else sys.argv[1:])),
                       run["output"], run["config"], run["seed"], run["inputs"], started)
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()

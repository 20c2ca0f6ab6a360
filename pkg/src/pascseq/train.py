"""Optimization recipe, stratified splitting and cross-validation.

Defaults follow the published recipe: batch size 64, Adadelta with learning
rate 0.01, learning-rate decay x0.8 after 8 epochs without validation
improvement, elementwise gradient clipping to (-5, 5), a 75:15:10 split and
3-fold stratified cross-validation.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import NumericError, StratificationError, UsageError
from .metrics import accuracy_at, format_mean_std, roc_auc, youden_threshold
from .nn import Model, ModelSpec

log = logging.getLogger(__name__)

REFERENCE_NOTE = (
    "Published figures (3-fold mean AUC 0.75 ± 0.01 for the BiLSTM+CNN model, 70.48% accuracy "
    "at the Youden threshold) were obtained on access-restricted N3C records and cannot be "
    "reproduced here; this report reproduces the protocol (3-fold stratified CV, Youden "
    "threshold, per-model mean ± std) on the supplied cohort."
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.01
    lr_decay: float = 0.8
    patience: int = 8
    clip_bounds: tuple[float, float] = (-5.0, 5.0)
    max_epochs: int = 50
    seed: int = 0
    adadelta_rho: float = 0.9
    adadelta_eps: float = 1e-6
    split: tuple[float, float, float] = (0.75, 0.15, 0.10)
    folds: int = 3

    def __post_init__(self):
        object.__setattr__(self, "clip_bounds", tuple(float(b) for b in self.clip_bounds))
        object.__setattr__(self, "split", tuple(float(r) for r in self.split))
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3 or min(self.split) < 0:
            raise UsageError(f"split must be three non-negative ratios summing to 1, got {self.split}")
        lo, hi = self.clip_bounds
        if not lo < hi:
            raise UsageError(f"clip_bounds must be (lower, upper) with lower < upper, got {self.clip_bounds}")
        for name in ("batch_size", "lr", "lr_decay", "patience", "max_epochs", "adadelta_eps", "folds"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.adadelta_rho < 1:
            raise UsageError(f"adadelta_rho must lie in (0, 1), got {self.adadelta_rho}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown training config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip_bounds"] = list(self.clip_bounds)
        d["split"] = list(self.split)
        return d


# -------------------------------------------------------------------- splitting


def _roundings(n: int, ratios: Sequence[float]) -> list[tuple[int, ...]]:
    exact = [n * r for r in ratios]
    options = [sorted({math.floor(x), math.ceil(x)}) for x in exact]
    return [c for c in itertools.product(*options) if sum(c) == n]


def stratified_counts(class_sizes: Sequence[int], ratios: Sequence[float]) -> np.ndarray:
    """Integer [class, part] table whose cells, row sums and column sums all round their exact share.

    Rows sum exactly to the class sizes; every cell and every part total is
    the floor or ceiling of its proportional value. Among valid tables the
    one with the smallest squared deviation wins (first found on ties).
    """
    ratios = np.asarray(ratios, dtype=np.float64) / np.sum(ratios)
    total = int(np.sum(class_sizes))
    col_ok = [{math.floor(total * r), math.ceil(total * r)} for r in ratios]
    best, best_cost = None, math.inf
    for rows in itertools.product(*(_roundings(n, ratios) for n in class_sizes)):
        cols = np.sum(rows, axis=0)
        if not all(c in ok for c, ok in zip(cols, col_ok)):
            continue
        exact = np.outer(class_sizes, ratios)
        cost = float(np.sum((np.array(rows) - exact) ** 2) + np.sum((cols - total * ratios) ** 2))
        if cost < best_cost - 1e-12:
            best, best_cost = np.array(rows), cost
    if best is None:  # not reachable for two classes; kept as a guard
        raise StratificationError(f"no consistent rounding for classes {list(class_sizes)} and ratios {list(ratios)}")
    return best


def _class_members(labels: np.ndarray) -> list[np.ndarray]:
    members = [np.flatnonzero(labels == c) for c in (0, 1)]
    for c, m in enumerate(members):
        if m.size == 0:
            raise StratificationError(f"class {c} is absent from the cohort; cannot stratify")
    return members


def split(labels, ratios: Sequence[float] = (0.75, 0.15, 0.10), seed: int = 0) -> tuple[np.ndarray, ...]:
    """Disjoint, exhaustive, label-stratified partition into ``len(ratios)`` index arrays."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise StratificationError("cannot split an empty cohort")
    members = _class_members(labels)
    counts = stratified_counts([m.size for m in members], ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in ratios]
    for c, m in enumerate(members):
        perm = rng.permutation(m)
        bounds = np.cumsum(counts[c])[:-1]
        for j, chunk in enumerate(np.split(perm, bounds)):
            parts[j].append(chunk)
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def assign_folds(labels, folds: int = 3, seed: int = 0) -> np.ndarray:
    """Per-patient fold index in ``range(folds)``, stratified by label."""
    if folds < 2:
        raise UsageError("cross-validation needs at least 2 folds")
    parts = split(labels, [1.0 / folds] * folds, seed)
    out = np.empty(len(labels), dtype=np.int64)
    for f, idx in enumerate(parts):
        out[idx] = f
    return out


# -------------------------------------------------------------------- optimizer


def clip_gradients(grads: dict[str, np.ndarray], bounds: tuple[float, float] = (-5.0, 5.0)) -> dict[str, np.ndarray]:
    lo, hi = bounds
    return {k: np.clip(g, lo, hi) for k, g in grads.items()}


@dataclass
class AdadeltaState:
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    acc_delta: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: AdadeltaState,
                  lr: float = 0.01, rho: float = 0.9, eps: float = 1e-6) -> None:
    """In-place Adadelta update; ``lr`` scales the unit-corrected step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    for name, p in params.items():
        g = grads[name]
        sq = state.square_avg.setdefault(name, np.zeros_like(p.data))
        acc = state.acc_delta.setdefault(name, np.zeros_like(p.data))
        sq *= rho
        sq += (1 - rho) * g * g
        delta = np.sqrt(acc + eps) / np.sqrt(sq + eps) * g
        acc *= rho
        acc += (1 - rho) * delta * delta
        p.data -= lr * delta


class PlateauScheduler:
    """Multiply the learning rate by ``decay`` after ``patience`` epochs without a new best."""

    def __init__(self, lr: float, decay: float = 0.8, patience: int = 8):
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.decay
                self.bad_epochs = 0
        return self.lr


def plateau_schedule(val_losses: Sequence[float], lr: float = 0.01, decay: float = 0.8, patience: int = 8) -> float:
    """Learning rate after replaying ``val_losses`` through :class:`PlateauScheduler`."""
    sched = PlateauScheduler(lr, decay, patience)
    for v in val_losses:
        sched.step(v)
    return sched.lr


# --------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    model: Model
    log: list[EpochRecord]
    best_epoch: int
    best_val_loss: float


def train_step(model: Model, ids: np.ndarray, labels: np.ndarray, state: AdadeltaState,
               lr: float, config: TrainConfig) -> float:
    """One clipped Adadelta step on a mini-batch; returns the batch loss."""
    model.train()
    params = model.named_parameters()
    with ad.Tape() as tape:
        loss = ad.cross_entropy(model.forward(ids), labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    grads = ad.backward(tape, loss)
    clipped = clip_gradients({k: grads[t] for k, t in params.items()}, config.clip_bounds)
    lo, hi = config.clip_bounds
    assert all(g.min(initial=0.0) >= lo and g.max(initial=0.0) <= hi for g in clipped.values())
    adadelta_step(params, clipped, state, lr, config.adadelta_rho, config.adadelta_eps)
    return value


def mean_loss(model: Model, ids: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Eval-mode cross entropy averaged over all rows."""
    if len(ids) == 0:
        return math.nan
    was = model.training
    model.eval()
    total = 0.0
    with ad.no_tape():
        for start in range(0, len(ids), batch_size):
            chunk = slice(start, start + batch_size)
            n = len(ids[chunk])
            total += ad.cross_entropy(model.forward(ids[chunk]), labels[chunk]).item() * n
    model.training = was
    return total / len(ids)


def fit(model: Model, train_ids, train_labels, val_ids, val_labels, config: TrainConfig,
        progress=None) -> FitResult:
    """Mini-batch training for ``config.max_epochs``; the best-validation state is restored.

    Batches are reshuffled every epoch from a generator seeded by
    ``config.seed``; the last short batch is kept.
    """
    train_ids = np.asarray(train_ids)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_ids = np.asarray(val_ids)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    if len(train_ids) == 0:
        raise UsageError("training set is empty")
    rng = np.random.default_rng(config.seed)
    state = AdadeltaState()
    sched = PlateauScheduler(config.lr, config.lr_decay, config.patience)
    history: list[EpochRecord] = []
    best_state, best_epoch, best_val = model.state(), 0, math.inf
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_ids))
        total = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            try:
                loss = train_step(model, train_ids[idx], train_labels[idx], state, lr, config)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += loss * len(idx)
        train_loss = total / len(order)
        val_loss = mean_loss(model, val_ids, val_labels) if len(val_ids) else train_loss
        if not math.isfinite(val_loss):
            raise NumericError(f"epoch {epoch}: non-finite validation loss")
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, model.state()
        sched.step(val_loss)
        if progress is not None:
            progress(history[-1])
        log.info("epoch %d train %.5f val %.5f lr %.5g", epoch, train_loss, val_loss, lr)
    model.load_state(best_state)
    model.eval()
    return FitResult(model, history, best_epoch, best_val)


def write_epoch_log(history: Sequence[EpochRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


# ------------------------------------------------------------- cross-validation


@dataclass
class FoldResult:
    fold: int
    auc: float
    threshold: float
    youden_j: float
    accuracy: float
    n_test: int
    n_positive: int
    best_epoch: int
    test_indices: np.ndarray
    scores: np.ndarray
    log: list[EpochRecord]
    state: dict[str, np.ndarray]


@dataclass
class CVResult:
    spec: ModelSpec
    folds: list[FoldResult]

    @property
    def aucs(self) -> list[float]:
        return [f.auc for f in self.folds]

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std_auc(self) -> float:
        return float(np.std(self.aucs))

    @property
    def best_fold(self) -> FoldResult:
        return max(self.folds, key=lambda f: (f.auc, -f.fold))

    def model_for(self, fold: FoldResult, embeddings: np.ndarray) -> Model:
        model = Model.init(replace(self.spec, seed=self.spec.seed + fold.fold), embeddings)
        model.load_state(fold.state)
        return model.eval()

    def to_json(self) -> dict:
        best = self.best_fold
        return {
            "architecture": self.spec.architecture,
            "folds": [
                {
                    "fold": f.fold,
                    "auc": f.auc,
                    "threshold": f.threshold,
                    "youden_j": f.youden_j,
                    "accuracy": f.accuracy,
                    "n_test": f.n_test,
                    "n_positive": f.n_positive,
                    "best_epoch": f.best_epoch,
                }
                for f in self.folds
            ],
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "mean_auc_table": format_mean_std(self.aucs),
            "best_fold": best.fold,
            "best_threshold": best.threshold,
            "best_accuracy": best.accuracy,
            "reference": {
                "published_mean_auc": "0.75 ± 0.01",
                "published_accuracy": 0.7048,
                "reproducible": False,
                "note": REFERENCE_NOTE,
            },
        }


def _inner_ratios(config: TrainConfig) -> tuple[float, float]:
    tr, va, _ = config.split
    return tr / (tr + va), va / (tr + va)


def run_fold(fold: int, ids: np.ndarray, labels: np.ndarray, embeddings: np.ndarray, assignment: np.ndarray,
             spec: ModelSpec, config: TrainConfig) -> FoldResult:
    test = np.flatnonzero(assignment == fold)
    rest = np.flatnonzero(assignment != fold)
    fold_cfg = replace(config, seed=config.seed + fold)
    inner_train, inner_val = split(labels[rest], _inner_ratios(config), fold_cfg.seed)
    tr, va = rest[inner_train], rest[inner_val]
    model = Model.init(replace(spec, seed=spec.seed + fold), embeddings)
    result = fit(model, ids[tr], labels[tr], ids[va], labels[va], fold_cfg)
    scores = model.predict_proba(ids[test])
    curve, auc_value = roc_auc(scores, labels[test])
    thr, j = youden_threshold(curve)
    acc = accuracy_at(scores, labels[test], thr).accuracy
    return FoldResult(fold, auc_value, thr, j, acc, int(test.size), int(labels[test].sum()), result.best_epoch,
                      test, scores, result.log, model.state())


def cross_validate(ids, labels, embeddings, spec: ModelSpec, config: TrainConfig, workers: int = 1) -> CVResult:
    """Stratified k-fold CV; each fold's remainder is split train:val by the configured ratio.

    Fold ``f`` uses seeds ``seed + f``, so running folds in parallel changes nothing.
    """
    ids = np.asarray(ids)
    labels = np.asarray(labels, dtype=np.int64)
    assignment = assign_folds(labels, config.folds, config.seed)
    args = [(f, ids, labels, embeddings, assignment, spec, config) for f in range(config.folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(run_fold, *zip(*args)))
    else:
        folds = [run_fold(*a) for a in args]
    return CVResult(spec, folds)

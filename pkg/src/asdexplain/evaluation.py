"""Stratified k-fold splits, classification metrics and the cross-validated pipeline."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import ssae
from .svm_rfe import SelectedFeatures, SvmHyper, apply_selection, fit_standardizer, rfe_rank, standardize

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "precision", "f1")


def derive_seed(base: int, stage: str, fold: int = 0) -> int:
    """Seed for one stochastic stage: base + crc32(stage) + fold, mod 2**31."""
    return (int(base) + zlib.crc32(stage.encode()) + int(fold)) % (2 ** 31)


@dataclass
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_kfold(labels, k=5, val_fraction=0.1, seed=0) -> list[Fold]:
    """Per-class round-robin fold assignment after a seeded shuffle.

    The non-test part of every fold is further split into train and
    validation with ``round(val_fraction * class_count)`` validation samples
    per class.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    fold_of = np.empty(len(labels), dtype=np.int64)
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size < k:
            raise ValueError(f"class {c} has {members.size} samples, fewer than k={k}")
        members = members[rng.permutation(members.size)]
        fold_of[members] = np.arange(members.size) % k

    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train_parts, val_parts = [], []
        for c in classes:
            rest = np.flatnonzero((fold_of != f) & (labels == c))
            rest = rest[rng.permutation(rest.size)]
            n_val = int(round(val_fraction * rest.size))
            val_parts.append(rest[:n_val])
            train_parts.append(rest[n_val:])
        folds.append(Fold(np.sort(np.concatenate(train_parts)),
                          np.sort(np.concatenate(val_parts)), test))
    return folds


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float  # nan marks 0/0
    specificity: float
    precision: float
    f1: float

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _ratio(num, den):
    return num / den if den else math.nan


def compute_metrics(predictions, truth) -> Metrics:
    """Confusion-matrix metrics with ASD (label 1) as the positive class.

    Undefined ratios (0/0) come back as nan.
    """
    p = np.asarray(predictions)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("predictions and truth must be equal-length vectors")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    sens = _ratio(tp, tp + fn)
    prec = _ratio(tp, tp + fp)
    f1 = math.nan if math.isnan(sens) or math.isnan(prec) else _ratio(2 * prec * sens, prec + sens)
    return Metrics(tp, fp, tn, fn, (tp + tn) / p.size, sens, _ratio(tn, tn + fp), prec, f1)


@dataclass
class PipelineConfig:
    k: int = 5
    val_fraction: float = 0.1
    n_selected: int = 1000
    selection_scope: str = "per_fold"
    hidden_dims: tuple = (500, 100)
    svm: SvmHyper = field(default_factory=SvmHyper)
    pretrain: ssae.TrainConfig = field(default_factory=lambda: replace(ssae.PRETRAIN))
    finetune: ssae.TrainConfig = field(default_factory=lambda: replace(ssae.FINETUNE))
    seed: int = 42

    def validate(self):
        if self.selection_scope not in ("per_fold", "global"):
            raise ValueError("selection_scope must be per_fold or global")
        if self.k < 2 or not 0 <= self.val_fraction < 1:
            raise ValueError("need k >= 2 and val_fraction in [0, 1)")
        s = self.svm
        if s.C <= 0 or s.learning_rate <= 0 or s.epochs < 1 or s.batch_size < 1:
            raise ValueError("SVM C, learning rate, epochs and batch size must be positive")
        self.pretrain.validate()
        self.finetune.validate()


@dataclass
class TrainedFold:
    fold: int
    split: Fold
    selection: SelectedFeatures
    stats: tuple
    model: object
    trace: ssae.TrainingTrace
    metrics: Metrics


def train_model(Xr, labels, split: Fold, cfg: PipelineConfig, fold: int):
    """Standardise on the training rows, pretrain, fine-tune.

    Xr is already in the reduced feature space. Returns
    ``(model, stats, trace)``. Every random draw comes from seeds that depend
    only on ``cfg.seed`` and ``fold``.
    """
    stats = fit_standardizer(Xr[split.train])
    Z = standardize(Xr, stats)
    dims = [Xr.shape[1], *cfg.hidden_dims]
    pre = replace(cfg.pretrain, seed=derive_seed(cfg.seed, "pretrain", fold))
    encoders, trace = ssae.greedy_pretrain(dims, Z[split.train], pre)
    fine = replace(cfg.finetune, seed=derive_seed(cfg.seed, "finetune", fold))
    model, ft_trace = ssae.fine_tune(encoders, Z[split.train], labels[split.train],
                                     Z[split.val], labels[split.val], fine)
    return model, stats, trace.extend(ft_trace)


def select_features(X, labels, rows, cfg: PipelineConfig, fold: int) -> SelectedFeatures:
    hyper = replace(cfg.svm, seed=derive_seed(cfg.seed, "svm_rfe", fold))
    return rfe_rank(X[rows], labels[rows], cfg.n_selected, hyper)


def run_fold(X, labels, split: Fold, cfg: PipelineConfig, fold: int,
             selection: SelectedFeatures | None = None) -> TrainedFold:
    if selection is None:
        selection = select_features(X, labels, split.train, cfg, fold)
    Xr = apply_selection(X, selection)
    model, stats, trace = train_model(Xr, labels, split, cfg, fold)
    preds = ssae.predict_labels(model, standardize(Xr[split.test], stats))
    metrics = compute_metrics(preds, labels[split.test])
    logger.info("fold %d accuracy %.4f", fold, metrics.accuracy)
    return TrainedFold(fold, split, selection, stats, model, trace, metrics)


def _run_fold_task(args):
    return run_fold(*args)


def map_tasks(fn, tasks, jobs=1):
    """Run ``fn`` over tasks, serially or in a process pool; order is preserved."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class CvResult:
    folds: list[TrainedFold]

    @property
    def metrics(self) -> list[Metrics]:
        return [f.metrics for f in self.folds]

    def summary(self):
        """``{metric: (mean, std)}`` over folds, skipping undefined values."""
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([getattr(m, name) for m in self.metrics], dtype=np.float64)
            defined = vals[~np.isnan(vals)]
            if defined.size < vals.size:
                logger.warning("%s undefined in %d fold(s); excluded from the mean",
                               name, vals.size - defined.size)
            if defined.size == 0:
                out[name] = (math.nan, math.nan)
            else:
                out[name] = (float(np.mean(defined)),
                             float(np.std(defined, ddof=1)) if defined.size > 1 else 0.0)
        return out

    @property
    def mean_accuracy(self):
        return self.summary()["accuracy"][0]

    def write(self, path) -> None:
        write_results(path, self.metrics, self.summary())


def _fmt(v):
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def write_results(path, metrics, summary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", *METRIC_NAMES])
        for i, m in enumerate(metrics):
            w.writerow([i, *(_fmt(getattr(m, n)) for n in METRIC_NAMES)])
        w.writerow(["mean", *(_fmt(summary[n][0]) for n in METRIC_NAMES)])
        w.writerow(["std", *(_fmt(summary[n][1]) for n in METRIC_NAMES)])


def run_cv(dataset, cfg: PipelineConfig | None = None, jobs=1) -> CvResult:
    """Full cross-validated pipeline: selection, pretraining, fine-tuning, scoring."""
    cfg = cfg or PipelineConfig()
    cfg.validate()
    X, labels = dataset.X, dataset.labels
    splits = stratified_kfold(labels, cfg.k, cfg.val_fraction, derive_seed(cfg.seed, "split"))
    global_sel = None
    if cfg.selection_scope == "global":
        global_sel = select_features(X, labels, np.arange(len(labels)), cfg, 0)
    tasks = [(X, labels, s, cfg, i, global_sel) for i, s in enumerate(splits)]
    return CvResult(map_tasks(_run_fold_task, tasks, jobs))

"""Remove-and-retrain: zero each ranking's top features, retrain, re-score."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .attribution import FeatureRanking
from .evaluation import PipelineConfig, derive_seed, map_tasks, stratified_kfold, train_model
from .ssae import predict_labels
from .svm_rfe import standardize

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


@dataclass
class RoarConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    folds: tuple | None = None  # fold indices to run; None = all k

    def validate(self):
        ts = list(self.thresholds)
        if not ts:
            raise ValueError("need at least one threshold")
        # 0 is accepted as an explicit no-removal reference point
        if any(not 0.0 <= t < 1.0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("thresholds must be strictly increasing within [0, 1)")
        self.pipeline.validate()


@dataclass
class RoarCurve:
    method: str
    points: list  # (t, mean accuracy, std accuracy)
    per_fold: dict = field(default_factory=dict)  # t -> list of fold accuracies

    def accuracy_at(self, t):
        for p in self.points:
            if math.isclose(p[0], t):
                return p[1]
        raise KeyError(t)

    def area_up_to(self, t_max=0.1):
        """Trapezoidal area under the curve over thresholds <= t_max."""
        pts = [p for p in self.points if p[0] <= t_max + 1e-12]
        if len(pts) < 2:
            return math.nan
        ts = np.array([p[0] for p in pts])
        acc = np.array([p[1] for p in pts])
        return float(np.sum(np.diff(ts) * (acc[1:] + acc[:-1]) / 2))


def _order(ranking):
    return ranking.order if isinstance(ranking, FeatureRanking) else np.asarray(ranking)


def n_removed(t, n_features):
    # the epsilon keeps e.g. 0.29 * 100 at 29 despite binary rounding
    return math.floor(t * n_features + 1e-9)


def mask_features(X, ranking, t):
    """Copy of X with the top ``floor(t * n)`` ranked columns set to zero."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    X = np.asarray(X, dtype=np.float64)
    order = _order(ranking)
    if order.size != X.shape[-1]:
        raise ValueError(f"ranking covers {order.size} features, data has {X.shape[-1]}")
    out = X.copy()
    out[..., order[:n_removed(t, order.size)]] = 0.0
    return out


def _cell(args):
    Xr, labels, split, order, t, pipeline, fold = args
    Xm = mask_features(Xr, order, t)
    model, stats, _ = train_model(Xm, labels, split, pipeline, fold)
    preds = predict_labels(model, standardize(Xm[split.test], stats))
    return float(np.mean(preds == labels[split.test]))


def roar_run(Xr, labels, rankings: dict, cfg: RoarConfig | None = None, jobs=1):
    """Accuracy curves for each ranking.

    Every cell (method, t, fold) retrains from a fresh initialisation whose
    seeds depend only on the pipeline seed and the fold, so all methods
    share the same splits and the same starting weights.
    """
    cfg = cfg or RoarConfig()
    cfg.validate()
    labels = np.asarray(labels)
    pipe = cfg.pipeline
    splits = stratified_kfold(labels, pipe.k, pipe.val_fraction, derive_seed(pipe.seed, "split"))
    folds = list(range(pipe.k)) if cfg.folds is None else list(cfg.folds)
    cells, tasks = [], []
    for method, ranking in rankings.items():
        order = _order(ranking)
        for t in cfg.thresholds:
            for f in folds:
                cells.append((method, t, f))
                tasks.append((Xr, labels, splits[f], order, t, pipe, f))
    accs = map_tasks(_cell, tasks, jobs)

    curves = {}
    for method in rankings:
        points, per_fold = [], {}
        for t in cfg.thresholds:
            vals = [a for (m, tt, _), a in zip(cells, accs) if m == method and tt == t]
            per_fold[t] = vals
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            points.append((t, float(np.mean(vals)), std))
            logger.info("roar %s t=%.2f accuracy %.4f", method, t, points[-1][1])
        curves[method] = RoarCurve(method, points, per_fold)
    return curves


def emit_roar_table(curves, out_dir, stem="roar", figure=True):
    """Write ``<stem>.csv``, ``<stem>_summary.csv`` and ``<stem>.svg``.

    Rows are sorted by method name, then threshold. Returns the paths.
    """
    curves = sorted(curves.values() if isinstance(curves, dict) else curves,
                    key=lambda c: c.method)
    if not curves:
        raise ValueError("no curves to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{stem}.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "t", "mean_accuracy", "std_accuracy"])
        for c in curves:
            for t, mean, std in c.points:
                w.writerow([c.method, f"{t:g}", f"{mean:.6f}", f"{std:.6f}"])
    summary = out / f"{stem}_summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "auc_t_le_0.1", "min_accuracy"])
        for c in curves:
            auc = c.area_up_to(0.1)
            w.writerow([c.method, "NA" if math.isnan(auc) else f"{auc:.6f}",
                        f"{min(p[1] for p in c.points):.6f}"])
    paths = [table, summary]
    if figure:
        chart = out / f"{stem}.svg"
        plotting.roar_chart(curves, chart)
        paths.append(chart)
    return paths


def oracle_ranking(planted_original, kept) -> FeatureRanking:
    """Planted edges first (in reduced-index order), then everything else."""
    kept = np.asarray(kept, dtype=np.int64)
    is_planted = np.isin(kept, np.asarray(planted_original, dtype=np.int64))
    idx = np.arange(kept.size)
    return FeatureRanking("oracle", np.concatenate([idx[is_planted], idx[~is_planted]]))

"""Linear-SVM recursive feature elimination.

The SVM is trained with seeded mini-batch subgradient descent on the
L2-regularised hinge loss. Samples are visited in an order derived from a
content hash of each row plus the seed, so shuffling the input rows does not
change the fitted weights.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SvmHyper:
    C: float = 1.0
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0


@dataclass
class LinearSvmModel:
    w: np.ndarray
    b: float
    hyper: SvmHyper

    def decision(self, X):
        return np.asarray(X, dtype=np.float64) @ self.w + self.b

    def predict(self, X):
        return np.where(self.decision(X) >= 0, 1, -1)


@dataclass
class SelectedFeatures:
    kept: np.ndarray  # original feature indices, most important first
    elimination_order: list[tuple[int, np.ndarray]] = field(default_factory=list)
    n_features: int = 0
    seed: int = 0

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=np.int64)
        if not self.n_features:
            dropped = sum(len(d) for _, d in self.elimination_order)
            self.n_features = len(self.kept) + dropped

    @property
    def target(self):
        return len(self.kept)

    def original_index(self, reduced_index):
        return int(self.kept[reduced_index])

    def reduced_index(self, original_index):
        hits = np.flatnonzero(self.kept == original_index)
        if not hits.size:
            raise KeyError(f"feature {original_index} was not selected")
        return int(hits[0])

    def write(self, path) -> None:
        lines = [f"# svm-rfe v1 target={self.target} seed={self.seed} n_features={self.n_features}"]
        lines += [str(int(k)) for k in self.kept]
        lines.append("# eliminated")
        for rnd, dropped in self.elimination_order:
            lines += [f"{rnd},{int(k)}" for k in dropped]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "SelectedFeatures":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# svm-rfe v1"):
            raise ValueError(f"{path}: not an svm-rfe selection file")
        meta = dict(tok.split("=", 1) for tok in lines[0].split()[3:])
        kept, rounds, section = [], {}, "kept"
        for line in lines[1:]:
            if not line.strip():
                continue
            if line.startswith("# eliminated"):
                section = "elim"
                continue
            if section == "kept":
                kept.append(int(line))
            else:
                rnd, k = line.split(",")
                rounds.setdefault(int(rnd), []).append(int(k))
        order = [(r, np.array(v, dtype=np.int64)) for r, v in sorted(rounds.items())]
        return cls(np.array(kept, dtype=np.int64), order,
                   int(meta.get("n_features", 0)), int(meta.get("seed", 0)))


def fit_standardizer(X):
    """Column means and scales; zero-variance columns keep scale 1."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    return mean, np.where(sd > 0, sd, 1.0)


def standardize(X, stats):
    mean, scale = stats
    return (np.asarray(X, dtype=np.float64) - mean) / scale


def _canonical_order(X, y):
    keys = [hashlib.blake2b(row.tobytes() + bytes([int(lab > 0)]), digest_size=16).digest()
            for row, lab in zip(np.ascontiguousarray(X), y)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def train_linear_svm(X, y, hyper: SvmHyper | None = None) -> LinearSvmModel:
    """Minimise ``lam/2 |w|^2 + mean(hinge)`` with ``lam = 1 / (C n)``.

    ``y`` holds +-1 labels. Step size decays as ``lr / (1 + lr * lam * t)``;
    the returned weights are the average of the iterates over the last half
    of training.
    """
    hyper = hyper or SvmHyper()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("empty design matrix")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("need samples from both classes")
    n, p = X.shape
    lam = 1.0 / (hyper.C * n)
    order = _canonical_order(X, y)
    Xc, yc = X[order], y[order]
    rng = np.random.default_rng(hyper.seed)

    w = np.zeros(p)
    b = 0.0
    w_avg = np.zeros(p)
    b_avg = 0.0
    n_avg = 0
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    total = hyper.epochs * steps_per_epoch
    t = 0
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            xb, yb = Xc[idx], yc[idx]
            t += 1
            eta = hyper.learning_rate / (1.0 + hyper.learning_rate * lam * t)
            active = yb * (xb @ w + b) < 1.0
            gw = lam * w - (yb[active] @ xb[active]) / len(idx)
            gb = -yb[active].sum() / len(idx)
            w = w - eta * gw
            b = b - eta * gb
            if t > total // 2:
                n_avg += 1
                w_avg += (w - w_avg) / n_avg
                b_avg += (b - b_avg) / n_avg
    if not np.all(np.isfinite(w_avg)):
        raise FloatingPointError("SVM weights diverged")
    return LinearSvmModel(w_avg, float(b_avg), hyper)


def _lowest_first(scores, features):
    """Order by ascending score, lower original index first on ties."""
    return np.lexsort((features, scores))


def rfe_rank(X, y, target_count=1000, hyper: SvmHyper | None = None,
             step_fraction=0.1) -> SelectedFeatures:
    """Recursive feature elimination down to ``target_count`` features.

    X is standardised internally on the given rows. Each round drops
    ``ceil(step_fraction * survivors)`` features with the smallest ``w_i^2``,
    never going below the target. ``y`` may be 0/1 or +-1.
    """
    hyper = hyper or SvmHyper()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    y = np.where(y > 0, 1.0, -1.0)
    n_features = X.shape[1]
    if target_count >= n_features:
        raise ValueError("target_count must be smaller than the feature count")
    if target_count < 1:
        raise ValueError("target_count must be positive")
    Xs = standardize(X, fit_standardizer(X))

    survivors = np.arange(n_features)
    elimination = []
    rnd = 0
    while survivors.size > target_count:
        model = train_linear_svm(Xs[:, survivors], y, hyper)
        scores = model.w ** 2
        n_drop = min(math.ceil(step_fraction * survivors.size), survivors.size - target_count)
        order = _lowest_first(scores, survivors)
        elimination.append((rnd, survivors[order[:n_drop]]))
        survivors = np.sort(survivors[order[n_drop:]])
        rnd += 1

    model = train_linear_svm(Xs[:, survivors], y, hyper)
    best_first = _lowest_first(-(model.w ** 2), survivors)
    return SelectedFeatures(survivors[best_first], elimination, n_features, hyper.seed)


def apply_selection(fv, sel):
    """Gather the selected columns (in ``kept`` order) from a vector or matrix."""
    fv = np.asarray(fv, dtype=np.float64)
    kept = sel.kept if isinstance(sel, SelectedFeatures) else np.asarray(sel, dtype=np.int64)
    width = fv.shape[-1]
    if kept.size and (kept.min() < 0 or kept.max() >= width):
        raise IndexError("selected index out of range")
    return fv[..., kept]

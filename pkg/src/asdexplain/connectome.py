"""Functional connectivity: Pearson correlation, Fisher z and edge indexing.

Edges are the strict lower triangle of the ROI x ROI matrix. Edge ``(i, j)``
with ``i > j`` lives at feature index ``k = i * (i - 1) / 2 + j``, so for the
116-region AAL atlas there are 6670 features.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

N_ROIS = 116
N_EDGES = N_ROIS * (N_ROIS - 1) // 2
FISHER_EPS = 1e-7


class DegenerateCorrelation(ArithmeticError):
    """A series has zero variance, so its correlation is undefined."""


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length series of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateCorrelation("zero-variance series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def fisher_z(r):
    """atanh of r after clamping into [-1 + 1e-7, 1 - 1e-7]."""
    r = np.clip(np.asarray(r, dtype=np.float64), -1.0 + FISHER_EPS, 1.0 - FISHER_EPS)
    z = np.arctanh(r)
    return float(z) if z.ndim == 0 else z


def connectivity_matrix(series, return_flags=False):
    """Fisher-z connectivity matrix of a (T, n_rois) series.

    Zero-variance ROIs get all-zero rows and columns and a logged warning.
    Each unordered pair is computed once and mirrored, so the result is
    exactly symmetric. With ``return_flags`` also returns the list of
    degenerate ROI indices.
    """
    ts = np.asarray(series, dtype=np.float64)
    if ts.ndim != 2 or ts.shape[0] < 2:
        raise ValueError("series must be (T, n_rois) with T >= 2")
    centered = ts - ts.mean(axis=0)
    ss = np.einsum("ij,ij->j", centered, centered)
    degenerate = np.flatnonzero(ss == 0.0)
    if degenerate.size:
        logger.warning("zero-variance ROI columns %s: edges set to 0", degenerate.tolist())
    norms = np.sqrt(np.where(ss == 0.0, 1.0, ss))
    unit = centered / norms
    r = np.clip(unit.T @ unit, -1.0, 1.0)
    n = ts.shape[1]
    rows, cols = np.tril_indices(n, k=-1)
    z = fisher_z(r[rows, cols])
    bad = np.isin(rows, degenerate) | np.isin(cols, degenerate)
    z = np.where(bad, 0.0, z)
    cm = np.zeros((n, n))
    cm[rows, cols] = z
    cm[cols, rows] = z
    if return_flags:
        return cm, degenerate.tolist()
    return cm


def vectorize(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.shape[0]
    if cm.shape != (n, n):
        raise ValueError("connectivity matrix must be square")
    rows, cols = np.tril_indices(n, k=-1)
    # np.tril_indices walks row by row, which is exactly k = i(i-1)/2 + j
    return cm[rows, cols].copy()


def unvectorize(fv, n_rois=N_ROIS) -> np.ndarray:
    fv = np.asarray(fv, dtype=np.float64)
    if fv.shape != (n_rois * (n_rois - 1) // 2,):
        raise ValueError(f"feature vector must have {n_rois * (n_rois - 1) // 2} entries")
    rows, cols = np.tril_indices(n_rois, k=-1)
    cm = np.zeros((n_rois, n_rois))
    cm[rows, cols] = fv
    cm[cols, rows] = fv
    return cm


def edge_of_index(k, n_rois=N_ROIS):
    n_edges = n_rois * (n_rois - 1) // 2
    k = int(k)
    if not 0 <= k < n_edges:
        raise ValueError(f"feature index {k} out of range [0, {n_edges})")
    i = int((1 + math.isqrt(1 + 8 * k)) // 2)
    j = k - i * (i - 1) // 2
    return i, j


def index_of_edge(i, j, n_rois=N_ROIS) -> int:
    i, j = int(i), int(j)
    if not 0 <= j < i < n_rois:
        raise ValueError(f"edge ({i}, {j}) must satisfy 0 <= j < i < {n_rois}")
    return i * (i - 1) // 2 + j


def edges_of_indices(indices, n_rois=N_ROIS):
    """Vectorised :func:`edge_of_index`: returns arrays ``(i, j)``."""
    k = np.asarray(indices, dtype=np.int64)
    rows, cols = np.tril_indices(n_rois, k=-1)
    if k.size and (k.min() < 0 or k.max() >= rows.size):
        raise ValueError("feature index out of range")
    return rows[k], cols[k]


def feature_matrix(series_list) -> tuple[np.ndarray, list[int]]:
    """Stack connectivity vectors for many subjects.

    Returns the (n_subjects, n_edges) matrix and the positions of subjects
    that had at least one degenerate ROI.
    """
    rows, flagged = [], []
    for pos, ts in enumerate(series_list):
        cm, bad = connectivity_matrix(ts, return_flags=True)
        if bad:
            flagged.append(pos)
        rows.append(vectorize(cm))
    return np.vstack(rows), flagged


def write_features(path, subject_ids, X) -> None:
    """Export as ``subject_id,feature_0,...,feature_{n-1}`` with round-trip floats."""
    X = np.asarray(X, dtype=np.float64)
    header = "subject_id," + ",".join(f"feature_{k}" for k in range(X.shape[1]))
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for sid, row in zip(subject_ids, X):
            fh.write(sid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_features(path) -> tuple[list[str], np.ndarray]:
    import pandas as pd

    df = pd.read_csv(Path(path), dtype={"subject_id": str}, float_precision="round_trip")
    if df.columns[0] != "subject_id" or not all(
            c == f"feature_{k}" for k, c in enumerate(df.columns[1:])):
        raise ValueError(f"{path}: header must be subject_id,feature_0,...")
    X = df.iloc[:, 1:].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite value")
    return df["subject_id"].tolist(), X

"""Dataset loading, head-motion filtering and the planted-biomarker generator."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import connectome
from .connectome import N_EDGES, N_ROIS

logger = logging.getLogger(__name__)

LABELS = ("TC", "ASD")  # class index 0 = TC, 1 = ASD (the positive class)
MANIFEST_HEADER = ["subject_id", "path", "label", "mean_fd", "site"]
MOTION_COLUMNS = ["tx", "ty", "tz", "rx", "ry", "rz"]
FD_THRESHOLD = 0.2
HEAD_RADIUS_MM = 50.0


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class RoiTimeSeries:
    subject_id: str
    site: str
    label: str
    series: np.ndarray
    mean_fd: float

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        if self.series.ndim != 2 or self.series.shape[1] != N_ROIS:
            raise DataError(f"expected {N_ROIS} ROIs, got shape {self.series.shape}")
        if self.series.shape[0] < 2:
            raise DataError("need at least 2 timepoints")
        if not np.all(np.isfinite(self.series)):
            raise DataError("non-finite value in series")
        if not self.mean_fd >= 0:
            raise DataError("mean_fd must be non-negative")


@dataclass
class ManifestEntry:
    subject_id: str
    path: Path
    label: str
    mean_fd: float | None
    site: str


@dataclass
class Dataset:
    """Feature-space view of a cohort: one row of connectivity values per subject."""

    subject_ids: list[str]
    labels: np.ndarray  # int, 1 = ASD
    X: np.ndarray
    mean_fd: np.ndarray
    sites: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.mean_fd = np.asarray(self.mean_fd, dtype=np.float64)
        if not self.sites:
            self.sites = ["synthetic"] * len(self.subject_ids)
        n = len(self.subject_ids)
        if self.labels.shape != (n,) or self.X.shape[0] != n or self.mean_fd.shape != (n,):
            raise DataError("dataset fields disagree on subject count")

    def __len__(self):
        return len(self.subject_ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset([self.subject_ids[i] for i in idx], self.labels[idx],
                       self.X[idx], self.mean_fd[idx], [self.sites[i] for i in idx])


def label_index(label: str) -> int:
    return LABELS.index(label)


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    entries, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"malformed manifest header {header}; expected {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
            sid, rel, label, fd, site = row
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate subject {sid!r}")
            if label not in LABELS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            mean_fd = None
            if fd.strip():
                try:
                    mean_fd = float(fd)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad mean_fd {fd!r}") from None
                if not mean_fd >= 0:
                    raise DataError(f"{path}:{lineno}: negative mean_fd {mean_fd}")
            seen.add(sid)
            p = Path(rel)
            entries.append(ManifestEntry(sid, p if p.is_absolute() else base / p,
                                         label, mean_fd, site))
    return entries


def write_manifest(path, rows) -> None:
    """rows: iterables of (subject_id, path, label, mean_fd or None, site)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for sid, p, label, fd, site in rows:
            w.writerow([sid, str(p), label, "" if fd is None else repr(float(fd)), site])


def _parse_float_rows(path, rows, width):
    out = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {r + 2} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {r + 2}") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: non-finite value {cell!r} at row {r + 2}")
            out[r, c] = v
    return out


def load_time_series(path, expected_rois=N_ROIS) -> np.ndarray:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if len(header) != expected_rois:
        raise DataError(f"{path}: expected {expected_rois} ROIs, header has {len(header)}")
    if len(body) < 2:
        raise DataError(f"{path}: need at least 2 timepoints, got {len(body)}")
    return _parse_float_rows(path, body, expected_rois)


def write_time_series(path, series, roi_names=None) -> None:
    series = np.asarray(series, dtype=np.float64)
    names = roi_names or default_roi_names(series.shape[1])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for row in series:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def default_roi_names(n=N_ROIS):
    if n == N_ROIS:
        from .roi_report import aal_names
        return aal_names()
    return [f"roi_{i}" for i in range(n)]


def load_motion(path) -> np.ndarray:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0] == MOTION_COLUMNS:
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: empty motion file")
    return _parse_float_rows(path, rows, 6)


def compute_fd_power(motion):
    """Framewise displacement per frame and its mean.

    motion: (T, 6) with translations in mm then rotations in radians.
    Rotations become arc length on a 50 mm sphere. FD of the first frame is 0.
    """
    m = np.asarray(motion, dtype=np.float64)
    if m.size == 0:
        raise DataError("empty motion series")
    if m.ndim != 2 or m.shape[1] != 6:
        raise DataError("motion parameters must be (T, 6)")
    d = np.abs(np.diff(m, axis=0))
    fd = np.concatenate([[0.0], d[:, :3].sum(axis=1) + HEAD_RADIUS_MM * d[:, 3:].sum(axis=1)])
    return fd, float(fd.mean())


def filter_by_fd(samples, threshold=FD_THRESHOLD):
    """Keep samples whose mean FD is at most ``threshold``.

    Works on anything with a ``mean_fd`` attribute, or on a :class:`Dataset`.
    Returns ``(kept, n_removed)``.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if isinstance(samples, Dataset):
        keep = samples.mean_fd <= threshold
        kept, removed = samples.subset(keep), int((~keep).sum())
        empty = len(kept) == 0
    else:
        kept = [s for s in samples if s.mean_fd <= threshold]
        removed = len(samples) - len(kept)
        empty = not kept
    if empty:
        logger.warning("FD filter at %.3f mm removed every sample", threshold)
    return kept, removed


def _motion_companion(path: Path) -> Path:
    return path.with_name(path.stem + ".motion.csv")


def load_dataset(manifest_path) -> Dataset:
    """Load every manifest entry into feature space.

    Entries may point at a per-subject time-series file or at a shared
    feature matrix (``subject_id,feature_0,...``). Missing mean_fd is filled
    from a ``<stem>.motion.csv`` companion next to the time-series file.
    """
    entries = load_manifest(manifest_path)
    feature_files: dict[Path, dict[str, np.ndarray]] = {}
    rows, fds = [], []
    for e in entries:
        if not e.path.is_file():
            raise DataError(f"data file not found for {e.subject_id}: {e.path}")
        with open(e.path) as fh:
            first = fh.readline()
        if first.startswith("subject_id,feature_0"):
            if e.path not in feature_files:
                ids, X = connectome.read_features(e.path)
                feature_files[e.path] = dict(zip(ids, X))
            table = feature_files[e.path]
            if e.subject_id not in table:
                raise DataError(f"{e.path}: no row for subject {e.subject_id}")
            rows.append(table[e.subject_id])
        else:
            ts = load_time_series(e.path)
            rows.append(connectome.vectorize(connectome.connectivity_matrix(ts)))
        fd = e.mean_fd
        if fd is None:
            companion = _motion_companion(e.path)
            if not companion.is_file():
                raise DataError(f"mean_fd missing for {e.subject_id} and no motion file {companion}")
            _, fd = compute_fd_power(load_motion(companion))
        fds.append(fd)
    return Dataset([e.subject_id for e in entries],
                   [label_index(e.label) for e in entries],
                   np.vstack(rows), fds, [e.site for e in entries])


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    n_subjects: int = 884
    n_planted_edges: int = 100
    effect_size: float = 0.3
    timepoints: int = 150
    high_fd_fraction: float = 0.0
    noise_scale: float = 0.0
    mode: str = "edge"
    seed: int = 42
    asd_fraction: float = 408 / 884
    hub_rois: int = 0
    feature_sd: float = 0.3
    n_background_factors: int = 5

    def validate(self):
        if self.mode not in ("edge", "timeseries"):
            raise ValueError(f"unknown synth mode {self.mode!r}")
        if self.n_subjects < 2:
            raise ValueError("need at least 2 subjects")
        if not 0 <= self.n_planted_edges <= N_EDGES:
            raise ValueError(f"n_planted_edges must be in [0, {N_EDGES}]")
        if not 0.0 <= self.high_fd_fraction <= 1.0:
            raise ValueError("high_fd_fraction must be in [0, 1]")
        if self.effect_size < 0 or self.noise_scale < 0 or self.feature_sd <= 0:
            raise ValueError("effect_size and noise_scale must be non-negative")
        if self.effect_size / 2 >= 1.0:
            raise ValueError("effect size pushes class correlations to |r| >= 1")
        if self.mode == "timeseries":
            if self.effect_size / 2 > _PLANTED_LOADING_SQ:
                raise ValueError("effect size pushes a planted loading below zero")
            if self.timepoints < 2:
                raise ValueError("timepoints must be >= 2")
        if not 0 < self.asd_fraction < 1:
            raise ValueError("asd_fraction must be in (0, 1)")
        if not 0 <= self.hub_rois <= N_ROIS:
            raise ValueError("hub_rois out of range")


@dataclass
class PlantedTruth:
    edge_indices: np.ndarray
    hub_rois: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def write(self, path) -> None:
        Path(path).write_text("".join(f"{int(k)}\n" for k in self.edge_indices))

    @classmethod
    def read(cls, path) -> "PlantedTruth":
        lines = [l.strip() for l in Path(path).read_text().splitlines() if l.strip()]
        return cls(np.array([int(l) for l in lines], dtype=np.int64))


# squared loading of a planted factor before the +-delta/2 group shift
_PLANTED_LOADING_SQ = 0.3
_BACKGROUND_LOADING_SD = 0.4


def _draw_structure(cfg: SynthConfig, rng):
    n = cfg.n_subjects
    n_asd = int(round(n * cfg.asd_fraction))
    labels = np.array([1] * n_asd + [0] * (n - n_asd))
    labels = labels[rng.permutation(n)]

    hubs = np.zeros(0, dtype=np.int64)
    if cfg.hub_rois:
        hubs = np.sort(rng.choice(N_ROIS, size=cfg.hub_rois, replace=False))
        ii, jj = np.tril_indices(N_ROIS, k=-1)
        both = np.isin(ii, hubs) & np.isin(jj, hubs)
        inner = np.flatnonzero(both)
        outer = np.flatnonzero((np.isin(ii, hubs) | np.isin(jj, hubs)) & ~both)
        if cfg.n_planted_edges > inner.size + outer.size:
            raise ValueError("more planted edges than edges touching the hub ROIs")
        # hub-to-hub edges first so the hubs dominate every endpoint count
        if cfg.n_planted_edges <= inner.size:
            planted = rng.choice(inner, size=cfg.n_planted_edges, replace=False)
        else:
            extra = rng.choice(outer, size=cfg.n_planted_edges - inner.size, replace=False)
            planted = np.concatenate([inner, extra])
    else:
        planted = rng.choice(N_EDGES, size=cfg.n_planted_edges, replace=False)
    planted = np.sort(planted).astype(np.int64)

    n_high = int(round(n * cfg.high_fd_fraction))
    flagged = np.zeros(n, dtype=bool)
    flagged[rng.choice(n, size=n_high, replace=False)] = True
    mean_fd = np.where(flagged, rng.uniform(0.25, 0.6, size=n), rng.uniform(0.02, 0.18, size=n))
    return labels, planted, hubs, flagged, mean_fd


def _factor_loadings(cfg: SynthConfig, planted, background):
    """Per-group loading matrices and unique variances, scaled to unit variance.

    Returns ``{label_index: (B, psi)}`` with covariance ``B B^T + diag(psi)``.
    """
    ii, jj = connectome.edges_of_indices(planted)
    out = {}
    for label, sign in ((0, +1.0), (1, -1.0)):  # TC stronger coupling, ASD weaker
        loading = np.sqrt(_PLANTED_LOADING_SQ + sign * cfg.effect_size / 2)
        planted_b = np.zeros((N_ROIS, len(planted)))
        planted_b[ii, np.arange(len(planted))] = loading
        planted_b[jj, np.arange(len(planted))] = loading
        B = np.hstack([background, planted_b])
        psi = np.ones(N_ROIS)
        scale = np.sqrt((B ** 2).sum(axis=1) + psi)
        out[label] = (B / scale[:, None], psi / scale ** 2)
    return out


def synthetic_covariance(cfg: SynthConfig) -> dict[int, np.ndarray]:
    """Model covariance of each group in timeseries mode (keyed by class index)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    _, planted, _, _, _ = _draw_structure(cfg, rng)
    background = rng.normal(0.0, _BACKGROUND_LOADING_SD, size=(N_ROIS, cfg.n_background_factors))
    return {g: B @ B.T + np.diag(psi)
            for g, (B, psi) in _factor_loadings(cfg, planted, background).items()}


def generate_synthetic(cfg: SynthConfig):
    """Build a cohort whose only class signal sits in known edges.

    Edge mode returns a :class:`Dataset` of Fisher-z features; timeseries
    mode returns a list of :class:`RoiTimeSeries`. Both come with the
    :class:`PlantedTruth`. Fully determined by ``cfg``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    labels, planted, hubs, flagged, mean_fd = _draw_structure(cfg, rng)
    truth = PlantedTruth(planted, hubs)
    n = cfg.n_subjects
    ids = [f"sub-{i:04d}" for i in range(n)]

    if cfg.mode == "edge":
        X = rng.normal(0.0, cfg.feature_sd, size=(n, N_EDGES))
        shift = np.where(labels == 0, cfg.effect_size / 2, -cfg.effect_size / 2)
        X[:, planted] += shift[:, None]
        if flagged.any():
            X[flagged] += rng.normal(0.0, cfg.noise_scale, size=(int(flagged.sum()), N_EDGES))
        return Dataset(ids, labels, X, mean_fd), truth

    background = rng.normal(0.0, _BACKGROUND_LOADING_SD, size=(N_ROIS, cfg.n_background_factors))
    loadings = _factor_loadings(cfg, planted, background)
    out = []
    for i in range(n):
        B, psi = loadings[int(labels[i])]
        f = rng.standard_normal((cfg.timepoints, B.shape[1]))
        eps = rng.standard_normal((cfg.timepoints, N_ROIS)) * np.sqrt(psi)
        series = f @ B.T + eps
        if flagged[i]:
            series = series + rng.normal(0.0, cfg.noise_scale, size=series.shape)
        out.append(RoiTimeSeries(ids[i], "synthetic", LABELS[labels[i]], series, float(mean_fd[i])))
    return out, truth


def series_to_dataset(series_list) -> Dataset:
    X, flagged = connectome.feature_matrix([s.series for s in series_list])
    if flagged:
        logger.warning("%d subjects had zero-variance ROIs", len(flagged))
    return Dataset([s.subject_id for s in series_list],
                   [label_index(s.label) for s in series_list], X,
                   [s.mean_fd for s in series_list], [s.site for s in series_list])


def write_synthetic(out_dir, data, truth: PlantedTruth) -> Path:
    """Write a generated cohort in the on-disk formats; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if isinstance(data, Dataset):
        connectome.write_features(out / "features.csv", data.subject_ids, data.X)
        for sid, lab, fd, site in zip(data.subject_ids, data.labels, data.mean_fd, data.sites):
            rows.append((sid, "features.csv", LABELS[lab], fd, site))
    else:
        (out / "series").mkdir(exist_ok=True)
        for s in data:
            rel = Path("series") / f"{s.subject_id}.csv"
            write_time_series(out / rel, s.series)
            rows.append((s.subject_id, rel.as_posix(), s.label, s.mean_fd, s.site))
    write_manifest(out / "manifest.csv", rows)
    truth.write(out / "planted_edges.txt")
    return out / "manifest.csv"

"""Edge importance rolled up to regions, with the AAL to Brodmann lookup."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import connectome, plotting


@dataclass(frozen=True)
class BrodmannEntry:
    roi_index: int
    name: str
    areas: tuple[str, ...]
    source: str


@lru_cache(maxsize=1)
def brodmann_table() -> tuple[BrodmannEntry, ...]:
    text = resources.files("asdexplain").joinpath("data/aal_brodmann.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    return tuple(BrodmannEntry(int(r["roi_index"]), r["roi_name"],
                               tuple(a for a in r["brodmann_areas"].split(";") if a),
                               r["source"]) for r in rows)


def aal_names() -> list[str]:
    return [e.name for e in brodmann_table()]


def map_brodmann(roi_name: str) -> list[str]:
    for e in brodmann_table():
        if e.name == roi_name:
            return list(e.areas)
    raise KeyError(f"unknown ROI name {roi_name!r}")


@dataclass
class RoiImportance:
    names: list[str]
    frequency: np.ndarray  # appearances in the top connections
    highest: np.ndarray  # max |score| over those connections
    weight: np.ndarray
    n_connections: int

    def order(self) -> np.ndarray:
        """ROI indices by descending weight, lower index first on ties."""
        return np.lexsort((np.arange(self.weight.size), -self.weight))


def roi_weights(pairs, scores, n_rois=connectome.N_ROIS):
    """Frequency, highest |score| and their product per ROI for a set of edges."""
    freq = np.zeros(n_rois, dtype=np.int64)
    highest = np.zeros(n_rois)
    for (i, j), s in zip(pairs, scores):
        for roi in (i, j):
            freq[roi] += 1
            highest[roi] = max(highest[roi], abs(float(s)))
    return freq, highest, freq * highest


def roi_importance(order, scores, top_fraction=0.01, kept=None) -> RoiImportance:
    """Weight every ROI by its frequency among the top connections times its top |score|.

    Args:
        order: reduced feature indices, most important first.
        scores: per-reduced-feature importance (indexed by reduced index).
        top_fraction: share of ranked connections that counts as "top".
        kept: reduced index -> original edge index map (the SVM-RFE
            selection). Identity when omitted.
    """
    order = np.asarray(order, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must be in (0, 1]")
    n_top = math.floor(top_fraction * order.size + 1e-9)
    if n_top == 0:
        raise ValueError("no connections selected")
    top = order[:n_top]
    if kept is None:
        original = top
    else:
        kept = np.asarray(kept, dtype=np.int64)
        if top.max() >= kept.size or top.min() < 0:
            raise KeyError("reduced index has no original edge mapping")
        original = kept[top]
    ii, jj = connectome.edges_of_indices(original)
    freq, highest, weight = roi_weights(zip(ii, jj), scores[top])
    return RoiImportance(aal_names(), freq, highest, weight, n_top)


def _fmt(v):
    return f"{v:.10g}"


def emit_roi_report(importance: RoiImportance, out_dir, figure=True):
    """Write the ranked ROI table, the normalised node file and a bar chart.

    Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = brodmann_table()
    ranked = importance.order()
    report = out / "roi_report.csv"
    with open(report, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "roi_index", "roi_name", "frequency", "highest", "weight",
                    "brodmann_areas"])
        for rank, roi in enumerate(ranked, start=1):
            w.writerow([rank, int(roi), importance.names[roi], int(importance.frequency[roi]),
                        _fmt(importance.highest[roi]), _fmt(importance.weight[roi]),
                        ";".join(table[roi].areas)])
    peak = importance.weight.max()
    norm = importance.weight / peak if peak > 0 else importance.weight
    nodes = out / "roi_nodes.csv"
    with open(nodes, "w", newline="") as fh:
        fh.write("roi_index,weight_normalized\n")
        for roi, v in enumerate(norm):
            fh.write(f"{roi},{_fmt(v)}\n")
    paths = [report, nodes]
    if figure:
        chart = out / "roi_importance.svg"
        plotting.roi_bar_chart(((importance.names[r], importance.weight[r]) for r in ranked),
                               chart)
        paths.append(chart)
    return paths

"""Matplotlib helpers that write byte-reproducible figures."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SVG_DPI = 72  # matplotlib writes SVG in points, so inches * 72 = viewBox units

_STYLE = {
    "svg.hashsalt": "asdexplain",
    "svg.fonttype": "none",
    "font.size": 11,
    "axes.titlesize": 13,
    "axes.labelsize": 12,
    "legend.fontsize": 9,
    "lines.linewidth": 1.6,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def figure(width_px=800, height_px=500):
    """New figure whose SVG viewBox is exactly ``width_px`` x ``height_px``."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(width_px / SVG_DPI, height_px / SVG_DPI), dpi=SVG_DPI)
    return fig, ax


def save(fig, path):
    """Save without timestamps so identical inputs give identical bytes."""
    path = str(path)
    with plt.rc_context(_STYLE):
        if path.endswith(".svg"):
            fig.savefig(path, format="svg", metadata={"Date": None})
        elif path.endswith(".pdf"):
            fig.savefig(path, format="pdf", metadata={"CreationDate": None, "ModDate": None})
        else:
            fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def roar_chart(curves, path, title="Remove and retrain"):
    """One line per method: fraction of top features removed vs test accuracy.

    Each line's SVG group id is ``roar-curve-<method>``.
    """
    fig, ax = figure()
    markers = "osD^v<>ph*"
    for i, curve in enumerate(curves):
        ts = [p[0] for p in curve.points]
        acc = [p[1] for p in curve.points]
        (line,) = ax.plot(ts, acc, marker=markers[i % len(markers)], markersize=4,
                          label=curve.method)
        line.set_gid(f"roar-curve-{curve.method}")
    ax.set_xlabel("fraction of top-ranked features removed (t)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower left")
    fig.tight_layout()
    save(fig, path)


def training_curves(trace, path):
    """Per-phase training loss, plus validation accuracy during fine-tuning."""
    phases = []
    for r in trace.records:
        if r.phase not in phases:
            phases.append(r.phase)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(phases) + 1, figsize=(3.2 * (len(phases) + 1), 3.2))
    for ax, phase in zip(axes, phases):
        recs = trace.phase(phase)
        ax.plot([r.epoch for r in recs], [r.train_loss for r in recs], label="train")
        if any(r.val_loss is not None for r in recs):
            ax.plot([r.epoch for r in recs], [r.val_loss for r in recs], label="validation")
            ax.legend()
        ax.set_title(f"{phase} loss")
        ax.set_xlabel("epoch")
    ft = [r for r in trace.records if r.val_acc is not None]
    axes[-1].plot([r.epoch for r in ft], [r.val_acc for r in ft], color="C2")
    axes[-1].set_title("validation accuracy")
    axes[-1].set_xlabel("epoch")
    fig.tight_layout()
    save(fig, path)


def roi_bar_chart(rows, path, top=20):
    """Horizontal bars of the highest-weighted ROIs (rows are (name, weight))."""
    rows = list(rows)[:top]
    fig, ax = figure(800, 120 + 22 * len(rows))
    names = [r[0] for r in rows][::-1]
    weights = [r[1] for r in rows][::-1]
    ax.barh(range(len(rows)), weights, color="C0")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(names)
    ax.set_xlabel("ROI weight (frequency x highest |attribution|)")
    fig.tight_layout()
    save(fig, path)

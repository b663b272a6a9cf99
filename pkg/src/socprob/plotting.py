"""Figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}
KIND_COLORS = {"obs": "tab:green", "gt": "tab:red", "pred": "tab:blue"}


def _new(width=4.0, ratio=0.75):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * ratio))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)


def heatmap(pmap, path, title=None):
    x0, x1, y0, y1 = pmap.spec.extent
    fig, ax = _new(4.0, 1.0)
    im = ax.imshow(pmap.values, origin="lower", extent=(x0, x1, y0, y1), cmap="magma", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    _save(fig, path)


def trajectories(rows, path, title=None):
    """``rows`` as produced by :func:`socprob.evaluation.overlay_rows`."""
    fig, ax = _new(4.0, 1.0)
    groups = {}
    for pid, step, kind, x, y in rows:
        groups.setdefault((pid, kind), []).append((step, x, y))
    labelled = set()
    for (pid, kind), pts in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        pts = np.array(sorted(pts))
        ax.plot(pts[:, 1], pts[:, 2], "-o", ms=2, lw=1, color=KIND_COLORS.get(kind, "k"),
                label=None if kind in labelled else kind)
        labelled.add(kind)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    _save(fig, path)


def loss_curve(loss_log, path):
    fig, ax = _new()
    ep = [e for e, _ in loss_log]
    ax.plot(ep, [l for _, l in loss_log], "-o", ms=3)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    _save(fig, path)


def metric_bars(reports, path):
    fig, ax = _new(5.0, 0.6)
    names = [r.dataset for r in reports]
    x = np.arange(len(names))
    ax.bar(x - 0.2, [r.ade for r in reports], 0.4, label="ADE")
    ax.bar(x + 0.2, [r.fde for r in reports], 0.4, label="FDE")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("error [m]")
    ax.legend()
    _save(fig, path)


def sweep_curve(rows, path, x="size", ys=("best_of_k_ade", "best_of_k_fde")):
    fig, ax = _new()
    xs = [r[x] for r in rows]
    for key in ys:
        if key in rows[0]:
            ax.plot(xs, [float(r[key]) for r in rows], "-o", ms=3, label=key)
    ax.set_xlabel(x)
    ax.set_ylabel("error [m]")
    ax.legend()
    _save(fig, path)

"""Report figures, rendered off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

# fixed metadata keeps PNG output byte-stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_pr_curve(report: dict, path) -> Path:
    pts = report["pr_curve"]
    fig, ax = plt.subplots(figsize=(5, 4))
    if pts:
        recalls = [0.0] + [p["recall"] for p in pts]
        precisions = [pts[0]["precision"]] + [p["precision"] for p in pts]
        ax.step(recalls, precisions, where="post", color="tab:blue")
        ax.plot(recalls[1:], precisions[1:], ".", color="tab:blue", markersize=3)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"IoU {report['iou_threshold']:g}  AP {report['ap']:.3f}")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_tracking(state, path) -> Path:
    """Target and every observed dot, with iterations numbered."""
    fig, ax = plt.subplots(figsize=(5, 4))
    tu, tv = state.target_px
    ax.plot([tu], [tv], "x", color="tab:red", markersize=10, label="target")
    dots = [(i, dot.pixel) for i, (_, dot) in enumerate(state.history) if dot is not None]
    if dots:
        ax.plot([p.u for _, p in dots], [p.v for _, p in dots], "o-", color="tab:green", label="laser dot")
        for i, p in dots:
            ax.annotate(str(i), (p.u, p.v), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.invert_yaxis()
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("u (px)")
    ax.set_ylabel("v (px)")
    ax.set_title(f"{state.status}, error {state.last_error_px:.2f} px")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_tiles(grid, path, annotations=()) -> Path:
    fig, ax = plt.subplots(figsize=(8, 8 * grid.source_h / grid.source_w + 0.5))
    ax.add_patch(Rectangle((0, 0), grid.source_w, grid.source_h, fill=False, color="black", lw=1.5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, t in enumerate(grid.tiles):
        c = colors[i % len(colors)]
        ax.add_patch(Rectangle((t.x0, t.y0), t.w, t.h, fill=True, alpha=0.12, color=c))
        ax.add_patch(Rectangle((t.x0, t.y0), t.w, t.h, fill=False, color=c, lw=1))
        ax.text(t.x0 + 8, t.y0 + 30, f"r{t.row}c{t.col}", color=c, fontsize=8)
    for b in annotations:
        ax.add_patch(Rectangle((b.x, b.y), b.w, b.h, fill=False, color="red", lw=0.8))
    ax.set_xlim(-10, grid.padded_w + 10)
    ax.set_ylim(grid.padded_h + 10, -10)
    ax.set_aspect("equal")
    ax.set_title(f"{len(grid.tiles)} patches of {grid.patch}px, overlap x {grid.overlap_x_px} y {grid.overlap_y_px}")
    return _save(fig, path)

"""Shared test fixtures that are not pytest fixtures."""

import numpy as np

from rockwatch.detector import SceneObject, SyntheticScene


def box_iou(a, b):
    ax1, ay1, ax2, ay2 = a.x, a.y, a.x + a.w, a.y + a.h
    bx1, by1, bx2, by2 = b.x, b.y, b.x + b.w, b.y + b.h
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def planted_scene(seed, n=20, band=(440, 640), n_band=4, width=1920, height=1080, seam_xs=(640, 1280)):
    """Well-separated elliptical rocks; the first ``n_band`` sit centred in the y-overlap band,
    a few more straddle the x seams."""
    rng = np.random.default_rng(seed)
    objs = []

    def fits(cx, cy, rx, ry):
        if cx - rx < 2 or cy - ry < 2 or cx + rx > width - 2 or cy + ry > height - 2:
            return False
        return all(np.hypot(cx - o.center[0], cy - o.center[1]) > 2.5 * (max(rx, ry) + max(o.radii)) + 30
                   for o in objs)

    while len(objs) < n:
        rx, ry = rng.uniform(4, 24, size=2)
        k = len(objs)
        if k < n_band:
            cx, cy = rng.uniform(30, width - 30), (band[0] + band[1]) / 2 + rng.uniform(-40, 40)
        elif k < n_band + len(seam_xs):
            cx, cy = seam_xs[k - n_band] + rng.uniform(-rx / 2, rx / 2), rng.uniform(30, height - 30)
        else:
            cx, cy = rng.uniform(30, width - 30), rng.uniform(30, height - 30)
        if fits(cx, cy, rx, ry):
            objs.append(SceneObject((float(cx), float(cy)), (float(rx), float(ry)), float(rng.uniform(0.6, 1.0))))
    return SyntheticScene(width, height, tuple(objs), background_texture_seed=seed)


def random_boxes(rng, n, classes=2, extent=200):
    from rockwatch.boxes import Detection

    out = []
    for _ in range(n):
        x, y = rng.uniform(0, extent, size=2)
        w, h = rng.uniform(5, 60, size=2)
        score = float(np.round(rng.uniform(0, 1), 1))  # coarse scores force ties
        out.append(Detection(float(x), float(y), float(w), float(h), score, int(rng.integers(0, classes))))
    return out

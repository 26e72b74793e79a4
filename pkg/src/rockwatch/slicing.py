"""Tiling of large frames for small-object detection.

Training side: split frames into fixed-size patches and clip annotations.
Inference side: run a detector per patch, move boxes back to frame
coordinates and merge the duplicates produced by overlapping patches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import boxes
from .boxes import Detection

logger = logging.getLogger(__name__)

DEFAULT_PATCH = 640
_EDGE_EPS = 1e-6


class SlicingError(ValueError):
    pass


class DetectorError(RuntimeError):
    """Raised when a detector fails on an image or patch."""


@dataclass(frozen=True)
class Tile:
    x0: int
    y0: int
    w: int
    h: int
    row: int
    col: int

    def contains(self, d: Detection) -> bool:
        return d.x >= self.x0 and d.y >= self.y0 and d.x2 <= self.x0 + self.w and d.y2 <= self.y0 + self.h


@dataclass(frozen=True)
class TileGrid:
    source_w: int
    source_h: int
    patch: int
    tiles: tuple[Tile, ...]
    overlap_x_px: int
    overlap_y_px: int
    padded_w: int
    padded_h: int

    @property
    def rows(self) -> int:
        return max(t.row for t in self.tiles) + 1

    @property
    def cols(self) -> int:
        return max(t.col for t in self.tiles) + 1


def _axis_offsets(dim: int, patch: int) -> list[int]:
    n = math.ceil(dim / patch)
    if n <= 1:
        return [0]
    stride = (dim - patch) / (n - 1)
    return [int(math.floor(i * stride + 0.5)) for i in range(n)]


def _overlap(offsets: list[int], patch: int) -> int:
    if len(offsets) < 2:
        return 0
    return max(0, patch - min(b - a for a, b in zip(offsets, offsets[1:])))


def plan_tiles(source_w: int, source_h: int, patch: int = DEFAULT_PATCH, pad: bool = False) -> TileGrid:
    """Fewest patches per axis, spread evenly so the first and last touch the edges.

    >>> g = plan_tiles(1920, 1080)
    >>> [(t.x0, t.y0) for t in g.tiles]
    [(0, 0), (640, 0), (1280, 0), (0, 440), (640, 440), (1280, 440)]
    """
    if patch <= 0:
        raise SlicingError("patch size must be positive")
    if source_w <= 0 or source_h <= 0:
        raise SlicingError("source dimensions must be positive")
    if (source_w < patch or source_h < patch) and not pad:
        raise SlicingError(
            f"{source_w}x{source_h} image is smaller than the {patch}px patch; enable padding to tile it"
        )
    pw, ph = max(source_w, patch), max(source_h, patch)
    xs = _axis_offsets(pw, patch)
    ys = _axis_offsets(ph, patch)
    tiles = tuple(Tile(x, y, patch, patch, r, c) for r, y in enumerate(ys) for c, x in enumerate(xs))
    return TileGrid(source_w, source_h, patch, tiles, _overlap(xs, patch), _overlap(ys, patch), pw, ph)


def slice_image(image: np.ndarray, grid: TileGrid) -> list[np.ndarray]:
    """Pixel-exact crops in grid order; undersized frames are edge-padded first."""
    h, w = image.shape[:2]
    if (w, h) != (grid.source_w, grid.source_h):
        raise SlicingError(f"image is {w}x{h} but grid was planned for {grid.source_w}x{grid.source_h}")
    if (grid.padded_w, grid.padded_h) != (w, h):
        pad = [(0, grid.padded_h - h), (0, grid.padded_w - w)] + [(0, 0)] * (image.ndim - 2)
        image = np.pad(image, pad, mode="edge")
    return [image[t.y0:t.y0 + t.h, t.x0:t.x0 + t.w] for t in grid.tiles]


def slice_annotations(annotations: list[Detection], grid: TileGrid, min_visibility: float = 0.25) -> list[list[Detection]]:
    """Per-tile boxes in tile coordinates.

    A box is kept in a tile when the clipped part covers at least
    ``min_visibility`` of the original box area.
    """
    out: list[list[Detection]] = []
    for t in grid.tiles:
        kept = []
        for b in annotations:
            c = boxes.clip(b, t.w, t.h, t.x0, t.y0)
            if c is not None and c.area >= min_visibility * b.area:
                kept.append(c.translated(-t.x0, -t.y0))
        out.append(kept)
    return out


def remap(det: Detection, tile: Tile) -> Detection:
    return det.translated(tile.x0, tile.y0)


def merge(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Class-aware greedy non-maximum suppression.

    Boxes are visited by descending score (ties: larger area, lower x, lower
    y); a box survives when its IoU with every survivor of its class is below
    ``iou_threshold``. Survivors are returned in visiting order.
    """
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in sorted(dets, key=boxes.priority_key):
        same = by_class.setdefault(d.class_id, [])
        if all(boxes.iou(d, k) < iou_threshold for k in same):
            same.append(d)
            kept.append(d)
    return kept


@dataclass(frozen=True)
class _Piece:
    det: Detection
    tile: int
    cut: frozenset  # sides cut by an interior tile border: "l", "r", "t", "b"


def _cut_sides(d: Detection, t: Tile, grid: TileGrid) -> frozenset:
    sides = set()
    if d.x <= t.x0 + _EDGE_EPS and t.x0 > 0:
        sides.add("l")
    if d.x2 >= t.x0 + t.w - _EDGE_EPS and t.x0 + t.w < grid.source_w:
        sides.add("r")
    if d.y <= t.y0 + _EDGE_EPS and t.y0 > 0:
        sides.add("t")
    if d.y2 >= t.y0 + t.h - _EDGE_EPS and t.y0 + t.h < grid.source_h:
        sides.add("b")
    return frozenset(sides)


def _join_axis(a: _Piece, b: _Piece) -> str | None:
    """Axis ("x" or "y") along which a's cut side meets b's opposite cut side, if any."""
    da, db = a.det, b.det
    x_overlap = min(da.x2, db.x2) - max(da.x, db.x)
    y_overlap = min(da.y2, db.y2) - max(da.y, db.y)
    if y_overlap > 0 and x_overlap >= -1.0 and (
        ("r" in a.cut and "l" in b.cut and da.x <= db.x) or ("l" in a.cut and "r" in b.cut and db.x <= da.x)
    ):
        return "x"
    if x_overlap > 0 and y_overlap >= -1.0 and (
        ("b" in a.cut and "t" in b.cut and da.y <= db.y) or ("t" in a.cut and "b" in b.cut and db.y <= da.y)
    ):
        return "y"
    return None


def reconcile_tile_edges(pieces: list[_Piece], min_cover: float = 0.5) -> list[Detection]:
    """Resolve boxes that a tile border cut short.

    A cut box mostly covered by an uncut box of the same class from another
    tile is a fragment of that box and is dropped. Cut boxes that face each
    other across a border are fused into their union; this is what rejoins
    objects split by a border with no overlap band.
    """
    whole = [p for p in pieces if not p.cut]
    cut = [
        p for p in pieces
        if p.cut and not any(
            q.det.class_id == p.det.class_id and q.tile != p.tile
            and boxes.intersection(p.det, q.det) >= min_cover * p.det.area
            for q in whole
        )
    ]
    merged = True
    while merged:
        merged = False
        for i, j in ((i, j) for i in range(len(cut)) for j in range(i + 1, len(cut))):
            a, b = cut[i], cut[j]
            axis = None
            if a.tile != b.tile and a.det.class_id == b.det.class_id:
                axis = _join_axis(a, b)
            if axis is None:
                continue
            da, db = a.det, b.det
            fused = boxes.from_corners(
                min(da.x, db.x), min(da.y, db.y), max(da.x2, db.x2), max(da.y2, db.y2),
                max(da.score, db.score), da.class_id,
            )
            joined = {"l", "r"} if axis == "x" else {"t", "b"}
            cut[i] = _Piece(fused, a.tile, frozenset((a.cut | b.cut) - joined))
            del cut[j]
            merged = True
            break
    return [p.det for p in whole] + [p.det for p in cut]


def sliced_inference(image: np.ndarray, detector, patch: int = DEFAULT_PATCH, iou_threshold: float = 0.5,
                     pad: bool = False) -> list[Detection]:
    """Detect on every patch, move boxes to frame coordinates and merge duplicates.

    ``detector`` is anything with a ``detect(image) -> list[Detection]`` method.
    """
    h, w = image.shape[:2]
    grid = plan_tiles(w, h, patch, pad=pad)
    pieces: list[_Piece] = []
    for idx, (tile, crop) in enumerate(zip(grid.tiles, slice_image(image, grid))):
        try:
            found = detector.detect(crop)
        except DetectorError:
            raise
        except Exception as exc:
            raise DetectorError(f"detector failed on tile ({tile.row}, {tile.col}): {exc}") from exc
        for d in found:
            d = boxes.clip(d, tile.w, tile.h)
            if d is None:
                continue
            d = remap(d, tile)
            if grid.padded_w != w or grid.padded_h != h:
                d = boxes.clip(d, w, h)
                if d is None:
                    continue
            pieces.append(_Piece(d, idx, _cut_sides(d, tile, grid)))
    return merge(reconcile_tile_edges(pieces), iou_threshold)

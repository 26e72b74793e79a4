"""Seeded augmentation pipeline with bounding-box propagation.

Optional geometric transforms (flips, small rotation, quarter turns) are each
applied with their own probability; brightness/contrast, CLAHE and an
elastic warp are always applied so that no two samples coincide.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import boxes
from .boxes import Detection
from .imaging import to_uint8

MAX_SMALL_ROTATION_DEG = 10.0


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot_small: float = 0.5
    p_rot90: float = 0.5
    small_rot_max_deg: float = 10.0
    brightness_delta_range: tuple[float, float] = (-25.0, 25.0)
    contrast_factor_range: tuple[float, float] = (0.8, 1.2)
    clahe_clip_limit: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    elastic_alpha: float = 30.0
    elastic_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rot_small", "p_rot90"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not 0.0 <= self.small_rot_max_deg <= MAX_SMALL_ROTATION_DEG:
            raise ValueError(f"small_rot_max_deg must lie in [0, 10], got {self.small_rot_max_deg}")
        if min(self.contrast_factor_range) <= 0:
            raise ValueError("contrast factors must be positive")
        if not self.clahe_clip_limit > 0:
            raise ValueError("clahe_clip_limit must be positive")
        if self.elastic_alpha < 0 or not self.elastic_sigma > 0:
            raise ValueError("elastic_alpha must be >= 0 and elastic_sigma > 0")


@dataclass
class AnnotatedImage:
    image: np.ndarray
    boxes: list[Detection] = field(default_factory=list)
    dropped: int = 0  # boxes lost to clipping so far

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


def _keep_boxes(candidates, width, height, dropped):
    """Clip to the image; boxes thinner than one pixel are dropped and counted."""
    kept = []
    for b in candidates:
        c = boxes.clip(b, width, height) if b is not None else None
        if c is None or c.w < 1 or c.h < 1:
            dropped += 1
        else:
            kept.append(c)
    return kept, dropped


def hflip(a: AnnotatedImage) -> AnnotatedImage:
    w = a.width
    img = np.ascontiguousarray(a.image[:, ::-1])
    return AnnotatedImage(img, [Detection(w - b.x - b.w, b.y, b.w, b.h, b.score, b.class_id) for b in a.boxes], a.dropped)


def vflip(a: AnnotatedImage) -> AnnotatedImage:
    h = a.height
    img = np.ascontiguousarray(a.image[::-1])
    return AnnotatedImage(img, [Detection(b.x, h - b.y - b.h, b.w, b.h, b.score, b.class_id) for b in a.boxes], a.dropped)


def rotate90(a: AnnotatedImage, k: int = 1) -> AnnotatedImage:
    """Rotate clockwise by ``k`` quarter turns (exact pixel permutation)."""
    k %= 4
    out = a
    for _ in range(k):
        h = out.height
        img = np.ascontiguousarray(np.rot90(out.image, k=-1))
        bx = [Detection(h - b.y - b.h, b.x, b.h, b.w, b.score, b.class_id) for b in out.boxes]
        out = AnnotatedImage(img, bx, out.dropped)
    if k == 0:
        out = AnnotatedImage(a.image.copy(), list(a.boxes), a.dropped)
    return out


def _rotation(angle_deg: float, cx: float, cy: float):
    """Forward map of a visually counter-clockwise rotation in y-down coordinates."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)

    def fwd(x, y):
        dx, dy = x - cx, y - cy
        return cx + c * dx + s * dy, cy - s * dx + c * dy

    return fwd, c, s


def _sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sampling at index coordinates with half-sample reflection at borders."""
    if image.ndim == 2:
        out = ndimage.map_coordinates(image.astype(np.float64), [rows, cols], order=1, mode="reflect")
    else:
        out = np.stack([
            ndimage.map_coordinates(image[..., ch].astype(np.float64), [rows, cols], order=1, mode="reflect")
            for ch in range(image.shape[2])
        ], axis=-1)
    return to_uint8(out)


def rotated_corners(b: Detection, angle_deg: float, width: int, height: int) -> list[tuple[float, float]]:
    fwd, _, _ = _rotation(angle_deg, width / 2.0, height / 2.0)
    return [fwd(x, y) for x, y in ((b.x, b.y), (b.x2, b.y), (b.x2, b.y2), (b.x, b.y2))]


def rotate_small(a: AnnotatedImage, angle_deg: float, max_deg: float = MAX_SMALL_ROTATION_DEG) -> AnnotatedImage:
    """Rotate about the image centre; positive angles turn counter-clockwise on screen."""
    if abs(angle_deg) > max_deg:
        raise ValueError(f"rotation of {angle_deg} deg exceeds the {max_deg} deg limit")
    if angle_deg == 0:
        return AnnotatedImage(a.image.copy(), list(a.boxes), a.dropped)
    h, w = a.height, a.width
    cx, cy = w / 2.0, h / 2.0
    _, c, s = _rotation(angle_deg, cx, cy)
    # output pixel centre -> source point via the inverse rotation
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    src_x = cx + c * dx - s * dy
    src_y = cy + s * dx + c * dy
    img = _sample(a.image, src_y - 0.5, src_x - 0.5)
    hulls = []
    for b in a.boxes:
        pts = rotated_corners(b, angle_deg, w, h)
        px = [p[0] for p in pts]
        py = [p[1] for p in pts]
        hulls.append(boxes.from_corners(min(px), min(py), max(px), max(py), b.score, b.class_id))
    kept, dropped = _keep_boxes(hulls, w, h, a.dropped)
    return AnnotatedImage(img, kept, dropped)


def brightness_contrast(a: AnnotatedImage, contrast: float, brightness: float) -> AnnotatedImage:
    """``p' = clamp(contrast * p + brightness, 0, 255)`` per channel."""
    if not contrast > 0:
        raise ValueError("contrast factor must be positive")
    if contrast == 1.0 and brightness == 0.0:
        return AnnotatedImage(a.image.copy(), list(a.boxes), a.dropped)
    img = to_uint8(contrast * a.image.astype(np.float64) + brightness)
    return AnnotatedImage(img, list(a.boxes), a.dropped)


def _tile_edges(n_px: int, n_tiles: int) -> np.ndarray:
    return np.floor(np.arange(n_tiles + 1) * n_px / n_tiles + 1e-9).astype(int)


def _equalize_channel(chan: np.ndarray, clip_limit: float, tiles: tuple[int, int]) -> np.ndarray:
    h, w = chan.shape
    ty, tx = tiles
    ye, xe = _tile_edges(h, ty), _tile_edges(w, tx)
    luts = np.empty((ty, tx, 256))
    for r in range(ty):
        for c in range(tx):
            block = chan[ye[r]:ye[r + 1], xe[c]:xe[c + 1]]
            n = block.size
            hist = np.bincount(block.ravel(), minlength=256).astype(np.float64)
            if math.isfinite(clip_limit):
                limit = clip_limit * n / 256.0
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / 256.0
            luts[r, c] = 255.0 * np.cumsum(hist) / n
    # bilinear blend between the mappings of the four nearest tile centres
    cy = (ye[:-1] + ye[1:]) / 2.0
    cx = (xe[:-1] + xe[1:]) / 2.0
    fy = np.interp(np.arange(h) + 0.5, cy, np.arange(ty))
    fx = np.interp(np.arange(w) + 0.5, cx, np.arange(tx))
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    v = chan.astype(np.intp)
    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    top = luts[Y0, X0, v] * (1 - wx) + luts[Y0, X1, v] * wx
    bottom = luts[Y1, X0, v] * (1 - wx) + luts[Y1, X1, v] * wx
    return to_uint8(top * (1 - wy) + bottom * wy)


def _rgb_to_ycbcr(rgb):
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    y = 0.299 * r + 0.587 * g + 0.114 * b
    return y, 0.564 * (b - y), 0.713 * (r - y)


def _ycbcr_to_rgb(y, cb, cr):
    r = y + cr / 0.713
    b = y + cb / 0.564
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return to_uint8(np.stack([r, g, b], axis=-1))


def clahe(image: np.ndarray, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    Each tile's 256-bin histogram is clipped at ``clip_limit * pixels / 256``
    with the excess spread evenly, turned into a CDF mapping, and mappings
    are blended bilinearly between tile centres. ``clip_limit=inf`` disables
    clipping. Colour images are equalised on luma and converted back.
    """
    ty, tx = tiles
    h, w = image.shape[:2]
    if ty < 1 or tx < 1 or ty > h or tx > w:
        raise ValueError(f"{ty}x{tx} tile grid does not fit a {w}x{h} image")
    if image.dtype != np.uint8:
        raise ValueError("clahe expects an 8-bit image")
    if image.ndim == 2:
        return _equalize_channel(image, clip_limit, tiles)
    y, cb, cr = _rgb_to_ycbcr(image)
    y_eq = _equalize_channel(to_uint8(y), clip_limit, tiles).astype(np.float64)
    return _ycbcr_to_rgb(y_eq, cb, cr)


def displacement_field(shape: tuple[int, int], alpha: float, sigma: float, rng: np.random.Generator):
    """Per-pixel displacement: uniform noise in [-1, 1], Gaussian-blurred, scaled by alpha."""
    dx = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode="reflect") * alpha
    dy = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode="reflect") * alpha
    return dx, dy


def elastic(a: AnnotatedImage, alpha: float, sigma: float, rng: np.random.Generator) -> AnnotatedImage:
    """Warp by a smooth random field; output pixel p samples the input at p + D(p).

    Boxes: each corner moves by -D sampled at that corner (first-order inverse
    of the sampling map) and the box becomes the hull of the moved corners.
    """
    if alpha < 0 or not sigma > 0:
        raise ValueError("alpha must be >= 0 and sigma > 0")
    h, w = a.height, a.width
    dx, dy = displacement_field((h, w), alpha, sigma, rng)
    if alpha == 0:
        return AnnotatedImage(a.image.copy(), list(a.boxes), a.dropped)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = _sample(a.image, ys + dy, xs + dx)
    moved = []
    for b in a.boxes:
        corners = np.array([[b.y, b.x], [b.y, b.x2], [b.y2, b.x2], [b.y2, b.x]]) - 0.5
        corners = np.clip(corners, 0, [h - 1, w - 1]).T
        cdx = ndimage.map_coordinates(dx, corners, order=1, mode="nearest")
        cdy = ndimage.map_coordinates(dy, corners, order=1, mode="nearest")
        px = np.array([b.x, b.x2, b.x2, b.x]) - cdx
        py = np.array([b.y, b.y, b.y2, b.y2]) - cdy
        moved.append(boxes.from_corners(px.min(), py.min(), px.max(), py.max(), b.score, b.class_id))
    kept, dropped = _keep_boxes(moved, w, h, a.dropped)
    return AnnotatedImage(img, kept, dropped)


def apply_pipeline(a: AnnotatedImage, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[AnnotatedImage, dict]:
    """One augmented sample plus the parameters that produced it."""
    params: dict = {}
    out = a
    if rng.random() < cfg.p_hflip:
        out = hflip(out)
        params["hflip"] = True
    if rng.random() < cfg.p_vflip:
        out = vflip(out)
        params["vflip"] = True
    if rng.random() < cfg.p_rot_small:
        angle = float(rng.uniform(-cfg.small_rot_max_deg, cfg.small_rot_max_deg))
        out = rotate_small(out, angle, cfg.small_rot_max_deg)
        params["rotate_deg"] = angle
    if rng.random() < cfg.p_rot90:
        k = int(rng.integers(1, 4))
        out = rotate90(out, k)
        params["rot90_k"] = k
    contrast = float(rng.uniform(*cfg.contrast_factor_range))
    brightness = float(rng.uniform(*cfg.brightness_delta_range))
    out = brightness_contrast(out, contrast, brightness)
    params["contrast"] = contrast
    params["brightness"] = brightness
    tiles = (min(cfg.clahe_tiles[0], out.height), min(cfg.clahe_tiles[1], out.width))
    out = AnnotatedImage(clahe(out.image, cfg.clahe_clip_limit, tiles), out.boxes, out.dropped)
    params["clahe"] = {"clip_limit": cfg.clahe_clip_limit, "tiles": list(tiles)}
    out = elastic(out, cfg.elastic_alpha, cfg.elastic_sigma, rng)
    params["elastic"] = {"alpha": cfg.elastic_alpha, "sigma": cfg.elastic_sigma}
    params["boxes_dropped"] = out.dropped - a.dropped
    return out, params


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index``; samples can be drawn in any order."""
    return np.random.default_rng([seed, index])


def augment_sample(a: AnnotatedImage, cfg: AugmentConfig, index: int) -> tuple[AnnotatedImage, dict]:
    out, params = apply_pipeline(a, cfg, sample_rng(cfg.seed, index))
    params = {"seed": cfg.seed, "index": index, **params}
    return out, params


def config_dict(cfg: AugmentConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

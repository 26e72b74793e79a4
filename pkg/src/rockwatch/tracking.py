"""Closed-loop laser designation.

The first pose assumes the rock lies on the reference plane. Rocks sitting
on a pile (or deeper in the washer) are not, so the laser is fired, the dot
is found by differencing a laser-on and a laser-off frame, and the depth of
the surface is recovered by intersecting the camera ray through the dot with
the commanded beam. The target's camera ray is then re-projected to that
depth and both servo angles are re-solved.
"""

from __future__ import annotations

import logging
import math
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage

from .geometry import (
    GeometryConfig,
    GeometryError,
    PanTilt,
    PixelPoint,
    beam_direction,
    normalize,
    pixel_to_plane,
    ray_cast,
    solve_pan_tilt,
)
from .imaging import to_luma

logger = logging.getLogger(__name__)

SEEKING = "SEEKING"
CONVERGED = "CONVERGED"
MAX_ITERS = "MAX_ITERS"
DOT_LOST = "DOT_LOST"

MIN_BASELINE_M = 0.01
_MIN_SIN2_ANGLE = 1e-12


class TrackingError(GeometryError):
    pass


@dataclass(frozen=True)
class TrackingParams:
    max_iters: int = 5
    pixel_tol: float = 2.0
    depth_clamp: tuple[float, float] = (0.05, 50.0)
    diff_threshold_floor: float = 40.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.pixel_tol > 0:
            raise ValueError("pixel_tol must be positive")
        lo, hi = self.depth_clamp
        if not 0 < lo <= hi:
            raise ValueError(f"depth_clamp must satisfy 0 < min <= max, got {self.depth_clamp}")
        if not 0 <= self.diff_threshold_floor <= 255:
            raise ValueError("diff_threshold_floor must lie in [0, 255]")


@dataclass(frozen=True)
class DotObservation:
    pixel: PixelPoint
    blob_area_px: int
    peak_delta: float


@dataclass
class TrackerState:
    target_px: PixelPoint
    pose: PanTilt
    iteration: int = 0
    status: str = SEEKING
    last_error_px: float = math.inf
    depth_m: float | None = None
    detail: str = ""
    # (pose, observed dot or None) for every laser firing, in order
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "target_px": list(self.target_px),
            "pose": list(self.pose),
            "iteration": self.iteration,
            "status": self.status,
            "last_error_px": None if math.isinf(self.last_error_px) else self.last_error_px,
            "depth_m": self.depth_m,
            "detail": self.detail,
        }


def detect_laser_dot(frame_on, frame_off, params: TrackingParams = TrackingParams()) -> DotObservation | None:
    """Locate the laser dot as the largest blob in the on/off difference image.

    Threshold is ``max(4 * std(diff), floor)`` and blobs use 8-connectivity.
    The centroid is weighted by the difference and reported in continuous
    pixel coordinates (pixel ``i`` spans ``[i, i+1)``).
    """
    on = to_luma(frame_on)
    off = to_luma(frame_off)
    if on.shape != off.shape:
        raise ValueError(f"frame size mismatch: {on.shape} vs {off.shape}")
    diff = np.abs(on - off)
    threshold = max(4.0 * float(diff.std()), float(params.diff_threshold_floor))
    mask = diff > threshold
    if not mask.any():
        return None
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    areas[0] = 0
    best = int(np.argmax(areas))  # ties resolve to the lowest label, i.e. raster order
    rows, cols = np.nonzero(labels == best)
    weights = diff[rows, cols]
    total = float(weights.sum())
    u = float((cols + 0.5) @ weights) / total
    v = float((rows + 0.5) @ weights) / total
    return DotObservation(PixelPoint(u, v), int(areas[best]), float(weights.max()))


def estimate_depth(cfg: GeometryConfig, pose: PanTilt, dot_px: PixelPoint,
                   depth_clamp: tuple[float, float] | None = None) -> float:
    """Surface depth where the camera ray through ``dot_px`` meets the commanded beam.

    Least-squares closest approach of the two rays; the midpoint depth is
    returned, optionally clamped.
    """
    xl, yl = cfg.laser_offset
    if math.hypot(xl, yl) < MIN_BASELINE_M:
        raise TrackingError("laser baseline below 1 cm: depth is unobservable from the dot")
    cu, cv = cfg.principal_point
    f = cfg.focal_px
    c = np.array([(dot_px[0] - cu) / f, (dot_px[1] - cv) / f, -1.0])
    b = np.array(beam_direction(pose))
    origin = np.array([xl, yl, 0.0])
    cc = float(c @ c)
    cb = float(c @ b)
    cl = float(c @ origin)
    bl = float(b @ origin)
    det = cc - cb * cb
    if det / cc < _MIN_SIN2_ANGLE:
        raise TrackingError("camera ray and laser beam are near-parallel")
    s = (cl - cb * bl) / det
    t = s * cb - bl
    depth = 0.5 * (s + t * -b[2])
    if not depth > 0:
        raise TrackingError(f"rays meet behind the sensor (depth {depth:.4g} m)")
    if depth_clamp is not None:
        depth = min(max(depth, depth_clamp[0]), depth_clamp[1])
    return depth


def correction_step(cfg: GeometryConfig, target_px: PixelPoint, pose: PanTilt, dot: DotObservation,
                    params: TrackingParams = TrackingParams()) -> tuple[PanTilt, float]:
    """Re-solve the pose for the target after observing the dot. Returns (pose, depth)."""
    depth = estimate_depth(cfg, pose, dot.pixel, params.depth_clamp)
    target = pixel_to_plane(cfg, target_px, depth_m=depth)
    return solve_pan_tilt(cfg, target, depth_m=depth), depth


class Scene(Protocol):
    def observe(self, pose: PanTilt) -> DotObservation | None:
        """Fire the laser at ``pose`` and report where the dot appears."""


def track(cfg: GeometryConfig, params: TrackingParams, target_px: PixelPoint, scene: Scene) -> TrackerState:
    target_px = PixelPoint(*target_px)
    pose = solve_pan_tilt(cfg, pixel_to_plane(cfg, target_px))
    state = TrackerState(target_px=target_px, pose=pose, depth_m=cfg.mount_height_m)
    misses = 0
    depths: list[float] = []
    while True:
        dot = scene.observe(state.pose)
        state.history.append((state.pose, dot))
        if dot is None:
            misses += 1
            if misses >= 2:
                state.status = DOT_LOST
                return state
            continue
        misses = 0
        state.last_error_px = math.hypot(dot.pixel.u - target_px.u, dot.pixel.v - target_px.v)
        if state.last_error_px <= params.pixel_tol:
            state.status = CONVERGED
            return state
        if state.iteration >= params.max_iters:
            state.status = MAX_ITERS
            return state
        try:
            depths.append(estimate_depth(cfg, state.pose, dot.pixel, params.depth_clamp))
        except GeometryError as exc:
            logger.warning("correction failed: %s", exc)
            state.status = MAX_ITERS
            state.detail = str(exc)
            return state
        # the surface is assumed locally flat, so successive estimates of the
        # same depth are averaged to damp dot-centroid noise
        state.depth_m = float(np.mean(depths))
        target = pixel_to_plane(cfg, target_px, depth_m=state.depth_m)
        state.pose = solve_pan_tilt(cfg, target, depth_m=state.depth_m)
        state.iteration += 1


class FlatScene:
    """Simulated flat surface at a fixed depth.

    With ``render=True`` the dot is drawn into synthetic on/off frames and
    located with :func:`detect_laser_dot`; otherwise the ray-cast pixel is
    returned directly. ``noise_px`` adds uniform jitter to the dot position.
    """

    def __init__(self, cfg: GeometryConfig, depth_m: float, noise_px: float = 0.0, seed: int = 0,
                 render: bool = False, params: TrackingParams = TrackingParams(), visible: bool = True):
        self.cfg = cfg
        self.depth_m = depth_m
        self.noise_px = noise_px
        self.rng = np.random.default_rng(seed)
        self.render = render
        self.params = params
        self.visible = visible
        self.fired = 0
        self._background = None

    def true_dot(self, pose: PanTilt) -> PixelPoint:
        return ray_cast(self.cfg, pose, self.depth_m)[1]

    def observe(self, pose: PanTilt) -> DotObservation | None:
        self.fired += 1
        if not self.visible:
            return None
        u, v = self.true_dot(pose)
        if self.noise_px:
            u += self.rng.uniform(-self.noise_px, self.noise_px)
            v += self.rng.uniform(-self.noise_px, self.noise_px)
        if not (0 <= u < self.cfg.image_width_px and 0 <= v < self.cfg.image_height_px):
            return None
        if not self.render:
            return DotObservation(PixelPoint(u, v), 1, 255.0)
        off = self.background()
        return detect_laser_dot(render_dot(off, u, v), off, self.params)

    def background(self) -> np.ndarray:
        if self._background is None:
            h, w = self.cfg.image_height_px, self.cfg.image_width_px
            self._background = self.rng.integers(60, 120, size=(h, w), dtype=np.uint8)
        return self._background


def render_dot(frame: np.ndarray, u: float, v: float, sigma: float = 1.5, amplitude: float = 150.0) -> np.ndarray:
    """Copy of a grayscale frame with a Gaussian spot centred at continuous pixel (u, v)."""
    out = frame.astype(np.float64)
    h, w = out.shape
    r = int(math.ceil(4 * sigma))
    x0, x1 = max(int(u) - r, 0), min(int(u) + r + 1, w)
    y0, y1 = max(int(v) - r, 0), min(int(v) + r + 1, h)
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    spot = np.exp(-((ys[:, None] - v) ** 2 + (xs[None, :] - u) ** 2) / (2 * sigma * sigma))
    out[y0:y1, x0:x1] += amplitude * spot
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


class Actuator(Protocol):
    def pose(self, n_pan: float, n_tilt: float) -> None: ...

    def laser(self, on: bool) -> None: ...


class RecordingActuator:
    """Keeps commands in memory; used by tests and dry runs."""

    def __init__(self):
        self.commands: list[str] = []

    def pose(self, n_pan, n_tilt):
        self.commands.append(format_pose(n_pan, n_tilt))

    def laser(self, on):
        self.commands.append(format_laser(on))

    def close(self):
        pass


def format_pose(n_pan: float, n_tilt: float) -> str:
    return f"POSE {n_pan:.6f} {n_tilt:.6f}"


def format_laser(on: bool) -> str:
    return "LASER ON" if on else "LASER OFF"


class CommandActuator:
    """Writes ``POSE``/``LASER`` lines to the standard input of a driver process."""

    def __init__(self, argv: list[str]):
        self.argv = list(argv)
        self.proc = subprocess.Popen(self.argv, stdin=subprocess.PIPE, text=True, encoding="utf-8")

    def _send(self, line: str):
        if self.proc.poll() is not None:
            raise OSError(f"actuator driver {self.argv[0]!r} exited with {self.proc.returncode}")
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()

    def pose(self, n_pan, n_tilt):
        self._send(format_pose(n_pan, n_tilt))

    def laser(self, on):
        self._send(format_laser(on))

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=1.0)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()


class HardwareScene:
    """Drives a real actuator and grabs camera frames with the laser on and off."""

    def __init__(self, cfg: GeometryConfig, params: TrackingParams, actuator: Actuator,
                 grab: Callable[[], np.ndarray | None]):
        self.cfg = cfg
        self.params = params
        self.actuator = actuator
        self.grab = grab

    def observe(self, pose: PanTilt) -> DotObservation | None:
        self.actuator.pose(*normalize(self.cfg, pose))
        self.actuator.laser(True)
        on = self.grab()
        self.actuator.laser(False)
        off = self.grab()
        if on is None or off is None:
            return None
        return detect_laser_dot(on, off, self.params)

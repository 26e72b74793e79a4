"""Camera/laser geometry for the pan-tilt designator.

Coordinate frame: the camera sensor is the origin, x grows to the right of the
image, y grows down the image, and the washing-unit intake is the plane at
distance ``mount_height_m`` below the sensor. The laser origin sits at
``(x_l, y_l, 0)`` on the pan axis.

Pan ``phi`` is measured in the plane from the +x axis towards +y; tilt
``theta`` is the beam's deflection from straight down. A pose and its
antipode ``(phi -/+ 180, -theta)`` produce the same beam, which is how poses
are folded into the servos' [-90, 90] degree range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

SERVO_RANGE_DEG = 90.0
DEGENERATE_DISTANCE_M = 1e-12
_BOUNDS_EPS_PX = 1e-6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    image_width_px: int = 1920
    image_height_px: int = 1080
    fov_h_deg: float = 66.0
    mount_height_m: float = 2.0
    laser_offset: tuple[float, float] = (0.0, 0.0)
    pan_invert: bool = False
    tilt_invert: bool = False

    def __post_init__(self):
        if self.image_width_px <= 0 or self.image_height_px <= 0:
            raise GeometryError("image dimensions must be positive")
        if not 0.0 < self.fov_h_deg < 180.0:
            raise GeometryError(f"fov_h_deg must lie in (0, 180), got {self.fov_h_deg}")
        if not self.mount_height_m > 0.0:
            raise GeometryError(f"mount_height_m must be positive, got {self.mount_height_m}")
        object.__setattr__(self, "laser_offset", (float(self.laser_offset[0]), float(self.laser_offset[1])))

    @property
    def focal_px(self) -> float:
        return (self.image_width_px / 2.0) / math.tan(math.radians(self.fov_h_deg) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.image_width_px / 2.0, self.image_height_px / 2.0)


class PixelPoint(NamedTuple):
    u: float
    v: float


class PlanePoint(NamedTuple):
    x: float
    y: float


class PanTilt(NamedTuple):
    phi_deg: float
    theta_deg: float


def in_image(cfg: GeometryConfig, p: PixelPoint) -> bool:
    return 0.0 <= p.u < cfg.image_width_px and 0.0 <= p.v < cfg.image_height_px


def pixel_to_plane(cfg: GeometryConfig, p: PixelPoint, depth_m: float | None = None) -> PlanePoint:
    """Back-project a pixel onto the plane at ``depth_m`` (defaults to the mount height)."""
    if not in_image(cfg, p):
        raise GeometryError(f"pixel {tuple(p)} outside {cfg.image_width_px}x{cfg.image_height_px} image")
    depth = cfg.mount_height_m if depth_m is None else depth_m
    cu, cv = cfg.principal_point
    scale = depth / cfg.focal_px
    return PlanePoint((p.u - cu) * scale, (p.v - cv) * scale)


def project(cfg: GeometryConfig, pt: PlanePoint, depth_m: float | None = None) -> PixelPoint:
    """Pinhole projection of a point at ``depth_m`` with no bounds check."""
    depth = cfg.mount_height_m if depth_m is None else depth_m
    cu, cv = cfg.principal_point
    scale = cfg.focal_px / depth
    return PixelPoint(cu + pt.x * scale, cv + pt.y * scale)


def plane_to_pixel(cfg: GeometryConfig, pt: PlanePoint, depth_m: float | None = None) -> PixelPoint:
    p = project(cfg, pt, depth_m)
    # allow round-off so that edge pixels survive a round trip
    eps = _BOUNDS_EPS_PX
    if not (-eps <= p.u < cfg.image_width_px + eps and -eps <= p.v < cfg.image_height_px + eps):
        raise GeometryError(f"plane point {tuple(pt)} projects outside the image at {tuple(p)}")
    return p


def radial_distance(laser: tuple[float, float], target: PlanePoint) -> float:
    return math.hypot(target[0] - laser[0], target[1] - laser[1])


def canonicalize(pose: PanTilt) -> PanTilt:
    """Fold a pose into phi in [-90, 90] using the antipodal identity."""
    phi, theta = pose
    if phi > SERVO_RANGE_DEG:
        return PanTilt(phi - 180.0, -theta)
    if phi < -SERVO_RANGE_DEG:
        return PanTilt(phi + 180.0, -theta)
    return PanTilt(phi, theta)


def solve_pan_tilt(cfg: GeometryConfig, target: PlanePoint, depth_m: float | None = None) -> PanTilt:
    """Servo angles that put the beam on ``target``, which lies on the plane at ``depth_m``."""
    depth = cfg.mount_height_m if depth_m is None else depth_m
    if not (math.isfinite(target[0]) and math.isfinite(target[1])):
        raise GeometryError(f"target must be finite, got {tuple(target)}")
    xl, yl = cfg.laser_offset
    dx, dy = target[0] - xl, target[1] - yl
    d = math.hypot(dx, dy)
    if d < DEGENERATE_DISTANCE_M:
        return PanTilt(0.0, 0.0)
    phi = math.degrees(math.atan2(dy, dx))
    theta = math.degrees(math.atan2(d, depth))
    return canonicalize(PanTilt(phi, theta))


def normalize(cfg: GeometryConfig, pose: PanTilt) -> tuple[float, float]:
    """Map canonical degrees to servo commands in [-1, 1], honouring the invert flags."""
    for name, deg in zip(("pan", "tilt"), pose):
        if abs(deg) > SERVO_RANGE_DEG:
            raise GeometryError(f"{name} angle {deg} deg outside servo range")
    n_pan = pose.phi_deg / SERVO_RANGE_DEG
    n_tilt = pose.theta_deg / SERVO_RANGE_DEG
    if cfg.pan_invert:
        n_pan = -n_pan
    if cfg.tilt_invert:
        n_tilt = -n_tilt
    return (n_pan, n_tilt)


def denormalize(cfg: GeometryConfig, n_pan: float, n_tilt: float) -> PanTilt:
    if abs(n_pan) > 1.0 or abs(n_tilt) > 1.0:
        raise GeometryError(f"servo command ({n_pan}, {n_tilt}) outside [-1, 1]")
    if cfg.pan_invert:
        n_pan = -n_pan
    if cfg.tilt_invert:
        n_tilt = -n_tilt
    return PanTilt(n_pan * SERVO_RANGE_DEG, n_tilt * SERVO_RANGE_DEG)


def beam_direction(pose: PanTilt) -> tuple[float, float, float]:
    """Unit beam vector; z is negative because the beam points down towards the plane."""
    phi = math.radians(pose.phi_deg)
    theta = math.radians(pose.theta_deg)
    return (math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), -math.cos(theta))


def ray_cast(cfg: GeometryConfig, pose: PanTilt, surface_depth_m: float) -> tuple[PlanePoint, PixelPoint]:
    """Where the beam hits a flat surface ``surface_depth_m`` below the sensor.

    The returned pixel is not bounds-checked: a beam may land outside the frame.
    """
    if not surface_depth_m > 0.0:
        raise GeometryError(f"surface depth must be positive, got {surface_depth_m}")
    if abs(pose.theta_deg) >= SERVO_RANGE_DEG:
        raise GeometryError("beam is horizontal and never reaches the plane")
    phi = math.radians(pose.phi_deg)
    reach = surface_depth_m * math.tan(math.radians(pose.theta_deg))
    xl, yl = cfg.laser_offset
    hit = PlanePoint(xl + reach * math.cos(phi), yl + reach * math.sin(phi))
    return hit, project(cfg, hit, surface_depth_m)

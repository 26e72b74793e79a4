import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rockwatch.geometry import GeometryConfig, PanTilt, PixelPoint, pixel_to_plane, ray_cast, solve_pan_tilt
from rockwatch.tracking import (
    CONVERGED,
    DOT_LOST,
    DotObservation,
    FlatScene,
    HardwareScene,
    RecordingActuator,
    TrackingError,
    TrackingParams,
    correction_step,
    detect_laser_dot,
    estimate_depth,
    format_laser,
    format_pose,
    render_dot,
    track,
)

CFG = GeometryConfig(laser_offset=(0.3, 0.0))
H = CFG.mount_height_m


def blob_frames(blobs, shape=(300, 400), base=50, bump=120):
    off = np.full(shape, base, dtype=np.uint8)
    on = off.copy()
    for (cx, cy, half) in blobs:
        on[cy - half:cy + half + 1, cx - half:cx + half + 1] = base + bump
    return on, off


def test_dot_centroid_of_square_blob():
    on, off = blob_frames([(100, 200, 1)])
    obs = detect_laser_dot(on, off)
    # the 3x3 block covers pixels 99..101, whose continuous centre is 100.5
    assert obs.pixel.u == pytest.approx(100.5) and obs.pixel.v == pytest.approx(200.5)
    assert math.dist(obs.pixel, (100, 200)) <= 1.0
    assert obs.blob_area_px == 9 and obs.peak_delta == 120


def test_identical_frames_have_no_dot():
    on, off = blob_frames([])
    assert detect_laser_dot(on, off) is None


def test_largest_blob_wins():
    on, off = blob_frames([(50, 50, 1), (300, 100, 2)])
    obs = detect_laser_dot(on, off)
    assert obs.blob_area_px == 25
    assert obs.pixel == pytest.approx((300.5, 100.5))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        detect_laser_dot(np.zeros((10, 10)), np.zeros((10, 11)))


@settings(max_examples=50, deadline=None)
@given(du=st.integers(-40, 40), dv=st.integers(-40, 40))
def test_dot_detection_translation_equivariant(du, dv):
    a = detect_laser_dot(*blob_frames([(150, 150, 2)]))
    b = detect_laser_dot(*blob_frames([(150 + du, 150 + dv, 2)]))
    assert b.pixel.u - a.pixel.u == pytest.approx(du) and b.pixel.v - a.pixel.v == pytest.approx(dv)


def test_rendered_gaussian_dot_is_located():
    rng = np.random.default_rng(3)
    off = rng.integers(60, 120, size=(200, 300), dtype=np.uint8)
    obs = detect_laser_dot(render_dot(off, 123.4, 77.8), off)
    assert math.dist(obs.pixel, (123.4, 77.8)) < 0.5


def dot_at(depth, target_px=(1400.0, 300.0)):
    pose = solve_pan_tilt(CFG, pixel_to_plane(CFG, PixelPoint(*target_px)))
    return pose, ray_cast(CFG, pose, depth)[1]


def test_estimate_depth_recovers_simulated_depth():
    pose, px = dot_at(1.5)
    assert estimate_depth(CFG, pose, px) == pytest.approx(1.5, abs=1e-6)
    pose, px = dot_at(H)
    assert estimate_depth(CFG, pose, px) == pytest.approx(H, abs=1e-9)


def test_estimate_depth_degenerate():
    with pytest.raises(TrackingError):
        estimate_depth(GeometryConfig(), PanTilt(0, 0), PixelPoint(960, 540))
    # the beam points straight along the camera ray through the dot
    cfg = GeometryConfig(laser_offset=(0.3, 0.0))
    with pytest.raises(TrackingError):
        estimate_depth(cfg, PanTilt(0, 0), PixelPoint(960, 540))


def test_estimate_depth_clamped():
    pose, px = dot_at(1.5)
    assert estimate_depth(CFG, pose, px, (1.8, 5.0)) == 1.8


@settings(max_examples=200, deadline=None)
@given(
    depth=st.floats(0.5, 4.0),
    lx=st.floats(-0.5, 0.5),
    ly=st.floats(-0.5, 0.5),
    phi=st.floats(-90, 90),
    theta=st.floats(1, 40),
)
def test_estimate_depth_inverts_ray_cast(depth, lx, ly, phi, theta):
    cfg = GeometryConfig(laser_offset=(lx, ly))
    if math.hypot(lx, ly) < 0.01:
        return
    pose = PanTilt(phi, theta)
    _, px = ray_cast(cfg, pose, depth)
    # skip configurations where the beam runs almost along the camera ray
    c = np.array([(px.u - 960) / cfg.focal_px, (px.v - 540) / cfg.focal_px, -1.0])
    b = np.array([math.sin(math.radians(theta)) * math.cos(math.radians(phi)),
                  math.sin(math.radians(theta)) * math.sin(math.radians(phi)),
                  -math.cos(math.radians(theta))])
    sin2 = 1 - (c @ b) ** 2 / (c @ c)
    if sin2 < 1e-4:
        return
    assert estimate_depth(cfg, pose, px) == pytest.approx(depth, abs=1e-6)


def test_correction_fixed_point():
    target = PixelPoint(1400.0, 300.0)
    pose = solve_pan_tilt(CFG, pixel_to_plane(CFG, target))
    new, depth = correction_step(CFG, target, pose, DotObservation(target, 1, 255.0))
    assert depth == pytest.approx(H)
    assert new.phi_deg == pytest.approx(pose.phi_deg, abs=1e-9)
    assert new.theta_deg == pytest.approx(pose.theta_deg, abs=1e-9)


def test_one_correction_lands_on_target():
    target = PixelPoint(1400.0, 300.0)
    pose, px = dot_at(1.5, target)
    new, _ = correction_step(CFG, target, pose, DotObservation(px, 1, 255.0))
    assert math.dist(ray_cast(CFG, new, 1.5)[1], target) < 1e-6


def test_track_at_reference_depth_converges_immediately():
    state = track(CFG, TrackingParams(), (1400, 300), FlatScene(CFG, H))
    assert state.status == CONVERGED and state.iteration == 0 and state.last_error_px < 1e-6


@pytest.mark.parametrize("factor", [0.7, 1.3])
def test_track_sweep(factor):
    state = track(CFG, TrackingParams(), (1200, 700), FlatScene(CFG, factor * H))
    assert state.status == CONVERGED and state.iteration <= 2 and state.last_error_px <= 2.0


def test_track_without_dot_is_lost_after_two_probes():
    scene = FlatScene(CFG, H, visible=False)
    state = track(CFG, TrackingParams(), (1200, 700), scene)
    assert state.status == DOT_LOST and scene.fired == 2


@settings(max_examples=100, deadline=None)
@given(depth_factor=st.floats(0.5, 1.5), u=st.floats(500, 1420), v=st.floats(250, 830))
def test_noiseless_convergence_within_two_iterations(depth_factor, u, v):
    state = track(CFG, TrackingParams(), (u, v), FlatScene(CFG, depth_factor * H))
    assert state.status == CONVERGED
    assert state.iteration <= 2 and state.last_error_px <= 1.0
    assert state.iteration <= TrackingParams().max_iters


def test_rendered_track_converges():
    state = track(CFG, TrackingParams(), (1100, 400), FlatScene(CFG, 1.6, render=True, seed=1))
    assert state.status == CONVERGED and state.last_error_px <= 2.0


def test_params_validation():
    with pytest.raises(ValueError):
        TrackingParams(max_iters=0)
    with pytest.raises(ValueError):
        TrackingParams(depth_clamp=(0.0, 5.0))


def test_actuator_line_format():
    assert format_pose(0.5, -0.25) == "POSE 0.500000 -0.250000"
    assert format_laser(True) == "LASER ON" and format_laser(False) == "LASER OFF"


def test_hardware_scene_sequence():
    target = PixelPoint(1100.0, 400.0)
    sim = FlatScene(CFG, 1.7)
    frames = []
    act = RecordingActuator()

    class Camera:
        # renders the dot for whatever pose the actuator last received
        def __init__(self):
            self.bg = np.random.default_rng(0).integers(60, 120, size=(1080, 1920), dtype=np.uint8)

        def grab(self):
            on = act.commands[-1] == "LASER ON"
            if not on:
                return self.bg
            n_pan, n_tilt = map(float, [c for c in act.commands if c.startswith("POSE")][-1].split()[1:])
            u, v = sim.true_dot(PanTilt(n_pan * 90, n_tilt * 90))
            frames.append((u, v))
            return render_dot(self.bg, u, v)

    cam = Camera()
    state = track(CFG, TrackingParams(), target, HardwareScene(CFG, TrackingParams(), act, cam.grab))
    assert state.status == CONVERGED
    assert act.commands[0].startswith("POSE") and act.commands[1:3] == ["LASER ON", "LASER OFF"]

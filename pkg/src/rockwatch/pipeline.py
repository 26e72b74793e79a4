"""The device loop: frames in, sliced detection, alerts, laser designation, event log.

The alert logic lives in :func:`step`, a pure transition function, so a
detection trace can be replayed to reproduce a run's transitions exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shlex
import signal
import subprocess
import threading
import time
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import boxes
from .boxes import Detection
from .geometry import GeometryConfig, GeometryError, PixelPoint, normalize, pixel_to_plane, solve_pan_tilt
from .imaging import is_image_path, load_image
from .slicing import DetectorError, sliced_inference
from .tracking import (
    CommandActuator,
    FlatScene,
    HardwareScene,
    RecordingActuator,
    TrackerState,
    TrackingParams,
    track,
)

logger = logging.getLogger(__name__)

IDLE = "IDLE"
ALERT_ACTIVE = "ALERT_ACTIVE"
CLEARING = "CLEARING"

FIRE_SINKS = "fire_sinks"
TRACK = "track"
LASER_OFF = "laser_off"

REASSOCIATE_IOU = 0.3


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------

@dataclass
class CameraSection:
    width: int = 1920
    height: int = 1080
    fov_h_deg: float = 66.0
    mount_height_m: float = 2.0


@dataclass
class LaserSection:
    x_m: float = 0.0
    y_m: float = 0.0


@dataclass
class ServoSection:
    pan_invert: bool = False
    tilt_invert: bool = False


@dataclass
class DetectorSection:
    mode: str = "stub"
    command: list[str] | None = None
    timeout_ms: float = 2000.0
    transport: str = "path"
    fallback_to_stub: bool = False


@dataclass
class SlicingSection:
    patch: int = 640
    iou_threshold: float = 0.5


@dataclass
class TrackingSection:
    max_iters: int = 5
    pixel_tol: float = 2.0
    depth_clamp: list[float] = field(default_factory=lambda: [0.05, 50.0])
    diff_threshold_floor: float = 40.0
    # open_loop: aim at the reference plane only; closed_loop: correct with
    # camera frames; simulated: correct against a flat virtual surface
    mode: str = "open_loop"
    simulated_depth_m: float | None = None
    actuator_command: list[str] | None = None

    def params(self) -> TrackingParams:
        return TrackingParams(self.max_iters, self.pixel_tol, tuple(self.depth_clamp), self.diff_threshold_floor)


@dataclass
class FramesSection:
    source: str = "directory"
    path: str = "frames"
    poll_interval_s: float = 0.05
    idle_timeout_s: float | None = None


@dataclass
class PipelineConfig:
    camera: CameraSection = field(default_factory=CameraSection)
    laser: LaserSection = field(default_factory=LaserSection)
    servo: ServoSection = field(default_factory=ServoSection)
    rate_hz: float = 1.0
    debounce_enter_frames: int = 1
    clear_after_frames: int = 3
    detector: DetectorSection = field(default_factory=DetectorSection)
    slicing: SlicingSection = field(default_factory=SlicingSection)
    tracking: TrackingSection = field(default_factory=TrackingSection)
    sinks: list[dict] = field(default_factory=lambda: [{"type": "log"}])
    frames: FramesSection = field(default_factory=FramesSection)
    event_log_path: str = "events.jsonl"

    def validate(self) -> "PipelineConfig":
        if not self.rate_hz > 0:
            raise ConfigError("rate_hz must be positive")
        if self.debounce_enter_frames < 1 or self.clear_after_frames < 1:
            raise ConfigError("debounce_enter_frames and clear_after_frames must be at least 1")
        if self.detector.mode not in ("stub", "external"):
            raise ConfigError(f"detector.mode must be 'stub' or 'external', got {self.detector.mode!r}")
        if self.detector.mode == "external" and not self.detector.command:
            raise ConfigError("detector.command is required for the external detector")
        if self.tracking.mode not in ("open_loop", "closed_loop", "simulated"):
            raise ConfigError(f"unknown tracking.mode {self.tracking.mode!r}")
        if self.frames.source not in ("directory",):
            raise ConfigError(f"unknown frames.source {self.frames.source!r}")
        for spec in self.sinks:
            if not isinstance(spec, dict) or spec.get("type") not in ("log", "command"):
                raise ConfigError(f"sink must be an object with type 'log' or 'command': {spec!r}")
            unknown = set(spec) - {"type", "path", "command", "timeout_s", "name"}
            if unknown:
                raise ConfigError(f"unknown sink keys {sorted(unknown)} in {spec!r}")
            if spec["type"] == "command" and not spec.get("command"):
                raise ConfigError("command sink needs a 'command'")
        try:
            self.geometry()
            self.tracking.params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def geometry(self) -> GeometryConfig:
        c = self.camera
        return GeometryConfig(c.width, c.height, c.fov_h_deg, c.mount_height_m,
                              (self.laser.x_m, self.laser.y_m), self.servo.pan_invert, self.servo.tilt_invert)


def _command_list(value):
    if value is None or isinstance(value, list):
        return value
    if isinstance(value, str):
        return shlex.split(value)
    raise ConfigError(f"command must be a string or a list, got {value!r}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}; allowed: {sorted(names)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}" if where else key)
        elif key in ("command", "actuator_command"):
            kwargs[key] = _command_list(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "").validate()


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


# -- alert state machine ----------------------------------------------------

@dataclass(frozen=True)
class AlertState:
    mode: str = IDLE
    consecutive_hits: int = 0
    consecutive_misses: int = 0
    active_target: Detection | None = None
    target_id: int = 0


@dataclass(frozen=True)
class Action:
    kind: str
    payload: object = None


def select_target(detections: list[Detection]) -> Detection:
    """Highest score; ties go to the larger box, then lower x, then lower y."""
    if not detections:
        raise ValueError("no detections to choose from")
    return min(detections, key=boxes.priority_key)


def _reassociate(prior: Detection | None, detections: list[Detection]) -> Detection | None:
    if prior is None:
        return None
    best, best_iou = None, REASSOCIATE_IOU
    for d in sorted(detections, key=boxes.priority_key):
        v = boxes.iou(prior, d)
        if v >= best_iou and (best is None or v > best_iou):
            best, best_iou = d, v
    return best


def step(state: AlertState, detections: list[Detection], cfg: PipelineConfig) -> tuple[AlertState, list[Action]]:
    """Advance the alert state by one frame.

    IDLE needs ``debounce_enter_frames`` consecutive frames with detections
    to raise an alert. While alerting, the laser follows the same rock as
    long as it can be re-found by IoU; the first empty frame turns the laser
    off (CLEARING) and ``clear_after_frames`` empty frames end the alert.
    """
    k, m = cfg.debounce_enter_frames, cfg.clear_after_frames
    if state.mode == IDLE:
        if not detections:
            return replace(state, consecutive_hits=0, consecutive_misses=0), []
        hits = state.consecutive_hits + 1
        if hits < k:
            return replace(state, consecutive_hits=hits), []
        target = select_target(detections)
        new = AlertState(ALERT_ACTIVE, hits, 0, target, state.target_id + 1)
        return new, [Action(FIRE_SINKS, "enter"), Action(TRACK, target)]

    if detections:
        same = _reassociate(state.active_target, detections)
        target = same if same is not None else select_target(detections)
        target_id = state.target_id if same is not None else state.target_id + 1
        new = AlertState(ALERT_ACTIVE, state.consecutive_hits + 1, 0, target, target_id)
        return new, [Action(TRACK, target)]

    misses = state.consecutive_misses + 1
    if misses >= m:
        return AlertState(IDLE, 0, 0, None, state.target_id), [Action(LASER_OFF), Action(FIRE_SINKS, "clear")]
    actions = [Action(LASER_OFF)] if state.mode == ALERT_ACTIVE else []
    return replace(state, mode=CLEARING, consecutive_hits=0, consecutive_misses=misses), actions


def transition_kind(before: str, after: str) -> str | None:
    return {
        (IDLE, ALERT_ACTIVE): "enter",
        (ALERT_ACTIVE, CLEARING): "hold",
        (CLEARING, ALERT_ACTIVE): "resume",
        (ALERT_ACTIVE, IDLE): "clear",
        (CLEARING, IDLE): "clear",
    }.get((before, after))


def replay_transitions(trace: list[list[Detection]], cfg: PipelineConfig) -> list[tuple[int, str, str]]:
    """(frame index, from, to) for every mode change when replaying a detection trace."""
    state = AlertState()
    out = []
    for idx, dets in enumerate(trace, start=1):
        new, _ = step(state, dets, cfg)
        if new.mode != state.mode:
            out.append((idx, state.mode, new.mode))
        state = new
    return out


# -- event log --------------------------------------------------------------

@dataclass
class AlertEvent:
    timestamp_ms: int
    frame_id: int | None
    kind: str
    transition: tuple[str, str]
    detections: list[Detection] = field(default_factory=list)
    selected_target: Detection | None = None
    target_id: int | None = None
    laser_pose: tuple[float, float] | None = None
    tracking: dict | None = None
    sink_results: list[dict] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "timestamp_ms": self.timestamp_ms,
            "frame_id": self.frame_id,
            "kind": self.kind,
            "transition": {"from": self.transition[0], "to": self.transition[1]},
            "detections": [d.to_dict() for d in self.detections],
            "selected_target": self.selected_target.to_dict() if self.selected_target else None,
            "target_id": self.target_id,
            "laser_pose": list(self.laser_pose) if self.laser_pose is not None else None,
            "tracking": self.tracking,
            "sink_results": self.sink_results,
            "error": self.error,
        }


class EventLog:
    """Append-only JSON-lines writer; each record is flushed as it is written."""

    def __init__(self, path, fsync: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, event: AlertEvent | dict):
        record = event.to_dict() if isinstance(event, AlertEvent) else event
        self._fh.write(json.dumps(record, separators=(",", ":"), sort_keys=True) + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_event(log: EventLog, event: AlertEvent) -> None:
    log.append(event)


def read_events(path) -> list[dict]:
    """Parse an event log; a torn final line (crash mid-write) is skipped."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    events = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            is_last = all(not rest.strip() for rest in lines[i + 1:])
            if is_last:
                logger.warning("%s: ignoring truncated final record", path)
                break
            raise ValueError(f"{path}: corrupt record on line {i + 1}") from None
    return events


def logged_transitions(events: list[dict]) -> list[tuple[int, str, str]]:
    return [
        (e["frame_id"], e["transition"]["from"], e["transition"]["to"])
        for e in events
        if e["frame_id"] is not None and e["transition"]["from"] != e["transition"]["to"]
    ]


# -- alert sinks ------------------------------------------------------------

class LogSink:
    def __init__(self, path=None, name: str = "log"):
        self.name = name
        self.path = Path(path) if path else None

    def fire(self, kind: str, frame_id, target_px):
        where = f"{target_px[0]:.1f},{target_px[1]:.1f}" if target_px else "-"
        line = f"ALERT {kind} frame={frame_id} target={where}"
        logger.warning(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())} {line}\n")
        return {"sink": self.name, "ok": True, "detail": line}


class CommandSink:
    """Runs ``command kind frame_id u v``; failures and timeouts are reported, not raised."""

    def __init__(self, command: list[str], timeout_s: float = 1.0, name: str | None = None):
        self.command = list(command)
        self.timeout_s = timeout_s
        self.name = name or f"command:{Path(self.command[0]).name}"

    def fire(self, kind: str, frame_id, target_px):
        u, v = (f"{target_px[0]:.1f}", f"{target_px[1]:.1f}") if target_px else ("-", "-")
        argv = self.command + [kind, str(frame_id), u, v]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s)
        except subprocess.TimeoutExpired:
            return {"sink": self.name, "ok": False, "detail": f"timed out after {self.timeout_s}s"}
        except OSError as exc:
            return {"sink": self.name, "ok": False, "detail": f"{type(exc).__name__}: {exc}"}
        ok = proc.returncode == 0
        detail = f"exit {proc.returncode}"
        if not ok and proc.stderr.strip():
            detail += f": {proc.stderr.strip()[:200]}"
        return {"sink": self.name, "ok": ok, "detail": detail}


def make_sinks(specs: list[dict]) -> list:
    sinks = []
    for spec in specs:
        if spec["type"] == "log":
            sinks.append(LogSink(spec.get("path"), spec.get("name", "log")))
        else:
            sinks.append(CommandSink(_command_list(spec["command"]), float(spec.get("timeout_s", 1.0)), spec.get("name")))
    return sinks


def fire_sinks(sinks, kind: str, frame_id=None, target_px=None) -> list[dict]:
    results = []
    for sink in sinks:
        try:
            results.append(sink.fire(kind, frame_id, target_px))
        except Exception as exc:
            logger.exception("sink %s failed", getattr(sink, "name", sink))
            results.append({"sink": getattr(sink, "name", repr(sink)), "ok": False,
                            "detail": f"{type(exc).__name__}: {exc}"})
    return results


# -- frame sources ----------------------------------------------------------

class ScriptedFrameSource:
    """Frames from a list; ``dot_frames`` feeds closed-loop tracking captures."""

    realtime = False

    def __init__(self, frames, dot_frames=None):
        self.frames = list(frames)
        self.dot_frames = list(dot_frames or [])

    def __iter__(self):
        for i, frame in enumerate(self.frames, start=1):
            yield i, frame

    def grab(self):
        return self.dot_frames.pop(0) if self.dot_frames else None


class DirectoryFrameSource:
    """Watches a directory filled by a capture process and yields the newest new image.

    Frames that arrive faster than they are consumed are skipped; only the
    newest file is ever processed.
    """

    realtime = True

    def __init__(self, path, poll_interval_s: float = 0.05, idle_timeout_s: float | None = None,
                 stop: threading.Event | None = None):
        self.path = Path(path)
        self.poll_interval_s = poll_interval_s
        self.idle_timeout_s = idle_timeout_s
        self.stop = stop or threading.Event()
        self._last = None
        self._frame_id = 0

    def _newest(self):
        try:
            entries = [p for p in self.path.iterdir() if p.is_file() and is_image_path(p)]
        except FileNotFoundError:
            return None
        if not entries:
            return None
        newest = max(entries, key=lambda p: (p.stat().st_mtime_ns, p.name))
        key = (newest.stat().st_mtime_ns, newest.name)
        if self._last is not None and key <= self._last:
            return None
        return newest, key

    def _wait(self, timeout):
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.stop.is_set():
            found = self._newest()
            if found is not None:
                path, key = found
                try:
                    image = load_image(path)
                except Exception as exc:
                    # likely still being written; retry on the next poll
                    logger.debug("cannot read %s yet: %s", path, exc)
                else:
                    self._last = key
                    return image
            if deadline is not None and time.monotonic() >= deadline:
                return None
            self.stop.wait(self.poll_interval_s)
        return None

    def __iter__(self):
        while True:
            image = self._wait(self.idle_timeout_s)
            if image is None:
                return
            self._frame_id += 1
            yield self._frame_id, image

    def grab(self, timeout: float = 2.0):
        return self._wait(timeout)


# -- the loop ---------------------------------------------------------------

def _now_ms() -> int:
    return int(time.time() * 1000)


def make_detector(cfg: PipelineConfig):
    if cfg.detector.mode == "stub":
        from .detector import StubDetector
        return StubDetector()
    from .detector import ExternalDetector
    return ExternalDetector(cfg.detector.command, cfg.detector.timeout_ms / 1000.0, cfg.detector.transport)


class _Designator:
    """Turns TRACK/LASER_OFF actions into actuator commands."""

    def __init__(self, cfg: PipelineConfig, actuator, source):
        self.cfg = cfg
        self.geo = cfg.geometry()
        self.params = cfg.tracking.params()
        self.actuator = actuator
        self.source = source
        self.laser_on = False

    def aim(self, target: Detection, frame_size) -> tuple[tuple[float, float] | None, dict]:
        fw, fh = frame_size
        cu, cv = target.center
        # detections are in frame pixels; geometry is in configured camera pixels
        px = PixelPoint(min(cu * self.geo.image_width_px / fw, self.geo.image_width_px - 1e-9),
                        min(cv * self.geo.image_height_px / fh, self.geo.image_height_px - 1e-9))
        mode = self.cfg.tracking.mode
        if mode == "open_loop":
            pose = solve_pan_tilt(self.geo, pixel_to_plane(self.geo, px))
            state = TrackerState(px, pose, depth_m=self.geo.mount_height_m)
        else:
            if mode == "simulated":
                depth = self.cfg.tracking.simulated_depth_m or self.geo.mount_height_m
                scene = FlatScene(self.geo, depth)
            else:
                scene = HardwareScene(self.geo, self.params, self.actuator, self.source.grab)
            state = track(self.geo, self.params, px, scene)
        n = normalize(self.geo, state.pose)
        self.actuator.pose(*n)
        self.actuator.laser(True)
        self.laser_on = True
        return n, state.to_dict()

    def off(self):
        self.actuator.laser(False)
        self.laser_on = False


def run(cfg: PipelineConfig, source=None, detector=None, sinks=None, actuator=None,
        stop: threading.Event | None = None, install_signal_handlers: bool = True) -> int:
    """Run until the frame source is exhausted or a stop is requested.

    Returns 0 on a clean exit and 1 when the event log cannot be written.
    """
    stop = stop or threading.Event()
    source = source or DirectoryFrameSource(cfg.frames.path, cfg.frames.poll_interval_s,
                                            cfg.frames.idle_timeout_s, stop)
    own_detector = detector is None
    detector = detector or make_detector(cfg)
    sinks = make_sinks(cfg.sinks) if sinks is None else sinks
    own_actuator = actuator is None
    if actuator is None:
        cmd = cfg.tracking.actuator_command
        actuator = CommandActuator(cmd) if cmd else RecordingActuator()
    designator = _Designator(cfg, actuator, source)

    previous_handlers = {}
    if install_signal_handlers and threading.current_thread() is threading.main_thread():
        def on_signal(signum, _frame):
            logger.info("received signal %s, stopping", signum)
            stop.set()

        for sig in (signal.SIGINT, signal.SIGTERM):
            previous_handlers[sig] = signal.signal(sig, on_signal)

    state = AlertState()
    degraded = False
    period = 1.0 / cfg.rate_hz
    next_tick = time.monotonic()
    status = 0
    last_frame = None
    try:
        log = EventLog(cfg.event_log_path)
    except OSError as exc:
        logger.error("cannot open event log %s: %s", cfg.event_log_path, exc)
        return 1
    try:
        for frame_id, image in source:
            last_frame = frame_id
            h, w = image.shape[:2]
            try:
                detections = sliced_inference(image, detector, cfg.slicing.patch, cfg.slicing.iou_threshold,
                                              pad=True)
            except DetectorError as exc:
                logger.error("frame %s: detector fault: %s", frame_id, exc)
                results = [] if degraded else fire_sinks(sinks, "fault", frame_id, None)
                degraded = True
                log.append(AlertEvent(_now_ms(), frame_id, "fault", (state.mode, state.mode),
                                      sink_results=results, error=str(exc)))
                if cfg.detector.fallback_to_stub and cfg.detector.mode == "external":
                    from .detector import StubDetector
                    logger.warning("falling back to the stub detector")
                    if hasattr(detector, "close"):
                        detector.close()
                    detector = StubDetector()
                    own_detector = False
            else:
                degraded = False
                new_state, actions = step(state, detections, cfg)
                event = _execute(actions, state, new_state, frame_id, detections, sinks, designator, (w, h))
                if event is not None:
                    log.append(event)
                state = new_state
            if stop.is_set():
                break
            if getattr(source, "realtime", False):
                next_tick += period
                delay = next_tick - time.monotonic()
                if delay > 0:
                    stop.wait(delay)
                else:
                    next_tick = time.monotonic()
            if stop.is_set():
                break
        if stop.is_set():
            if designator.laser_on:
                designator.off()
            log.append(AlertEvent(_now_ms(), None, "shutdown", (state.mode, state.mode),
                                  error=f"stopped after frame {last_frame}"))
    except OSError as exc:
        logger.error("event log write failed: %s", exc)
        status = 1
    finally:
        log.close()
        for sig, handler in previous_handlers.items():
            signal.signal(sig, handler)
        if own_detector and hasattr(detector, "close"):
            detector.close()
        if own_actuator and hasattr(actuator, "close"):
            actuator.close()
    return status


def _execute(actions, before: AlertState, after: AlertState, frame_id, detections, sinks, designator,
             frame_size) -> AlertEvent | None:
    results, pose, tracking, error = [], None, None, None
    for action in actions:
        if action.kind == LASER_OFF:
            designator.off()
        elif action.kind == FIRE_SINKS:
            target = before.active_target if action.payload == "clear" else after.active_target
            results.extend(fire_sinks(sinks, action.payload, frame_id, target.center if target else None))
        elif action.kind == TRACK:
            try:
                pose, tracking = designator.aim(action.payload, frame_size)
            except (GeometryError, OSError) as exc:
                logger.error("frame %s: laser designation failed: %s", frame_id, exc)
                error = f"designation failed: {exc}"
    kind = transition_kind(before.mode, after.mode)
    if kind is None:
        if not any(a.kind == TRACK for a in actions):
            return None
        kind = "update"
    return AlertEvent(_now_ms(), frame_id, kind, (before.mode, after.mode), list(detections),
                      after.active_target, after.target_id if after.active_target else None,
                      pose, tracking, results, error)

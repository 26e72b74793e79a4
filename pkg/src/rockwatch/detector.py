"""Detector implementations.

``StubDetector`` finds high-contrast blobs and is exact on scenes rendered by
:func:`scene_generate`. ``ExternalDetector`` hands images to a model running
in a child process over newline-delimited JSON on stdin/stdout.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import queue
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import boxes
from .boxes import Detection
from .imaging import to_luma
from .slicing import DetectorError

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 90.0
TEXTURE_STD = 3.0
# intensity added on top of the background for contrast 1.0
CONTRAST_SCALE = 150.0


class DetectorUnavailable(DetectorError):
    pass


class DetectorTimeout(DetectorError):
    pass


class DetectorProtocolError(DetectorError):
    pass


@dataclass(frozen=True)
class SceneObject:
    center: tuple[float, float]
    radii: tuple[float, float]
    contrast: float = 0.9
    class_id: int = 0


@dataclass(frozen=True)
class SyntheticScene:
    width: int
    height: int
    objects: tuple[SceneObject, ...] = ()
    background_texture_seed: int = 0

    def __post_init__(self):
        for o in self.objects:
            (cx, cy), (rx, ry) = o.center, o.radii
            if rx <= 0 or ry <= 0:
                raise ValueError(f"object radii must be positive: {o}")
            if cx - rx < 0 or cy - ry < 0 or cx + rx > self.width or cy + ry > self.height:
                raise ValueError(f"object {o} extends outside the {self.width}x{self.height} scene")


def _texture(width: int, height: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    coarse = ndimage.gaussian_filter(rng.standard_normal((height, width)), 3.0, mode="reflect")
    coarse *= TEXTURE_STD / max(coarse.std(), 1e-12)
    return BACKGROUND_LEVEL + coarse


def scene_generate(spec: SyntheticScene, seed: int = 0) -> tuple[np.ndarray, list[Detection]]:
    """Render an RGB scene and return it with exact ground-truth boxes.

    Rocks are flat-shaded ellipses; a pixel belongs to a rock when its centre
    lies inside the ellipse, and the ground-truth box is the pixel extent of
    that mask. ``seed`` drives a small per-render sensor noise.
    """
    base = _texture(spec.width, spec.height, spec.background_texture_seed)
    rng = np.random.default_rng(seed)
    base += rng.normal(0.0, 1.0, base.shape)
    truth = []
    for o in spec.objects:
        (cx, cy), (rx, ry) = o.center, o.radii
        x0, x1 = int(np.floor(cx - rx)), int(np.ceil(cx + rx))
        y0, y1 = int(np.floor(cy - ry)), int(np.ceil(cy + ry))
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        inside = ((xs[None, :] - cx) / rx) ** 2 + ((ys[:, None] - cy) / ry) ** 2 <= 1.0
        if not inside.any():
            continue
        region = base[y0:y1, x0:x1]
        region[inside] = BACKGROUND_LEVEL + o.contrast * CONTRAST_SCALE
        rows, cols = np.nonzero(inside)
        truth.append(Detection(
            float(x0 + cols.min()), float(y0 + rows.min()),
            float(cols.max() - cols.min() + 1), float(rows.max() - rows.min() + 1),
            1.0, o.class_id,
        ))
    gray = np.clip(np.rint(base), 0, 255).astype(np.uint8)
    # slight green-brown cast; luma stays within a level of the gray value
    rgb = np.stack([gray, gray, gray], axis=-1).astype(np.int16)
    rgb[..., 0] += 2
    rgb[..., 2] -= 4
    return np.clip(rgb, 0, 255).astype(np.uint8), truth


def local_background(luma: np.ndarray, block: int = 8, window: int = 9) -> np.ndarray:
    """Robust local background: median of block means, upsampled back to full size."""
    h, w = luma.shape
    bh, bw = -(-h // block), -(-w // block)
    padded = np.pad(luma, ((0, bh * block - h), (0, bw * block - w)), mode="edge")
    means = padded.reshape(bh, block, bw, block).mean(axis=(1, 3))
    med = ndimage.median_filter(means, size=window, mode="nearest")
    up = np.repeat(np.repeat(med, block, axis=0), block, axis=1)
    return up[:h, :w]


class StubDetector:
    """Threshold-and-label detector over local contrast."""

    def __init__(self, contrast_threshold: float = 0.2, min_area: int = 3, class_id: int = 0):
        self.contrast_threshold = contrast_threshold
        self.min_area = min_area
        self.class_id = class_id

    def detect(self, image) -> list[Detection]:
        luma = to_luma(image)
        if luma.size == 0:
            raise DetectorError("empty image")
        contrast = np.abs(luma - local_background(luma)) / CONTRAST_SCALE
        mask = contrast > self.contrast_threshold
        labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        if n == 0:
            return []
        found = []
        for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
            blob = labels[sl] == idx
            area = int(blob.sum())
            if area < self.min_area:
                continue
            score = float(min(1.0, contrast[sl][blob].mean()))
            ys, xs = sl
            found.append(Detection(float(xs.start), float(ys.start), float(xs.stop - xs.start),
                                   float(ys.stop - ys.start), score, self.class_id))
        return found


def stub_detect(image) -> list[Detection]:
    return StubDetector().detect(image)


@dataclass
class DetectorRequest:
    id: int
    width: int
    height: int
    image_path: str | None = None
    image_b64: str | None = None

    def to_line(self) -> str:
        msg = {"id": self.id}
        if self.image_path is not None:
            msg["image_path"] = self.image_path
        else:
            msg["image_b64"] = self.image_b64
        msg["width"] = self.width
        msg["height"] = self.height
        return json.dumps(msg, separators=(",", ":"))


@dataclass
class DetectorResponse:
    id: int
    detections: list[Detection]
    latency_ms: float | None = None


def parse_response(line: str, width: int | None = None, height: int | None = None) -> DetectorResponse:
    """Parse one response line; any structural problem rejects the whole line."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DetectorProtocolError(f"invalid JSON: {exc}") from None
    if not isinstance(msg, dict) or not isinstance(msg.get("id"), int) or isinstance(msg.get("id"), bool):
        raise DetectorProtocolError("response must be an object with an integer id")
    raw = msg.get("detections")
    if not isinstance(raw, list):
        raise DetectorProtocolError("response detections must be a list")
    dets = []
    for item in raw:
        try:
            if not isinstance(item, dict):
                raise TypeError("detection must be an object")
            d = Detection(
                float(item["x"]), float(item["y"]), float(item["w"]), float(item["h"]),
                float(item["score"]), int(item["class_id"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectorProtocolError(f"bad detection {item!r}: {exc}") from None
        if width is not None and height is not None:
            d = boxes.clip(d, width, height)
            if d is None:
                raise DetectorProtocolError(f"detection {item!r} lies outside the {width}x{height} image")
        dets.append(d)
    latency = msg.get("latency_ms")
    return DetectorResponse(msg["id"], dets, float(latency) if isinstance(latency, (int, float)) else None)


def encode_png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class _Child:
    proc: subprocess.Popen
    lines: queue.Queue = field(default_factory=queue.Queue)


class ExternalDetector:
    """Adapter for a detector running as a long-lived child process.

    One request is in flight at a time. Responses with a stale id are
    discarded, malformed lines are logged and skipped. When the child dies
    the request is reissued once to a fresh child before giving up with
    :class:`DetectorUnavailable`.
    """

    def __init__(self, argv: list[str], timeout_s: float = 2.0, transport: str = "path",
                 max_restarts: int = 1, workdir: str | None = None):
        if transport not in ("path", "b64"):
            raise ValueError(f"unknown transport {transport!r}")
        self.argv = list(argv)
        self.timeout_s = timeout_s
        self.transport = transport
        self.max_restarts = max_restarts
        self.restarts = 0
        self.protocol_errors = 0
        self._next_id = 1
        self._child: _Child | None = None
        self._tmp = tempfile.TemporaryDirectory(prefix="rockwatch-det-", dir=workdir)

    def _spawn(self):
        try:
            proc = subprocess.Popen(
                self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", bufsize=1,
            )
        except OSError as exc:
            raise DetectorUnavailable(f"cannot start detector {self.argv[0]!r}: {exc}") from exc
        child = _Child(proc)

        def pump():
            try:
                for line in proc.stdout:
                    child.lines.put(line)
            except (OSError, ValueError):
                pass  # stream closed by _kill
            child.lines.put(None)

        threading.Thread(target=pump, daemon=True, name="detector-stdout").start()
        self._child = child
        logger.info("started detector child pid=%s: %s", proc.pid, " ".join(self.argv))

    def _alive(self) -> bool:
        return self._child is not None and self._child.proc.poll() is None

    def _ensure_started(self):
        if self._child is None:
            self._spawn()

    def request(self, req: DetectorRequest) -> DetectorResponse:
        self._ensure_started()
        restarts_left = self.max_restarts
        while True:
            if not self._alive():
                outcome = "crashed"
            else:
                outcome = self._exchange(req)
                if isinstance(outcome, DetectorResponse):
                    return outcome
            if restarts_left <= 0:
                raise DetectorUnavailable(f"detector child {outcome} and the restart budget is spent")
            restarts_left -= 1
            self.restarts += 1
            logger.warning("detector child %s; restarting (%d so far)", outcome, self.restarts)
            self._kill()
            self._spawn()

    def _exchange(self, req: DetectorRequest):
        child = self._child
        try:
            child.proc.stdin.write(req.to_line() + "\n")
            child.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            return "crashed"
        deadline = time.monotonic() + self.timeout_s
        malformed = 0
        sent = time.monotonic()
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                if malformed:
                    raise DetectorProtocolError(f"no valid response to request {req.id}; {malformed} malformed lines")
                raise DetectorTimeout(f"no response to request {req.id} within {self.timeout_s:.3f}s")
            try:
                line = child.lines.get(timeout=remaining)
            except queue.Empty:
                continue
            if line is None:
                child.proc.wait()
                return "crashed"
            line = line.strip()
            if not line:
                continue
            try:
                resp = parse_response(line, req.width, req.height)
            except DetectorProtocolError as exc:
                malformed += 1
                self.protocol_errors += 1
                logger.error("detector protocol error: %s (line %.120r)", exc, line)
                continue
            if resp.id != req.id:
                logger.debug("discarding response for stale request %s", resp.id)
                continue
            if resp.latency_ms is None:
                resp.latency_ms = (time.monotonic() - sent) * 1000.0
            return resp

    def detect(self, image) -> list[Detection]:
        image = np.asarray(image)
        h, w = image.shape[:2]
        rid = self._next_id
        self._next_id += 1
        if self.transport == "path":
            path = Path(self._tmp.name) / f"req-{rid}.png"
            Image.fromarray(np.ascontiguousarray(image)).save(path)
            req = DetectorRequest(rid, w, h, image_path=str(path))
        else:
            path = None
            req = DetectorRequest(rid, w, h, image_b64=encode_png_b64(image))
        try:
            return self.request(req).detections
        finally:
            if path is not None:
                path.unlink(missing_ok=True)

    def _kill(self):
        if self._child is None:
            return
        proc = self._child.proc
        if proc.poll() is None:
            proc.kill()
        proc.wait()
        for stream in (proc.stdin, proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self._child = None

    def close(self):
        if self._child is not None and self._alive():
            try:
                self._child.proc.stdin.close()
                self._child.proc.wait(timeout=1.0)
            except (OSError, subprocess.TimeoutExpired):
                pass
        self._kill()
        self._tmp.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_detect(handle: ExternalDetector, request: DetectorRequest) -> DetectorResponse:
    return handle.request(request)

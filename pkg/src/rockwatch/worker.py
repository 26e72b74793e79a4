"""Reference detector child: serves the stub detector over the line protocol.

Run as ``python -m rockwatch.worker``. A real model wrapper only needs to
read one JSON request per stdin line and answer with one JSON line carrying
the same ``id``.
"""

from __future__ import annotations

import base64
import io
import json
import sys
import time

import numpy as np
from PIL import Image

from .detector import StubDetector
from .imaging import load_image


def _decode(msg: dict) -> np.ndarray:
    if "image_path" in msg:
        return load_image(msg["image_path"])
    with Image.open(io.BytesIO(base64.b64decode(msg["image_b64"]))) as im:
        return np.asarray(im.convert("RGB"))


def serve(stdin=None, stdout=None, detector=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    detector = detector or StubDetector()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        start = time.monotonic()
        try:
            msg = json.loads(line)
            rid = msg["id"]
        except (ValueError, KeyError, TypeError) as exc:
            print(f"worker: bad request: {exc}", file=sys.stderr)
            continue
        try:
            dets = detector.detect(_decode(msg))
        except Exception as exc:
            print(f"worker: request {rid} failed: {exc}", file=sys.stderr)
            dets = []
        reply = {
            "id": rid,
            "detections": [d.to_dict() for d in dets],
            "latency_ms": round((time.monotonic() - start) * 1000.0, 3),
        }
        stdout.write(json.dumps(reply, separators=(",", ":")) + "\n")
        stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(serve())

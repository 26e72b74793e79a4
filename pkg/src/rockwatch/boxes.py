"""Axis-aligned pixel boxes shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Detection:
    """A bounding box in pixel coordinates with top-left origin.

    Ground-truth boxes use the same type with ``score=1.0``.
    """

    x: float
    y: float
    w: float
    h: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def translated(self, dx: float, dy: float) -> "Detection":
        return replace(self, x=self.x + dx, y=self.y + dy)

    def to_dict(self, with_score: bool = True) -> dict:
        d = {"x": self.x, "y": self.y, "w": self.w, "h": self.h}
        if with_score:
            d["score"] = self.score
        d["class_id"] = self.class_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(
            x=float(d["x"]),
            y=float(d["y"]),
            w=float(d["w"]),
            h=float(d["h"]),
            score=float(d.get("score", 1.0)),
            class_id=int(d.get("class_id", 0)),
        )


def from_corners(x1, y1, x2, y2, score=1.0, class_id=0) -> Detection | None:
    """Box from corner coordinates, or None when degenerate."""
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return Detection(x1, y1, x2 - x1, y2 - y1, score, class_id)


def intersection(a: Detection, b: Detection) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Detection, b: Detection) -> float:
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def clip(box: Detection, width: float, height: float, x0: float = 0.0, y0: float = 0.0) -> Detection | None:
    """Clip to the rectangle [x0, x0+width) x [y0, y0+height); None if nothing remains."""
    return from_corners(
        max(box.x, x0),
        max(box.y, y0),
        min(box.x2, x0 + width),
        min(box.y2, y0 + height),
        box.score,
        box.class_id,
    )


def priority_key(d: Detection):
    """Sort key: descending score, then larger area, then lower x, then lower y."""
    return (-d.score, -d.area, d.x, d.y)

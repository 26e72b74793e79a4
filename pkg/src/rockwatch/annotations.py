"""Dataset annotation files: one JSON list of ``{"image": ..., "boxes": [...]}`` records."""

from __future__ import annotations

import json
from pathlib import Path

from .boxes import Detection


class AnnotationError(ValueError):
    pass


def parse_records(data) -> dict[str, list[Detection]]:
    if not isinstance(data, list):
        raise AnnotationError("annotation file must hold a list of records")
    out: dict[str, list[Detection]] = {}
    for i, rec in enumerate(data):
        if not isinstance(rec, dict) or "image" not in rec:
            raise AnnotationError(f"record {i} needs an 'image' field")
        name = str(rec["image"])
        if name in out:
            raise AnnotationError(f"duplicate record for image {name!r}")
        try:
            out[name] = [Detection.from_dict(b) for b in rec.get("boxes", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"record {i} ({name}): bad box: {exc}") from exc
    return out


def load_annotations(path) -> dict[str, list[Detection]]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON: {exc}") from exc
    return parse_records(data)


def to_records(records: dict[str, list[Detection]], with_score: bool = False) -> list[dict]:
    return [
        {"image": name, "boxes": [b.to_dict(with_score=with_score) for b in dets]}
        for name, dets in records.items()
    ]


def save_annotations(path, records: dict[str, list[Detection]], with_score: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_records(records, with_score), indent=2) + "\n", encoding="utf-8")
    return path

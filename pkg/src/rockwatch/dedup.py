"""Difference-hash fingerprints and near-duplicate grouping for dataset cleaning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .imaging import LUMA_WEIGHTS_MILLI, is_image_path, load_image

logger = logging.getLogger(__name__)

HASH_W, HASH_H = 9, 8
HASH_BITS = 64
DEFAULT_THRESHOLD = 0.98


@dataclass(frozen=True)
class Fingerprint:
    bits: int
    source_path: str = ""

    def __post_init__(self):
        if not 0 <= self.bits < (1 << HASH_BITS):
            raise ValueError(f"fingerprint must fit in 64 bits, got {self.bits:#x}")

    def hex(self) -> str:
        return f"{self.bits:016x}"


@dataclass(frozen=True)
class DuplicateGroup:
    representative: str
    members: tuple[str, ...]
    pairwise_min_similarity: float


def _area_weights(src: int, dst: int) -> np.ndarray:
    """Integer overlap of source pixel i with destination bin j, in units of 1/dst source pixels.

    Source pixel i spans [i*dst, (i+1)*dst) and bin j spans [j*src, (j+1)*src)
    on a common integer grid, so every bin receives the same total weight.
    """
    i = np.arange(src)[None, :]
    j = np.arange(dst)[:, None]
    lo = np.maximum(i * dst, j * src)
    hi = np.minimum((i + 1) * dst, (j + 1) * src)
    return np.maximum(hi - lo, 0).astype(np.int64)


def _luma_for_hash(img) -> np.ndarray:
    a = np.asarray(img)
    if a.size == 0 or a.ndim < 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError("cannot hash an empty image")
    if a.ndim == 3:
        if a.shape[2] not in (3, 4):
            raise ValueError(f"unsupported channel count {a.shape[2]}")
        a = a[..., :3]
    if np.issubdtype(a.dtype, np.integer):
        # exact integer luma (x1000) keeps equal-valued regions exactly equal
        if a.ndim == 3:
            return a.astype(np.int64) @ np.array(LUMA_WEIGHTS_MILLI, dtype=np.int64)
        return a.astype(np.int64) * 1000
    if a.ndim == 3:
        return a.astype(np.float64) @ (np.array(LUMA_WEIGHTS_MILLI) / 1.0)
    return a.astype(np.float64) * 1000.0


def dhash(img, source_path: str = "") -> Fingerprint:
    """64-bit difference hash.

    Luma is area-averaged down to 9x8; in each row bit ``x`` is set when
    pixel ``x`` is darker than pixel ``x + 1``. Rows are packed top to bottom
    with the first pair of row 0 in the most significant bit.
    """
    luma = _luma_for_hash(img)
    h, w = luma.shape
    wy = _area_weights(h, HASH_H)
    wx = _area_weights(w, HASH_W)
    if luma.dtype == np.int64:
        small = wy @ luma @ wx.T  # all bins share one normaliser, so sums compare like means
    else:
        small = (wy.astype(np.float64) @ luma) @ wx.T.astype(np.float64)
    bits = (small[:, :-1] < small[:, 1:]).ravel()
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return Fingerprint(value, source_path)


def hamming(a: Fingerprint | int, b: Fingerprint | int) -> int:
    x = a.bits if isinstance(a, Fingerprint) else a
    y = b.bits if isinstance(b, Fingerprint) else b
    return (x ^ y).bit_count()


def similarity(a: Fingerprint | int, b: Fingerprint | int) -> float:
    return 1.0 - hamming(a, b) / HASH_BITS


def max_distance(threshold: float) -> int:
    """Largest Hamming distance whose similarity still reaches ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    return int(np.floor((1.0 - threshold) * HASH_BITS + 1e-9))


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def _candidate_pairs(values: list[int], k: int):
    """Index pairs that may lie within Hamming distance ``k``.

    For small ``k`` the 64 bits are cut into ``k + 1`` blocks; any pair within
    distance ``k`` agrees exactly on at least one block, so only bucket
    collisions need checking.
    """
    n = len(values)
    if k >= 16 or n < 64:
        yield from combinations(range(n), 2)
        return
    blocks = k + 1
    bounds = np.linspace(0, HASH_BITS, blocks + 1).astype(int)
    seen = set()
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        mask = ((1 << (hi - lo)) - 1) << lo
        buckets: dict[int, list[int]] = {}
        for idx, v in enumerate(values):
            buckets.setdefault(v & mask, []).append(idx)
        for members in buckets.values():
            for pair in combinations(members, 2):
                if pair not in seen:
                    seen.add(pair)
                    yield pair


def group_similar(fingerprints: list[Fingerprint], threshold: float = DEFAULT_THRESHOLD) -> list[DuplicateGroup]:
    """Connected components of the graph linking pairs with similarity >= threshold.

    Members are identified by ``source_path`` (or their index when empty);
    groups are ordered by representative, which is the smallest member name.
    """
    k = max_distance(threshold)
    names = [fp.source_path or str(i) for i, fp in enumerate(fingerprints)]
    values = [fp.bits for fp in fingerprints]
    uf = _UnionFind(len(values))
    for i, j in _candidate_pairs(values, k):
        if (values[i] ^ values[j]).bit_count() <= k:
            uf.union(i, j)
    comps: dict[int, list[int]] = {}
    for i in range(len(values)):
        comps.setdefault(uf.find(i), []).append(i)
    groups = []
    for idx in comps.values():
        idx.sort(key=lambda i: names[i])
        min_sim = min((similarity(values[a], values[b]) for a, b in combinations(idx, 2)), default=1.0)
        groups.append(DuplicateGroup(names[idx[0]], tuple(names[i] for i in idx), min_sim))
    groups.sort(key=lambda g: g.representative)
    return groups


def scan(directory, threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Hash every image under ``directory`` and build a keep/drop manifest.

    Paths in the manifest are relative to ``directory`` with forward slashes.
    Decode failures are listed under ``errors`` and never abort the scan.
    """
    root = Path(directory)
    if not root.is_dir():
        raise NotADirectoryError(str(root))
    fingerprints, errors = [], []
    for path in sorted(p for p in root.rglob("*") if p.is_file() and is_image_path(p)):
        rel = path.relative_to(root).as_posix()
        try:
            fingerprints.append(dhash(load_image(path), rel))
        except Exception as exc:  # any decoder failure is recorded, not raised
            logger.warning("cannot hash %s: %s", rel, exc)
            errors.append({"path": rel, "error": f"{type(exc).__name__}: {exc}"})
    groups = group_similar(fingerprints, threshold)
    hashes = {fp.source_path: fp.hex() for fp in fingerprints}
    return {
        "threshold": threshold,
        "max_hamming": max_distance(threshold),
        "image_count": len(fingerprints),
        "groups": [
            {
                "representative": g.representative,
                "members": list(g.members),
                "hashes": [hashes[m] for m in g.members],
                "pairwise_min_similarity": g.pairwise_min_similarity,
                "keep": [g.representative],
                "drop": list(g.members[1:]),
            }
            for g in groups
        ],
        "errors": errors,
    }

import json
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rockwatch.dedup import Fingerprint, dhash, group_similar, hamming, max_distance, scan, similarity
from rockwatch.imaging import save_image


def naive_dhash(img):
    """Exact rational area averaging onto a 9x8 grid, one bin at a time."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if img.ndim == 3:
        luma = [[Fraction(299 * int(p[0]) + 587 * int(p[1]) + 114 * int(p[2]), 1000) for p in row] for row in img]
    else:
        luma = [[Fraction(int(p)) for p in row] for row in img]

    def overlap(a0, a1, b0, b1):
        return max(Fraction(0), min(a1, b1) - max(a0, b0))

    small = []
    for j in range(8):
        y0, y1 = Fraction(j * h, 8), Fraction((j + 1) * h, 8)
        row = []
        for i in range(9):
            x0, x1 = Fraction(i * w, 9), Fraction((i + 1) * w, 9)
            total = Fraction(0)
            for y in range(h):
                wy = overlap(y, y + 1, y0, y1)
                if not wy:
                    continue
                for x in range(w):
                    wx = overlap(x, x + 1, x0, x1)
                    if wx:
                        total += wy * wx * luma[y][x]
            row.append(total / ((y1 - y0) * (x1 - x0)))
        small.append(row)
    bits = ""
    for row in small:
        bits += "".join("1" if row[x] < row[x + 1] else "0" for x in range(8))
    return int(bits, 2)


def test_constant_and_increasing_images():
    assert dhash(np.full((50, 70, 3), 77, np.uint8)).bits == 0
    inc = np.tile(np.arange(9, dtype=np.uint8) * 20, (8, 1))
    assert dhash(inc).bits == 0xFFFFFFFFFFFFFFFF
    assert dhash(inc).hex() == "ffffffffffffffff"


def test_matches_naive_reference_on_random_images():
    rng = np.random.default_rng(1234)
    for n in range(100):
        h, w = int(rng.integers(8, 30)), int(rng.integers(9, 30))
        img = rng.integers(0, 256, size=(h, w, 3) if n % 2 else (h, w), dtype=np.uint8)
        assert dhash(img).bits == naive_dhash(img), (n, h, w)


def test_rejects_empty_image():
    with pytest.raises(ValueError):
        dhash(np.zeros((0, 5), np.uint8))


def test_brightness_scaling_invariance():
    rng = np.random.default_rng(7)
    img = rng.integers(0, 128, size=(40, 60, 3), dtype=np.uint8)
    assert dhash(img * np.uint8(2)).bits == dhash(img).bits


def test_similarity_values():
    a = Fingerprint(0x0123456789ABCDEF)
    assert similarity(a, a) == 1.0
    assert similarity(a, Fingerprint(a.bits ^ 0xFFFFFFFFFFFFFFFF)) == 0.0
    assert similarity(a, Fingerprint(a.bits ^ (1 << 17))) == 0.984375


def test_threshold_to_distance():
    assert max_distance(0.98) == 1
    assert max_distance(1.0) == 0
    assert max_distance(1 - 3 / 64) == 3
    with pytest.raises(ValueError):
        max_distance(0.0)


def test_chain_is_one_group():
    a, b, c = Fingerprint(0b000, "A"), Fingerprint(0b001, "B"), Fingerprint(0b011, "C")
    assert hamming(a, c) == 2
    groups = group_similar([c, a, b], 0.98)
    assert len(groups) == 1
    g = groups[0]
    assert g.representative == "A" and g.members == ("A", "B", "C")
    assert g.pairwise_min_similarity == 1 - 2 / 64


def test_far_apart_hashes_stay_single():
    fps = [Fingerprint(0b11 << (2 * i), f"f{i}") for i in range(5)]
    assert all(len(g.members) == 1 for g in group_similar(fps, 0.98))


def test_exact_duplicates_group_at_any_threshold():
    fps = [Fingerprint(42, "x"), Fingerprint(42, "y")]
    for t in (0.5, 0.98, 1.0):
        assert [g.members for g in group_similar(fps, t)] == [("x", "y")]


def oracle_groups(values, k):
    parent = list(range(len(values)))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i, j in combinations(range(len(values)), 2):
        if bin(values[i] ^ values[j]).count("1") <= k:
            parent[find(j)] = find(i)
    comps = {}
    for i in range(len(values)):
        comps.setdefault(find(i), set()).add(str(i))
    return sorted(sorted(c) for c in comps.values())


hash_sets = st.lists(st.integers(0, 2 ** 64 - 1), min_size=0, max_size=120).flatmap(
    lambda base: st.lists(
        st.tuples(st.sampled_from(base or [0]), st.lists(st.integers(0, 63), max_size=3)),
        min_size=0, max_size=120,
    )
)


@settings(max_examples=60, deadline=None)
@given(spec=hash_sets, t=st.sampled_from([0.98, 0.97, 0.95, 0.9, 1.0]))
def test_grouping_matches_union_find_oracle(spec, t):
    values = []
    for base, flips in spec:
        for f in flips:
            base ^= 1 << f
        values.append(base)
    got = group_similar([Fingerprint(v) for v in values], t)
    assert sorted(sorted(g.members) for g in got) == oracle_groups(values, max_distance(t))
    names = [m for g in got for m in g.members]
    assert sorted(names) == sorted(str(i) for i in range(len(values)))  # a partition
    for g in got:
        assert g.representative in g.members


@settings(max_examples=40, deadline=None)
@given(values=st.lists(st.integers(0, 2 ** 12 - 1), max_size=40))
def test_lower_threshold_never_splits(values):
    fps = [Fingerprint(v) for v in values]
    fine = group_similar(fps, 0.98)
    coarse = group_similar(fps, 0.95)
    where = {m: i for i, g in enumerate(coarse) for m in g.members}
    for g in fine:
        assert len({where[m] for m in g.members}) == 1


def test_scan_manifest(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(40, 50, 3), dtype=np.uint8)
    for name in ("b.png", "a.png", "sub/c.png"):
        save_image(tmp_path / name, img)
    save_image(tmp_path / "other.png", rng.integers(0, 256, size=(40, 50, 3), dtype=np.uint8))
    (tmp_path / "broken.jpg").write_bytes(b"not an image")
    (tmp_path / "notes.txt").write_text("ignored")
    m = scan(tmp_path, 0.98)
    assert m["image_count"] == 4 and m["max_hamming"] == 1
    dup = [g for g in m["groups"] if len(g["members"]) > 1]
    assert len(dup) == 1
    assert dup[0]["keep"] == ["a.png"] and dup[0]["drop"] == ["b.png", "sub/c.png"]
    assert [e["path"] for e in m["errors"]] == ["broken.jpg"]
    assert json.dumps(m, sort_keys=True) == json.dumps(scan(tmp_path, 0.98), sort_keys=True)


def test_scan_empty_directory(tmp_path):
    m = scan(tmp_path)
    assert m["image_count"] == 0 and m["groups"] == [] and m["errors"] == []


def test_scan_missing_directory(tmp_path):
    with pytest.raises(NotADirectoryError):
        scan(tmp_path / "nope")

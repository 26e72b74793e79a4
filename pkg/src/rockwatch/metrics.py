"""Detection quality: IoU matching, precision/recall and average precision.

Conventions: precision is 1.0 when there are no predictions, recall is 1.0
when there is no ground truth. AP uses every distinct prediction score as a
threshold and integrates the monotone precision envelope over recall.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import boxes
from .boxes import Detection, iou

SIZE_BUCKETS = (("small", 0.0, 32.0 ** 2), ("medium", 32.0 ** 2, 96.0 ** 2), ("large", 96.0 ** 2, float("inf")))


@dataclass
class MatchResult:
    true_positives: list[tuple[Detection, Detection]] = field(default_factory=list)
    false_positives: list[tuple[Detection, None]] = field(default_factory=list)
    false_negatives: list[Detection] = field(default_factory=list)
    iou_threshold: float = 0.5


@dataclass
class PRCurve:
    # (score threshold, recall, precision), by descending threshold
    points: list[tuple[float, float, float]]

    @property
    def recalls(self) -> list[float]:
        return [p[1] for p in self.points]

    @property
    def precisions(self) -> list[float]:
        return [p[2] for p in self.points]


def _match_indices(preds: list[Detection], gts: list[Detection], iou_threshold: float):
    """Greedy one-to-one matching; yields (pred index, gt index or None) in processing order."""
    order = sorted(range(len(preds)), key=lambda i: boxes.priority_key(preds[i]))
    taken = [False] * len(gts)
    out = []
    for i in order:
        p = preds[i]
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
        out.append((i, best))
    return out, taken


def match_detections(preds: list[Detection], gts: list[Detection], iou_threshold: float = 0.5) -> MatchResult:
    pairs, taken = _match_indices(preds, gts, iou_threshold)
    m = MatchResult(iou_threshold=iou_threshold)
    for i, j in pairs:
        if j is None:
            m.false_positives.append((preds[i], None))
        else:
            m.true_positives.append((preds[i], gts[j]))
    m.false_negatives = [g for g, t in zip(gts, taken) if not t]
    return m


def precision_recall(m: MatchResult) -> tuple[float, float]:
    tp, fp, fn = len(m.true_positives), len(m.false_positives), len(m.false_negatives)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def _scored_outcomes(images, iou_threshold):
    """(score, is_tp) for every prediction over all images, plus total ground truth."""
    outcomes, n_gt = [], 0
    for preds, gts in images:
        n_gt += len(gts)
        pairs, _ = _match_indices(preds, gts, iou_threshold)
        outcomes.extend((preds[i].score, j is not None) for i, j in pairs)
    outcomes.sort(key=lambda o: -o[0])
    return outcomes, n_gt


def pr_curve(images, iou_threshold: float = 0.5) -> tuple[PRCurve, int]:
    """PR points at every distinct score, pooled over ``images`` = [(preds, gts), ...].

    Greedy matching by descending score means the matches among predictions
    above a threshold are a prefix of the full matching, so one pass suffices.
    """
    outcomes, n_gt = _scored_outcomes(images, iou_threshold)
    points = []
    tp = fp = 0
    for k, (score, hit) in enumerate(outcomes):
        tp += hit
        fp += not hit
        if k + 1 < len(outcomes) and outcomes[k + 1][0] == score:
            continue  # equal scores share one threshold
        recall = tp / n_gt if n_gt else 1.0
        points.append((score, recall, tp / (tp + fp)))
    return PRCurve(points), n_gt


def ap_from_curve(curve: PRCurve, n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if not curve.points else 0.0
    recalls = [0.0] + curve.recalls
    precisions = curve.precisions
    envelope = precisions[:]
    for k in range(len(envelope) - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    return sum((recalls[k + 1] - recalls[k]) * envelope[k] for k in range(len(envelope)))


def average_precision(preds: list[Detection], gts: list[Detection], iou_threshold: float = 0.5) -> float:
    curve, n_gt = pr_curve([(preds, gts)], iou_threshold)
    return ap_from_curve(curve, n_gt)


def size_bucket(box: Detection) -> str:
    for name, lo, hi in SIZE_BUCKETS:
        if lo <= box.area < hi:
            return name
    return SIZE_BUCKETS[-1][0]


def evaluate(pred_records: dict[str, list[Detection]], gt_records: dict[str, list[Detection]],
             iou_threshold: float = 0.5, min_score: float = 0.0) -> dict:
    """Dataset-level report keyed by image name.

    Images missing from the predictions count as having no detections;
    predictions for images without ground truth are all false positives.
    """
    names = sorted(set(gt_records) | set(pred_records))
    images = []
    tp = fp = fn = 0
    bucket_hits = {name: [0, 0] for name, _, _ in SIZE_BUCKETS}
    for name in names:
        preds = [d for d in pred_records.get(name, []) if d.score >= min_score]
        gts = gt_records.get(name, [])
        images.append((pred_records.get(name, []), gts))
        m = match_detections(preds, gts, iou_threshold)
        tp += len(m.true_positives)
        fp += len(m.false_positives)
        fn += len(m.false_negatives)
        for _, g in m.true_positives:
            bucket_hits[size_bucket(g)][0] += 1
            bucket_hits[size_bucket(g)][1] += 1
        for g in m.false_negatives:
            bucket_hits[size_bucket(g)][1] += 1
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    curve, n_gt = pr_curve(images, iou_threshold)
    return {
        "iou_threshold": iou_threshold,
        "min_score": min_score,
        "images": len(names),
        "ground_truth": tp + fn,
        "predictions": tp + fp,
        "true_positives": tp,
        "false_positives": fp,
        "false_negatives": fn,
        "precision": precision,
        "recall": recall,
        "ap": ap_from_curve(curve, n_gt),
        "recall_by_size": {
            name: {"ground_truth": total, "recall": (hits / total) if total else None}
            for name, (hits, total) in bucket_hits.items()
        },
        "pr_curve": [{"score": s, "recall": r, "precision": p} for s, r, p in curve.points],
    }

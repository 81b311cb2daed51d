"""Detection metrics: greedy IoU matching, PR curves, AP and best-F1.

The PR curve re-runs the matching for every distinct detection score,
so each point is exactly what a detector thresholded at that value
would produce.
"""

import csv
from dataclasses import dataclass

from .detect import _nms_key, iou_xywh
from .errors import MetricError

MATCH_IOU = 0.5


@dataclass
class MatchResult:
    tp_scores: list
    fp_scores: list
    n_fn: int

    @property
    def n_tp(self):
        return len(self.tp_scores)

    @property
    def n_fp(self):
        return len(self.fp_scores)


def _gt_xywh(g):
    return g.as_xywh() if hasattr(g, "as_xywh") else tuple(map(float, g))


def match(dets, gts, iou_thresh=MATCH_IOU):
    """Greedily match one frame's detections (descending score) to its
    ground-truth boxes; each GT matches at most once."""
    gts = [_gt_xywh(g) for g in gts]
    taken = [False] * len(gts)
    tp_scores, fp_scores = [], []
    for d in sorted(dets, key=_nms_key):
        box = d.as_xywh()
        best_iou, best_g = 0.0, -1
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            v = iou_xywh(box, g)
            if v > best_iou:
                best_iou, best_g = v, gi
        if best_g >= 0 and best_iou >= iou_thresh:
            taken[best_g] = True
            tp_scores.append(d.score)
        else:
            fp_scores.append(d.score)
    return MatchResult(
        tp_scores=tp_scores, fp_scores=fp_scores, n_fn=taken.count(False)
    )


@dataclass
class PRCurve:
    """(threshold, precision, recall) triples, descending threshold."""

    points: list
    total_gt: int


def pr_curve(dets_by_frame, gts_by_frame, iou_thresh=MATCH_IOU):
    """Sweep the confidence threshold over every distinct detection
    score; dets/gts are per-frame lists keyed the same way."""
    frames = sorted(set(dets_by_frame) | set(gts_by_frame))
    total_gt = sum(len(gts_by_frame.get(f, [])) for f in frames)
    if total_gt == 0:
        raise MetricError("PR curve undefined without ground-truth boxes")
    scores = sorted(
        {d.score for f in frames for d in dets_by_frame.get(f, [])}, reverse=True
    )
    points = []
    for t in scores:
        tp = fp = 0
        for f in frames:
            kept = [d for d in dets_by_frame.get(f, []) if d.score >= t]
            res = match(kept, gts_by_frame.get(f, []), iou_thresh)
            tp += res.n_tp
            fp += res.n_fp
        precision = tp / (tp + fp) if tp + fp else 1.0
        points.append((t, precision, tp / total_gt))
    return PRCurve(points=points, total_gt=total_gt)


def ap(curve):
    """Area under the PR curve with all-point interpolation."""
    if not curve.points:
        return 0.0
    # ascending recall == descending threshold order
    pts = list(curve.points)
    envelope = [0.0] * len(pts)
    run_max = 0.0
    for i in range(len(pts) - 1, -1, -1):
        run_max = max(run_max, pts[i][1])
        envelope[i] = run_max
    area = 0.0
    prev_recall = 0.0
    for (_, _, recall), prec in zip(pts, envelope):
        area += (recall - prev_recall) * prec
        prev_recall = recall
    return area


def best_f1(curve):
    """(threshold, F1) maximizing F1 over the sweep; ties prefer the
    higher threshold."""
    best = (1.0, 0.0)
    for t, p, r in curve.points:
        f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
        if f1 > best[1]:
            best = (t, f1)
    return best


def evaluate(dets_by_frame, gts_by_frame, iou_thresh=MATCH_IOU):
    """AP plus the best-F1 operating point, as a dict."""
    curve = pr_curve(dets_by_frame, gts_by_frame, iou_thresh)
    threshold, f1 = best_f1(curve)
    return {
        "ap": ap(curve),
        "f1": f1,
        "threshold": threshold,
        "curve": curve,
    }


def write_pr_csv(curve, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in curve.points:
            writer.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])

"""Head decoding, IoU and non-maximum suppression.

The raw head tensor has 5 channels per anchor: (tx, ty, tw, th, to).
Boxes are kept center-format internally; IoU and file output use
corner format (x, y, w, h) with x, y the top-left corner.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ValidationError
from .graph import DOWNSAMPLE


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError("detection size must be positive")

    def as_xywh(self):
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    @classmethod
    def from_xywh(cls, x, y, w, h, score):
        return cls(cx=x + w / 2.0, cy=y + h / 2.0, w=w, h=h, score=score)


def sigmoid(t):
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def decode(raw, anchors, conf_threshold, cell_stride=DOWNSAMPLE):
    """Turn a (5*A, H, W) head tensor into detections above threshold."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] % 5 != 0:
        raise DimensionError(
            f"head tensor must be (5*num_anchors, H, W), got {raw.shape}"
        )
    anchors = np.asarray(anchors, dtype=np.float64)
    n_anchors = raw.shape[0] // 5
    if len(anchors) != n_anchors:
        raise DimensionError(
            f"{n_anchors} anchor channels but {len(anchors)} anchor priors"
        )
    _, grid_h, grid_w = raw.shape
    dets = []
    for i in range(grid_h):
        for j in range(grid_w):
            for a in range(n_anchors):
                tx, ty, tw, th, to = raw[5 * a : 5 * a + 5, i, j]
                score = sigmoid(to)
                if score < conf_threshold:
                    continue
                dets.append(
                    Detection(
                        cx=(j + sigmoid(tx)) * cell_stride,
                        cy=(i + sigmoid(ty)) * cell_stride,
                        w=anchors[a, 0] * math.exp(tw),
                        h=anchors[a, 1] * math.exp(th),
                        score=score,
                    )
                )
    return dets


def iou_xywh(a, b):
    """IoU of two corner-format (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _nms_key(d):
    return (-d.score, d.cx, d.cy, d.w, d.h)


def nms(dets, iou_threshold=0.3):
    """Greedy NMS with deterministic tie-breaking; result stays sorted
    by descending score."""
    kept = []
    for d in sorted(dets, key=_nms_key):
        box = d.as_xywh()
        if all(iou_xywh(box, k.as_xywh()) < iou_threshold for k in kept):
            kept.append(d)
    return kept


# --- detection files (JSON-lines, corner format + score) --------------


def write_detections(path, per_frame):
    """per_frame: sequence of detection lists, index = frame ordinal."""
    with open(path, "w") as f:
        for frame_index, dets in enumerate(per_frame):
            for d in sorted(dets, key=_nms_key):
                x, y, w, h = d.as_xywh()
                f.write(
                    json.dumps(
                        {
                            "frame_index": frame_index,
                            "x": round(x, 4),
                            "y": round(y, 4),
                            "w": round(w, 4),
                            "h": round(h, 4),
                            "score": round(d.score, 6),
                        }
                    )
                    + "\n"
                )


def read_detections(path):
    """Returns {frame_index: [Detection, ...]}."""
    per_frame = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = Detection.from_xywh(
                    float(rec["x"]),
                    float(rec["y"]),
                    float(rec["w"]),
                    float(rec["h"]),
                    float(rec["score"]),
                )
                idx = int(rec["frame_index"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad detection record") from exc
            per_frame.setdefault(idx, []).append(det)
    return per_frame

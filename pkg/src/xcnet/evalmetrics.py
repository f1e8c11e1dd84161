"""Detection decoding and all evaluation metrics.

Detection: anchor-grid box decoding, greedy NMS, FPPI/miss-rate curves and
the log-average miss rate sampled at 9 log-spaced FPPI reference points.
Segmentation: per-class pixel IoU and the instance Detection Rate, i.e. the
fraction of ground-truth instances whose area is covered by the predicted
class map at or above a threshold, averaged over thresholds 0.1 .. 0.9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EvalError

MISS_RATE_CLAMP = 1e-4
N_FPPI_REFERENCES = 9
DETECTION_RATE_THRESHOLDS = tuple(i / 10 for i in range(1, 10))


@dataclass(frozen=True)
class ScoredBox:
    x: float
    y: float
    w: float
    h: float
    score: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ConfigError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self):
        return self.w * self.h


def box_iou(a, b):
    """IoU of two (x, y, w, h) boxes; accepts ScoredBox or 4-sequences."""
    ax, ay, aw, ah = (a.x, a.y, a.w, a.h) if isinstance(a, ScoredBox) else a[:4]
    bx, by, bw, bh = (b.x, b.y, b.w, b.h) if isinstance(b, ScoredBox) else b[:4]
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor boxes centred on a regular grid.

    Anchors sit at ((j + 0.5) * stride, (i + 0.5) * stride) for every feature
    cell (i, j), one per entry of ``anchor_shapes``.  Regression deltas
    (dx, dy, dw, dh) decode as centre offsets in units of the anchor size and
    log size ratios.
    """

    stride: int
    anchor_shapes: tuple

    @property
    def num_anchors(self):
        return len(self.anchor_shapes)

    def anchor_box(self, i, j, a):
        aw, ah = self.anchor_shapes[a]
        cx = (j + 0.5) * self.stride
        cy = (i + 0.5) * self.stride
        return (cx - aw / 2.0, cy - ah / 2.0, float(aw), float(ah))

    def anchor_array(self, feat_h, feat_w):
        """(feat_h, feat_w, A, 4) array of anchor (x, y, w, h)."""
        out = np.empty((feat_h, feat_w, self.num_anchors, 4), dtype=np.float64)
        for i in range(feat_h):
            for j in range(feat_w):
                for a in range(self.num_anchors):
                    out[i, j, a] = self.anchor_box(i, j, a)
        return out


def decode_detections(head_output, grid, score_floor):
    """Turn a detection head output into scored, clipped boxes.

    ``head_output`` is (A*6, H_f, W_f) or (1, A*6, H_f, W_f); per-anchor
    channels are 4 regression deltas then 2 class logits (background,
    target).  The score is the softmax target probability.  Boxes are
    clipped to the image (feature dims times stride); boxes with
    score < score_floor or empty clipped area are discarded.
    """
    arr = head_output.data if hasattr(head_output, "data") else np.asarray(head_output)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ConfigError(f"decode_detections expects one image, got batch {arr.shape[0]}")
        arr = arr[0]
    n_anchors = grid.num_anchors
    if arr.shape[0] != n_anchors * 6:
        raise ConfigError(
            f"head output has {arr.shape[0]} channels, expected {n_anchors} anchors x 6"
        )
    feat_h, feat_w = arr.shape[1], arr.shape[2]
    img_h = feat_h * grid.stride
    img_w = feat_w * grid.stride

    boxes = []
    for i in range(feat_h):
        for j in range(feat_w):
            for a in range(n_anchors):
                base = a * 6
                dx, dy, dw, dh = (float(arr[base + k, i, j]) for k in range(4))
                logit_bg = float(arr[base + 4, i, j])
                logit_fg = float(arr[base + 5, i, j])
                score = 1.0 / (1.0 + math.exp(min(max(logit_bg - logit_fg, -60.0), 60.0)))
                if score < score_floor:
                    continue
                ax, ay, aw, ah = grid.anchor_box(i, j, a)
                cx = ax + aw / 2.0 + dx * aw
                cy = ay + ah / 2.0 + dy * ah
                bw = aw * math.exp(min(dw, 10.0))
                bh = ah * math.exp(min(dh, 10.0))
                x0 = max(0.0, cx - bw / 2.0)
                y0 = max(0.0, cy - bh / 2.0)
                x1 = min(float(img_w), cx + bw / 2.0)
                y1 = min(float(img_h), cy + bh / 2.0)
                if x1 <= x0 or y1 <= y0:
                    continue
                boxes.append(ScoredBox(x0, y0, x1 - x0, y1 - y0, score))
    return boxes


def nms(boxes, iou_threshold):
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties by earlier input index);
    a box is suppressed when its IoU with any kept box is >= the threshold.
    """
    if not 0 < iou_threshold <= 1:
        raise ConfigError(f"nms threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = []
    for idx in order:
        candidate = boxes[idx]
        if all(box_iou(candidate, k) < iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def greedy_match(preds, gt_boxes, match_iou):
    """Greedy one-to-one matching of predictions (by descending score) to gt.

    Each prediction takes the unmatched gt with the highest IoU >= match_iou
    (ties toward the lower gt index).  Returns a bool array aligned with
    ``preds`` sorted by (-score, index): True where the prediction matched.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gt_boxes)
    matched = np.zeros(len(preds), dtype=bool)
    for idx in order:
        best_iou = -1.0
        best_gt = -1
        for gi, gt in enumerate(gt_boxes):
            if taken[gi]:
                continue
            iou = box_iou(preds[idx], gt)
            if iou >= match_iou and iou > best_iou:
                best_iou = iou
                best_gt = gi
        if best_gt >= 0:
            taken[best_gt] = True
            matched[idx] = True
    return matched


def fppi_missrate_curve(predictions, gt_boxes, match_iou=0.5):
    """FPPI / miss-rate trade-off curve over all distinct score thresholds.

    ``predictions`` is a per-image list of ScoredBox lists; ``gt_boxes`` is
    a per-image list of (x, y, w, h[, class]) rows.  Points dominated by a
    point with no larger FPPI and strictly lower miss rate are removed; the
    result is sorted by strictly increasing FPPI.
    """
    if not 0 < match_iou <= 1:
        raise ConfigError(f"match_iou must be in (0, 1], got {match_iou}")
    if len(predictions) != len(gt_boxes):
        raise ConfigError(
            f"prediction and ground-truth image counts differ: "
            f"{len(predictions)} vs {len(gt_boxes)}"
        )
    n_images = len(predictions)
    total_gt = sum(len(g) for g in gt_boxes)
    if total_gt == 0:
        raise EvalError("miss rate undefined: no ground-truth boxes in the evaluation set")

    # Greedy matching is prefix-consistent in score order, so one pass per
    # image determines the TP/FP status of every prediction at any threshold.
    scores = []
    is_match = []
    for preds, gts in zip(predictions, gt_boxes):
        matched = greedy_match(preds, gts, match_iou)
        for idx in range(len(preds)):
            scores.append(preds[idx].score)
            is_match.append(bool(matched[idx]))

    points = [(0.0, 1.0)]  # the empty-detector endpoint
    if scores:
        scores = np.array(scores)
        is_match = np.array(is_match)
        order = np.argsort(-scores, kind="stable")
        scores = scores[order]
        is_match = is_match[order]
        tp = np.cumsum(is_match)
        fp = np.cumsum(~is_match)
        for k in range(len(scores)):
            if k + 1 < len(scores) and scores[k + 1] == scores[k]:
                continue  # same threshold admits the whole tie group
            fppi = fp[k] / n_images
            miss = (total_gt - tp[k]) / total_gt
            points.append((float(fppi), float(miss)))

    kept = []
    for p in points:
        dominated = any(q[0] <= p[0] and q[1] < p[1] for q in points)
        if not dominated and p not in kept:
            kept.append(p)
    kept.sort()
    return kept


def log_average_miss_rate(curve, fppi_lo, fppi_hi):
    """Geometric mean of miss rates sampled at 9 log-spaced FPPI references.

    At each reference the miss rate of the largest curve FPPI <= the
    reference is used (the first point's miss rate if none); samples are
    clamped below at 1e-4.
    """
    if not curve:
        raise EvalError("cannot compute log-average miss rate of an empty curve")
    if not fppi_lo < fppi_hi:
        raise ConfigError(f"need fppi_lo < fppi_hi, got {fppi_lo} >= {fppi_hi}")
    refs = np.logspace(math.log10(fppi_lo), math.log10(fppi_hi), N_FPPI_REFERENCES)
    fppis = [p[0] for p in curve]
    misses = [p[1] for p in curve]
    samples = []
    for ref in refs:
        best = None
        for f, m in zip(fppis, misses):
            if f <= ref:
                best = m
            else:
                break
        samples.append(misses[0] if best is None else best)
    clamped = np.maximum(samples, MISS_RATE_CLAMP)
    return float(np.exp(np.mean(np.log(clamped))))


def sample_curve_at_references(curve, fppi_lo, fppi_hi):
    """The 9 miss-rate samples used by log_average_miss_rate (unclamped)."""
    refs = np.logspace(math.log10(fppi_lo), math.log10(fppi_hi), N_FPPI_REFERENCES)
    out = []
    for ref in refs:
        best = None
        for f, m in curve:
            if f <= ref:
                best = m
            else:
                break
        out.append(curve[0][1] if best is None else best)
    return out


def _as_map_list(maps):
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return [maps]
    return list(maps)


def iou_per_class(pred_maps, gt_maps, n_classes):
    """Pixel IoU per class accumulated over a test set.

    Classes absent from both prediction and ground truth everywhere are
    undefined and omitted from the result.
    """
    preds = _as_map_list(pred_maps)
    gts = _as_map_list(gt_maps)
    if len(preds) != len(gts):
        raise ConfigError(f"map counts differ: {len(preds)} vs {len(gts)}")
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        if pred.shape != gt.shape:
            raise ConfigError(f"map shape mismatch: {pred.shape} vs {gt.shape}")
        for c in range(n_classes):
            p = pred == c
            g = gt == c
            tp[c] += int(np.sum(p & g))
            fp[c] += int(np.sum(p & ~g))
            fn[c] += int(np.sum(~p & g))
    result = {}
    for c in range(n_classes):
        denom = tp[c] + fp[c] + fn[c]
        if denom == 0:
            continue  # class absent everywhere: undefined
        result[c] = float(tp[c] / denom)
    return result


def detection_rate(pred_maps, instance_maps, target_class):
    """Eq.-style instance Detection Rate.

    For each ground-truth instance, the covered fraction is the share of its
    pixels predicted as ``target_class``.  An instance counts as detected at
    threshold S when its fraction is >= S; thresholds sweep 0.1 .. 0.9 in
    steps of 0.1.  Returns (average over thresholds, the 9 per-threshold
    rates).
    """
    preds = _as_map_list(pred_maps)
    insts = _as_map_list(instance_maps)
    if len(preds) != len(insts):
        raise ConfigError(f"map counts differ: {len(preds)} vs {len(insts)}")
    fractions = []
    for pred, inst in zip(preds, insts):
        if pred.shape != inst.shape:
            raise ConfigError(f"map shape mismatch: {pred.shape} vs {inst.shape}")
        hit = pred == target_class
        for inst_id in np.unique(inst):
            if inst_id == 0:
                continue
            region = inst == inst_id
            fractions.append(float(np.sum(hit & region) / np.sum(region)))
    if not fractions:
        raise EvalError("Detection Rate undefined: no ground-truth instances")
    fractions = np.array(fractions)
    by_threshold = [float(np.mean(fractions >= s)) for s in DETECTION_RATE_THRESHOLDS]
    return float(np.mean(by_threshold)), by_threshold


@dataclass
class MetricReport:
    """Bundle of evaluation results; unavailable metrics stay None."""

    curve: list | None = None
    lamr: float | None = None
    iou: dict | None = None
    detection_rate_avg: float | None = None
    detection_rate_by_threshold: list | None = None
    extras: dict = field(default_factory=dict)

    def validate(self):
        if self.curve is not None:
            fppis = [p[0] for p in self.curve]
            if any(b <= a for a, b in zip(fppis, fppis[1:])):
                raise EvalError("curve FPPI values must be strictly increasing")
            for f, m in self.curve:
                if not 0 <= m <= 1 or f < 0:
                    raise EvalError(f"curve point ({f}, {m}) out of range")

    def summary_rows(self):
        rows = []
        if self.lamr is not None:
            rows.append(("lamr", self.lamr))
        if self.iou is not None:
            for c in sorted(self.iou):
                rows.append((f"iou_class_{c}", self.iou[c]))
        if self.detection_rate_avg is not None:
            rows.append(("detection_rate_avg", self.detection_rate_avg))
            for s, v in zip(DETECTION_RATE_THRESHOLDS, self.detection_rate_by_threshold):
                rows.append((f"detection_rate_at_{s:.1f}", v))
        for key in sorted(self.extras):
            rows.append((key, self.extras[key]))
        return rows

    def write_summary_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("metric,value\n")
            for name, value in self.summary_rows():
                fh.write(f"{name},{format_float(value)}\n")

    def write_curve_csv(self, path):
        if self.curve is None:
            raise ConfigError("report has no curve to write")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("fppi,miss_rate\n")
            for f, m in self.curve:
                fh.write(f"{format_float(f)},{format_float(m)}\n")


def format_float(value):
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)

"""Detection metrics: FROC sensitivities at fixed FP-per-image rates and
single-class average precision at IoU 0.5.

Matching is greedy in global score order; each ground-truth box is matched
at most once. Score ties are processed as one threshold group, making all
metrics invariant to input ordering and to strictly increasing score
transforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .anchors import iou_matrix

FP_RATES_DEFAULT = (0.5, 1.0, 2.0, 4.0)


def iou(a, b):
    """IoU of two (x1, y1, x2, y2) boxes; degenerate boxes give 0."""
    return float(iou_matrix(np.asarray(a).reshape(1, 4), np.asarray(b).reshape(1, 4))[0, 0])


@dataclass
class MatchResult:
    """Flat per-prediction records, sorted by descending score."""
    scores: np.ndarray        # [n]
    is_tp: np.ndarray         # [n] bool
    image_ids: list           # [n]
    num_images: int
    num_gts: int


def match_detections(preds_by_image, gts_by_image, iou_thresh=0.5):
    """Greedy TP/FP flagging.

    preds_by_image: {image_id: list of (score, box)};
    gts_by_image: {image_id: list of boxes}. Predictions are visited in
    global descending score order; a prediction is a TP if its best
    still-unmatched GT in the same image has IoU >= iou_thresh.
    """
    flat = []
    for img, preds in preds_by_image.items():
        for k, (score, box) in enumerate(preds):
            flat.append((float(score), img, k, box))
    flat.sort(key=lambda t: (-t[0], str(t[1]), t[2]))
    used = {img: np.zeros(len(gts), dtype=bool) for img, gts in gts_by_image.items()}
    scores, is_tp, image_ids = [], [], []
    for score, img, _, box in flat:
        gts = gts_by_image.get(img, [])
        matched = False
        if len(gts):
            ious = iou_matrix(np.asarray(box).reshape(1, 4), np.asarray(gts))[0]
            ious[used[img]] = -1.0
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh:
                used[img][j] = True
                matched = True
        scores.append(score)
        is_tp.append(matched)
        image_ids.append(img)
    num_images = len(set(gts_by_image) | set(preds_by_image))
    num_gts = sum(len(g) for g in gts_by_image.values())
    return MatchResult(np.asarray(scores, dtype=np.float64), np.asarray(is_tp, dtype=bool),
                       image_ids, num_images, num_gts)


def _threshold_groups(scores, is_tp):
    """Cumulative TP/FP counts after each distinct-score group (descending)."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = is_tp[order].astype(np.int64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1 - tp)
    # keep only the last entry of each tied-score run
    if len(s) == 0:
        return np.array([]), np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    last = np.ones(len(s), dtype=bool)
    last[:-1] = s[:-1] != s[1:]
    return s[last], cum_tp[last], cum_fp[last]


def froc_sensitivity(scores, is_tp, num_images, num_gts, fp_rates=FP_RATES_DEFAULT):
    """Sensitivity at each FP-per-image rate: the step-curve value at the
    largest threshold whose FP rate does not exceed the target (no
    interpolation)."""
    if num_images < 1 or num_gts < 1:
        raise ValueError("num_images and num_gts must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    _, cum_tp, cum_fp = _threshold_groups(scores, is_tp)
    out = {}
    for rate in fp_rates:
        ok = cum_fp / num_images <= rate
        out[float(rate)] = float(cum_tp[ok].max(initial=0) / num_gts)
    return out


def average_precision(scores, is_tp, num_gts):
    """All-points interpolated AP: area under the precision envelope."""
    if num_gts < 1:
        raise ValueError("num_gts must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    _, cum_tp, cum_fp = _threshold_groups(scores, is_tp)
    if len(cum_tp) == 0:
        return 0.0
    recall = cum_tp / num_gts
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope: max precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def pr_curve(scores, is_tp, num_gts):
    """(recall, precision) step points for reporting/plotting."""
    _, cum_tp, cum_fp = _threshold_groups(np.asarray(scores, dtype=np.float64),
                                          np.asarray(is_tp, dtype=bool))
    if len(cum_tp) == 0:
        return np.array([]), np.array([])
    return cum_tp / num_gts, cum_tp / (cum_tp + cum_fp)


def froc_curve(scores, is_tp, num_images, num_gts):
    """(fp_per_image, sensitivity) step points for reporting/plotting."""
    _, cum_tp, cum_fp = _threshold_groups(np.asarray(scores, dtype=np.float64),
                                          np.asarray(is_tp, dtype=bool))
    if len(cum_tp) == 0:
        return np.array([]), np.array([])
    return cum_fp / num_images, cum_tp / num_gts


@dataclass
class EvalReport:
    sensitivity_at_fps: dict
    ap_at_05: float
    num_images: int
    num_gts: int
    num_predictions: int
    per_image: dict = field(default_factory=dict)

    def __post_init__(self):
        rates = sorted(self.sensitivity_at_fps)
        sens = [self.sensitivity_at_fps[r] for r in rates]
        if any(b < a - 1e-12 for a, b in zip(sens, sens[1:])):
            raise ValueError("sensitivities must be nondecreasing in FP rate")
        for v in list(self.sensitivity_at_fps.values()) + [self.ap_at_05]:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"metric value {v} outside [0, 1]")

    def to_json(self):
        return json.dumps({
            "sensitivity_at_fps": {str(k): v for k, v in sorted(self.sensitivity_at_fps.items())},
            "ap_at_05": self.ap_at_05,
            "num_images": self.num_images,
            "num_gts": self.num_gts,
            "num_predictions": self.num_predictions,
            "per_image": self.per_image,
        }, indent=2)

    def summary_csv(self):
        rates = sorted(self.sensitivity_at_fps)
        header = ",".join([f"sens_at_{r:g}" for r in rates] + ["ap_at_05"])
        values = ",".join([f"{self.sensitivity_at_fps[r]:.6f}" for r in rates]
                          + [f"{self.ap_at_05:.6f}"])
        return header + "\n" + values + "\n"


def evaluate(preds_by_image, gts_by_image, iou_thresh=0.5,
             fp_rates=FP_RATES_DEFAULT) -> EvalReport:
    """Full metric suite from per-image predictions and ground truth."""
    m = match_detections(preds_by_image, gts_by_image, iou_thresh=iou_thresh)
    if m.num_gts == 0:
        raise ValueError("evaluation requires at least one ground-truth box")
    sens = froc_sensitivity(m.scores, m.is_tp, m.num_images, m.num_gts, fp_rates)
    ap = average_precision(m.scores, m.is_tp, m.num_gts)
    per_image = {}
    for img, score, tp in zip(m.image_ids, m.scores, m.is_tp):
        rec = per_image.setdefault(str(img), {"tp": 0, "fp": 0})
        rec["tp" if tp else "fp"] += 1
    return EvalReport(sensitivity_at_fps=sens, ap_at_05=ap, num_images=m.num_images,
                      num_gts=m.num_gts, num_predictions=len(m.scores), per_image=per_image)

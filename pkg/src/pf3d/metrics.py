"""Distance-threshold average precision for 3-D detections.

A prediction matches a ground-truth box when their BEV (x, y) center
distance is within the threshold; matching is greedy in descending score
order, each ground truth usable once.  AP is the area under the
interpolated precision-recall curve sampled at evenly spaced recall
points, averaged over thresholds and then over classes present in the
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diagnostics import counters
from .synthscene import CLASS_NAMES
from .tensor import ContractError


@dataclass
class EvalConfig:
    thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    recall_samples: int = 101

    def __post_init__(self):
        t = tuple(self.thresholds)
        if not t or any(a <= 0 for a in t) or any(
            t[i] >= t[i + 1] for i in range(len(t) - 1)
        ):
            raise ContractError(f"thresholds must be positive ascending, got {t}")
        self.thresholds = t


def _interpolated_ap(scores, flags, total_gt: int, samples: int) -> float:
    """Greedy-match outcomes -> interpolated AP.

    ``scores``/``flags`` are per-prediction (already sorted by descending
    score), flags True for true positives.
    """
    if total_gt == 0:
        return 0.0
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / total_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, samples):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / samples


def _match_class(preds, gts_by_scene, threshold: float):
    """Greedy matching for one (class, threshold); returns TP flags aligned
    with ``preds`` (already sorted by descending score)."""
    taken = {sid: np.zeros(len(g), dtype=bool) for sid, g in gts_by_scene.items()}
    flags = np.zeros(len(preds), dtype=bool)
    for n, (sid, _score, xy) in enumerate(preds):
        gts = gts_by_scene.get(sid)
        if gts is None or not len(gts):
            continue
        free = ~taken[sid]
        if not free.any():
            continue
        d = np.hypot(gts[:, 0] - xy[0], gts[:, 1] - xy[1])
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= threshold:
            taken[sid][j] = True
            flags[n] = True
    return flags


def evaluate_map(
    predictions: dict, ground_truths: dict, cfg: EvalConfig | None = None
) -> dict:
    """nuScenes-style mAP over {scene_id: [Detection]} and {scene_id: [GtBox]}.

    Classes absent from the ground truth are excluded from the mean and
    counted in the ``metrics.skipped_classes`` diagnostic.
    """
    cfg = cfg or EvalConfig()
    per_class: dict = {}
    skipped: list = []
    n_classes = len(CLASS_NAMES)

    for cls in range(n_classes):
        gts_by_scene = {}
        total_gt = 0
        for sid, boxes in ground_truths.items():
            sel = np.array(
                [[b.x, b.y] for b in boxes if b.class_id == cls], dtype=np.float64
            ).reshape(-1, 2)
            gts_by_scene[sid] = sel
            total_gt += len(sel)
        name = CLASS_NAMES[cls]
        if total_gt == 0:
            skipped.append(name)
            counters.add("metrics.skipped_classes")
            continue
        preds = []
        for sid in sorted(predictions):
            for det in predictions[sid]:
                if det.class_id == cls:
                    preds.append((sid, det.score, (det.box[0], det.box[1])))
        # descending score; insertion order breaks ties deterministically
        preds.sort(key=lambda p: -p[1])
        ap_per_thr = {}
        for thr in cfg.thresholds:
            flags = _match_class(preds, gts_by_scene, thr)
            ap_per_thr[thr] = _interpolated_ap(
                [p[1] for p in preds], flags, total_gt, cfg.recall_samples
            )
        per_class[name] = {
            "ap_per_threshold": ap_per_thr,
            "ap": float(np.mean(list(ap_per_thr.values()))),
        }

    m_ap = float(np.mean([v["ap"] for v in per_class.values()])) if per_class else 0.0
    return {"per_class": per_class, "mAP": m_ap, "skipped_classes": skipped}

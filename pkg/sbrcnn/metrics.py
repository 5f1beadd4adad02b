"""
COCO-style average precision for boxes and masks

Greedy score-ordered matching per (image, category), 101-point interpolated
precision over IoU thresholds 0.50:0.05:0.95, and size strata by gt area.
Strata or categories without any gt are reported as -1 and left out of means.
"""
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from sbrcnn.exceptions import InvalidInputError
from sbrcnn.geometry import box_iou
from sbrcnn.r3cnn import InstancePrediction
from sbrcnn.schemas import DatasetManifest, EvalResult
from sbrcnn.synthdata import annotation_box, rle_decode

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100

AREA_RANGES: Dict[str, Tuple[float, float]] = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, 1e10),
}


@dataclass
class _ImageEval:
    dt_scores: np.ndarray  # (D,)
    dt_matched: np.ndarray  # (T, D) bool
    dt_ignore: np.ndarray  # (T, D) bool
    gt_ignore: np.ndarray  # (G,) bool


def box_iou_matrix(dt_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    if len(dt_boxes) == 0 or len(gt_boxes) == 0:
        return np.zeros((len(dt_boxes), len(gt_boxes)))
    ious = box_iou(torch.as_tensor(dt_boxes, dtype=torch.float64), torch.as_tensor(gt_boxes, dtype=torch.float64))
    return ious.numpy()


def mask_iou_matrix(dt_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    if len(dt_masks) == 0 or len(gt_masks) == 0:
        return np.zeros((len(dt_masks), len(gt_masks)))
    d = dt_masks.reshape(len(dt_masks), -1).astype(np.float64)
    g = gt_masks.reshape(len(gt_masks), -1).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1.0), 0.0)


def match_image(
    ious: np.ndarray,
    dt_scores: np.ndarray,
    dt_areas: np.ndarray,
    gt_areas: np.ndarray,
    area_range: Tuple[float, float],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = MAX_DETS,
) -> Optional[_ImageEval]:
    """
    Greedy matching of one image and category

    Detections are visited by decreasing score (stable), each taking the
    unmatched gt of highest IoU above the threshold; gts outside the area
    range are ignored, as are unmatched detections outside it.

    Args:
        ious: (D, G) IoU matrix
        dt_scores: (D,)
        dt_areas: (D,)
        gt_areas: (G,)
        area_range: [lo, hi] gt area range

    Returns:
        Per-threshold match flags, or None when there are no gts and no detections
    """
    num_dt, num_gt = ious.shape
    if num_dt == 0 and num_gt == 0:
        return None
    lo, hi = area_range
    gt_ignore_raw = (gt_areas < lo) | (gt_areas > hi)
    gt_order = np.argsort(gt_ignore_raw, kind="mergesort")
    gt_ignore = gt_ignore_raw[gt_order]
    dt_order = np.argsort(-dt_scores, kind="mergesort")[:max_dets]
    ious = ious[dt_order][:, gt_order] if num_gt else ious[dt_order]
    scores = dt_scores[dt_order]
    areas = dt_areas[dt_order]

    num_t = len(iou_thresholds)
    d = len(dt_order)
    gt_taken = np.zeros((num_t, num_gt), dtype=bool)
    dt_matched = np.zeros((num_t, d), dtype=bool)
    dt_ignore = np.zeros((num_t, d), dtype=bool)
    for ti, thr in enumerate(iou_thresholds):
        for di in range(d):
            best = min(thr, 1 - 1e-10)
            m = -1
            for gi in range(num_gt):
                if gt_taken[ti, gi]:
                    continue
                # a match on a regular gt is never traded for an ignored one
                if m > -1 and not gt_ignore[m] and gt_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best = ious[di, gi]
                m = gi
            if m == -1:
                continue
            gt_taken[ti, m] = True
            dt_matched[ti, di] = True
            dt_ignore[ti, di] = gt_ignore[m]
    outside = (areas < lo) | (areas > hi)
    dt_ignore |= ~dt_matched & outside[None, :]
    return _ImageEval(dt_scores=scores, dt_matched=dt_matched, dt_ignore=dt_ignore, gt_ignore=gt_ignore)


def accumulate(evals: Sequence[_ImageEval], recall_thresholds: np.ndarray = RECALL_THRESHOLDS) -> np.ndarray:
    """
    Interpolated precision of one category and area range

    Returns:
        (T, R) precision, or a (T, R) array of -1 when there is no regular gt
    """
    evals = [e for e in evals if e is not None]
    num_t = len(IOU_THRESHOLDS) if not evals else evals[0].dt_matched.shape[0]
    precision = -np.ones((num_t, len(recall_thresholds)))
    if not evals:
        return precision
    num_pos = int(sum(np.count_nonzero(~e.gt_ignore) for e in evals))
    if num_pos == 0:
        return precision
    scores = np.concatenate([e.dt_scores for e in evals])
    order = np.argsort(-scores, kind="mergesort")
    matched = np.concatenate([e.dt_matched for e in evals], axis=1)[:, order]
    ignore = np.concatenate([e.dt_ignore for e in evals], axis=1)[:, order]
    tps = np.cumsum(matched & ~ignore, axis=1).astype(np.float64)
    fps = np.cumsum(~matched & ~ignore, axis=1).astype(np.float64)

    for t in range(num_t):
        tp, fp = tps[t], fps[t]
        recall = tp / num_pos
        prec = (tp / (tp + fp + np.spacing(1))).tolist()
        # precision envelope
        for i in range(len(prec) - 1, 0, -1):
            if prec[i] > prec[i - 1]:
                prec[i - 1] = prec[i]
        q = np.zeros(len(recall_thresholds))
        idx = np.searchsorted(recall, recall_thresholds, side="left")
        try:
            for ri, pi in enumerate(idx):
                q[ri] = prec[pi]
        except IndexError:
            pass
        precision[t] = q
    return precision


def _mean_valid(values: np.ndarray) -> float:
    valid = values[values > -1]
    return float(valid.mean()) if valid.size else -1.0


def _gt_arrays(manifest: DatasetManifest, task: str):
    """Per (image, category): gt boxes, areas and masks (masks only for segm)"""
    gts: Dict[Tuple[int, int], dict] = {}
    for ann in manifest.annotations:
        entry = gts.setdefault((ann.image_id, ann.category_id), {"boxes": [], "areas": [], "masks": []})
        entry["boxes"].append(list(annotation_box(ann)))
        entry["areas"].append(float(ann.area))
        if task == "segm":
            entry["masks"].append(rle_decode(ann.segmentation))
    return gts


def evaluate(
    predictions: Mapping[int, Sequence[InstancePrediction]],
    manifest: DatasetManifest,
    task: Literal["bbox", "segm"] = "bbox",
    max_dets: int = MAX_DETS,
) -> EvalResult:
    """
    AP, AP50, AP75 and size-stratified AP of predictions against a manifest

    Args:
        predictions: image id -> predictions for that image
        manifest: Ground truth
        task: "bbox" matches by box IoU, "segm" by mask IoU
        max_dets: Detections kept per image and category, by score

    Returns:
        EvalResult with per-class AP keyed by category name
    """
    if task not in ("bbox", "segm"):
        raise InvalidInputError(f"unknown task {task!r}")
    image_ids = [img.id for img in manifest.images]
    known = set(image_ids)
    unknown = sorted(set(predictions) - known)
    if unknown:
        raise InvalidInputError(f"predictions reference unknown image ids {unknown[:5]}")

    gts = _gt_arrays(manifest, task)
    categories = [c.id for c in manifest.categories]
    area_names = list(AREA_RANGES)
    # precision[k][a] -> (T, R)
    precision = np.full((len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS), len(categories), len(area_names)), -1.0)

    for ki, cat in enumerate(categories):
        per_area: Dict[str, List[Optional[_ImageEval]]] = {a: [] for a in area_names}
        for image_id in image_ids:
            gt = gts.get((image_id, cat))
            dts = [p for p in predictions.get(image_id, []) if p.label == cat]
            if gt is None and not dts:
                continue
            gt_boxes = np.asarray(gt["boxes"] if gt else np.zeros((0, 4)), dtype=np.float64).reshape(-1, 4)
            gt_areas = np.asarray(gt["areas"] if gt else [], dtype=np.float64)
            dt_boxes = np.asarray([list(p.box) for p in dts], dtype=np.float64).reshape(-1, 4)
            if task == "bbox":
                dt_scores = np.asarray([p.score for p in dts], dtype=np.float64)
                dt_areas = np.asarray([p.box.area for p in dts], dtype=np.float64)
                ious = box_iou_matrix(dt_boxes, gt_boxes)
            else:
                if any(p.mask is None for p in dts):
                    raise InvalidInputError(f"segm evaluation needs masks (image {image_id})")
                dt_scores = np.asarray(
                    [p.mask_score if p.mask_score is not None else p.score for p in dts], dtype=np.float64
                )
                dt_masks = np.asarray([p.mask for p in dts], dtype=bool)
                gt_masks = np.asarray(gt["masks"], dtype=bool) if gt else np.zeros((0,) + dt_masks.shape[1:], bool)
                dt_areas = dt_masks.reshape(len(dts), -1).sum(1).astype(np.float64) if dts else np.zeros(0)
                ious = mask_iou_matrix(dt_masks, gt_masks)
            for name in area_names:
                per_area[name].append(
                    match_image(ious, dt_scores, dt_areas, gt_areas, AREA_RANGES[name], IOU_THRESHOLDS, max_dets)
                )
        for ai, name in enumerate(area_names):
            precision[:, :, ki, ai] = accumulate(per_area[name])

    def stratum(area: str, t_index: Optional[int] = None) -> float:
        p = precision[:, :, :, area_names.index(area)]
        if t_index is not None:
            p = p[t_index]
        return _mean_valid(p)

    t50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    t75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    names = {c.id: c.name for c in manifest.categories}
    per_class = {
        names[cat]: _mean_valid(precision[:, :, ki, 0]) for ki, cat in enumerate(categories)
    }
    return EvalResult(
        task=task,
        ap=stratum("all"),
        ap50=stratum("all", t50),
        ap75=stratum("all", t75),
        ap_s=stratum("small"),
        ap_m=stratum("medium"),
        ap_l=stratum("large"),
        per_class=per_class,
    )

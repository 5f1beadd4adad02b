"""
Loop engine

One detection head and one mask head (per head pair) are applied repeatedly:
loop t assigns labels to the current boxes at threshold u^t, trains the heads
on a sample of them, and feeds the refined boxes to loop t+1. Inference runs
L_e loops and averages the classification scores.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align as tv_roi_align

from sbrcnn.exceptions import InvalidInputError
from sbrcnn.geometry import (
    Box,
    assign_labels,
    batched_nms,
    decode_deltas,
    encode_deltas,
    sample_proposals,
)
from sbrcnn.heads import DetectionHead, MaskHead, MaskIoUHead, mask_iou_targets
from sbrcnn.loops import alternation_select, pair_index, threshold_schedule
from sbrcnn.nets import BackboneFPN, FeaturePyramid, RegionProposalNetwork
from sbrcnn.roi_extract import build_roi_extractor
from sbrcnn.schemas import LoopConfig, LoopTrace, ModelConfig

logger = structlog.get_logger(__name__)

MASK_SIZE = 28

__all__ = [
    "InstancePrediction",
    "SBRCNN",
    "alternation_select",
    "average_scores",
    "detection_loss",
    "eval_pair",
    "infer",
    "mask_targets",
    "paste_masks",
    "threshold_schedule",
    "train_step",
    "weighted_loop_total",
]


@dataclass
class InstancePrediction:
    label: int
    score: float
    box: Box
    mask: Optional[np.ndarray] = None  # (H, W) bool at image resolution
    mask_score: Optional[float] = None  # ranks masks; falls back to score


@dataclass
class StepResult:
    """Output of one training step"""
    total: torch.Tensor
    losses: Dict[str, torch.Tensor]
    trace: LoopTrace = field(default_factory=LoopTrace)
    loop_losses: List[torch.Tensor] = field(default_factory=list)  # unweighted L^t, mean over images


def weighted_loop_total(loop_losses: Sequence[torch.Tensor], weights: Sequence[float]) -> torch.Tensor:
    """Sum over loops of alpha_t * L^t"""
    if len(loop_losses) != len(weights):
        raise InvalidInputError(f"{len(loop_losses)} loop losses for {len(weights)} weights")
    total = None
    for loss, alpha in zip(loop_losses, weights):
        term = loss * alpha
        total = term if total is None else total + term
    return total


def average_scores(per_loop: Sequence[torch.Tensor]) -> torch.Tensor:
    """Arithmetic mean of per-loop class probabilities"""
    if not per_loop:
        raise InvalidInputError("need at least one loop of scores")
    return torch.stack(list(per_loop)).mean(dim=0)


def eval_pair(t: int, loop: LoopConfig) -> str:
    """Head pair used by evaluation loop t, which may exceed the trained loop count"""
    if loop.eval_alternation == "last" and t > len(loop.alternation):
        return loop.alternation[-1]
    return alternation_select(t, loop.alternation)


def detection_loss(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    rois: torch.Tensor,
    labels: torch.Tensor,
    matched_boxes: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Cross entropy over all sampled RoIs and smooth-L1 on the positives' class slice

    Args:
        logits: (n, K+1)
        deltas: (n, K, 4)
        rois: (n, 4) boxes the deltas refer to
        labels: (n,) 0 = background
        matched_boxes: (n, 4) gt box per RoI, ignored for background

    Returns:
        (classification loss, localization loss); the latter is 0 without positives
    """
    n = labels.shape[0]
    if n == 0:
        zero = logits.sum() * 0.0
        return zero, deltas.sum() * 0.0
    cls_loss = F.cross_entropy(logits, labels)
    pos = torch.nonzero(labels > 0).flatten()
    if pos.numel() == 0:
        return cls_loss, deltas.sum() * 0.0
    target = encode_deltas(rois[pos], matched_boxes[pos])
    pred = deltas[pos, labels[pos] - 1]
    loc_loss = F.smooth_l1_loss(pred, target, beta=1.0, reduction="sum") / max(1, n)
    return cls_loss, loc_loss


def mask_targets(gt_masks: torch.Tensor, matched: torch.Tensor, rois: torch.Tensor, size: int = MASK_SIZE) -> torch.Tensor:
    """
    Crop each matched gt mask to its RoI, resample to size x size and binarize at 0.5

    Args:
        gt_masks: (G, H, W) binary masks
        matched: (n,) gt index per RoI
        rois: (n, 4) boxes

    Returns:
        (n, size, size) float targets in {0, 1}
    """
    if rois.shape[0] == 0:
        return rois.new_zeros((0, size, size))
    masks = gt_masks[:, None].to(rois.dtype)
    boxes = torch.cat([matched[:, None].to(rois.dtype), rois], dim=1)
    out = tv_roi_align(masks, boxes, output_size=(size, size), spatial_scale=1.0, sampling_ratio=2, aligned=True)
    return (out[:, 0] >= 0.5).to(rois.dtype)


def paste_masks(
    masks: torch.Tensor,
    boxes: torch.Tensor,
    image_size: Tuple[int, int],
    threshold: float = 0.5,
) -> torch.Tensor:
    """
    Resize per-box mask probabilities into full-image binary masks

    Args:
        masks: (n, S, S) probabilities
        boxes: (n, 4) boxes in image coordinates
        image_size: (height, width)

    Returns:
        (n, H, W) bool
    """
    h, w = image_size
    out = torch.zeros((masks.shape[0], h, w), dtype=torch.bool, device=masks.device)
    for i in range(masks.shape[0]):
        x1, y1, x2, y2 = boxes[i].tolist()
        x1, y1 = max(int(np.floor(x1)), 0), max(int(np.floor(y1)), 0)
        x2, y2 = min(int(np.ceil(x2)), w), min(int(np.ceil(y2)), h)
        if x2 <= x1 or y2 <= y1:
            continue
        resized = F.interpolate(masks[i][None, None], size=(y2 - y1, x2 - x1), mode="bilinear", align_corners=False)
        out[i, y1:y2, x1:x2] = resized[0, 0] >= threshold
    return out


def _single_image(pyramid: FeaturePyramid, i: int) -> List[torch.Tensor]:
    return [level[i : i + 1] for level in pyramid.levels]


class SBRCNN(nn.Module):
    """
    Backbone + FPN + RPN + looped heads

    Head pair ``a`` is index 0 of ``det_heads``/``mask_heads``; with H = 1 every
    loop runs the very same modules.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.fpn_channels
        num_pairs = cfg.loop.num_head_pairs
        num_levels = len(cfg.anchor.strides)
        self.neck = BackboneFPN(cfg.image_channels, cfg.backbone_width, c)
        self.rpn = RegionProposalNetwork(c, cfg.anchor, cfg.rpn)
        self.bbox_extractor = build_roi_extractor(cfg.bbox_roi_extractor, c, 7, num_levels, cfg.head.nl_reduction)
        self.mask_extractor = build_roi_extractor(cfg.mask_roi_extractor, c, 14, num_levels, cfg.head.nl_reduction)
        self.det_heads = nn.ModuleList([DetectionHead(cfg.head, in_channels=c) for _ in range(num_pairs)])
        self.mask_heads = nn.ModuleList([MaskHead(c, cfg.head.num_classes) for _ in range(num_pairs)])
        if cfg.head.maskiou_enabled:
            self.maskiou_heads = nn.ModuleList([MaskIoUHead(cfg.head, in_channels=c) for _ in range(num_pairs)])
        else:
            self.maskiou_heads = None

    @property
    def loop(self) -> LoopConfig:
        return self.cfg.loop

    def head_pair(self, pair_id: str) -> Tuple[DetectionHead, MaskHead, Optional[MaskIoUHead]]:
        idx = pair_index(pair_id)
        if not 0 <= idx < len(self.det_heads):
            raise InvalidInputError(f"head pair {pair_id!r} does not exist (H={len(self.det_heads)})")
        maskiou = self.maskiou_heads[idx] if self.maskiou_heads is not None else None
        return self.det_heads[idx], self.mask_heads[idx], maskiou

    def forward(self, images: Sequence[torch.Tensor], targets: Optional[List[dict]] = None, **kwargs):
        if self.training:
            if targets is None:
                raise InvalidInputError("training forward needs targets")
            return train_step(self, images, targets, **kwargs)
        return infer(self, images, **kwargs)


def _stack(images: Sequence[torch.Tensor]) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images[None]
    sizes = {tuple(img.shape) for img in images}
    if len(sizes) != 1:
        raise InvalidInputError(f"images in a batch must share a shape, got {sorted(sizes)}")
    return torch.stack(list(images))


def _loop_losses_single(
    model: SBRCNN,
    levels: List[torch.Tensor],
    strides: Sequence[int],
    proposals: torch.Tensor,
    target: dict,
    image_size: Tuple[int, int],
    generator: torch.Generator,
    trace: LoopTrace,
) -> List[torch.Tensor]:
    """Per-loop unweighted losses L^t of one image"""
    cfg = model.cfg
    loop = cfg.loop
    gt_boxes = target["boxes"].to(proposals.dtype)
    gt_labels = target["labels"]
    gt_masks = target["masks"]
    num_gt = gt_boxes.shape[0]
    boxes = proposals
    loop_losses = []

    for t in range(1, loop.train_loops + 1):
        det_head, mask_head, maskiou_head = model.head_pair(alternation_select(t, loop.alternation))
        u = loop.thresholds[t - 1]

        if cfg.sampler.add_gt_as_proposals and num_gt:
            candidates = torch.cat([gt_boxes, boxes])
            from_gt = torch.arange(candidates.shape[0], device=boxes.device) < num_gt
        else:
            candidates = boxes
            from_gt = torch.zeros(candidates.shape[0], dtype=torch.bool, device=boxes.device)
        assignment = assign_labels(candidates, gt_boxes, gt_labels, u)
        idx = sample_proposals(assignment, cfg.sampler.num_rois, cfg.sampler.pos_fraction, generator=generator)
        rois = candidates[idx]
        labels = assignment.labels[idx]
        matched = assignment.matched_gt_index[idx]
        matched_iou = assignment.matched_iou[idx]
        matched_boxes = gt_boxes[matched.clamp(min=0)] if num_gt else torch.zeros_like(rois)

        feats = model.bbox_extractor(levels, strides, rois)
        logits, deltas = det_head(feats)
        cls_loss, loc_loss = detection_loss(logits, deltas, rois, labels, matched_boxes)
        terms = {"cls": cls_loss, "loc": loop.loc_weight * loc_loss}

        pos = torch.nonzero(labels > 0).flatten()
        if pos.numel():
            pos_rois = rois[pos]
            pos_labels = labels[pos]
            mask_feats = model.mask_extractor(levels, strides, pos_rois)
            mask_logits = mask_head(mask_feats, t)
            selected = mask_logits[torch.arange(pos.numel(), device=pos.device), pos_labels - 1]
            targets_t = mask_targets(gt_masks, matched[pos], pos_rois)
            terms["mask"] = F.binary_cross_entropy_with_logits(selected, targets_t)
            if maskiou_head is not None:
                probs = torch.sigmoid(selected).detach()
                pred_iou = maskiou_head(mask_feats, probs[:, None])
                pred_iou = pred_iou[torch.arange(pos.numel(), device=pos.device), pos_labels - 1]
                terms["maskiou"] = F.mse_loss(pred_iou, mask_iou_targets(probs, targets_t))
        else:
            logger.debug("loop_without_positives", loop=t, threshold=u, candidates=int(candidates.shape[0]))
            terms["mask"] = sum(p.sum() for p in mask_head.parameters()) * 0.0
            if maskiou_head is not None:
                terms["maskiou"] = sum(p.sum() for p in maskiou_head.parameters()) * 0.0

        loop_loss = sum(terms.values())
        loop_losses.append(loop_loss)
        trace.record(
            loop=t,
            threshold=u,
            positive_ious=matched_iou[pos].detach().cpu().tolist(),
            negatives=int((labels == 0).sum()),
            losses={k: float(v.detach()) for k, v in terms.items()},
        )

        if t < loop.train_loops:
            with torch.no_grad():
                fg = logits[:, 1:].argmax(dim=1)
                cls_sel = torch.where(labels > 0, labels - 1, fg)
                refined = decode_deltas(
                    rois, deltas[torch.arange(rois.shape[0], device=rois.device), cls_sel], max_shape=image_size
                )
                refined = refined[~from_gt[idx]]
                refined = torch.unique(refined, dim=0)
                keep = (refined[:, 2] > refined[:, 0]) & (refined[:, 3] > refined[:, 1])
                boxes = refined[keep]
    return loop_losses


def train_step(
    model: SBRCNN,
    images: Sequence[torch.Tensor],
    targets: List[dict],
    generator: Optional[torch.Generator] = None,
) -> StepResult:
    """
    Losses of one batch

    total = mean over images of sum_t alpha_t L^t, plus the RPN losses, where
    L^t = L_cls + loc_weight * L_loc + L_mask (+ L_maskiou).

    Args:
        model: Model in training mode
        images: (C, H, W) tensors of one shared size
        targets: Per image dict with boxes (G, 4), labels (G,), masks (G, H, W)
        generator: Random source for anchor and RoI sampling

    Returns:
        StepResult with the total, the named loss terms, the step's LoopTrace and
        the unweighted per-loop losses
    """
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0)
    loop = model.cfg.loop
    batch = _stack(images)
    image_size = (batch.shape[-2], batch.shape[-1])
    pyramid = model.neck(batch)
    gt_boxes = [t["boxes"].to(batch.dtype) for t in targets]
    proposals, rpn_losses = model.rpn(pyramid, gt_boxes, generator, image_size)

    trace = LoopTrace()
    per_image, per_loop = [], []
    for i, target in enumerate(targets):
        loop_losses = _loop_losses_single(
            model, _single_image(pyramid, i), pyramid.strides, proposals[i].boxes, target, image_size, generator, trace
        )
        per_image.append(weighted_loop_total(loop_losses, loop.loss_weights))
        per_loop.append(loop_losses)
    loops_total = torch.stack(per_image).mean()
    losses = {"loops": loops_total, **rpn_losses}
    total = loops_total + sum(rpn_losses.values())
    loop_means = [torch.stack(list(terms)).mean() for terms in zip(*per_loop)]
    return StepResult(total=total, losses=losses, trace=trace, loop_losses=loop_means)


@torch.no_grad()
def infer(
    model: SBRCNN,
    images: Sequence[torch.Tensor],
    eval_loops: Optional[int] = None,
) -> List[List[InstancePrediction]]:
    """
    Looped inference

    Every loop scores and refines the current boxes with the head pair chosen
    by the evaluation alternation. Class probabilities are averaged over
    loops; boxes come from the last loop's class-specific regression. Masks
    use the internal loop j = L_e unless configured to use L_t.

    Args:
        model: Model in eval mode
        images: (C, H, W) tensors of one shared size
        eval_loops: Override of the configured L_e

    Returns:
        Predictions per image, sorted by decreasing score
    """
    cfg = model.cfg
    loop = cfg.loop
    num_loops = eval_loops if eval_loops is not None else loop.eval_loops
    if num_loops < 1:
        raise InvalidInputError(f"eval_loops must be >= 1, got {num_loops}")
    mask_iterations = num_loops if loop.eval_mask_iterations == "eval_loops" else loop.train_loops
    k = cfg.head.num_classes
    test = cfg.test

    batch = _stack(images)
    image_size = (batch.shape[-2], batch.shape[-1])
    pyramid = model.neck(batch)
    proposals, _ = model.rpn(pyramid, image_size=image_size)

    results = []
    for i, proposal_set in enumerate(proposals):
        levels = _single_image(pyramid, i)
        boxes = proposal_set.boxes
        if boxes.shape[0] == 0:
            results.append([])
            continue
        per_loop_scores = []
        for t in range(1, num_loops + 1):
            det_head, mask_head, maskiou_head = model.head_pair(eval_pair(t, loop))
            logits, deltas = det_head(model.bbox_extractor(levels, pyramid.strides, boxes))
            probs = F.softmax(logits, dim=1)
            per_loop_scores.append(probs)
            rois, last_deltas = boxes, deltas
            if t < num_loops:
                fg = probs[:, 1:].argmax(dim=1)
                boxes = decode_deltas(rois, deltas[torch.arange(rois.shape[0]), fg], max_shape=image_size)
                # keep degenerate boxes decodable in the next loop
                boxes[:, 2] = torch.maximum(boxes[:, 2], boxes[:, 0] + 1e-3)
                boxes[:, 3] = torch.maximum(boxes[:, 3], boxes[:, 1] + 1e-3)

        scores = average_scores(per_loop_scores)[:, 1:]
        n = rois.shape[0]
        cand = decode_deltas(
            rois.repeat_interleave(k, dim=0), last_deltas.reshape(-1, 4), max_shape=image_size
        )
        cand_scores = scores.reshape(-1)
        cand_labels = torch.arange(1, k + 1, device=cand.device).repeat(n)
        keep = cand_scores > test.score_floor
        keep &= (cand[:, 2] > cand[:, 0]) & (cand[:, 3] > cand[:, 1])
        cand, cand_scores, cand_labels = cand[keep], cand_scores[keep], cand_labels[keep]
        keep = batched_nms(cand, cand_scores, cand_labels, test.nms_threshold)[: test.max_per_image]
        det_boxes, det_scores, det_labels = cand[keep], cand_scores[keep], cand_labels[keep]

        if det_boxes.shape[0] == 0:
            results.append([])
            continue
        _, mask_head, maskiou_head = model.head_pair(eval_pair(num_loops, loop))
        mask_feats = model.mask_extractor(levels, pyramid.strides, det_boxes)
        mask_logits = mask_head(mask_feats, mask_iterations)
        rows = torch.arange(det_boxes.shape[0], device=det_boxes.device)
        mask_probs = torch.sigmoid(mask_logits[rows, det_labels - 1])
        mask_scores = det_scores
        if maskiou_head is not None:
            pred_iou = maskiou_head(mask_feats, mask_probs[:, None])[rows, det_labels - 1]
            mask_scores = det_scores * pred_iou.clamp(0.0, 1.0)
        full_masks = paste_masks(mask_probs, det_boxes, image_size, test.mask_threshold).cpu().numpy()

        preds = [
            InstancePrediction(
                label=int(det_labels[j]),
                score=float(det_scores[j]),
                box=Box(*(float(v) for v in det_boxes[j].tolist())),
                mask=full_masks[j],
                mask_score=float(mask_scores[j]),
            )
            for j in range(det_boxes.shape[0])
        ]
        results.append(preds)
    return results

"""
Boxes, IoU, anchors, regression deltas, label assignment and RoI sampling

Boxes are corner-form ``(x1, y1, x2, y2)`` in continuous pixel coordinates,
areas have no +1 correction. Every function is pure.
"""
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torchvision

from sbrcnn.exceptions import InvalidInputError

DELTA_MEANS: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
DELTA_STDS: Tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
UNIT_STDS: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

# Largest |dw|, |dh| applied when decoding
MAX_LOG_RATIO = math.log(1000.0 / 16)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        return self.x2 >= self.x1 and self.y2 >= self.y1


def boxes_to_tensor(boxes: Sequence[Box], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack boxes into an (N, 4) tensor"""
    if len(boxes) == 0:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([list(b) for b in boxes], dtype=dtype)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """
    Pairwise IoU between two box sets

    Args:
        boxes1: (N, 4) boxes
        boxes2: (M, 4) boxes

    Returns:
        (N, M) IoU matrix; pairs whose union is empty get 0
    """
    area1 = box_area(boxes1)
    area2 = box_area(boxes2)
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    safe_union = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe_union, torch.zeros_like(inter))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, 0 when both are degenerate"""
    if not (a.is_valid() and b.is_valid()):
        raise InvalidInputError(f"invalid box in IoU: {a}, {b}")
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def clip_boxes(boxes: torch.Tensor, image_size: Tuple[int, int]) -> torch.Tensor:
    """Clip boxes to an (height, width) image"""
    h, w = image_size
    return torch.stack(
        [
            boxes[:, 0].clamp(0, w),
            boxes[:, 1].clamp(0, h),
            boxes[:, 2].clamp(0, w),
            boxes[:, 3].clamp(0, h),
        ],
        dim=1,
    )


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Indices of kept boxes, sorted by decreasing score"""
    if boxes.numel() == 0:
        return torch.zeros((0,), dtype=torch.int64, device=boxes.device)
    return torchvision.ops.nms(boxes.float(), scores.float(), iou_threshold)


def batched_nms(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    groups: torch.Tensor,
    iou_threshold: float,
) -> torch.Tensor:
    """NMS applied independently inside each group (class)"""
    if boxes.numel() == 0:
        return torch.zeros((0,), dtype=torch.int64, device=boxes.device)
    return torchvision.ops.batched_nms(boxes.float(), scores.float(), groups, iou_threshold)


# Anchors
@dataclass(frozen=True)
class AnchorGrid:
    """Anchors of every pyramid level, laid out (row, column, size-ratio) per level"""
    levels: List[torch.Tensor]
    strides: Tuple[int, ...]
    grid_sizes: Tuple[Tuple[int, int], ...]
    scales: Tuple[Tuple[float, ...], ...]
    ratios: Tuple[float, ...]

    @property
    def num_anchors_per_cell(self) -> List[int]:
        return [len(s) * len(self.ratios) for s in self.scales]

    def all(self) -> torch.Tensor:
        if not self.levels:
            return torch.zeros((0, 4))
        return torch.cat(self.levels, dim=0)

    def __len__(self) -> int:
        return sum(level.shape[0] for level in self.levels)


def _cell_anchors(scales: Sequence[float], ratios: Sequence[float]) -> torch.Tensor:
    """Zero-centred anchor templates; ratio is height / width"""
    templates = []
    for s in scales:
        for r in ratios:
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            templates.append([-w / 2, -h / 2, w / 2, h / 2])
    return torch.tensor(templates, dtype=torch.float32)


def generate_anchors(
    image_size: Tuple[int, int],
    strides: Sequence[int],
    scales: Union[Sequence[float], Sequence[Sequence[float]]],
    ratios: Sequence[float],
) -> AnchorGrid:
    """
    Anchor grid for an image

    Args:
        image_size: (height, width) in pixels
        strides: Stride of each pyramid level
        scales: Anchor side lengths in pixels, shared by every level, or one
            sequence per level
        ratios: Height / width aspect ratios

    Returns:
        AnchorGrid with ceil(H / stride) x ceil(W / stride) cells per level and
        centres at ((j + 0.5) * stride, (i + 0.5) * stride)
    """
    if not scales or not ratios:
        raise InvalidInputError("scales and ratios must be non-empty")
    if isinstance(scales[0], (list, tuple)):
        per_level = [tuple(float(s) for s in level) for level in scales]  # type: ignore[union-attr]
        if len(per_level) != len(strides):
            raise InvalidInputError(f"{len(per_level)} scale sets for {len(strides)} levels")
    else:
        per_level = [tuple(float(s) for s in scales)] * len(strides)  # type: ignore[arg-type]

    height, width = image_size
    levels, grid_sizes = [], []
    for stride, level_scales in zip(strides, per_level):
        gh = max(1, math.ceil(height / stride))
        gw = max(1, math.ceil(width / stride))
        cy = (torch.arange(gh, dtype=torch.float32) + 0.5) * stride
        cx = (torch.arange(gw, dtype=torch.float32) + 0.5) * stride
        yy, xx = torch.meshgrid(cy, cx, indexing="ij")
        centers = torch.stack([xx, yy, xx, yy], dim=-1).reshape(-1, 1, 4)
        templates = _cell_anchors(level_scales, ratios).reshape(1, -1, 4)
        levels.append((centers + templates).reshape(-1, 4))
        grid_sizes.append((gh, gw))

    return AnchorGrid(
        levels=levels,
        strides=tuple(int(s) for s in strides),
        grid_sizes=tuple(grid_sizes),
        scales=tuple(per_level),
        ratios=tuple(float(r) for r in ratios),
    )


# Regression deltas
def encode_deltas(
    proposals: torch.Tensor,
    targets: torch.Tensor,
    means: Sequence[float] = DELTA_MEANS,
    stds: Sequence[float] = DELTA_STDS,
) -> torch.Tensor:
    """
    Regression targets (dx, dy, dw, dh) of targets w.r.t. proposals

    dx, dy are centre shifts over proposal size and dw, dh log size ratios,
    then normalized by ``(d - mean) / std``.
    """
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    if bool(((pw <= 0) | (ph <= 0)).any()):
        raise InvalidInputError("proposals must have positive width and height")
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph

    gw = targets[:, 2] - targets[:, 0]
    gh = targets[:, 3] - targets[:, 1]
    gx = targets[:, 0] + 0.5 * gw
    gy = targets[:, 1] + 0.5 * gh

    deltas = torch.stack(
        [(gx - px) / pw, (gy - py) / ph, torch.log(gw / pw), torch.log(gh / ph)],
        dim=1,
    )
    means_t = deltas.new_tensor(means)
    stds_t = deltas.new_tensor(stds)
    return (deltas - means_t) / stds_t


def decode_deltas(
    proposals: torch.Tensor,
    deltas: torch.Tensor,
    means: Sequence[float] = DELTA_MEANS,
    stds: Sequence[float] = DELTA_STDS,
    max_shape: Optional[Tuple[int, int]] = None,
) -> torch.Tensor:
    """
    Apply normalized deltas to proposals

    Args:
        proposals: (N, 4) reference boxes
        deltas: (N, 4) normalized deltas
        max_shape: (height, width) to clip to; inference only

    Returns:
        (N, 4) decoded boxes
    """
    d = deltas * deltas.new_tensor(stds) + deltas.new_tensor(means)
    dw = d[:, 2].clamp(min=-MAX_LOG_RATIO, max=MAX_LOG_RATIO)
    dh = d[:, 3].clamp(min=-MAX_LOG_RATIO, max=MAX_LOG_RATIO)

    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph

    cx = px + d[:, 0] * pw
    cy = py + d[:, 1] * ph
    w = pw * torch.exp(dw)
    h = ph * torch.exp(dh)
    boxes = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)
    if max_shape is not None:
        boxes = clip_boxes(boxes, max_shape)
    return boxes


# Label assignment
@dataclass
class LabelAssignment:
    """
    Per-proposal result of thresholded max-IoU matching

    labels: 0 for background, 1..K for the matched gt class
    matched_gt_index: index of the best gt, -1 for background
    matched_iou: best IoU against any gt (0 when there are none)
    """
    labels: torch.Tensor
    matched_gt_index: torch.Tensor
    matched_iou: torch.Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def positive_mask(self) -> torch.Tensor:
        return self.labels > 0


def assign_labels(
    proposals: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    threshold: float,
) -> LabelAssignment:
    """
    Label every proposal with the class of its max-IoU gt when that IoU reaches the threshold

    Ties between gts resolve to the lowest gt index.

    Args:
        proposals: (N, 4) boxes
        gt_boxes: (G, 4) boxes
        gt_labels: (G,) classes in 1..K
        threshold: positive IoU threshold u^t, in (0, 1)

    Returns:
        LabelAssignment
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"threshold must be inside (0, 1), got {threshold}")
    n = proposals.shape[0]
    device = proposals.device
    if gt_boxes.shape[0] == 0 or n == 0:
        return LabelAssignment(
            labels=torch.zeros(n, dtype=torch.int64, device=device),
            matched_gt_index=torch.full((n,), -1, dtype=torch.int64, device=device),
            matched_iou=torch.zeros(n, dtype=proposals.dtype, device=device),
        )

    ious = box_iou(proposals, gt_boxes.to(proposals.dtype))
    # argmax returns the first maximal index
    best_gt = ious.argmax(dim=1)
    best_iou = ious.gather(1, best_gt[:, None]).squeeze(1)
    positive = best_iou >= threshold

    labels = torch.where(positive, gt_labels.to(device)[best_gt].long(), torch.zeros_like(best_gt))
    matched = torch.where(positive, best_gt, torch.full_like(best_gt, -1))
    return LabelAssignment(labels=labels, matched_gt_index=matched, matched_iou=best_iou)


def sample_proposals(
    assignment: LabelAssignment,
    total: int = 512,
    pos_fraction: float = 0.25,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Draw a training batch of at most ``total`` proposals

    Positives are capped at ``int(total * pos_fraction)``; the rest is filled
    with negatives. Positive indices come first.

    Args:
        assignment: Labels to sample from
        total: Batch size, > 0
        pos_fraction: Upper bound on the positive share
        seed: Seed for a private generator when ``generator`` is not given
        generator: Random source

    Returns:
        Index tensor into the assignment
    """
    if total <= 0:
        raise InvalidInputError(f"total must be positive, got {total}")
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)

    labels = assignment.labels.cpu()
    pos_idx = torch.nonzero(labels > 0).flatten()
    neg_idx = torch.nonzero(labels == 0).flatten()

    num_pos = min(pos_idx.numel(), int(total * pos_fraction))
    pos = pos_idx[torch.randperm(pos_idx.numel(), generator=generator)[:num_pos]]
    num_neg = min(neg_idx.numel(), total - num_pos)
    neg = neg_idx[torch.randperm(neg_idx.numel(), generator=generator)[:num_neg]]
    return torch.cat([pos, neg]).to(assignment.labels.device)

"""
Backbone, FPN neck and region proposal network
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import FeaturePyramidNetwork

from sbrcnn.exceptions import InvalidInputError
from sbrcnn.geometry import (
    UNIT_STDS,
    AnchorGrid,
    batched_nms,
    box_iou,
    decode_deltas,
    encode_deltas,
    generate_anchors,
)
from sbrcnn.schemas import AnchorConfig, RPNConfig


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


def _conv_norm_relu(in_ch: int, out_ch: int, stride: int) -> List[nn.Module]:
    return [
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        _group_norm(out_ch),
        nn.ReLU(inplace=True),
    ]


@dataclass
class FeaturePyramid:
    """FPN outputs from the finest level up; every level has the same channel count"""
    levels: List[torch.Tensor]
    strides: Tuple[int, ...]
    image_size: Tuple[int, int]  # padded (height, width) the levels were computed on

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    def __len__(self) -> int:
        return len(self.levels)


class Backbone(nn.Module):
    """
    Plain four-stage conv net

    A stride-2 stem is followed by four stride-2 stages, so the stage outputs
    sit at strides 4, 8, 16 and 32 with widths ``width * 2**k``.
    """

    def __init__(self, in_channels: int = 1, width: int = 32, zero_init_last_norm: bool = False):
        super().__init__()
        self.stem = nn.Sequential(*_conv_norm_relu(in_channels, width, stride=2))
        self.out_channels: List[int] = []
        stages = []
        prev = width
        for k in range(4):
            ch = width * 2 ** k
            stages.append(nn.Sequential(*_conv_norm_relu(prev, ch, 2), *_conv_norm_relu(ch, ch, 1)))
            self.out_channels.append(ch)
            prev = ch
        self.stages = nn.ModuleList(stages)
        if zero_init_last_norm:
            for stage in self.stages:
                nn.init.zeros_(stage[-2].weight)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


def pad_to_stride(images: torch.Tensor, stride: int) -> torch.Tensor:
    """Zero-pad the bottom/right so height and width are multiples of stride"""
    h, w = images.shape[-2:]
    ph = (stride - h % stride) % stride
    pw = (stride - w % stride) % stride
    if ph == 0 and pw == 0:
        return images
    return F.pad(images, (0, pw, 0, ph))


class BackboneFPN(nn.Module):
    """Backbone plus top-down FPN; produces P2..P5"""

    strides: Tuple[int, ...] = (4, 8, 16, 32)

    def __init__(
        self,
        in_channels: int = 1,
        width: int = 32,
        fpn_channels: int = 64,
        zero_init_last_norm: bool = False,
    ):
        super().__init__()
        self.backbone = Backbone(in_channels, width, zero_init_last_norm)
        self.fpn = FeaturePyramidNetwork(self.backbone.out_channels, out_channels=fpn_channels)
        self.fpn_channels = fpn_channels

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        images = pad_to_stride(images, self.strides[-1])
        feats = self.backbone(images)
        outs = self.fpn(OrderedDict((f"c{k + 2}", f) for k, f in enumerate(feats)))
        return FeaturePyramid(
            levels=list(outs.values()),
            strides=self.strides,
            image_size=(images.shape[-2], images.shape[-1]),
        )


def backbone_fpn_forward(model: BackboneFPN, image: torch.Tensor) -> FeaturePyramid:
    """Run the neck on a (C, H, W) image or (B, C, H, W) batch"""
    if image.dim() == 3:
        image = image[None]
    if image.dim() != 4:
        raise InvalidInputError(f"expected a (B, C, H, W) batch, got shape {tuple(image.shape)}")
    return model(image)


def anchors_for(pyramid: FeaturePyramid, cfg: AnchorConfig) -> AnchorGrid:
    """One anchor size per level (base_scale x stride) over the pyramid's padded geometry"""
    if tuple(cfg.strides) != tuple(pyramid.strides):
        raise InvalidInputError(f"anchor strides {cfg.strides} do not match pyramid strides {pyramid.strides}")
    scales = [[cfg.base_scale * s] for s in cfg.strides]
    return generate_anchors(pyramid.image_size, cfg.strides, scales, cfg.ratios)


# Region proposal network
@dataclass
class ProposalSet:
    """Clipped boxes sorted by decreasing score; source is "rpn" or a loop index"""
    boxes: torch.Tensor
    scores: torch.Tensor
    source: Union[str, int] = "rpn"

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class RPNOutput:
    """Per-level raw outputs flattened to (B, H*W*A) logits and (B, H*W*A, 4) deltas"""
    objectness: List[torch.Tensor]
    deltas: List[torch.Tensor]

    def image(self, i: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return (
            torch.cat([o[i] for o in self.objectness]),
            torch.cat([d[i] for d in self.deltas]),
        )


class RPNHead(nn.Module):
    """Shared 3x3 conv then sibling 1x1 objectness and delta convs, applied to every level"""

    def __init__(self, in_channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.cls_logits = nn.Conv2d(in_channels, num_anchors, 1)
        self.bbox_pred = nn.Conv2d(in_channels, num_anchors * 4, 1)
        for layer in (self.conv, self.cls_logits, self.bbox_pred):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, levels: Sequence[torch.Tensor]) -> RPNOutput:
        objectness, deltas = [], []
        for x in levels:
            t = F.relu(self.conv(x))
            logits = self.cls_logits(t)
            b, a, h, w = logits.shape
            # (B, A, H, W) -> (B, H, W, A) to match the anchor layout
            objectness.append(logits.permute(0, 2, 3, 1).reshape(b, -1))
            reg = self.bbox_pred(t).view(b, a, 4, h, w).permute(0, 3, 4, 1, 2)
            deltas.append(reg.reshape(b, -1, 4))
        return RPNOutput(objectness=objectness, deltas=deltas)


def rpn_forward(
    output: RPNOutput,
    anchors: AnchorGrid,
    image_size: Tuple[int, int],
    cfg: RPNConfig,
    training: bool,
) -> List[ProposalSet]:
    """
    Turn raw RPN outputs into proposals b^0 for every image

    Per level the top ``pre_nms_top_n`` anchors by score are decoded, clipped
    and filtered by size and score floor; NMS then runs per level and the best
    ``post_nms_top_n`` survivors are kept.

    Args:
        output: RPNHead output
        anchors: Anchors laid out like the head output
        image_size: (height, width) used for clipping
        cfg: RPN settings
        training: Selects the post-NMS cap

    Returns:
        One ProposalSet per image, detached from the graph
    """
    post_n = cfg.post_nms_top_n_train if training else cfg.post_nms_top_n_test
    batch = output.objectness[0].shape[0]
    results = []
    for i in range(batch):
        boxes_all, scores_all, level_ids = [], [], []
        for lvl, (logits, deltas, lvl_anchors) in enumerate(zip(output.objectness, output.deltas, anchors.levels)):
            logits_i = logits[i].detach()
            k = min(cfg.pre_nms_top_n, logits_i.numel())
            top, idx = logits_i.topk(k)
            boxes = decode_deltas(
                lvl_anchors.to(deltas.device)[idx], deltas[i].detach()[idx], stds=UNIT_STDS, max_shape=image_size
            )
            scores = torch.sigmoid(top)
            keep = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_size) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_size)
            keep &= scores > cfg.score_floor
            boxes_all.append(boxes[keep])
            scores_all.append(scores[keep])
            level_ids.append(torch.full((int(keep.sum()),), lvl, dtype=torch.int64, device=boxes.device))

        boxes = torch.cat(boxes_all)
        scores = torch.cat(scores_all)
        keep = batched_nms(boxes, scores, torch.cat(level_ids), cfg.nms_threshold)[:post_n]
        results.append(ProposalSet(boxes=boxes[keep], scores=scores[keep], source="rpn"))
    return results


def match_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, cfg: RPNConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    RPN anchor labels: 1 positive, 0 negative, -1 ignored

    Returns:
        (labels, matched gt index per anchor)
    """
    n = anchors.shape[0]
    labels = torch.full((n,), -1, dtype=torch.int64, device=anchors.device)
    if gt_boxes.shape[0] == 0:
        labels.fill_(0)
        return labels, torch.zeros(n, dtype=torch.int64, device=anchors.device)

    ious = box_iou(anchors, gt_boxes.to(anchors.dtype))
    best_iou, best_gt = ious.max(dim=1)
    labels[best_iou < cfg.neg_iou] = 0
    labels[best_iou >= cfg.pos_iou] = 1
    if cfg.allow_low_quality:
        # each gt also claims the anchors that match it best
        gt_best = ious.max(dim=0).values
        hits = (ious == gt_best[None, :]) & (gt_best[None, :] > 0)
        anchor_idx, gt_idx = torch.nonzero(hits, as_tuple=True)
        labels[anchor_idx] = 1
        best_gt[anchor_idx] = gt_idx
    return labels, best_gt


def rpn_loss(
    objectness: torch.Tensor,
    deltas: torch.Tensor,
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    cfg: Optional[RPNConfig] = None,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Objectness and box losses of one image

    Anchors are labelled by ``match_anchors`` and ``num_samples`` of them are
    drawn with at most ``pos_fraction`` positives. Objectness is BCE over the
    sample; the box term is smooth-L1 (beta 1/9) over sampled positives,
    normalized by the sample size.

    Args:
        objectness: (N,) logits
        deltas: (N, 4) predicted deltas, unit-normalized
        anchors: (N, 4) anchors
        gt_boxes: (G, 4) gt boxes
        cfg: RPN settings
        generator: Random source for sampling

    Returns:
        (objectness loss, box loss)
    """
    cfg = cfg or RPNConfig()
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0)
    labels, matched = match_anchors(anchors, gt_boxes, cfg)

    pos = torch.nonzero(labels.cpu() == 1).flatten()
    neg = torch.nonzero(labels.cpu() == 0).flatten()
    num_pos = min(pos.numel(), int(cfg.num_samples * cfg.pos_fraction))
    num_neg = min(neg.numel(), cfg.num_samples - num_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:num_pos]].to(anchors.device)
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:num_neg]].to(anchors.device)
    sampled = torch.cat([pos, neg])
    normalizer = max(1, sampled.numel())

    if sampled.numel() == 0:
        obj_loss = objectness.sum() * 0.0
    else:
        targets = (labels[sampled] == 1).to(objectness.dtype)
        obj_loss = F.binary_cross_entropy_with_logits(objectness[sampled], targets)

    if pos.numel() == 0:
        box_loss = deltas.sum() * 0.0
    else:
        target_deltas = encode_deltas(anchors[pos], gt_boxes.to(anchors.dtype)[matched[pos]], stds=UNIT_STDS)
        box_loss = F.smooth_l1_loss(deltas[pos], target_deltas, beta=1.0 / 9, reduction="sum") / normalizer
    return obj_loss, box_loss


class RegionProposalNetwork(nn.Module):
    """RPN head with its anchor and proposal settings"""

    def __init__(self, in_channels: int, anchor_cfg: AnchorConfig, cfg: RPNConfig):
        super().__init__()
        self.anchor_cfg = anchor_cfg
        self.cfg = cfg
        self.head = RPNHead(in_channels, len(anchor_cfg.ratios))

    def forward(
        self,
        pyramid: FeaturePyramid,
        gt_boxes: Optional[List[torch.Tensor]] = None,
        generator: Optional[torch.Generator] = None,
        image_size: Optional[Tuple[int, int]] = None,
    ):
        """
        Returns:
            (proposals per image, {"rpn_obj", "rpn_box"} averaged over images,
            empty outside training)
        """
        anchors = anchors_for(pyramid, self.anchor_cfg)
        output = self.head(pyramid.levels)
        proposals = rpn_forward(output, anchors, image_size or pyramid.image_size, self.cfg, self.training)
        losses = {}
        if self.training and gt_boxes is not None:
            flat_anchors = anchors.all().to(output.objectness[0].device)
            obj_terms, box_terms = [], []
            for i, gts in enumerate(gt_boxes):
                obj, deltas = output.image(i)
                o, b = rpn_loss(obj, deltas, flat_anchors, gts, self.cfg, generator)
                obj_terms.append(o)
                box_terms.append(b)
            losses = {
                "rpn_obj": torch.stack(obj_terms).mean(),
                "rpn_box": torch.stack(box_terms).mean(),
            }
        return proposals, losses

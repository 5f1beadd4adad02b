"""
RoI feature extraction

Two extractors share one interface, ``extractor(levels, strides, rois)``:

- the baseline pools every RoI from the single FPN level picked by its size
- GRoIE pools every RoI from all levels, runs a pre-processing module on each
  pooled map, sums them, and applies a post-processing module
"""
import math
from typing import List, Optional, Sequence, Union

import torch
from torch import nn
from torchvision.ops import roi_align as tv_roi_align

from sbrcnn.exceptions import InvalidInputError
from sbrcnn.heads import NonLocalBlock
from sbrcnn.schemas import GRoIEConfig, RoIExtractorConfig

GROIE_MODULES = ("none", "conv3x3", "conv5x5", "conv7x7", "conv7x3_3x7", "nonlocal1x1", "nonlocal7x7")


def as_rois(boxes: Union[torch.Tensor, Sequence[torch.Tensor]]) -> torch.Tensor:
    """
    Normalize boxes to (K, 5) rows of (batch_index, x1, y1, x2, y2)

    Accepts a (K, 4) tensor (batch 0), a (K, 5) tensor, or a per-image list of (K_i, 4).
    """
    if isinstance(boxes, (list, tuple)):
        parts = [
            torch.cat([torch.full((b.shape[0], 1), i, dtype=b.dtype, device=b.device), b], dim=1)
            for i, b in enumerate(boxes)
        ]
        if not parts:
            return torch.zeros((0, 5))
        return torch.cat(parts, dim=0)
    if boxes.dim() != 2 or boxes.shape[1] not in (4, 5):
        raise InvalidInputError(f"boxes must be (K, 4) or (K, 5), got {tuple(boxes.shape)}")
    if boxes.shape[1] == 4:
        return torch.cat([boxes.new_zeros((boxes.shape[0], 1)), boxes], dim=1)
    return boxes


def roi_align(
    features: torch.Tensor,
    boxes: Union[torch.Tensor, Sequence[torch.Tensor]],
    output_size: int,
    stride: float = 1.0,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """
    Bilinear RoI align of one feature level

    Args:
        features: (B, C, H, W) or (C, H, W) level
        boxes: Image-coordinate boxes, see ``as_rois``
        output_size: S, the side of the pooled grid
        stride: Level stride; spatial scale is 1 / stride
        sampling_ratio: Sample points per bin side, averaged

    Returns:
        (K, C, S, S) features; zero-area boxes give zeros
    """
    if features.dim() == 3:
        features = features[None]
    rois = as_rois(boxes).to(dtype=features.dtype, device=features.device)
    if rois.shape[0] == 0:
        return features.new_zeros((0, features.shape[1], output_size, output_size))
    out = tv_roi_align(
        features,
        rois,
        output_size=(output_size, output_size),
        spatial_scale=1.0 / stride,
        sampling_ratio=sampling_ratio,
        aligned=True,
    )
    valid = (rois[:, 3] > rois[:, 1]) & (rois[:, 4] > rois[:, 2])
    return out * valid.to(out.dtype)[:, None, None, None]


def map_roi_levels(
    rois: torch.Tensor,
    num_levels: int,
    canonical_size: float = 64.0,
    canonical_level: int = 4,
    min_level: int = 2,
) -> torch.Tensor:
    """
    Pyramid index per RoI: floor(k0 + log2(sqrt(wh) / canonical_size)), clipped

    Returns:
        Indices into the level list (0 = finest level P_min_level)
    """
    rois = as_rois(rois)
    scale = torch.sqrt(((rois[:, 3] - rois[:, 1]) * (rois[:, 4] - rois[:, 2])).clamp(min=0))
    k = torch.floor(canonical_level + torch.log2(scale / canonical_size + 1e-6))
    k = k.clamp(min=min_level, max=min_level + num_levels - 1)
    return (k - min_level).to(torch.int64)


def baseline_extract(
    levels: Sequence[torch.Tensor],
    strides: Sequence[int],
    boxes: Union[torch.Tensor, Sequence[torch.Tensor]],
    output_size: int,
    canonical_size: float = 64.0,
    canonical_level: int = 4,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Pool each RoI from the one level chosen by ``map_roi_levels``"""
    rois = as_rois(boxes).to(dtype=levels[0].dtype, device=levels[0].device)
    out = levels[0].new_zeros((rois.shape[0], levels[0].shape[1], output_size, output_size))
    if rois.shape[0] == 0:
        return out
    min_level = int(round(math.log2(strides[0])))
    target = map_roi_levels(rois, len(levels), canonical_size, canonical_level, min_level)
    for lvl, (feat, stride) in enumerate(zip(levels, strides)):
        idx = torch.nonzero(target == lvl).flatten()
        if idx.numel() == 0:
            continue
        out[idx] = roi_align(feat, rois[idx], output_size, stride, sampling_ratio)
    return out


def build_groie_module(name: str, channels: int, nl_reduction: int = 2) -> nn.Module:
    """One pre/post module from the GRoIE menu; all preserve (C, S, S)"""
    if name == "none":
        return nn.Identity()
    if name in ("conv3x3", "conv5x5", "conv7x7"):
        k = int(name[-1])
        return nn.Sequential(nn.Conv2d(channels, channels, k, padding=k // 2), nn.ReLU())
    if name == "conv7x3_3x7":
        return nn.Sequential(
            nn.Conv2d(channels, channels, (7, 3), padding=(3, 1)),
            nn.ReLU(),
            nn.Conv2d(channels, channels, (3, 7), padding=(1, 3)),
            nn.ReLU(),
        )
    if name == "nonlocal1x1":
        return NonLocalBlock(channels, 1, nl_reduction)
    if name == "nonlocal7x7":
        return NonLocalBlock(channels, 7, nl_reduction)
    raise InvalidInputError(f"unknown GRoIE module {name!r}; choose from {GROIE_MODULES}")


def analytic_module_params(name: str, channels: int, nl_reduction: int = 2) -> int:
    """Closed-form parameter count of a GRoIE menu module"""
    c = channels
    if name == "none":
        return 0
    if name in ("conv3x3", "conv5x5", "conv7x7"):
        k = int(name[-1])
        return c * c * k * k + c
    if name == "conv7x3_3x7":
        return 2 * (c * c * 21 + c)
    if name in ("nonlocal1x1", "nonlocal7x7"):
        k2 = 1 if name == "nonlocal1x1" else 49
        inter = max(1, c // nl_reduction)
        return 3 * (c * inter * k2 + inter) + (inter * c * k2 + c)
    raise InvalidInputError(f"unknown GRoIE module {name!r}")


def groie_extract(
    levels: Sequence[torch.Tensor],
    strides: Sequence[int],
    boxes: Union[torch.Tensor, Sequence[torch.Tensor]],
    output_size: int,
    pre: Union[nn.Module, Sequence[nn.Module]],
    post: nn.Module,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """
    post(sum over levels of pre(roi_align(level, boxes)))

    Args:
        levels: Pyramid levels, any depth
        strides: Stride per level
        boxes: RoIs in image coordinates
        output_size: S
        pre: One module shared by all levels, or one per level
        post: Module applied to the summed map

    Returns:
        (K, C, S, S) features
    """
    rois = as_rois(boxes)
    channels = levels[0].shape[1]
    if rois.shape[0] == 0:
        return levels[0].new_zeros((0, channels, output_size, output_size))
    pre_list = list(pre) if isinstance(pre, (list, tuple, nn.ModuleList)) else [pre] * len(levels)
    if len(pre_list) != len(levels):
        raise InvalidInputError(f"{len(pre_list)} pre modules for {len(levels)} levels")
    total = None
    for feat, stride, module in zip(levels, strides, pre_list):
        pooled = module(roi_align(feat, rois, output_size, stride, sampling_ratio))
        total = pooled if total is None else total + pooled
    return post(total)


class BaselineRoIExtractor(nn.Module):
    def __init__(self, output_size: int, cfg: RoIExtractorConfig):
        super().__init__()
        self.output_size = output_size
        self.cfg = cfg

    def forward(self, levels: Sequence[torch.Tensor], strides: Sequence[int], rois) -> torch.Tensor:
        return baseline_extract(
            levels,
            strides,
            rois,
            self.output_size,
            self.cfg.canonical_size,
            self.cfg.canonical_level,
            self.cfg.sampling_ratio,
        )


class GRoIE(nn.Module):
    """Generic RoI extractor with learnable pre/post modules"""

    def __init__(
        self,
        channels: int,
        output_size: int,
        cfg: Optional[GRoIEConfig] = None,
        num_levels: int = 4,
        sampling_ratio: int = 2,
        nl_reduction: int = 2,
    ):
        super().__init__()
        cfg = cfg or GRoIEConfig()
        self.cfg = cfg
        self.output_size = output_size
        self.sampling_ratio = sampling_ratio
        if cfg.per_level_weights:
            self.pre = nn.ModuleList(
                [build_groie_module(cfg.pre_module, channels, nl_reduction) for _ in range(num_levels)]
            )
        else:
            self.pre = build_groie_module(cfg.pre_module, channels, nl_reduction)
        self.post = build_groie_module(cfg.post_module, channels, nl_reduction)

    def forward(self, levels: Sequence[torch.Tensor], strides: Sequence[int], rois) -> torch.Tensor:
        return groie_extract(levels, strides, rois, self.output_size, self.pre, self.post, self.sampling_ratio)

    def expected_params(self, channels: int, num_levels: int, nl_reduction: int = 2) -> int:
        copies = num_levels if self.cfg.per_level_weights else 1
        return copies * analytic_module_params(self.cfg.pre_module, channels, nl_reduction) + analytic_module_params(
            self.cfg.post_module, channels, nl_reduction
        )


def build_roi_extractor(
    cfg: RoIExtractorConfig,
    channels: int,
    output_size: int,
    num_levels: int = 4,
    nl_reduction: int = 2,
) -> nn.Module:
    if cfg.type == "groie":
        return GRoIE(channels, output_size, cfg.groie, num_levels, cfg.sampling_ratio, nl_reduction)
    return BaselineRoIExtractor(output_size, cfg)


def level_strides(num_levels: int, finest: int = 4) -> List[int]:
    return [finest * 2 ** k for k in range(num_levels)]

"""
Detection, mask and Mask-IoU heads

The detection head comes in the FC baseline and the fully convolutional
(FCC) variants: a "lighter" two-layer conv trunk with 7x7 or rectangular
7x3/3x7 kernels, optionally wrapped by non-local blocks with large internal
kernels before (nl_b) or after (nl_a) the trunk. The Mask-IoU branch reuses
the same trunk menu in place of its first two FC layers.
"""
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from sbrcnn.exceptions import InvalidInputError
from sbrcnn.schemas import FCCTotal, HeadConfig, ParamRow, ParamTable

ROI_SIZE = 7
MASK_ROI_SIZE = 14


class NonLocalBlock(nn.Module):
    """
    Embedded-Gaussian non-local block with configurable internal kernels

    y = x + W_out(softmax(theta(x)^T phi(x)) g(x)); W_out starts at zero so
    the block is the identity at initialization.

    Args:
        channels: Input and output channels
        kernel_size: Internal kernel, 1 or 7 (any odd size works)
        reduction: Channel reduction of the embedding (inter = channels // reduction)
        large_kernel_on: "all" puts the kernel on theta, phi, g and W_out;
            "theta_phi" keeps g and W_out at 1x1
    """

    def __init__(self, channels: int, kernel_size: int = 7, reduction: int = 2, large_kernel_on: str = "all"):
        super().__init__()
        if kernel_size % 2 != 1:
            raise InvalidInputError(f"non-local kernel must be odd, got {kernel_size}")
        inter = max(1, channels // reduction)
        k_tp = kernel_size
        k_go = kernel_size if large_kernel_on == "all" else 1
        self.inter_channels = inter
        self.theta = nn.Conv2d(channels, inter, k_tp, padding=k_tp // 2)
        self.phi = nn.Conv2d(channels, inter, k_tp, padding=k_tp // 2)
        self.g = nn.Conv2d(channels, inter, k_go, padding=k_go // 2)
        self.w_out = nn.Conv2d(inter, channels, k_go, padding=k_go // 2)
        nn.init.zeros_(self.w_out.weight)
        nn.init.zeros_(self.w_out.bias)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """(n, HW, HW) attention matrix; each row sums to 1"""
        n = x.shape[0]
        theta = self.theta(x).view(n, self.inter_channels, -1)
        phi = self.phi(x).view(n, self.inter_channels, -1)
        return F.softmax(torch.bmm(theta.transpose(1, 2), phi), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        attn = self.attention(x)
        g = self.g(x).view(n, self.inter_channels, -1).transpose(1, 2)
        y = torch.bmm(attn, g).transpose(1, 2).reshape(n, self.inter_channels, h, w)
        return x + self.w_out(y)


def nonlocal_forward(block: NonLocalBlock, x: torch.Tensor) -> torch.Tensor:
    return block(x)


def parse_variant(variant: str) -> Tuple[str, bool, bool]:
    """Split a head variant name into (trunk, has nl_b, has nl_a)"""
    parts = variant.split("+")
    base, flags = parts[0], set(parts[1:])
    if base not in ("fc_baseline", "l2c_7x7", "l2c_rect") or not flags <= {"nl_b", "nl_a"}:
        raise InvalidInputError(f"unknown head variant {variant!r}")
    if base == "fc_baseline" and flags:
        raise InvalidInputError("non-local blocks only wrap the L2C trunks")
    return base, "nl_b" in flags, "nl_a" in flags


class Trunk(nn.Module):
    """
    Shared trunk of a head variant over (n, C, 7, 7) RoI features

    fc_baseline: fc1 (C*49 -> F), fc2 (F -> F)
    l2c_7x7:     conv1 (C -> C/2, 7x7), conv2 (C/2 -> C/4, 7x7)
    l2c_rect:    conv1a (C -> C, 7x3), conv1b (C -> C/2, 3x7),
                 conv2a (C/2 -> C/2, 7x3), conv2b (C/2 -> C/4, 3x7)
    """

    def __init__(
        self,
        variant: str,
        in_channels: int,
        fc_channels: int = 1024,
        nl_reduction: int = 2,
        nl_large_kernel_on: str = "all",
    ):
        super().__init__()
        base, nl_b, nl_a = parse_variant(variant)
        self.variant = variant
        self.base = base
        c = in_channels
        self.nl_b = NonLocalBlock(c, 7, nl_reduction, nl_large_kernel_on) if nl_b else None

        if base == "fc_baseline":
            self.layers = nn.ModuleDict(
                {
                    "fc1": nn.Linear(c * ROI_SIZE * ROI_SIZE, fc_channels),
                    "fc2": nn.Linear(fc_channels, fc_channels),
                }
            )
            self.out_features = fc_channels
            out_channels = None
        elif base == "l2c_7x7":
            self.layers = nn.ModuleDict(
                {
                    "conv1": nn.Conv2d(c, c // 2, 7, padding=3),
                    "conv2": nn.Conv2d(c // 2, c // 4, 7, padding=3),
                }
            )
            out_channels = c // 4
        else:
            self.layers = nn.ModuleDict(
                {
                    "conv1a": nn.Conv2d(c, c, (7, 3), padding=(3, 1)),
                    "conv1b": nn.Conv2d(c, c // 2, (3, 7), padding=(1, 3)),
                    "conv2a": nn.Conv2d(c // 2, c // 2, (7, 3), padding=(3, 1)),
                    "conv2b": nn.Conv2d(c // 2, c // 4, (3, 7), padding=(1, 3)),
                }
            )
            out_channels = c // 4

        if out_channels is not None:
            if out_channels < 1:
                raise InvalidInputError(f"in_channels={in_channels} is too small for {base}")
            self.out_features = out_channels * ROI_SIZE * ROI_SIZE
        self.nl_a = NonLocalBlock(out_channels, 7, nl_reduction, nl_large_kernel_on) if nl_a else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.nl_b is not None:
            x = self.nl_b(x)
        if self.base == "fc_baseline":
            x = x.flatten(1)
            for layer in self.layers.values():
                x = F.relu(layer(x))
            return x
        for layer in self.layers.values():
            x = F.relu(layer(x))
        if self.nl_a is not None:
            x = self.nl_a(x)
        return x.flatten(1)


def _check_roi_size(x: torch.Tensor, size: int) -> None:
    if x.dim() != 4 or x.shape[-2:] != (size, size):
        raise InvalidInputError(f"RoI features must be n x C x {size} x {size}, got {tuple(x.shape)}")


class DetectionHead(nn.Module):
    """Trunk followed by per-task classification (K+1) and regression projections"""

    def __init__(self, cfg: HeadConfig, in_channels: Optional[int] = None):
        super().__init__()
        in_channels = in_channels or cfg.in_channels
        self.num_classes = cfg.num_classes
        self.class_agnostic = cfg.reg_class_agnostic
        self.trunk = Trunk(cfg.det_variant, in_channels, cfg.fc_channels, cfg.nl_reduction, cfg.nl_large_kernel_on)
        self.fc_cls = nn.Linear(self.trunk.out_features, cfg.num_classes + 1)
        self.fc_reg = nn.Linear(self.trunk.out_features, 4 if self.class_agnostic else 4 * cfg.num_classes)
        nn.init.normal_(self.fc_cls.weight, std=0.01)
        nn.init.normal_(self.fc_reg.weight, std=0.001)
        nn.init.zeros_(self.fc_cls.bias)
        nn.init.zeros_(self.fc_reg.bias)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            x: (n, C, 7, 7) RoI features

        Returns:
            (class logits n x (K+1), deltas n x K x 4)
        """
        _check_roi_size(x, ROI_SIZE)
        feats = self.trunk(x)
        logits = self.fc_cls(feats)
        deltas = self.fc_reg(feats)
        n = x.shape[0]
        if self.class_agnostic:
            deltas = deltas.view(n, 1, 4).expand(n, self.num_classes, 4)
        else:
            deltas = deltas.view(n, self.num_classes, 4)
        return logits, deltas


def detection_head_forward(head: DetectionHead, roi_features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return head(roi_features)


class MaskHead(nn.Module):
    """
    Mask head with an internal refinement loop

    m^0 = M1(x + C1(0)) and m^i = M1(x + C1(m^{i-1})) for j = t iterations,
    then C2(U(m)) with U a 2x transposed-conv upsampling (14 -> 28). M1, C1, U
    and C2 are shared by every iteration and every loop.
    """

    def __init__(self, in_channels: int, num_classes: int, num_convs: int = 4):
        super().__init__()
        c = in_channels
        body = []
        for _ in range(num_convs):
            body += [nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True)]
        self.m1 = nn.Sequential(*body)
        self.c1 = nn.Conv2d(c, c, 1)
        self.upsample = nn.ConvTranspose2d(c, c, 2, stride=2)
        self.c2 = nn.Conv2d(c, num_classes, 1)

    def forward(self, x: torch.Tensor, t: int) -> torch.Tensor:
        """
        Args:
            x: (n, C, 14, 14) mask RoI features
            t: Loop index; the internal loop runs j = t times

        Returns:
            (n, K, 28, 28) mask logits
        """
        if t < 1:
            raise InvalidInputError(f"mask loop index must be >= 1, got {t}")
        _check_roi_size(x, MASK_ROI_SIZE)
        state = torch.zeros_like(x)
        for _ in range(t):
            state = self.m1(x + self.c1(state))
        return self.c2(F.relu(self.upsample(state)))


def mask_head_forward(head: MaskHead, roi_features: torch.Tensor, t: int) -> torch.Tensor:
    return head(roi_features, t)


class MaskIoUHead(nn.Module):
    """
    Mask-quality branch

    The max-pooled predicted mask is concatenated to the 14x14 mask features,
    passed through four 3x3 convs (the last with stride 2, giving 7x7) and a
    trunk from the head menu, then projected to one IoU per class.
    """

    def __init__(self, cfg: HeadConfig, in_channels: Optional[int] = None):
        super().__init__()
        c = in_channels or cfg.in_channels
        self.convs = nn.Sequential(
            nn.Conv2d(c + 1, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.trunk = Trunk(cfg.maskiou_variant, c, cfg.fc_channels, cfg.nl_reduction, cfg.nl_large_kernel_on)
        self.fc_iou = nn.Linear(self.trunk.out_features, cfg.num_classes)

    def forward(self, mask_features: torch.Tensor, mask_probs: torch.Tensor) -> torch.Tensor:
        """
        Args:
            mask_features: (n, C, 14, 14)
            mask_probs: (n, 1, 28, 28) predicted mask of the selected class

        Returns:
            (n, K) predicted mask IoU per class
        """
        _check_roi_size(mask_features, MASK_ROI_SIZE)
        pooled = F.max_pool2d(mask_probs, kernel_size=2, stride=2)
        x = self.convs(torch.cat([mask_features, pooled], dim=1))
        return self.fc_iou(self.trunk(x))


def maskiou_head_forward(head: MaskIoUHead, mask_features: torch.Tensor, mask_probs: torch.Tensor) -> torch.Tensor:
    return head(mask_features, mask_probs)


def mask_iou_targets(pred_masks: torch.Tensor, gt_masks: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """
    IoU between binarized predicted masks and gt masks on the same grid

    Args:
        pred_masks: (n, H, W) probabilities
        gt_masks: (n, H, W) binary targets
        threshold: Binarization cut for the prediction

    Returns:
        (n,) IoU, 0 where both masks are empty
    """
    pred = pred_masks >= threshold
    gt = gt_masks >= 0.5
    inter = (pred & gt).flatten(1).sum(1).to(torch.float32)
    union = (pred | gt).flatten(1).sum(1).to(torch.float32)
    return torch.where(union > 0, inter / union.clamp(min=1), torch.zeros_like(union))


# Parameter accounting
def _own_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters(recurse=False))


def count_params(target: Union[nn.Module, HeadConfig]) -> ParamTable:
    """
    Per-layer parameter table (weights + biases) of a module

    A HeadConfig is turned into its DetectionHead first.
    """
    module = DetectionHead(target) if isinstance(target, HeadConfig) else target
    rows = [
        ParamRow(name=name or type(m).__name__, params=_own_params(m), description=type(m).__name__)
        for name, m in module.named_modules()
        if _own_params(m) > 0
    ]
    return ParamTable(rows=rows, total=sum(r.params for r in rows))


# Row names of the FC vs L2C comparison table
_TABLE_ROWS: List[Tuple[str, str, str]] = [
    ("FC 1", "fc_baseline", "fc1"),
    ("L2C (conv1)", "l2c_7x7", "conv1"),
    ("L2C (conv1a)", "l2c_rect", "conv1a"),
    ("L2C (conv1b)", "l2c_rect", "conv1b"),
    ("FC 2", "fc_baseline", "fc2"),
    ("L2C (conv2)", "l2c_7x7", "conv2"),
    ("L2C (conv2a)", "l2c_rect", "conv2a"),
    ("L2C (conv2b)", "l2c_rect", "conv2b"),
]


def fcc_param_table(in_channels: int = 256, fc_channels: int = 1024) -> ParamTable:
    """FC vs L2C layer counts under their conventional row names"""
    with torch.device("meta"):
        trunks = {v: Trunk(v, in_channels, fc_channels) for v in ("fc_baseline", "l2c_7x7", "l2c_rect")}
    rows = []
    for label, variant, layer in _TABLE_ROWS:
        m = trunks[variant].layers[layer]
        shape = "x".join(str(k) for k in m.kernel_size) if isinstance(m, nn.Conv2d) else "fc"
        rows.append(ParamRow(name=label, params=_own_params(m), description=f"{variant}.{layer} ({shape})"))
    return ParamTable(rows=rows, total=sum(r.params for r in rows))


# Reference totals in millions
DETECTOR_REFERENCE: Dict[str, float] = {
    "fc_baseline": 14.0,
    "l2c_7x7": 2.2,
    "l2c_rect": 2.8,
    "l2c_7x7+nl_b": 8.6,
    "l2c_rect+nl_b": 9.2,
}
MASKIOU_REFERENCE: Dict[str, float] = {
    "fc_baseline": 16.3,
    "l2c_7x7": 4.6,
    "l2c_rect": 5.1,
    "l2c_7x7+nl_b": 10.6,
    "l2c_rect+nl_b": 11.1,
}


def fcc_totals(in_channels: int = 256, num_classes: int = 80, class_agnostic: bool = True) -> List[FCCTotal]:
    """
    Detector and Mask-IoU totals for every reference variant

    The reference figures correspond to full heads (trunk plus projections)
    at 80 classes with class-agnostic regression. Deviations are reported, not
    corrected.
    """
    results = []
    for variant, reference in DETECTOR_REFERENCE.items():
        cfg = HeadConfig(
            det_variant=variant,
            num_classes=num_classes,
            in_channels=in_channels,
            reg_class_agnostic=class_agnostic,
        )
        with torch.device("meta"):
            head = DetectionHead(cfg)
        trunk = count_params(head.trunk).total
        total = count_params(head).total
        results.append(
            FCCTotal(
                branch="detector",
                variant=variant,
                trunk_params=trunk,
                head_params=total,
                reference_millions=reference,
                trunk_deviation_millions=round(trunk / 1e6 - reference, 4),
                head_deviation_millions=round(total / 1e6 - reference, 4),
            )
        )
    for variant, reference in MASKIOU_REFERENCE.items():
        cfg = HeadConfig(maskiou_enabled=True, maskiou_variant=variant, num_classes=num_classes, in_channels=in_channels)
        with torch.device("meta"):
            head = MaskIoUHead(cfg)
        trunk = count_params(head.trunk).total
        total = count_params(head).total
        results.append(
            FCCTotal(
                branch="maskiou",
                variant=variant,
                trunk_params=trunk,
                head_params=total,
                reference_millions=reference,
                trunk_deviation_millions=round(trunk / 1e6 - reference, 4),
                head_deviation_millions=round(total / 1e6 - reference, 4),
            )
        )
    return results

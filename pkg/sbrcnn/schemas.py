"""
Pydantic schemas for configuration, dataset files and result artifacts
"""
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sbrcnn.loops import (
    MAX_LOOPS,
    default_loss_weights,
    threshold_schedule,
    validate_alternation,
)

GRoIEModule = Literal[
    "none",
    "conv3x3",
    "conv5x5",
    "conv7x7",
    "conv7x3_3x7",
    "nonlocal1x1",
    "nonlocal7x7",
]

HeadVariant = Literal[
    "fc_baseline",
    "l2c_7x7",
    "l2c_rect",
    "l2c_7x7+nl_b",
    "l2c_rect+nl_b",
    "l2c_7x7+nl_a",
    "l2c_7x7+nl_b+nl_a",
]

IOU_HIST_EDGES: List[float] = [round(0.5 + 0.05 * i, 2) for i in range(11)]


class StrictModel(BaseModel):
    """Base for config sections: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid")


# Model configuration
class GRoIEConfig(StrictModel):
    """Pre/post modules of the generic RoI extractor"""
    pre_module: GRoIEModule = "conv7x7"
    post_module: GRoIEModule = "nonlocal7x7"
    aggregation: Literal["sum"] = "sum"
    per_level_weights: bool = False


class RoIExtractorConfig(StrictModel):
    """Which RoI extractor feeds a head"""
    type: Literal["baseline", "groie"] = "baseline"
    groie: GRoIEConfig = Field(default_factory=GRoIEConfig)
    canonical_size: float = 64.0  # box side mapped to canonical_level
    canonical_level: int = 4
    sampling_ratio: int = 2


class HeadConfig(StrictModel):
    """Detection head variant and Mask-IoU branch"""
    det_variant: HeadVariant = "fc_baseline"
    maskiou_enabled: bool = False
    maskiou_variant: HeadVariant = "fc_baseline"
    num_classes: int = Field(3, ge=1)
    in_channels: int = Field(256, ge=1)
    fc_channels: int = 1024
    reg_class_agnostic: bool = False
    nl_reduction: int = Field(2, ge=1)
    nl_large_kernel_on: Literal["all", "theta_phi"] = "all"


class LoopConfig(StrictModel):
    """
    Loop schedule; omitted fields are derived from train_loops

    The validator fills thresholds, alternation, loss weights and eval_loops
    so a parsed config always carries the full schedule.
    """
    train_loops: int = Field(3, ge=1, le=MAX_LOOPS)
    eval_loops: Optional[int] = Field(None, ge=1)
    thresholds: Optional[List[float]] = None
    alternation: Optional[str] = None
    loss_weights: Optional[List[float]] = None
    num_head_pairs: int = Field(1, ge=1)
    eval_alternation: Literal["cyclic", "last"] = "cyclic"
    eval_mask_iterations: Literal["eval_loops", "train_loops"] = "eval_loops"
    loc_weight: float = 1.0

    @model_validator(mode="after")
    def _fill_schedule(self) -> "LoopConfig":
        if self.thresholds is None:
            self.thresholds = threshold_schedule(self.train_loops)
        if self.alternation is None:
            self.alternation = "a" * self.train_loops
        if self.loss_weights is None:
            self.loss_weights = default_loss_weights(self.train_loops)
        if self.eval_loops is None:
            self.eval_loops = self.train_loops

        if len(self.thresholds) != self.train_loops:
            raise ValueError(f"thresholds has {len(self.thresholds)} entries, expected train_loops={self.train_loops}")
        if any(u < 0.5 or u > 0.9 for u in self.thresholds):
            raise ValueError(f"thresholds must lie within [0.5, 0.9], got {self.thresholds}")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {self.thresholds}")
        if len(self.alternation) != self.train_loops:
            raise ValueError(f"alternation {self.alternation!r} must have length train_loops={self.train_loops}")
        validate_alternation(self.alternation, self.num_head_pairs)
        if len(self.loss_weights) != self.train_loops:
            raise ValueError(f"loss_weights has {len(self.loss_weights)} entries, expected {self.train_loops}")
        return self


class AnchorConfig(StrictModel):
    """One anchor size per level (base_scale x stride) and a ratio set"""
    strides: List[int] = [4, 8, 16, 32]
    base_scale: float = 4.0
    ratios: List[float] = [0.5, 1.0, 2.0]


class RPNConfig(StrictModel):
    pre_nms_top_n: int = 2000
    post_nms_top_n_train: int = 1000
    post_nms_top_n_test: int = 300
    nms_threshold: float = 0.7
    min_size: float = 1.0
    score_floor: float = 0.0
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    allow_low_quality: bool = True
    num_samples: int = 256
    pos_fraction: float = 0.5


class SamplerConfig(StrictModel):
    """RoI sampling for the second stage"""
    num_rois: int = Field(512, gt=0)
    pos_fraction: float = Field(0.25, gt=0.0, le=1.0)
    add_gt_as_proposals: bool = True


class TestConfig(StrictModel):
    __test__ = False  # not a pytest class

    score_floor: float = 0.05
    nms_threshold: float = 0.5
    max_per_image: int = 100
    mask_threshold: float = 0.5


class ModelConfig(StrictModel):
    image_channels: int = 1
    backbone_width: int = 32
    fpn_channels: int = 64
    anchor: AnchorConfig = Field(default_factory=AnchorConfig)
    rpn: RPNConfig = Field(default_factory=RPNConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    bbox_roi_extractor: RoIExtractorConfig = Field(default_factory=RoIExtractorConfig)
    mask_roi_extractor: RoIExtractorConfig = Field(default_factory=RoIExtractorConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    loop: LoopConfig = Field(default_factory=LoopConfig)
    test: TestConfig = Field(default_factory=TestConfig)


# Dataset configuration
class GeneratorConfig(StrictModel):
    """Parameters of the synthetic-shapes generator"""
    n_images: int = Field(200, ge=0)
    image_size: int = Field(128, ge=64)
    instances_per_image: Tuple[int, int] = (1, 4)
    size_range: Tuple[int, int] = (12, 48)
    overlap_policy: Literal["sparse", "crowded"] = "sparse"
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "GeneratorConfig":
        lo, hi = self.instances_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"instances_per_image must be an increasing pair, got {self.instances_per_image}")
        smin, smax = self.size_range
        if smin < 4 or smax < smin or smax > self.image_size:
            raise ValueError(f"size_range {self.size_range} must lie within 4..image_size={self.image_size}")
        return self


class DatasetConfig(StrictModel):
    manifest: Optional[Path] = None
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    eval_manifest: Optional[Path] = None
    eval_generator: GeneratorConfig = Field(
        default_factory=lambda: GeneratorConfig(n_images=100, seed=1)
    )


class OptimConfig(StrictModel):
    epochs: int = Field(12, ge=1)
    batch_size: int = Field(2, ge=1)
    base_lr: float = 0.02
    reference_batch: int = 16
    weight_decay: float = 0.0001
    momentum: float = 0.9
    decay_epochs: List[int] = [8, 11]
    gamma: float = 0.1
    warmup_iters: int = 50
    grad_clip: Optional[float] = 10.0
    seed: int = 0
    num_workers: int = Field(0, ge=0)

    @property
    def lr(self) -> float:
        """Linearly scaled learning rate for the configured batch size"""
        return self.base_lr * self.batch_size / self.reference_batch


class AnalysisConfig(StrictModel):
    gt_source: Literal["random", "manifest"] = "random"
    num_gt_boxes: int = 10000
    gt_size_range: Tuple[float, float] = (8.0, 96.0)
    seed: int = 0


class ExperimentConfig(StrictModel):
    """Everything one experiment needs, validated before any work starts"""
    name: str = "default"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    output_dir: Path = Path("runs/default")


# Dataset file (COCO-style)
class CategoryRecord(BaseModel):
    id: int
    name: str
    supercategory: str = "shape"


class ImageRecord(BaseModel):
    id: int
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    file_name: str
    dropped_instances: int = 0


class RLEMask(BaseModel):
    """Uncompressed row-major run lengths, starting with a run of zeros"""
    size: Tuple[int, int]  # (height, width)
    counts: List[int]

    @model_validator(mode="after")
    def _check_counts(self) -> "RLEMask":
        h, w = self.size
        if any(c < 0 for c in self.counts):
            raise ValueError("run lengths must be non-negative")
        if sum(self.counts) != h * w:
            raise ValueError(f"run lengths sum to {sum(self.counts)}, expected {h * w}")
        return self


class AnnotationRecord(BaseModel):
    id: int
    image_id: int
    category_id: int
    bbox: Tuple[float, float, float, float]  # x, y, width, height
    area: int = Field(gt=0)
    segmentation: RLEMask
    iscrowd: int = 0


class DatasetManifest(BaseModel):
    info: Dict[str, Any] = Field(default_factory=dict)
    generator: Optional[GeneratorConfig] = None
    images: List[ImageRecord] = Field(default_factory=list)
    annotations: List[AnnotationRecord] = Field(default_factory=list)
    categories: List[CategoryRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_references(self) -> "DatasetManifest":
        image_ids = {img.id for img in self.images}
        if len(image_ids) != len(self.images):
            raise ValueError("duplicate image ids")
        category_ids = {cat.id for cat in self.categories}
        for ann in self.annotations:
            if ann.image_id not in image_ids:
                raise ValueError(f"annotation {ann.id} references unknown image {ann.image_id}")
            if ann.category_id not in category_ids:
                raise ValueError(f"annotation {ann.id} references unknown category {ann.category_id}")
        return self

    def annotations_by_image(self) -> Dict[int, List[AnnotationRecord]]:
        grouped: Dict[int, List[AnnotationRecord]] = {img.id: [] for img in self.images}
        for ann in self.annotations:
            grouped[ann.image_id].append(ann)
        return grouped


# Training instrumentation
class LoopStats(BaseModel):
    """Matched-IoU histogram and counters of one loop, accumulated over an epoch"""
    loop: int
    threshold: float
    histogram: List[int] = Field(default_factory=lambda: [0] * (len(IOU_HIST_EDGES) - 1))
    positives: int = 0
    negatives: int = 0
    iou_sum: float = 0.0
    steps: int = 0
    loss_sums: Dict[str, float] = Field(default_factory=dict)

    @property
    def mean_iou(self) -> Optional[float]:
        return self.iou_sum / self.positives if self.positives else None

    def mean_losses(self) -> Dict[str, float]:
        return {k: v / max(self.steps, 1) for k, v in self.loss_sums.items()}


class LoopTrace(BaseModel):
    """Per-loop statistics of positive training samples"""
    epoch: Optional[int] = None
    bin_edges: List[float] = Field(default_factory=lambda: list(IOU_HIST_EDGES))
    loops: List[LoopStats] = Field(default_factory=list)

    def _stats(self, loop: int, threshold: float) -> LoopStats:
        for stats in self.loops:
            if stats.loop == loop:
                return stats
        stats = LoopStats(loop=loop, threshold=threshold, histogram=[0] * (len(self.bin_edges) - 1))
        self.loops.append(stats)
        self.loops.sort(key=lambda s: s.loop)
        return stats

    def record(
        self,
        loop: int,
        threshold: float,
        positive_ious: Sequence[float],
        negatives: int,
        losses: Optional[Dict[str, float]] = None,
    ) -> None:
        """Add one step's positive IoUs and loss values to a loop"""
        stats = self._stats(loop, threshold)
        ious = np.clip(np.asarray(positive_ious, dtype=np.float64), self.bin_edges[0], self.bin_edges[-1])
        counts, _ = np.histogram(ious, bins=np.asarray(self.bin_edges))
        stats.histogram = [a + int(b) for a, b in zip(stats.histogram, counts)]
        stats.positives += int(ious.size)
        stats.negatives += int(negatives)
        stats.iou_sum += float(ious.sum())
        stats.steps += 1
        for name, value in (losses or {}).items():
            stats.loss_sums[name] = stats.loss_sums.get(name, 0.0) + float(value)

    def merge(self, other: "LoopTrace") -> None:
        for src in other.loops:
            dst = self._stats(src.loop, src.threshold)
            dst.histogram = [a + b for a, b in zip(dst.histogram, src.histogram)]
            dst.positives += src.positives
            dst.negatives += src.negatives
            dst.iou_sum += src.iou_sum
            dst.steps += src.steps
            for name, value in src.loss_sums.items():
                dst.loss_sums[name] = dst.loss_sums.get(name, 0.0) + value


# Result artifacts
class EvalResult(BaseModel):
    """COCO-style AP values of one task; -1 marks an empty size stratum"""
    task: Literal["bbox", "segm"]
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    per_class: Dict[str, float] = Field(default_factory=dict)

    def columns(self) -> Dict[str, float]:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_s": self.ap_s,
            "AP_m": self.ap_m,
            "AP_l": self.ap_l,
        }


class EvalReport(BaseModel):
    bbox: EvalResult
    segm: Optional[EvalResult] = None
    num_images: int
    checkpoint: Optional[str] = None
    eval_loops: Optional[int] = None


class ParamRow(BaseModel):
    name: str
    params: int
    description: str = ""


class ParamTable(BaseModel):
    rows: List[ParamRow]
    total: int


class FCCTotal(BaseModel):
    """Parameter total of one head variant next to its reference figure"""
    branch: Literal["detector", "maskiou"]
    variant: str
    trunk_params: int
    head_params: int
    reference_millions: float
    trunk_deviation_millions: float
    head_deviation_millions: float


class CoverageCurve(BaseModel):
    """Percentage of gt boxes whose best-anchor IoU falls below each bin"""
    bin_lo: List[float]
    bin_hi: List[float]
    miss_percent: List[float]
    num_gts: int
    num_anchors: int


class IoUHistogram(BaseModel):
    loop: int
    threshold: float
    bin_lo: List[float]
    bin_hi: List[float]
    counts: List[int]
    median: Optional[float]
    mean: Optional[float]


class RebalancingReport(BaseModel):
    histograms: List[IoUHistogram]
    excluded_loops: List[int] = Field(default_factory=list)
    verdict: Literal["rebalanced", "not-rebalanced", "not-applicable"]


class TrainingSummary(BaseModel):
    """What a finished training run left on disk"""
    experiment: str
    epochs: int
    iterations: int
    final_loss: float
    final_losses: Dict[str, float]
    checkpoint: str
    trace_files: List[str]
    loss_log: str

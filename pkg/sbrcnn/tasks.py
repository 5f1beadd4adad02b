"""
Experiment drivers for SBR-CNN
Each run_* function takes a validated ExperimentConfig and writes its artifacts under output_dir
"""
import json
import random
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
from pydantic import ValidationError
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader

from sbrcnn.analysis import emit_plot, evgt_curve, iou_rebalancing_report, random_gt_boxes
from sbrcnn.config import get_settings
from sbrcnn.exceptions import SBRCNNError
from sbrcnn.geometry import boxes_to_tensor, generate_anchors
from sbrcnn.heads import count_params, fcc_param_table, fcc_totals
from sbrcnn.metrics import evaluate
from sbrcnn.r3cnn import SBRCNN, InstancePrediction, infer, train_step
from sbrcnn.schemas import (
    CoverageCurve,
    DatasetConfig,
    DatasetManifest,
    EvalReport,
    ExperimentConfig,
    LoopTrace,
    OptimConfig,
    RebalancingReport,
    TrainingSummary,
)
from sbrcnn.services.checkpoint_service import CHECKPOINT_NAME, CheckpointService
from sbrcnn.services.export_service import ExportService
from sbrcnn.synthdata import (
    ShapesDataset,
    annotation_box,
    collate,
    generate_dataset,
    read_manifest,
    write_dataset,
)

logger = structlog.get_logger(__name__)

WARMUP_RATIO = 1.0 / 3.0
TRACE_DIR = "traces"
LOSS_LOG = "loss_log.jsonl"


# Runtime
def prepare_runtime(seed: int) -> torch.device:
    """Seed every random source and apply the process settings"""
    settings = get_settings()
    if settings.num_threads > 0:
        torch.set_num_threads(settings.num_threads)
    if settings.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    return torch.device(settings.device)


def _seed_worker(worker_id: int) -> None:
    seed = torch.initial_seed() % 2 ** 32
    np.random.seed(seed)
    random.seed(seed)


def _to_device(images, targets, device: torch.device):
    images = [img.to(device) for img in images]
    targets = [
        {k: v.to(device) if isinstance(v, torch.Tensor) else v for k, v in target.items()}
        for target in targets
    ]
    return images, targets


# Data
def load_split(config: DatasetConfig, split: str = "train") -> ShapesDataset:
    """
    Dataset for a split: the configured manifest when given, otherwise generated in memory

    Args:
        config: Dataset section
        split: "train" or "eval"

    Returns:
        ShapesDataset
    """
    if split not in ("train", "eval"):
        raise SBRCNNError(f"unknown split {split!r}")
    manifest_path = config.manifest if split == "train" else config.eval_manifest
    if manifest_path is not None:
        return ShapesDataset.from_path(manifest_path)
    generator = config.generator if split == "train" else config.eval_generator
    manifest, images = generate_dataset(generator)
    return ShapesDataset(manifest, images=images)


def _split_manifest(config: DatasetConfig) -> DatasetManifest:
    if config.manifest is not None:
        return read_manifest(config.manifest)
    manifest, _ = generate_dataset(config.generator)
    return manifest


def run_gen_data(config: ExperimentConfig) -> Dict[str, Path]:
    """
    Write the training and evaluation sets under ``<output_dir>/data``

    Returns:
        Split name -> annotations.json path
    """
    root = Path(config.output_dir) / "data"
    paths = {
        "train": write_dataset(config.dataset.generator, root / "train"),
        "eval": write_dataset(config.dataset.eval_generator, root / "eval"),
    }
    for split, path in paths.items():
        logger.info("dataset_written", split=split, path=str(path))
    return paths


# Training
def lr_factor(iteration: int, iters_per_epoch: int, optim: OptimConfig) -> float:
    """
    Multiplier of the scaled learning rate at an iteration

    Linear warm-up from WARMUP_RATIO over ``warmup_iters``, then a step decay
    by ``gamma`` once each of ``decay_epochs`` has been completed.
    """
    epoch = iteration // max(iters_per_epoch, 1)
    factor = optim.gamma ** sum(1 for e in optim.decay_epochs if epoch >= e)
    if optim.warmup_iters > 0 and iteration < optim.warmup_iters:
        factor *= WARMUP_RATIO + (1.0 - WARMUP_RATIO) * iteration / optim.warmup_iters
    return factor


def run_training(config: ExperimentConfig) -> TrainingSummary:
    """
    Train a model and write its checkpoint, per-epoch LoopTrace files and the loss log

    Args:
        config: Validated experiment config

    Returns:
        TrainingSummary with the final losses and the artifact paths
    """
    optim = config.optim
    device = prepare_runtime(optim.seed)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ExportService.write_json(config, out / "config.json")

    dataset = load_split(config.dataset, "train")
    if len(dataset) == 0:
        raise SBRCNNError("training set is empty")

    model = SBRCNN(config.model).to(device)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=optim.lr, momentum=optim.momentum, weight_decay=optim.weight_decay)

    loader_generator = torch.Generator()
    loader_generator.manual_seed(optim.seed)
    loader = DataLoader(
        dataset,
        batch_size=optim.batch_size,
        shuffle=True,
        collate_fn=collate,
        num_workers=optim.num_workers,
        generator=loader_generator,
        worker_init_fn=_seed_worker,
    )
    iters_per_epoch = len(loader)
    scheduler = LambdaLR(optimizer, lambda it: lr_factor(it, iters_per_epoch, optim))
    sampling_generator = torch.Generator()
    sampling_generator.manual_seed(optim.seed)

    checkpoints = CheckpointService()
    checkpoint_path = out / CHECKPOINT_NAME
    log_path = out / LOSS_LOG
    trace_files: List[str] = []
    last: Dict[str, float] = {}
    iteration = 0

    logger.info(
        "training_started",
        experiment=config.name,
        images=len(dataset),
        epochs=optim.epochs,
        iters_per_epoch=iters_per_epoch,
        lr=optim.lr,
        train_loops=config.model.loop.train_loops,
    )

    with log_path.open("w", encoding="utf-8") as loss_log:
        for epoch in range(1, optim.epochs + 1):
            epoch_trace = LoopTrace(epoch=epoch)
            epoch_loss = 0.0
            for images, targets in loader:
                images, targets = _to_device(images, targets, device)
                result = train_step(model, images, targets, generator=sampling_generator)
                if not torch.isfinite(result.total):
                    raise SBRCNNError(f"loss became non-finite at epoch {epoch}, iteration {iteration}")

                optimizer.zero_grad()
                result.total.backward()
                if optim.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, optim.grad_clip)
                lr = optimizer.param_groups[0]["lr"]
                optimizer.step()
                scheduler.step()

                epoch_trace.merge(result.trace)
                last = {"total": float(result.total.detach())}
                last.update({k: float(v.detach()) for k, v in result.losses.items()})
                loss_log.write(json.dumps({"epoch": epoch, "iteration": iteration, "lr": lr, **last}) + "\n")
                epoch_loss += last["total"]
                iteration += 1

            trace_path = ExportService.write_json(epoch_trace, out / TRACE_DIR / f"epoch_{epoch:03d}.json")
            trace_files.append(str(trace_path))
            checkpoints.save(checkpoint_path, model, config, epoch, extra={"iterations": iteration})
            logger.info(
                "epoch_finished",
                epoch=epoch,
                loss=epoch_loss / max(iters_per_epoch, 1),
                positives=[s.positives for s in epoch_trace.loops],
            )

    summary = TrainingSummary(
        experiment=config.name,
        epochs=optim.epochs,
        iterations=iteration,
        final_loss=last.get("total", float("nan")),
        final_losses=last,
        checkpoint=str(checkpoint_path),
        trace_files=trace_files,
        loss_log=str(log_path),
    )
    ExportService.write_json(summary, out / ExportService.get_filename("train_summary", "json"))
    return summary


# Evaluation
def predict_dataset(
    model: SBRCNN,
    dataset: ShapesDataset,
    eval_loops: Optional[int] = None,
    device: torch.device = torch.device("cpu"),
) -> Dict[int, List[InstancePrediction]]:
    """Run looped inference image by image; keyed by image id"""
    model.eval()
    predictions: Dict[int, List[InstancePrediction]] = {}
    for idx in range(len(dataset)):
        image, target = dataset[idx]
        predictions[target["image_id"]] = infer(model, [image.to(device)], eval_loops)[0]
    return predictions


def run_evaluation(
    config: ExperimentConfig,
    checkpoint: Optional[Path] = None,
    eval_loops: Optional[int] = None,
    split: str = "eval",
) -> EvalReport:
    """
    Evaluate a checkpoint on a split for both boxes and masks

    The model is rebuilt from the config stored in the checkpoint; the dataset
    comes from ``config``.

    Args:
        config: Experiment config (dataset section and output directory)
        checkpoint: Archive path; defaults to ``<output_dir>/checkpoint.pt``
        eval_loops: Override of L_e
        split: "eval" (held-out set) or "train"

    Returns:
        EvalReport, also written as eval.json and eval.txt
    """
    device = prepare_runtime(config.optim.seed)
    service = CheckpointService()
    path = Path(checkpoint) if checkpoint is not None else Path(config.output_dir) / CHECKPOINT_NAME
    trained, _ = service.load(path)
    model = SBRCNN(trained.model).to(device)
    service.restore(path, model)

    dataset = load_split(config.dataset, split)
    predictions = predict_dataset(model, dataset, eval_loops, device)
    loops = eval_loops if eval_loops is not None else trained.model.loop.eval_loops
    report = EvalReport(
        bbox=evaluate(predictions, dataset.manifest, "bbox"),
        segm=evaluate(predictions, dataset.manifest, "segm"),
        num_images=len(dataset),
        checkpoint=str(path),
        eval_loops=loops,
    )

    out = Path(config.output_dir)
    ExportService.write_json(report, out / ExportService.get_filename("eval", "json"))
    ExportService.write_text(ExportService.format_eval_report(report), out / ExportService.get_filename("eval"))
    logger.info(
        "evaluation_finished",
        split=split,
        images=len(dataset),
        eval_loops=loops,
        bbox_ap=report.bbox.ap,
        segm_ap=report.segm.ap if report.segm else None,
    )
    return report


# Parameter accounting
def run_count_params(config: ExperimentConfig) -> str:
    """
    Layer table, FCC totals and the configured detection head, as text

    Also writes params.txt and params.json under the output directory.
    """
    head = config.model.head
    layers = fcc_param_table(head.in_channels, head.fc_channels)
    totals = fcc_totals(head.in_channels)
    configured = count_params(head)
    text = "\n\n".join(
        [
            ExportService.format_param_table(layers, "FC vs L2C LAYERS"),
            ExportService.format_fcc_totals(totals),
            ExportService.format_param_table(configured, f"DETECTION HEAD ({head.det_variant})"),
        ]
    )
    out = Path(config.output_dir)
    ExportService.write_text(text, out / ExportService.get_filename("params"))
    ExportService.write_json(
        {
            "layers": layers.model_dump(mode="json"),
            "totals": [t.model_dump(mode="json") for t in totals],
            "configured_head": configured.model_dump(mode="json"),
        },
        out / ExportService.get_filename("params", "json"),
    )
    return text


# Analyses
def run_analyze_anchors(config: ExperimentConfig) -> CoverageCurve:
    """
    Coverage of gt boxes by the configured anchor grid

    Gts are random boxes or the training manifest's annotations, per the
    analysis section. Writes coverage.csv, coverage.png and coverage.txt.
    """
    analysis = config.analysis
    anchor = config.model.anchor
    size = config.dataset.generator.image_size
    image_size = (size, size)
    grid = generate_anchors(image_size, anchor.strides, [[anchor.base_scale * s] for s in anchor.strides], anchor.ratios)
    if analysis.gt_source == "random":
        gts = random_gt_boxes(analysis.num_gt_boxes, image_size, analysis.gt_size_range, analysis.seed)
    else:
        manifest = _split_manifest(config.dataset)
        gts = boxes_to_tensor([annotation_box(a) for a in manifest.annotations], dtype=torch.float64)

    curve = evgt_curve(grid, gts)
    out = Path(config.output_dir)
    emit_plot(curve, out / "coverage", title="Gt boxes without an anchor above IoU")
    ExportService.write_text(ExportService.format_coverage(curve), out / ExportService.get_filename("coverage"))
    logger.info("coverage_computed", gts=curve.num_gts, anchors=curve.num_anchors, source=analysis.gt_source)
    return curve


def resolve_trace_files(paths: Sequence[Path]) -> List[Path]:
    """
    Expand trace arguments; a directory stands for its final epoch file

    Raises:
        SBRCNNError: When a path is missing or a directory holds no traces
    """
    files: List[Path] = []
    for path in map(Path, paths):
        if path.is_dir():
            epochs = sorted(path.glob("epoch_*.json"))
            if not epochs:
                raise SBRCNNError(f"no epoch_*.json traces in {path}")
            files.append(epochs[-1])
        elif path.exists():
            files.append(path)
        else:
            raise SBRCNNError(f"trace file not found: {path}")
    return files


def load_trace(path: Path) -> LoopTrace:
    path = Path(path)
    try:
        return LoopTrace.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise SBRCNNError(f"{path}: not a LoopTrace ({e.error_count()} errors)") from e


def run_analyze_iou_dist(trace_paths: Sequence[Path], output_dir: Path) -> Tuple[RebalancingReport, List[Path]]:
    """
    Per-loop IoU histograms of positive samples and the rebalancing verdict

    Returns:
        (report, trace files used); writes iou_dist.csv, iou_dist.png and iou_dist.json
    """
    files = resolve_trace_files(trace_paths)
    report = iou_rebalancing_report([load_trace(f) for f in files])
    out = Path(output_dir)
    emit_plot(report, out / "iou_dist", title="IoU of positive samples per loop")
    ExportService.write_json(report, out / ExportService.get_filename("iou_dist", "json"))
    ExportService.write_text(ExportService.format_rebalancing(report), out / ExportService.get_filename("iou_dist"))
    logger.info("iou_distribution_analyzed", traces=[str(f) for f in files], verdict=report.verdict)
    return report, files

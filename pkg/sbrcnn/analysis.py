"""
Diagnostics: anchor coverage of gt boxes and per-loop IoU distributions
CSV files are the source of truth; PNG plots are rendered alongside them
"""
import csv
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import structlog
import torch

from sbrcnn.exceptions import InvalidInputError, SBRCNNError
from sbrcnn.geometry import AnchorGrid, Box, box_iou, boxes_to_tensor
from sbrcnn.schemas import CoverageCurve, IoUHistogram, LoopTrace, RebalancingReport

logger = structlog.get_logger(__name__)

COVERAGE_EDGES: List[float] = [round(0.30 + 0.05 * i, 2) for i in range(15)]
GT_CHUNK = 512


def best_anchor_iou(anchors: torch.Tensor, gts: torch.Tensor, chunk: int = GT_CHUNK) -> torch.Tensor:
    """Max IoU of every gt over all anchors, computed in gt chunks"""
    if anchors.shape[0] == 0:
        return torch.zeros(gts.shape[0], dtype=gts.dtype)
    best = []
    for start in range(0, gts.shape[0], chunk):
        best.append(box_iou(gts[start : start + chunk], anchors.to(gts.dtype)).max(dim=1).values)
    return torch.cat(best)


def evgt_curve(
    anchors: Union[AnchorGrid, torch.Tensor],
    gts: Union[torch.Tensor, Sequence[Box]],
    edges: Sequence[float] = COVERAGE_EDGES,
) -> CoverageCurve:
    """
    Coverage curve: for each IoU bin, percentage of gts whose best-anchor IoU is below its lower edge

    Args:
        anchors: Anchor grid or (N, 4) anchors
        gts: (G, 4) gt boxes or a list of Box
        edges: Bin edges, 0.05 wide over [0.3, 1.0] by default

    Returns:
        CoverageCurve, non-decreasing in the bin edge
    """
    anchor_boxes = anchors.all() if isinstance(anchors, AnchorGrid) else anchors
    gt_boxes = gts if isinstance(gts, torch.Tensor) else boxes_to_tensor(list(gts))
    if gt_boxes.shape[0] == 0:
        raise InvalidInputError("coverage needs at least one gt box")
    best = best_anchor_iou(anchor_boxes.to(torch.float64), gt_boxes.to(torch.float64)).numpy()
    lo = np.asarray(edges[:-1], dtype=np.float64)
    miss = [float(100.0 * np.mean(best < b)) for b in lo]
    return CoverageCurve(
        bin_lo=list(edges[:-1]),
        bin_hi=list(edges[1:]),
        miss_percent=miss,
        num_gts=int(gt_boxes.shape[0]),
        num_anchors=int(anchor_boxes.shape[0]),
    )


def random_gt_boxes(
    n: int,
    image_size: Tuple[int, int],
    size_range: Tuple[float, float] = (8.0, 96.0),
    seed: int = 0,
) -> torch.Tensor:
    """Boxes with log-uniform sides and uniform positions, fully inside the image"""
    rng = np.random.default_rng(seed)
    h, w = image_size
    lo, hi = size_range
    hi = min(hi, h, w)
    sides = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, 2)))
    x1 = rng.uniform(0, w - sides[:, 0])
    y1 = rng.uniform(0, h - sides[:, 1])
    boxes = np.stack([x1, y1, x1 + sides[:, 0], y1 + sides[:, 1]], axis=1)
    return torch.from_numpy(boxes)


def histogram_median(counts: Sequence[int], edges: Sequence[float]) -> Optional[float]:
    """Median of binned data, interpolated linearly inside the median bin"""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return None
    half = total / 2.0
    cum = np.cumsum(counts)
    b = int(np.searchsorted(cum, half, side="left"))
    before = cum[b - 1] if b > 0 else 0.0
    lo, hi = edges[b], edges[b + 1]
    return float(lo + (half - before) / counts[b] * (hi - lo))


def mass_above(histogram: IoUHistogram, threshold: float) -> float:
    """Fraction of a loop's positives in bins starting at or above threshold"""
    total = sum(histogram.counts)
    if total == 0:
        return 0.0
    above = sum(c for c, lo in zip(histogram.counts, histogram.bin_lo) if lo >= threshold - 1e-9)
    return above / total


def iou_rebalancing_report(traces: Sequence[LoopTrace]) -> RebalancingReport:
    """
    Aggregate traces and decide whether the positives' IoU shifts up loop after loop

    Loops without positives are excluded from the verdict. Fewer than two
    remaining loops give "not-applicable".
    """
    if not traces:
        raise InvalidInputError("need at least one trace")
    merged = LoopTrace(bin_edges=list(traces[0].bin_edges))
    for trace in traces:
        merged.merge(trace)

    edges = merged.bin_edges
    histograms, excluded = [], []
    for stats in merged.loops:
        if stats.positives == 0:
            excluded.append(stats.loop)
        histograms.append(
            IoUHistogram(
                loop=stats.loop,
                threshold=stats.threshold,
                bin_lo=edges[:-1],
                bin_hi=edges[1:],
                counts=stats.histogram,
                median=histogram_median(stats.histogram, edges),
                mean=stats.mean_iou,
            )
        )
    medians = [h.median for h in histograms if h.loop not in excluded]
    if len(medians) < 2:
        verdict = "not-applicable"
    elif all(b > a for a, b in zip(medians, medians[1:])):
        verdict = "rebalanced"
    else:
        verdict = "not-rebalanced"
    if excluded:
        logger.warning("loops_without_positives", loops=excluded)
    return RebalancingReport(histograms=histograms, excluded_loops=excluded, verdict=verdict)


# CSV + plot emission
def _rows(obj) -> Tuple[List[str], List[list]]:
    if isinstance(obj, CoverageCurve):
        return ["bin_lo", "bin_hi", "value"], [
            [lo, hi, v] for lo, hi, v in zip(obj.bin_lo, obj.bin_hi, obj.miss_percent)
        ]
    if isinstance(obj, RebalancingReport):
        obj = obj.histograms
    if isinstance(obj, IoUHistogram):
        obj = [obj]
    if isinstance(obj, (list, tuple)) and all(isinstance(h, IoUHistogram) for h in obj):
        rows = []
        for h in obj:
            rows += [[lo, hi, c, h.loop] for lo, hi, c in zip(h.bin_lo, h.bin_hi, h.counts)]
        return ["bin_lo", "bin_hi", "value", "loop"], rows
    raise InvalidInputError(f"cannot plot {type(obj).__name__}")


def write_csv(obj, path: Path) -> Path:
    header, rows = _rows(obj)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise SBRCNNError(f"cannot write {path}: {e}") from e
    return path


def read_csv(path: Path) -> List[dict]:
    """Parse a CSV written by ``write_csv``; numbers come back as float, loop as int"""
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or reader.fieldnames[:3] != ["bin_lo", "bin_hi", "value"]:
            raise InvalidInputError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for row in reader:
            parsed = {k: float(v) for k, v in row.items() if k != "loop"}
            if "loop" in row:
                parsed["loop"] = int(row["loop"])
            rows.append(parsed)
    return rows


def _render(rows: List[dict], path: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.05
    if rows and "loop" in rows[0]:
        loops = sorted({r["loop"] for r in rows})
        step = width / max(len(loops), 1)
        for i, loop in enumerate(loops):
            sel = [r for r in rows if r["loop"] == loop]
            total = sum(r["value"] for r in sel) or 1.0
            ax.bar(
                [r["bin_lo"] + i * step for r in sel],
                [r["value"] / total for r in sel],
                width=step,
                align="edge",
                label=f"loop {loop}",
            )
        ax.set_xlabel("IoU of positive samples")
        ax.set_ylabel("fraction")
        ax.legend()
    else:
        ax.bar([r["bin_lo"] for r in rows], [r["value"] for r in rows], width=width, align="edge")
        ax.set_xlabel("IoU")
        ax.set_ylabel("missed gt boxes (%)")
    ax.set_title(title)
    fig.tight_layout()
    try:
        fig.savefig(path)
    except OSError as e:
        raise SBRCNNError(f"cannot write {path}: {e}") from e
    finally:
        plt.close(fig)


def emit_plot(obj, path: Path, title: str = "") -> Tuple[Path, Path]:
    """
    Write ``<path>.csv`` and ``<path>.png`` for a curve, histogram set or report

    Returns:
        (csv path, png path)
    """
    path = Path(path)
    csv_path = write_csv(obj, path.with_suffix(".csv"))
    png_path = path.with_suffix(".png")
    _render(read_csv(csv_path), png_path, title)
    logger.info("plot_written", csv=str(csv_path), png=str(png_path))
    return csv_path, png_path


def plot_csv(csv_path: Path, out_path: Optional[Path] = None, title: str = "") -> Path:
    """Re-render a plot from an existing CSV"""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise SBRCNNError(f"CSV not found: {csv_path}")
    out = Path(out_path) if out_path is not None else csv_path.with_suffix(".png")
    _render(read_csv(csv_path), out, title or csv_path.stem)
    return out

"""
Export service for result artifacts
Formats parameter tables, evaluation reports and analysis summaries as text or JSON
"""
import json
from pathlib import Path
from typing import Sequence

from pydantic import BaseModel

from sbrcnn.schemas import CoverageCurve, EvalReport, FCCTotal, ParamTable, RebalancingReport


class ExportService:
    """Service for rendering and writing result artifacts"""

    @staticmethod
    def format_param_table(table: ParamTable, title: str = "PARAMETER COUNT") -> str:
        """
        Format a per-layer parameter table as aligned text

        Args:
            table: Rows and total
            title: Header line

        Returns:
            Formatted text string
        """
        width = max([len(r.name) for r in table.rows] + [5])
        lines = []

        # Header
        lines.append("=" * 60)
        lines.append(title)
        lines.append("=" * 60)

        for row in table.rows:
            lines.append(f"{row.name:<{width}}  {row.params:>12,}  {row.description}")

        lines.append("-" * 60)
        lines.append(f"{'Total':<{width}}  {table.total:>12,}")
        return "\n".join(lines)

    @staticmethod
    def format_fcc_totals(totals: Sequence[FCCTotal]) -> str:
        lines = []
        lines.append("=" * 60)
        lines.append("FCC HEAD TOTALS (millions)")
        lines.append("=" * 60)
        lines.append(f"{'branch':<9} {'variant':<16} {'trunk':>7} {'head':>7} {'ref':>6} {'dev':>7}")
        for t in totals:
            lines.append(
                f"{t.branch:<9} {t.variant:<16} {t.trunk_params / 1e6:>7.3f} "
                f"{t.head_params / 1e6:>7.3f} {t.reference_millions:>6.1f} {t.head_deviation_millions:>+7.3f}"
            )
        return "\n".join(lines)

    @staticmethod
    def format_eval_report(report: EvalReport) -> str:
        """
        Format AP results with the usual column names

        Args:
            report: Box and optional mask results

        Returns:
            Formatted text string
        """
        columns = ["AP", "AP50", "AP75", "AP_s", "AP_m", "AP_l"]
        lines = []

        # Header
        lines.append("=" * 60)
        lines.append("EVALUATION")
        lines.append("=" * 60)
        lines.append(f"Images: {report.num_images}")
        if report.checkpoint:
            lines.append(f"Checkpoint: {report.checkpoint}")
        if report.eval_loops:
            lines.append(f"Evaluation loops: {report.eval_loops}")
        lines.append("")

        lines.append(f"{'task':<6}" + "".join(f"{c:>8}" for c in columns))
        for result in (report.bbox, report.segm):
            if result is None:
                continue
            values = result.columns()
            lines.append(f"{result.task:<6}" + "".join(f"{values[c]:>8.3f}" for c in columns))

        lines.append("")
        lines.append("-" * 60)
        lines.append("PER CLASS (bbox AP)")
        lines.append("-" * 60)
        for name, ap in report.bbox.per_class.items():
            lines.append(f"  {name:<12} {ap:.3f}")
        return "\n".join(lines)

    @staticmethod
    def format_coverage(curve: CoverageCurve) -> str:
        lines = [f"Anchors: {curve.num_anchors}  GT boxes: {curve.num_gts}"]
        for lo, hi, miss in zip(curve.bin_lo, curve.bin_hi, curve.miss_percent):
            lines.append(f"  [{lo:.2f}, {hi:.2f})  {miss:6.2f}% missed")
        return "\n".join(lines)

    @staticmethod
    def format_rebalancing(report: RebalancingReport) -> str:
        lines = []
        for h in report.histograms:
            median = f"{h.median:.3f}" if h.median is not None else "n/a"
            mean = f"{h.mean:.3f}" if h.mean is not None else "n/a"
            lines.append(f"loop {h.loop} (u={h.threshold:.2f}): positives={sum(h.counts)} median={median} mean={mean}")
        if report.excluded_loops:
            lines.append(f"excluded (no positives): {report.excluded_loops}")
        lines.append(f"verdict: {report.verdict}")
        return "\n".join(lines)

    @staticmethod
    def write_json(obj, path: Path) -> Path:
        """Write a pydantic model (or a list of them) as indented JSON"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(obj, BaseModel):
            data = obj.model_dump(mode="json")
        elif isinstance(obj, list):
            data = [o.model_dump(mode="json") if isinstance(o, BaseModel) else o for o in obj]
        else:
            data = obj
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path

    @staticmethod
    def write_text(text: str, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
        return path

    @staticmethod
    def get_filename(kind: str, format: str = "txt") -> str:
        """
        Generate filename for an artifact

        Args:
            kind: Artifact kind (params, eval, coverage, iou_dist)
            format: File format (txt, json, csv)

        Returns:
            Filename string
        """
        return f"{kind}.{format}"


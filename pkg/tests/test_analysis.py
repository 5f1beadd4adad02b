import pytest
import torch

from sbrcnn.analysis import (
    COVERAGE_EDGES,
    emit_plot,
    evgt_curve,
    histogram_median,
    iou_rebalancing_report,
    plot_csv,
    random_gt_boxes,
    read_csv,
    write_csv,
)
from sbrcnn.exceptions import InvalidInputError, SBRCNNError
from sbrcnn.geometry import Box, generate_anchors, iou
from sbrcnn.schemas import AnchorConfig, LoopTrace


def default_grid(size=128):
    cfg = AnchorConfig()
    return generate_anchors((size, size), cfg.strides, [[cfg.base_scale * s] for s in cfg.strides], cfg.ratios)


def test_random_gt_boxes_stay_inside_the_image():
    boxes = random_gt_boxes(500, (64, 80), (8.0, 96.0), seed=1)
    assert boxes.shape == (500, 4)
    assert (boxes[:, 0] >= 0).all() and (boxes[:, 1] >= 0).all()
    assert (boxes[:, 2] <= 80).all() and (boxes[:, 3] <= 64).all()
    widths = boxes[:, 2] - boxes[:, 0]
    assert widths.min() >= 8.0 - 1e-9
    torch.testing.assert_close(boxes, random_gt_boxes(500, (64, 80), (8.0, 96.0), seed=1))


def test_coverage_curve_is_monotone_and_matches_brute_force():
    grid = default_grid(60)
    anchors = grid.all()
    assert anchors.shape[0] <= 1000
    gts = random_gt_boxes(50, (60, 60), (6.0, 60.0), seed=2)
    curve = evgt_curve(grid, gts)
    assert curve.miss_percent == sorted(curve.miss_percent)
    assert curve.num_gts == 50
    assert curve.num_anchors == anchors.shape[0]

    gt_list = [Box(*map(float, g)) for g in gts.tolist()]
    anchor_list = [Box(*map(float, a)) for a in anchors.tolist()]
    best = [max(iou(g, a) for a in anchor_list) for g in gt_list]
    expected = [100.0 * sum(b < lo for b in best) / len(best) for lo in COVERAGE_EDGES[:-1]]
    assert curve.miss_percent == pytest.approx(expected)


def test_coverage_needs_gts():
    with pytest.raises(InvalidInputError):
        evgt_curve(default_grid(64), torch.zeros((0, 4)))


@pytest.mark.slow
def test_coverage_vanishes_at_high_iou():
    curve = evgt_curve(default_grid(128), random_gt_boxes(10000, (128, 128), seed=0))
    assert curve.miss_percent == sorted(curve.miss_percent)
    low = curve.miss_percent[curve.bin_lo.index(0.55)]
    high = curve.miss_percent[curve.bin_lo.index(0.85)]
    assert high > 0
    assert high >= 3 * low


def test_histogram_median():
    edges = [round(0.5 + 0.05 * i, 2) for i in range(11)]
    assert histogram_median([0, 2, 2] + [0] * 7, edges) == pytest.approx(0.6)
    assert histogram_median([4] + [0] * 9, edges) == pytest.approx(0.525)
    assert histogram_median([0] * 10, edges) is None


def _trace(per_loop):
    trace = LoopTrace()
    for loop, (threshold, ious) in enumerate(per_loop, start=1):
        trace.record(loop=loop, threshold=threshold, positive_ious=ious, negatives=5)
    return trace


def test_rebalanced_when_medians_rise():
    trace = _trace([(0.5, [0.52, 0.58, 0.61]), (0.6, [0.66, 0.72, 0.8])])
    report = iou_rebalancing_report([trace])
    assert report.verdict == "rebalanced"
    assert report.excluded_loops == []
    assert [h.loop for h in report.histograms] == [1, 2]
    assert report.histograms[0].counts[0] == 1


def test_loop_without_positives_is_excluded():
    trace = _trace([(0.5, [0.55, 0.6]), (0.6, [0.7, 0.75]), (0.7, [])])
    report = iou_rebalancing_report([trace])
    assert report.excluded_loops == [3]
    assert report.verdict == "rebalanced"
    assert report.histograms[2].median is None


def test_rebalancing_verdicts():
    falling = _trace([(0.5, [0.8, 0.85]), (0.6, [0.6, 0.62])])
    assert iou_rebalancing_report([falling]).verdict == "not-rebalanced"
    single = _trace([(0.5, [0.6])])
    assert iou_rebalancing_report([single]).verdict == "not-applicable"
    with pytest.raises(InvalidInputError):
        iou_rebalancing_report([])


def test_traces_are_merged():
    a = _trace([(0.5, [0.55]), (0.6, [0.7])])
    b = _trace([(0.5, [0.56]), (0.6, [0.9])])
    report = iou_rebalancing_report([a, b])
    assert [sum(h.counts) for h in report.histograms] == [2, 2]


def test_emit_plot_writes_csv_and_png(tmp_path):
    curve = evgt_curve(default_grid(64), random_gt_boxes(20, (64, 64), seed=0))
    csv_path, png_path = emit_plot(curve, tmp_path / "coverage", "coverage")
    assert csv_path.name == "coverage.csv" and png_path.exists()
    rows = read_csv(csv_path)
    assert len(rows) == len(COVERAGE_EDGES) - 1
    assert rows[0]["bin_lo"] == pytest.approx(0.3)

    report = iou_rebalancing_report([_trace([(0.5, [0.55]), (0.6, [0.7])])])
    csv_path, _ = emit_plot(report, tmp_path / "iou_dist")
    rows = read_csv(csv_path)
    assert {r["loop"] for r in rows} == {1, 2}
    assert len(rows) == 20


def test_plot_csv(tmp_path):
    report = iou_rebalancing_report([_trace([(0.5, [0.55])])])
    csv_path = write_csv(report, tmp_path / "dist.csv")
    out = plot_csv(csv_path, tmp_path / "again.png", "again")
    assert out.exists()
    with pytest.raises(SBRCNNError):
        plot_csv(tmp_path / "missing.csv")


def test_unsupported_objects_are_not_plotted(tmp_path):
    with pytest.raises(InvalidInputError):
        write_csv({"a": 1}, tmp_path / "x.csv")

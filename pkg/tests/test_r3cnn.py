import math

import pydantic
import pytest
import torch

from sbrcnn.exceptions import InvalidInputError
from sbrcnn.heads import DetectionHead
from sbrcnn.loops import alternation_select, threshold_schedule
from sbrcnn.r3cnn import (
    SBRCNN,
    _loop_losses_single,
    average_scores,
    detection_loss,
    eval_pair,
    infer,
    mask_targets,
    paste_masks,
    train_step,
    weighted_loop_total,
)
from sbrcnn.schemas import HeadConfig, LoopConfig, LoopTrace
from sbrcnn.synthdata import collate

from tests.conftest import make_tiny_model_config


def _batch(dataset, n=2):
    return collate([dataset[i] for i in range(n)])


def test_threshold_schedules():
    assert threshold_schedule(1) == [0.5]
    assert threshold_schedule(3) == [0.5, 0.6, 0.7]
    assert threshold_schedule(5) == [0.5, 0.6, 0.7, 0.8, 0.9]
    with pytest.raises(InvalidInputError):
        threshold_schedule(0)


def test_alternation_is_cyclic():
    assert [alternation_select(t, "aab") for t in range(1, 7)] == list("aabaab")
    assert alternation_select(4, "ab") == "b"
    for bad in ("", "aB", "a1"):
        with pytest.raises(InvalidInputError):
            alternation_select(1, bad)
    with pytest.raises(InvalidInputError):
        alternation_select(0, "a")


def test_eval_pair_beyond_trained_loops():
    cyclic = LoopConfig(train_loops=2, alternation="ab", num_head_pairs=2, eval_loops=3)
    last = LoopConfig(train_loops=2, alternation="ab", num_head_pairs=2, eval_loops=3, eval_alternation="last")
    assert [eval_pair(t, cyclic) for t in (1, 2, 3)] == ["a", "b", "a"]
    assert [eval_pair(t, last) for t in (1, 2, 3)] == ["a", "b", "b"]


def test_loop_config_fills_schedule():
    cfg = LoopConfig(train_loops=3)
    assert cfg.thresholds == [0.5, 0.6, 0.7]
    assert cfg.alternation == "aaa"
    assert cfg.loss_weights == [1.0, 0.5, 0.25]
    assert cfg.eval_loops == 3


@pytest.mark.parametrize(
    "kwargs",
    [
        {"train_loops": 6},
        {"train_loops": 2, "thresholds": [0.6, 0.5]},
        {"train_loops": 2, "thresholds": [0.4, 0.6]},
        {"train_loops": 2, "alternation": "a"},
        {"train_loops": 2, "alternation": "ab"},
        {"train_loops": 2, "loss_weights": [1.0]},
    ],
)
def test_loop_config_rejects(kwargs):
    with pytest.raises(pydantic.ValidationError):
        LoopConfig(**kwargs)


def test_weighted_loop_total():
    losses = [torch.tensor(2.0)] * 3
    assert weighted_loop_total(losses, [1.0, 0.5, 0.25]).item() == pytest.approx(3.5)
    with pytest.raises(InvalidInputError):
        weighted_loop_total(losses, [1.0])


def test_average_scores():
    out = average_scores([torch.tensor([0.2, 0.8]), torch.tensor([0.4, 0.6])])
    torch.testing.assert_close(out, torch.tensor([0.3, 0.7]))
    with pytest.raises(InvalidInputError):
        average_scores([])


def test_detection_loss_all_background():
    logits = torch.zeros(4, 4, requires_grad=True)
    deltas = torch.rand(4, 3, 4, requires_grad=True)
    rois = torch.tensor([[0.0, 0.0, 10.0, 10.0]] * 4)
    cls_loss, loc_loss = detection_loss(logits, deltas, rois, torch.zeros(4, dtype=torch.int64), rois)
    assert cls_loss.item() == pytest.approx(math.log(4))
    assert loc_loss.item() == 0.0
    (cls_loss + loc_loss).backward()
    assert deltas.grad is not None


def test_detection_loss_exact_regression_is_zero():
    from sbrcnn.geometry import encode_deltas

    rois = torch.tensor([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 20.0, 25.0]])
    gts = torch.tensor([[1.0, 1.0, 12.0, 11.0], [5.0, 5.0, 20.0, 25.0]])
    labels = torch.tensor([2, 0])
    deltas = torch.zeros(2, 3, 4)
    deltas[0, 1] = encode_deltas(rois[:1], gts[:1])[0]
    _, loc_loss = detection_loss(torch.zeros(2, 4), deltas, rois, labels, gts)
    assert loc_loss.item() == pytest.approx(0.0, abs=1e-6)


def test_detection_head_loss_gradcheck():
    torch.manual_seed(0)
    head = DetectionHead(HeadConfig(det_variant="l2c_7x7", num_classes=2, in_channels=4, fc_channels=8)).double()
    torch.nn.init.normal_(head.fc_reg.weight, std=0.1)
    rois = torch.tensor([[2.0, 2.0, 20.0, 18.0], [30.0, 30.0, 50.0, 60.0]], dtype=torch.float64)
    gts = torch.tensor([[3.0, 1.0, 21.0, 19.0], [0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
    labels = torch.tensor([1, 0])
    x = torch.rand(2, 4, 7, 7, dtype=torch.float64, requires_grad=True)

    def loss(feats):
        logits, deltas = head(feats)
        return sum(detection_loss(logits, deltas, rois, labels, gts))

    assert torch.autograd.gradcheck(loss, (x,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_mask_targets_crop_and_binarize():
    gt = torch.zeros(1, 16, 16, dtype=torch.uint8)
    gt[0, :, :8] = 1
    rois = torch.tensor([[0.0, 0.0, 6.0, 16.0], [10.0, 0.0, 16.0, 16.0]])
    out = mask_targets(gt, torch.tensor([0, 0]), rois, size=4)
    assert out.shape == (2, 4, 4)
    assert out[0].sum().item() == 16
    assert out[1].sum().item() == 0
    assert mask_targets(gt, torch.zeros(0, dtype=torch.int64), torch.zeros(0, 4)).shape == (0, 28, 28)


def test_paste_masks():
    masks = torch.ones(2, 4, 4)
    boxes = torch.tensor([[2.0, 2.0, 6.0, 6.0], [5.0, 5.0, 5.0, 7.0]])
    out = paste_masks(masks, boxes, (8, 8))
    assert out.dtype == torch.bool
    assert out[0].sum().item() == 16
    assert out[0, 2:6, 2:6].all()
    assert not out[1].any()


def test_train_step_losses_and_trace(tiny_dataset, generator):
    torch.manual_seed(0)
    model = SBRCNN(make_tiny_model_config()).train()
    images, targets = _batch(tiny_dataset)
    result = train_step(model, images, targets, generator)
    assert torch.isfinite(result.total)
    assert set(result.losses) == {"loops", "rpn_obj", "rpn_box"}
    assert [s.loop for s in result.trace.loops] == [1, 2]
    for stats in result.trace.loops:
        assert sum(stats.histogram) == stats.positives
        assert stats.positives > 0
    result.total.backward()
    head = model.det_heads[0]
    assert head.fc_cls.weight.grad is not None
    assert model.mask_heads[0].c1.weight.grad is not None


def test_train_step_with_two_head_pairs(tiny_dataset, generator):
    torch.manual_seed(0)
    model = SBRCNN(make_tiny_model_config(train_loops=2, alternation="ab", num_head_pairs=2)).train()
    images, targets = _batch(tiny_dataset)
    train_step(model, images, targets, generator).total.backward()
    for pair in range(2):
        grad = model.det_heads[pair].fc_cls.weight.grad
        assert grad is not None and grad.abs().sum() > 0


def test_single_head_pair_is_shared_by_every_loop(tiny_dataset, generator):
    torch.manual_seed(0)
    model = SBRCNN(make_tiny_model_config(train_loops=3, num_head_pairs=1)).train()
    images, targets = _batch(tiny_dataset)
    result = train_step(model, images, targets, generator)
    assert len(result.loop_losses) == 3
    assert all(s.positives > 0 for s in result.trace.loops)

    heads = {"det": model.det_heads[0], "mask": model.mask_heads[0]}
    touched = []
    for loss in result.loop_losses:
        model.zero_grad(set_to_none=True)
        loss.backward(retain_graph=True)
        for head in heads.values():
            assert all(p.grad is not None for p in head.parameters())
            assert sum(p.grad.abs().sum() for p in head.parameters()) > 0
        touched.append({name for name, p in model.named_parameters() if p.grad is not None})
    assert touched[0] == touched[1] == touched[2]
    assert not any(name.startswith("rpn.") for name in touched[0])


def test_loop_losses_recompose_the_weighted_total(tiny_dataset, generator):
    torch.manual_seed(0)
    model = SBRCNN(make_tiny_model_config(train_loops=3)).train()
    images, targets = _batch(tiny_dataset)
    result = train_step(model, images, targets, generator)
    recomposed = weighted_loop_total(result.loop_losses, model.loop.loss_weights)
    torch.testing.assert_close(recomposed, result.losses["loops"])


def test_forward_dispatch(tiny_dataset):
    model = SBRCNN(make_tiny_model_config()).train()
    images, _ = _batch(tiny_dataset)
    with pytest.raises(InvalidInputError):
        model(images)
    with pytest.raises(InvalidInputError):
        model.head_pair("c")


def test_infer_sorted_predictions(tiny_dataset):
    torch.manual_seed(0)
    model = SBRCNN(make_tiny_model_config()).eval()
    images, _ = _batch(tiny_dataset)
    results = infer(model, images)
    assert len(results) == 2
    for preds in results:
        scores = [p.score for p in preds]
        assert scores == sorted(scores, reverse=True)
        for p in preds:
            assert 1 <= p.label <= 3
            assert p.mask.shape == (64, 64)
            assert p.box.is_valid()
    with pytest.raises(InvalidInputError):
        infer(model, images, eval_loops=0)


def _summary(results):
    return [[(p.label, round(p.score, 6), tuple(round(v, 4) for v in p.box)) for p in preds] for preds in results]


def test_eval_loops_change_predictions(tiny_dataset):
    torch.manual_seed(0)
    model = SBRCNN(make_tiny_model_config(train_loops=3)).eval()
    torch.nn.init.normal_(model.det_heads[0].fc_reg.weight, std=0.1)
    images, _ = _batch(tiny_dataset)
    assert _summary(infer(model, images, eval_loops=1)) != _summary(infer(model, images, eval_loops=3))


def test_one_eval_loop_matches_single_loop_model(tiny_dataset):
    torch.manual_seed(0)
    looped = SBRCNN(make_tiny_model_config(train_loops=3)).eval()
    single = SBRCNN(make_tiny_model_config(train_loops=1)).eval()
    single.load_state_dict(looped.state_dict())
    images, _ = _batch(tiny_dataset)
    assert _summary(infer(looped, images, eval_loops=1)) == _summary(infer(single, images))


def test_loop_composition_gradcheck():
    torch.manual_seed(0)
    model = SBRCNN(make_tiny_model_config(train_loops=2)).double().train()
    levels = [torch.rand(1, 16, 64 // s, 64 // s, dtype=torch.float64) for s in (4, 8, 16, 32)]
    gt_boxes = torch.tensor([[8.0, 8.0, 28.0, 28.0], [34.0, 30.0, 60.0, 58.0]], dtype=torch.float64)
    masks = torch.zeros(2, 64, 64, dtype=torch.uint8)
    masks[0, 8:28, 8:28] = 1
    masks[1, 30:58, 34:60] = 1
    target = {"boxes": gt_boxes, "labels": torch.tensor([1, 2]), "masks": masks}
    proposals = torch.tensor(
        [
            [6.0, 9.0, 27.0, 30.0],
            [10.0, 6.0, 30.0, 26.0],
            [33.0, 28.0, 58.0, 57.0],
            [36.0, 33.0, 61.0, 59.0],
            [0.0, 40.0, 20.0, 63.0],
            [40.0, 0.0, 63.0, 20.0],
        ],
        dtype=torch.float64,
    )
    head = model.det_heads[0]
    weights = model.loop.loss_weights

    def total(weight, bias):
        # refinement is detached; these weights only steer it through the negatives'
        # foreground argmax, which a finite-difference step does not flip here
        g = torch.Generator()
        g.manual_seed(0)
        losses = _loop_losses_single(model, levels, (4, 8, 16, 32), proposals, target, (64, 64), g, LoopTrace())
        return weighted_loop_total(losses, weights)

    assert torch.autograd.gradcheck(total, (head.fc_cls.weight, head.fc_cls.bias), eps=1e-6, atol=1e-8, rtol=1e-4)

import pytest
import torch

from sbrcnn.exceptions import InvalidInputError
from sbrcnn.heads import (
    DetectionHead,
    MaskHead,
    MaskIoUHead,
    NonLocalBlock,
    Trunk,
    count_params,
    detection_head_forward,
    fcc_param_table,
    fcc_totals,
    mask_head_forward,
    mask_iou_targets,
    maskiou_head_forward,
    nonlocal_forward,
    parse_variant,
)
from sbrcnn.schemas import HeadConfig


def test_fcc_param_table_rows():
    table = fcc_param_table(256, 1024)
    assert [(r.name, r.params) for r in table.rows] == [
        ("FC 1", 12_846_080),
        ("L2C (conv1)", 1_605_760),
        ("L2C (conv1a)", 1_376_512),
        ("L2C (conv1b)", 688_256),
        ("FC 2", 1_049_600),
        ("L2C (conv2)", 401_472),
        ("L2C (conv2a)", 344_192),
        ("L2C (conv2b)", 172_096),
    ]
    assert table.rows[2].description == "l2c_rect.conv1a (7x3)"


def test_fcc_totals_at_eighty_classes():
    totals = {(t.branch, t.variant): t for t in fcc_totals(256, 80, True)}
    assert totals[("detector", "fc_baseline")].head_params == 13_982_805
    assert totals[("detector", "fc_baseline")].trunk_params == 13_895_680
    assert totals[("detector", "l2c_7x7")].head_params == 2_273_877
    assert totals[("detector", "l2c_7x7")].trunk_params == 2_007_232
    assert totals[("detector", "l2c_rect")].head_params == 2_847_701
    assert totals[("detector", "l2c_7x7+nl_b")].head_params == 8_697_045
    assert totals[("detector", "l2c_rect+nl_b")].head_params == 9_270_869
    assert totals[("maskiou", "fc_baseline")].head_params == 16_340_304
    assert totals[("maskiou", "l2c_7x7")].head_params == 4_620_816
    assert totals[("maskiou", "l2c_rect")].head_params == 5_194_640
    assert totals[("maskiou", "l2c_7x7+nl_b")].head_params == 11_043_984
    assert totals[("maskiou", "l2c_rect+nl_b")].head_params == 11_617_808

    baseline = totals[("detector", "fc_baseline")]
    assert baseline.head_deviation_millions == pytest.approx(round(13.982805 - 14.0, 4))


def test_nonlocal_block_is_identity_at_init():
    block = NonLocalBlock(8, 7)
    x = torch.rand(2, 8, 7, 7)
    torch.testing.assert_close(nonlocal_forward(block, x), x)


def test_nonlocal_attention_rows_sum_to_one():
    torch.manual_seed(0)
    block = NonLocalBlock(8, 1)
    attn = block.attention(torch.rand(3, 8, 7, 7))
    assert attn.shape == (3, 49, 49)
    torch.testing.assert_close(attn.sum(-1), torch.ones(3, 49))


def test_nonlocal_kernel_placement():
    full = NonLocalBlock(8, 7, 2, "all")
    narrow = NonLocalBlock(8, 7, 2, "theta_phi")
    assert count_params(narrow).total == 2 * (8 * 4 * 49 + 4) + (8 * 4 + 4) + (4 * 8 + 8)
    assert count_params(full).total > count_params(narrow).total
    with pytest.raises(InvalidInputError):
        NonLocalBlock(8, 4)


def test_nonlocal_gradcheck():
    torch.manual_seed(0)
    block = NonLocalBlock(2, 3, 2).double()
    torch.nn.init.normal_(block.w_out.weight, std=0.5)
    x = torch.rand(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(block, (x,), eps=1e-6, atol=1e-4)


@pytest.mark.parametrize("variant", ["fc_baseline", "l2c_7x7", "l2c_rect", "l2c_rect+nl_b", "l2c_7x7+nl_b+nl_a"])
def test_detection_head_shapes(variant):
    cfg = HeadConfig(det_variant=variant, num_classes=3, in_channels=8, fc_channels=32)
    logits, deltas = detection_head_forward(DetectionHead(cfg), torch.rand(5, 8, 7, 7))
    assert logits.shape == (5, 4)
    assert deltas.shape == (5, 3, 4)


def test_class_agnostic_deltas_are_shared():
    cfg = HeadConfig(det_variant="l2c_7x7", num_classes=3, in_channels=8, reg_class_agnostic=True)
    head = DetectionHead(cfg)
    torch.nn.init.normal_(head.fc_reg.weight, std=0.1)
    _, deltas = head(torch.rand(2, 8, 7, 7))
    torch.testing.assert_close(deltas[:, 0], deltas[:, 2])


def test_detection_head_rejects_wrong_roi_size():
    head = DetectionHead(HeadConfig(det_variant="l2c_7x7", in_channels=8))
    with pytest.raises(InvalidInputError):
        head(torch.rand(2, 8, 14, 14))


def test_count_params_of_config():
    cfg = HeadConfig(det_variant="l2c_7x7", in_channels=16, fc_channels=32, num_classes=3)
    table = count_params(cfg)
    # conv1 6280, conv2 1572, fc_cls 788, fc_reg 2364
    assert table.total == 11_004
    assert [r.name for r in table.rows] == ["trunk.layers.conv1", "trunk.layers.conv2", "fc_cls", "fc_reg"]


def test_mask_head_loop_index():
    torch.manual_seed(0)
    head = MaskHead(4, 3)
    x = torch.rand(2, 4, 14, 14)
    once = mask_head_forward(head, x, 1)
    twice = head(x, 2)
    assert once.shape == (2, 3, 28, 28)
    assert not torch.allclose(once, twice)
    with pytest.raises(InvalidInputError):
        head(x, 0)


@pytest.mark.parametrize("t", [1, 2, 3, 4, 5])
def test_mask_head_shape_and_size_do_not_depend_on_loop(t):
    torch.manual_seed(0)
    head = MaskHead(4, 3)
    # m1: 4 x (4*4*9 + 4), c1: 4*4 + 4, upsample: 4*4*2*2 + 4, c2: 3*4 + 3
    assert count_params(head).total == 695
    out = mask_head_forward(head, torch.rand(5, 4, 14, 14), t)
    assert out.shape == (5, 3, 28, 28)
    out.sum().backward()
    assert all(p.grad is not None for p in head.parameters())
    assert count_params(head).total == 695


def test_mask_head_gradcheck_with_internal_loop():
    torch.manual_seed(0)
    head = MaskHead(2, 1, num_convs=1).double()
    x = torch.rand(1, 2, 14, 14, dtype=torch.float64, requires_grad=True)

    def loss(inp):
        return torch.sigmoid(head(inp, 2)).mean()

    assert torch.autograd.gradcheck(loss, (x,), eps=1e-6, atol=1e-4)


def test_maskiou_head_shape():
    cfg = HeadConfig(maskiou_enabled=True, maskiou_variant="l2c_7x7", num_classes=3, in_channels=8, fc_channels=32)
    head = MaskIoUHead(cfg)
    out = maskiou_head_forward(head, torch.rand(4, 8, 14, 14), torch.rand(4, 1, 28, 28))
    assert out.shape == (4, 3)


def test_mask_iou_targets():
    pred = torch.tensor([[[0.9, 0.9], [0.1, 0.1]], [[0.0, 0.0], [0.0, 0.0]]])
    gt = torch.tensor([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]])
    assert mask_iou_targets(pred, gt).tolist() == [0.5, 0.0]


def test_parse_variant():
    assert parse_variant("l2c_rect+nl_b") == ("l2c_rect", True, False)
    assert parse_variant("l2c_7x7+nl_b+nl_a") == ("l2c_7x7", True, True)
    for bad in ("l2c_9x9", "l2c_7x7+nl_c", "fc_baseline+nl_b"):
        with pytest.raises(InvalidInputError):
            parse_variant(bad)


def test_trunk_output_features():
    assert Trunk("l2c_rect", 16).out_features == 4 * 49
    assert Trunk("fc_baseline", 16, fc_channels=32).out_features == 32

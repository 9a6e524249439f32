import pytest
import torch

from mscanet.blocks import (
    CAB,
    MSEDA,
    PCBAM,
    ChannelAttention,
    MultiDilateAttention,
    PositionAttention,
    SpatialAttention,
    dilated_window_attention,
)
from mscanet.errors import ConfigError, NumericError

from oracles import central_diff, rel_error


def _randomize_scalars(block):
    """Move the zero-initialised gates off zero so every path carries gradient."""
    with torch.no_grad():
        for name, p in block.named_parameters():
            if name.split(".")[-1] in ("lambda1", "lambda2", "alpha", "gamma"):
                p.uniform_(0.3, 0.8)


def _grad_check(block, shape, seed=0, scalars=("lambda1", "lambda2", "alpha", "gamma")):
    torch.manual_seed(seed)
    block = block.double()
    _randomize_scalars(block)
    x = torch.randn(*shape, dtype=torch.float64, requires_grad=True)
    block(x).sum().backward()
    errs = {"input": rel_error(x.grad, central_diff(lambda: block(x).sum(), x))}
    for name, p in block.named_parameters():
        if name.split(".")[-1] in scalars:
            errs[name] = rel_error(p.grad, central_diff(lambda: block(x).sum(), p))
    return errs


# ---------------------------------------------------------------------------
# MSEDA
# ---------------------------------------------------------------------------

def test_mseda_preserves_shape():
    block = MSEDA(16)
    assert block(torch.randn(1, 16, 32, 32)).shape == (1, 16, 32, 32)


def test_mseda_zero_lambdas_leave_input_untouched():
    torch.manual_seed(1)
    block = MSEDA(8, head_count=2, dilations=[1, 2])
    x = torch.randn(2, 8, 12, 12)
    assert torch.equal(block.pre_embedding(x), x)


def test_mseda_nonzero_lambdas_change_features():
    torch.manual_seed(1)
    block = MSEDA(8)
    _randomize_scalars(block)
    x = torch.randn(1, 8, 12, 12)
    assert not torch.allclose(block.pre_embedding(x), x)


def test_mseda_gradients():
    errs = _grad_check(MSEDA(4), (1, 4, 8, 8))
    assert set(errs) == {"input", "lambda1", "lambda2"}
    assert max(errs.values()) < 1e-3, errs


def test_mseda_rejects_channel_mismatch_and_nonfinite():
    block = MSEDA(8)
    with pytest.raises(ConfigError):
        block(torch.randn(1, 4, 8, 8))
    x = torch.randn(1, 8, 8, 8)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        block(x)


def test_mseda_rounds_attention_width_up_to_head_multiple():
    block = MSEDA(16, head_count=3)
    assert block.attn.attn_channels == 18


# ---------------------------------------------------------------------------
# multi-dilate attention
# ---------------------------------------------------------------------------

def test_receptive_fields_for_default_dilations():
    mda = MultiDilateAttention(12, head_count=3, dilations=[1, 2, 3])
    assert mda.receptive_fields == [3, 5, 7]


def test_window_weights_sum_to_one():
    torch.manual_seed(0)
    mda = MultiDilateAttention(12)
    for attn in mda.attention_weights(torch.randn(2, 12, 9, 7)):
        assert attn.shape == (2, 9, 63)
        assert torch.allclose(attn.sum(dim=1), torch.ones(2, 63), atol=1e-6)


@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_constant_keys_and_values_give_constant_output(dilation):
    torch.manual_seed(dilation)
    c = torch.tensor([0.7, -1.3, 2.0])
    q = torch.randn(2, 3, 10, 9)
    k = torch.randn(1, 3, 1, 1).expand(2, 3, 10, 9).contiguous()
    v = c.view(1, 3, 1, 1).expand(2, 3, 10, 9).contiguous()
    out, _ = dilated_window_attention(q, k, v, dilation)
    assert torch.allclose(out, v, atol=1e-6)


def test_window_attention_matches_explicit_loop():
    # per-pixel reference over the in-bounds taps of a dilated 3x3 window
    torch.manual_seed(3)
    d, h, w, r = 2, 6, 5, 2
    q, k, v = (torch.randn(1, d, h, w, dtype=torch.float64) for _ in range(3))
    out, _ = dilated_window_attention(q, k, v, r)
    ref = torch.zeros_like(out)
    for y in range(h):
        for x in range(w):
            taps = [(y + dy * r, x + dx * r) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
            taps = [(a, b) for a, b in taps if 0 <= a < h and 0 <= b < w]
            logits = torch.stack([(q[0, :, y, x] * k[0, :, a, b]).sum() / d**0.5 for a, b in taps])
            wts = logits.softmax(0)
            ref[0, :, y, x] = sum(wt * v[0, :, a, b] for wt, (a, b) in zip(wts, taps))
    assert torch.allclose(out, ref, atol=1e-12)


def test_mda_rejects_indivisible_channels():
    with pytest.raises(ConfigError):
        MultiDilateAttention(16, head_count=3)
    with pytest.raises(ConfigError):
        MultiDilateAttention(12, head_count=3, dilations=[1, 2])


# ---------------------------------------------------------------------------
# PCBAM pieces
# ---------------------------------------------------------------------------

def test_cam_range_and_shape():
    cam = ChannelAttention(16)
    out = cam(torch.randn(3, 16, 5, 5) * 10)
    assert out.shape == (3, 16, 1, 1)
    assert ((out > 0) & (out < 1)).all()


def test_cam_hidden_width():
    assert ChannelAttention(16).hidden == 2
    assert ChannelAttention(4).hidden == 1


def test_cam_zero_input_gives_half():
    cam = ChannelAttention(8)
    with torch.no_grad():
        for m in cam.mlp:
            if hasattr(m, "bias"):
                m.bias.zero_()
    out = cam(torch.zeros(1, 8, 4, 4))
    assert torch.equal(out, torch.full((1, 8, 1, 1), 0.5))


def test_sam_shape_and_range():
    sam = SpatialAttention()
    out = sam(torch.randn(1, 16, 32, 32))
    assert out.shape == (1, 1, 32, 32)
    assert ((out > 0) & (out < 1)).all()


def test_sam_gradients():
    torch.manual_seed(0)
    sam = SpatialAttention().double()
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    sam(x).sum().backward()
    assert rel_error(x.grad, central_diff(lambda: sam(x).sum(), x)) < 1e-3


def test_pam_identity_when_alpha_zero():
    pam = PositionAttention(8)
    f = torch.randn(2, 8, 6, 6)
    assert torch.equal(pam(f), f)


def test_pam_rows_sum_to_one():
    pam = PositionAttention(8)
    _, s = pam(torch.randn(2, 8, 5, 7), return_attention=True)
    assert s.shape == (2, 35, 35)
    assert torch.allclose(s.sum(-1), torch.ones(2, 35), atol=1e-6)


def test_pam_single_position():
    torch.manual_seed(0)
    pam = PositionAttention(4)
    with torch.no_grad():
        pam.alpha.fill_(0.7)
    f = torch.randn(1, 4, 1, 1)
    out, s = pam(f, return_attention=True)
    assert torch.equal(s, torch.ones(1, 1, 1))
    # N = 1: the softmax is [[1]], so F_P = alpha * D + f
    assert torch.allclose(out, 0.7 * pam.value(f) + f)


def test_pam_budget():
    pam = PositionAttention(4, max_positions=64)
    pam(torch.randn(1, 4, 8, 8))
    with pytest.raises(ConfigError, match="coarser level"):
        pam(torch.randn(1, 4, 8, 9))


def test_pcbam_shape():
    assert PCBAM(32)(torch.randn(2, 32, 16, 16)).shape == (2, 32, 16, 16)


def test_pcbam_literal_sum_at_init():
    torch.manual_seed(0)
    block = PCBAM(8)
    f = torch.randn(1, 8, 6, 6)
    fc = block.cam(f) * f
    expected = fc + block.sam(fc) + f
    assert torch.allclose(block(f), expected, atol=1e-6)


def test_pcbam_multiplicative_variant():
    torch.manual_seed(0)
    block = PCBAM(8, fusion="multiply")
    f = torch.randn(1, 8, 6, 6)
    fc = block.cam(f) * f
    assert torch.allclose(block(f), fc * block.sam(fc) + f, atol=1e-6)
    with pytest.raises(ConfigError):
        PCBAM(8, fusion="concat")


def test_pcbam_gradients():
    errs = _grad_check(PCBAM(8), (1, 8, 8, 8))
    assert "pam.alpha" in errs
    assert max(errs.values()) < 1e-3, errs


# ---------------------------------------------------------------------------
# CAB
# ---------------------------------------------------------------------------

def test_cab_zero_gamma():
    block = CAB(8)
    y, ca = block.aggregate(torch.randn(2, 8, 7, 7))
    assert torch.equal(y, ca)


def test_cab_shape():
    assert CAB(16)(torch.randn(1, 16, 32, 32)).shape == (1, 16, 32, 32)


def test_cab_gradients():
    errs = _grad_check(CAB(4), (1, 4, 8, 8))
    assert "gamma" in errs
    assert max(errs.values()) < 1e-3, errs


# ---------------------------------------------------------------------------
# cross-cutting properties
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("make", [lambda: MSEDA(6), lambda: PCBAM(6), lambda: CAB(6)])
def test_finite_on_wide_inputs(make):
    torch.manual_seed(0)
    block = make()
    _randomize_scalars(block)
    x = torch.empty(2, 6, 12, 12).uniform_(-10, 10)
    assert torch.isfinite(block(x)).all()


@pytest.mark.parametrize("make", [lambda: MSEDA(6), lambda: PCBAM(6), lambda: CAB(6)])
def test_deterministic(make):
    torch.manual_seed(5)
    a = make()
    torch.manual_seed(5)
    b = make()
    x = torch.randn(1, 6, 8, 8)
    assert torch.equal(a(x), b(x))

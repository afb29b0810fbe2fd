import numpy as np
import pytest
import torch

from ovsam.decoder import (
    FourierPositionEncoding,
    MaskPrediction,
    Prompt,
    PromptableDecoder,
    binarize,
)
from ovsam.ops import Attention


@pytest.fixture(scope="module")
def decoder():
    torch.manual_seed(0)
    d = PromptableDecoder()
    d.eval()
    return d


# -- positional encoding -------------------------------------------------------


def test_fourier_pe_deterministic_and_dim():
    pe1 = FourierPositionEncoding(64)
    pe2 = FourierPositionEncoding(64)
    xy = torch.tensor([[0.3, 0.7]])
    assert torch.equal(pe1(xy), pe2(xy))
    assert pe1(xy).shape == (1, 64)


def test_fourier_pe_nondegenerate_corners():
    pe = FourierPositionEncoding(64)
    a = pe(torch.tensor([[0.0, 0.0]]))[0]
    b = pe(torch.tensor([[1.0, 1.0]]))[0]
    cos = torch.nn.functional.cosine_similarity(a, b, dim=0)
    assert float(cos) < 0.99


def test_fourier_pe_clamps_out_of_range():
    pe = FourierPositionEncoding(64)
    pe.clamped = False
    inside = pe(torch.tensor([[1.0, 0.5]]))
    out = pe(torch.tensor([[1.5, 0.5]]))
    assert pe.clamped
    assert torch.equal(inside, out)


# -- prompt encoding -----------------------------------------------------------


def test_point_prompt_token_counts(decoder):
    tok = decoder.encode_point_prompts([(10.0, 20.0, True)], (128, 128))
    assert tok.shape == (1, 1, 64)
    tok3 = decoder.encode_point_prompts(
        [(1.0, 2.0, True), (3.0, 4.0, False), (5.0, 6.0, True)], (128, 128)
    )
    assert tok3.shape == (3, 1, 64)


def test_point_fg_bg_differ_by_type_embedding(decoder):
    fg = decoder.encode_point_prompts([(40.0, 60.0, True)], (128, 128))[0, 0]
    bg = decoder.encode_point_prompts([(40.0, 60.0, False)], (128, 128))[0, 0]
    delta = decoder.point_type.weight[1] - decoder.point_type.weight[0]
    assert torch.allclose(fg - bg, delta, atol=1e-6)


def test_empty_prompt_sets_raise(decoder):
    with pytest.raises(ValueError):
        decoder.encode_point_prompts([], (128, 128))
    with pytest.raises(ValueError):
        decoder.encode_box_prompts([], (128, 128))
    with pytest.raises(ValueError):
        decoder.encode_prompts([], (128, 128))


def test_box_prompt_two_tokens_and_corner_types(decoder):
    tok = decoder.encode_box_prompts([(8.0, 8.0, 40.0, 40.0)], (128, 128))
    assert tok.shape == (1, 2, 64)
    n = decoder.encode_box_prompts([(1, 1, 5, 5), (2, 2, 9, 9)], (128, 128))
    assert n.shape == (2, 2, 64)
    # corner-type embeddings are distinguishable
    same_xy = decoder.encode_box_prompts([(10, 10, 10.01, 10.01)], (128, 128))[0]
    assert not torch.allclose(same_xy[0], same_xy[1])


def test_degenerate_box_raises(decoder):
    with pytest.raises(ValueError):
        decoder.encode_box_prompts([(5.0, 5.0, 5.0, 9.0)], (128, 128))
    with pytest.raises(ValueError):
        Prompt.box(10, 10, 10, 20)


# -- two-way decoding ----------------------------------------------------------


def test_two_way_shapes_and_token_order(decoder):
    feats = torch.randn(2, 64, 8, 8)
    sparse = decoder.encode_prompts(
        [Prompt.box(4, 4, 60, 60), Prompt.point(30, 30)], (128, 128)
    )
    tokens, feats_out = decoder.two_way_decode(feats, sparse)
    assert tokens.shape == (2, 3 + sparse.shape[1], 64)
    assert feats_out.shape == feats.shape


def test_attention_rows_sum_to_one_in_decoder(decoder):
    Attention.record_attn = True
    try:
        feats = torch.randn(1, 64, 8, 8)
        sparse = decoder.encode_prompts([Prompt.point(64, 64)], (128, 128))
        decoder.two_way_decode(feats, sparse)
        for layer in decoder.layers:
            for attn in (layer.self_attn, layer.cross_t2i, layer.cross_i2t):
                rows = attn.last_attn.sum(dim=-1)
                assert torch.allclose(rows, torch.ones_like(rows), atol=1e-5)
    finally:
        Attention.record_attn = False


def test_zeroed_attention_out_projections_leave_mlp_path(decoder):
    """With attention output projections zeroed, tokens follow only the
    norm/MLP residual chain."""
    torch.manual_seed(1)
    d = PromptableDecoder()
    d.eval()
    for layer in d.layers:
        for attn in (layer.self_attn, layer.cross_t2i, layer.cross_i2t):
            torch.nn.init.zeros_(attn.out_proj.weight)
            torch.nn.init.zeros_(attn.out_proj.bias)
    feats = torch.randn(1, 64, 8, 8)
    sparse = d.encode_prompts([Prompt.point(10, 10)], (128, 128))
    tokens_out, _ = d.two_way_decode(feats, sparse)

    fixed = torch.stack([d.iou_token, d.mask_token, d.label_token])
    expect = torch.cat([fixed.unsqueeze(0), sparse], dim=1)
    with torch.no_grad():
        for layer in d.layers:
            expect = layer.norm1(expect)
            expect = layer.norm2(expect)
            expect = layer.norm3(expect + layer.mlp(expect))
    assert torch.allclose(tokens_out, expect, atol=1e-5)


# -- mask prediction -----------------------------------------------------------


def test_mask_logits_shape_and_iou_range(decoder):
    feats = torch.randn(1, 64, 8, 8)
    pred = decoder(feats[0], [Prompt.box(10, 10, 90, 90)], (128, 128))
    assert isinstance(pred, MaskPrediction)
    assert pred.mask_logits.shape == (1, 128, 128)
    assert 0.0 <= float(pred.iou_pred[0]) <= 1.0


def test_zero_hyper_weights_zero_logits(decoder):
    torch.manual_seed(2)
    d = PromptableDecoder()
    d.eval()
    last = d.hyper_mlp.layers[-1]
    torch.nn.init.zeros_(last.weight)
    torch.nn.init.zeros_(last.bias)
    pred = d(torch.randn(64, 8, 8), [Prompt.point(64, 64)], (128, 128))
    assert torch.equal(pred.mask_logits, torch.zeros_like(pred.mask_logits))


def test_dynamic_classifier_linearity(decoder):
    """Doubling the hyper-MLP output doubles the logits exactly."""
    feats = torch.randn(1, 64, 8, 8)
    sparse = decoder.encode_prompts([Prompt.box(20, 20, 100, 100)], (128, 128))
    tokens_out, feats_out = decoder.two_way_decode(feats, sparse)
    with torch.no_grad():
        pixel = decoder.upscale(feats_out)
        w = decoder.hyper_mlp(tokens_out[:, 1])
        low1 = torch.einsum("bc,bchw->bhw", w, pixel)
        low2 = torch.einsum("bc,bchw->bhw", 2 * w, pixel)
    assert torch.allclose(low2, 2 * low1, atol=1e-5)


def test_decoder_deterministic(decoder):
    feats = torch.randn(64, 8, 8)
    prompts = [Prompt.box(10, 10, 50, 50)]
    with torch.no_grad():
        a = decoder(feats, prompts, (128, 128))
        b = decoder(feats, prompts, (128, 128))
    assert torch.equal(a.mask_logits, b.mask_logits)
    assert torch.equal(a.iou_pred, b.iou_pred)


def test_mask_gradient_wrt_hyper_mlp_finite_differences():
    """Analytic grad of a mask-logit functional w.r.t. hyper-MLP weights
    matches finite differences (float64, tiny dims)."""
    from oracles import finite_diff_grad, rel_err

    torch.manual_seed(3)
    d = PromptableDecoder(dim=8, num_heads=2).double()
    d.eval()
    feats = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    sparse = d.encode_prompts([Prompt.point(32, 32)], (64, 64)).double()
    tokens_out, feats_out = d.two_way_decode(feats, sparse)
    tokens_out = tokens_out.detach()
    feats_out = feats_out.detach()

    target_w = d.hyper_mlp.layers[-1]

    def logits_sum() -> torch.Tensor:
        pixel = d.upscale(feats_out)
        w = d.hyper_mlp(tokens_out[:, 1])
        low = torch.einsum("bc,bchw->bhw", w, pixel)
        return (low * low).sum()  # nonlinear functional of the logits

    loss = logits_sum()
    d.zero_grad()
    loss.backward()
    analytic = target_w.weight.grad.detach().numpy().copy()

    w_np = target_w.weight.detach().numpy().copy()

    def f(arr):
        with torch.no_grad():
            target_w.weight.copy_(torch.tensor(arr))
            out = float(logits_sum())
        return out

    fd = finite_diff_grad(f, w_np.copy(), eps=1e-6)
    with torch.no_grad():
        target_w.weight.copy_(torch.tensor(w_np))
    assert rel_err(analytic, fd) < 1e-3


def test_binarize_threshold():
    logits = torch.tensor([[-0.1, 0.0, 0.1]])
    assert binarize(logits).tolist() == [[0, 0, 1]]

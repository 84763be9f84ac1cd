import numpy as np
import pytest

from avmult.attention import (
    CrossModalBlock, CrossModalStack, MultiheadAttention, PositionalEncoding, apply_positional_encoding,
    crossmodal_block_forward, multihead_attention, zero_outputs,
)
from avmult.errors import ConfigError
from avmult.numerics import Tensor, check_gradients, precision


def _np_layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_softmax(s):
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _np_mha(attn, q_seq, kv_seq, mask=None):
    """One head at a time, straight from the definitions."""
    w = lambda lin: (lin.weight.data.astype(np.float64), lin.bias.data.astype(np.float64))
    (wq, bq), (wk, bk), (wv, bv), (wo, bo) = map(w, (attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj))
    q, k, v = q_seq @ wq + bq, kv_seq @ wk + bk, kv_seq @ wv + bv
    d = q.shape[-1]
    dh = d // attn.heads
    outs = []
    for h in range(attn.heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if mask is not None:
            scores = np.where(mask, -np.inf, scores)
        outs.append(_np_softmax(scores) @ v[:, sl])
    return np.concatenate(outs, axis=-1) @ wo + bo


# -- positional encoding -----------------------------------------------------

def test_pe_row_zero():
    pe = PositionalEncoding(10, 6)
    np.testing.assert_array_equal(pe.table[0], [0, 1, 0, 1, 0, 1])


def test_pe_zero_input_returns_table():
    pe = PositionalEncoding(10, 4)
    out = apply_positional_encoding(Tensor(np.zeros((7, 4))), pe)
    np.testing.assert_allclose(out.data, pe.table[:7], atol=1e-7)


def test_pe_formula_at_pos1_d4():
    pe = PositionalEncoding(5, 4)
    expected = [np.sin(1.0), np.cos(1.0), np.sin(1.0 / 10000 ** (2 / 4)), np.cos(1.0 / 10000 ** (2 / 4))]
    np.testing.assert_allclose(pe.table[1], expected, atol=1e-7)


def test_pe_too_long():
    with pytest.raises(ValueError):
        apply_positional_encoding(Tensor(np.zeros((11, 4))), PositionalEncoding(10, 4))


# -- multihead attention -----------------------------------------------------

def test_single_key_returns_value_projection():
    attn = MultiheadAttention(4, 2, rng=np.random.default_rng(0))
    q = np.random.default_rng(1).standard_normal((5, 4))
    kv = np.random.default_rng(2).standard_normal((1, 4))
    out = attn(q, kv).data
    v = kv @ attn.v_proj.weight.data + attn.v_proj.bias.data
    expected = v @ attn.out_proj.weight.data + attn.out_proj.bias.data
    np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), atol=1e-5)


def test_fully_masked_row_raises():
    attn = MultiheadAttention(4, 2, rng=np.random.default_rng(0))
    mask = np.zeros((3, 3), dtype=bool)
    mask[1] = True
    with pytest.raises(ValueError, match="masked"):
        attn(np.ones((3, 4)), np.ones((3, 4)), mask=mask)


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError):
        MultiheadAttention(6, 4)


def test_matches_per_head_brute_force():
    with precision(np.float64):
        attn = MultiheadAttention(4, 2, rng=np.random.default_rng(3))
        rng = np.random.default_rng(4)
        q, kv = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        mask = np.zeros((3, 5), dtype=bool)
        mask[0, 2] = mask[2, 4] = True
        out = multihead_attention(q, kv, heads=2, mask=mask, weights=attn).data
    np.testing.assert_allclose(out, _np_mha(attn, q, kv, mask), atol=1e-6)


def test_batched_equals_per_item():
    attn = MultiheadAttention(8, 2, rng=np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((3, 6, 8)).astype(np.float32)
    batched = attn(x, x).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], attn(x[b], x[b]).data, atol=1e-5)


def test_attention_weights_row_stochastic():
    attn = MultiheadAttention(8, 4, rng=np.random.default_rng(7))
    x = np.random.default_rng(8).standard_normal((2, 5, 8))
    pad = np.zeros((2, 5), dtype=bool)
    pad[1, 3:] = True
    _, w = attn(x, x, key_padding_mask=pad, return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-5)
    assert np.all(w.data[1, :, :, 3:] == 0)


def test_attention_gradient():
    with precision(np.float64):
        attn = MultiheadAttention(4, 2, rng=np.random.default_rng(9))
    rng = np.random.default_rng(10)
    assert check_gradients(lambda q, kv: attn(q, kv), rng.standard_normal((3, 4)), rng.standard_normal((4, 4))) < 1e-4


# -- cross-modal block -------------------------------------------------------

def _block(seed=0, **kw):
    return CrossModalBlock(4, 2, 8, dropout=0.0, rng=np.random.default_rng(seed), **kw)


def test_zeroed_output_projections_make_identity():
    block = zero_outputs(_block())
    x_a = np.random.default_rng(1).standard_normal((3, 4)).astype(np.float32)
    x_b = np.random.default_rng(2).standard_normal((5, 4)).astype(np.float32)
    out = crossmodal_block_forward(block, x_a, x_b).data
    np.testing.assert_array_equal(out, x_a)


def _np_ln(ln, x):
    return _np_layernorm(x, ln.gain.data.astype(np.float64), ln.bias.data.astype(np.float64))


def test_block_matches_scripted_substeps():
    with precision(np.float64):
        block = _block(seed=3)
        for ln in (block.norm_q, block.norm_kv, block.norm_ff):  # non-trivial norm params
            ln.gain.data = np.array([1.0, 0.5, 2.0, 1.5])
            ln.bias.data = np.array([0.1, -0.2, 0.0, 0.3])
        rng = np.random.default_rng(4)
        x_a, x_b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        out = block(x_a, x_b).data
    # norm -> attend -> add -> norm -> ff -> add
    q_in = _np_ln(block.norm_q, x_a)
    kv_in = _np_ln(block.norm_kv, x_b)
    h = x_a + _np_mha(block.attn, q_in, kv_in)
    f_in = _np_ln(block.norm_ff, h)
    ff = np.maximum(f_in @ block.ff.fc1.weight.data + block.ff.fc1.bias.data, 0)
    expected = h + ff @ block.ff.fc2.weight.data + block.ff.fc2.bias.data
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_shared_source_norm_variant():
    with precision(np.float64):
        block = _block(seed=3, source_norm=False)
        assert block.norm_kv is None
        rng = np.random.default_rng(4)
        x_a, x_b = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
        out = block(x_a, x_b).data
    h = x_a + _np_mha(block.attn, _np_ln(block.norm_q, x_a), _np_ln(block.norm_q, x_b))
    ff = np.maximum(_np_ln(block.norm_ff, h) @ block.ff.fc1.weight.data + block.ff.fc1.bias.data, 0)
    np.testing.assert_allclose(out, h + ff @ block.ff.fc2.weight.data + block.ff.fc2.bias.data, atol=1e-5)


def test_output_length_follows_target():
    out = _block()(np.ones((3, 4)), np.ones((7, 4)))
    assert out.shape == (3, 4)


def test_source_permutation_invariance_without_positions():
    block = _block(seed=5)
    rng = np.random.default_rng(6)
    x_a, x_b = rng.standard_normal((4, 4)), rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    np.testing.assert_allclose(block(x_a, x_b).data, block(x_a, x_b[perm]).data, atol=1e-5)


def test_masked_source_frame_has_no_influence():
    block = _block(seed=7)
    rng = np.random.default_rng(8)
    x_a, x_b = rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 5, 4))
    pad = np.array([[False, False, True, False, False]])
    before = block(x_a, x_b, key_padding_mask=pad).data
    x_b2 = x_b.copy()
    x_b2[0, 2] = 0.0
    np.testing.assert_allclose(block(x_a, x_b2, key_padding_mask=pad).data, before, atol=1e-6)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        _block()(np.ones((3, 4)), np.ones((3, 5)))


def test_stack_feeds_layer0_source_to_every_block():
    stack = CrossModalStack(3, 4, 2, 8, rng=np.random.default_rng(9))
    seen = []
    for block in stack.blocks:
        block.add_hook(lambda blk, tgt, src: seen.append((blk.index, tgt, src)))
    x_a, x_b = Tensor(np.ones((3, 4))), Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    stack(x_a, x_b)
    assert [i for i, _, _ in seen] == [0, 1, 2]
    assert all(src is x_b for _, _, src in seen)
    assert seen[0][1] is x_a and seen[1][1] is not x_a


def test_block_gradient():
    with precision(np.float64):
        block = _block(seed=11)
    rng = np.random.default_rng(12)
    err = check_gradients(lambda a, b: block(a, b), rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
    assert err < 1e-4

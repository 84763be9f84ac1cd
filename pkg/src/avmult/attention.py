"""Sinusoidal positions, multihead attention and the pre-norm attention blocks.

All forward functions accept ``[T, D]`` or batched ``[B, T, D]`` inputs.
Boolean masks use ``True`` for *blocked* positions.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .numerics import LayerNorm, Linear, Module, as_tensor, ops
from .numerics.tensor import ShapeError, default_dtype


def sinusoid_table(max_len, dim):
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / dim)
    table = np.zeros((max_len, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table


class PositionalEncoding:
    """Fixed table with PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...)."""

    def __init__(self, max_len, dim):
        self.max_len = max_len
        self.dim = dim
        self.table = sinusoid_table(max_len, dim)

    def __call__(self, x):
        return apply_positional_encoding(x, self)


def apply_positional_encoding(x, pe):
    x = as_tensor(x)
    t = x.shape[-2]
    if t > pe.max_len:
        raise ValueError(f"sequence length {t} exceeds positional table length {pe.max_len}")
    if x.shape[-1] != pe.dim:
        raise ShapeError(f"positional table dim {pe.dim} does not match input {x.shape}")
    return x + pe.table[:t].astype(x.data.dtype)


def _split_heads(x, heads):
    *lead, t, d = x.shape
    x = x.reshape(tuple(lead) + (t, heads, d // heads))
    n = len(lead)
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x):
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(tuple(lead) + (t, h * dh))


def attention_mask(mask, key_padding_mask, q_len, k_len):
    """Combine an optional [Tq, Tk] mask with an optional [B, Tk] padding mask."""
    combined = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (q_len, k_len):
            raise ShapeError(f"attention mask shape {mask.shape} does not match ({q_len}, {k_len})")
        combined = mask
    if key_padding_mask is not None:
        kp = np.asarray(key_padding_mask, dtype=bool)
        kp = kp[..., None, :] if kp.ndim == 1 else kp[:, None, None, :]
        combined = kp if combined is None else (combined | kp)
    return combined


class MultiheadAttention(Module):
    def __init__(self, dim, heads, dropout=0.0, rng=None):
        if dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.dropout = dropout
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def forward(self, q_seq, kv_seq, mask=None, key_padding_mask=None, train=False, rng=None,
                return_weights=False):
        q_seq, kv_seq = as_tensor(q_seq), as_tensor(kv_seq)
        if q_seq.shape[-1] != kv_seq.shape[-1]:
            raise ShapeError(f"query {q_seq.shape} and key/value {kv_seq.shape} widths differ")
        d = q_seq.shape[-1]
        tq, tk = q_seq.shape[-2], kv_seq.shape[-2]
        q = _split_heads(self.q_proj(q_seq), self.heads)
        k = _split_heads(self.k_proj(kv_seq), self.heads)
        v = _split_heads(self.v_proj(kv_seq), self.heads)
        scores = (q @ k.transpose()) * (1.0 / np.sqrt(d // self.heads))
        blocked = attention_mask(mask, key_padding_mask, tq, tk)
        if blocked is not None:
            full = np.broadcast_to(blocked, scores.shape)
            if full.all(axis=-1).any():
                raise ValueError("attention row with every key position masked")
            scores = ops.masked_fill(scores, full, -np.inf)
        weights = ops.softmax(scores, axis=-1)
        weights_dropped = ops.dropout(weights, self.dropout, rng, train)
        out = self.out_proj(_merge_heads(weights_dropped @ v))
        if return_weights:
            return out, weights
        return out


def multihead_attention(q_seq, kv_seq, heads, mask=None, weights=None, rng=None):
    """Functional form: build (or reuse ``weights``) and attend ``q_seq`` over ``kv_seq``."""
    q_seq = as_tensor(q_seq)
    if weights is None:
        weights = MultiheadAttention(q_seq.shape[-1], heads, rng=rng or np.random.default_rng(0))
    elif weights.heads != heads:
        raise ConfigError(f"attention module has {weights.heads} heads, asked for {heads}")
    return weights(q_seq, kv_seq, mask=mask)


class FeedForward(Module):
    def __init__(self, dim, hidden, dropout=0.0, rng=None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.dropout = dropout

    def forward(self, x, train=False, rng=None):
        h = ops.dropout(ops.relu(self.fc1(x)), self.dropout, rng, train)
        return self.fc2(h)


class CrossModalBlock(Module):
    """One layer of a source->target cross-modal transformer (pre-norm residual).

    Queries come from the running target stream; keys and values always come
    from the source modality's layer-0 sequence.  With ``source_norm`` the
    source gets its own LayerNorm, otherwise it shares the query-side norm.
    """

    def __init__(self, dim, heads, ff_dim, dropout=0.0, rng=None, direction=("visual", "audio"), index=0,
                 source_norm=True):
        self.direction = tuple(direction)
        self.index = index
        self.dropout = dropout
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim) if source_norm else None
        self.attn = MultiheadAttention(dim, heads, dropout, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, dropout, rng)
        self._hooks = []

    def add_hook(self, fn):
        """``fn(block, target_input, source_input)`` is called on every forward."""
        self._hooks.append(fn)

    def forward(self, x_target, x_source, key_padding_mask=None, mask=None, train=False, rng=None):
        x_target, x_source = as_tensor(x_target), as_tensor(x_source)
        if x_target.shape[-1] != x_source.shape[-1]:
            raise ShapeError(f"target {x_target.shape} and source {x_source.shape} widths differ")
        for hook in self._hooks:
            hook(self, x_target, x_source)
        q = self.norm_q(x_target)
        kv = self.norm_kv(x_source) if self.norm_kv is not None else self.norm_q(x_source)
        attended = self.attn(q, kv, mask=mask, key_padding_mask=key_padding_mask, train=train, rng=rng)
        h = x_target + ops.dropout(attended, self.dropout, rng, train)
        ff = self.ff(self.norm_ff(h), train=train, rng=rng)
        return h + ops.dropout(ff, self.dropout, rng, train)


def crossmodal_block_forward(block, x_target_running, x_source_low, **kwargs):
    return block(x_target_running, x_source_low, **kwargs)


class SelfAttentionBlock(Module):
    def __init__(self, dim, heads, ff_dim, dropout=0.0, rng=None):
        self.dropout = dropout
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, dropout, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, dropout, rng)

    def forward(self, x, key_padding_mask=None, train=False, rng=None):
        h = self.norm_attn(x)
        attended = self.attn(h, h, key_padding_mask=key_padding_mask, train=train, rng=rng)
        x = x + ops.dropout(attended, self.dropout, rng, train)
        ff = self.ff(self.norm_ff(x), train=train, rng=rng)
        return x + ops.dropout(ff, self.dropout, rng, train)


class CrossModalStack(Module):
    """``n`` cross-modal blocks followed by a final LayerNorm.

    Every block attends over the same layer-0 source sequence.
    """

    def __init__(self, n_blocks, dim, heads, ff_dim, dropout=0.0, rng=None, direction=("visual", "audio"),
                 source_norm=True):
        self.blocks = [
            CrossModalBlock(dim, heads, ff_dim, dropout, rng, direction, i, source_norm) for i in range(n_blocks)
        ]
        self.norm = LayerNorm(dim)

    def forward(self, x_target0, x_source0, key_padding_mask=None, train=False, rng=None):
        x = x_target0
        for block in self.blocks:
            x = block(x, x_source0, key_padding_mask=key_padding_mask, train=train, rng=rng)
        return self.norm(x)


class SelfAttentionStack(Module):
    def __init__(self, n_blocks, dim, heads, ff_dim, dropout=0.0, rng=None):
        self.blocks = [SelfAttentionBlock(dim, heads, ff_dim, dropout, rng) for _ in range(n_blocks)]
        self.norm = LayerNorm(dim)

    def forward(self, x, key_padding_mask=None, train=False, rng=None):
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding_mask, train=train, rng=rng)
        return self.norm(x)


def zero_outputs(block):
    """Zero the residual-branch output projections so ``block`` becomes the identity."""
    for lin in (block.attn.out_proj, block.ff.fc2):
        lin.weight.data = np.zeros(lin.weight.shape, dtype=default_dtype())
        lin.bias.data = np.zeros(lin.bias.shape, dtype=default_dtype())
    return block


__all__ = [
    "CrossModalBlock",
    "CrossModalStack",
    "FeedForward",
    "MultiheadAttention",
    "PositionalEncoding",
    "SelfAttentionBlock",
    "SelfAttentionStack",
    "apply_positional_encoding",
    "crossmodal_block_forward",
    "multihead_attention",
    "sinusoid_table",
    "zero_outputs",
]

"""The two-modality Multimodal Transformer used for masked-frame pretraining."""
from __future__ import annotations

import dataclasses
from collections import OrderedDict

import numpy as np

from .attention import CrossModalStack, PositionalEncoding, SelfAttentionStack, apply_positional_encoding
from .errors import ConfigError
from .numerics import Conv1dTemporal, Linear, Module, as_tensor, ops
from .numerics.tensor import ShapeError

FUSIONS = ("concat", "project")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    d_model: int = 288
    n_heads: int = 12
    n_cross_blocks: int = 6
    n_self_blocks: int = 6
    ff_dim_cross: int = 1152
    ff_dim_self: int = 2304
    conv_kernel: int = 1
    dropout: float = 0.1
    seq_len: int = 50
    audio_dim: int = 512
    visual_dim: int = 17
    # "concat": self stack runs at 2*d_model on the framewise concatenation;
    # "project": the concatenation is mapped back to d_model first.
    fusion: str = "concat"
    source_norm: bool = True
    source_positional: bool = True
    # False gives the self-attention-only ablation: cross blocks attend within
    # their own modality and each modality gets its own self stack, so no
    # attention layer mixes the two streams.
    cross_modal: bool = True

    @property
    def self_stack_dim(self):
        return 2 * self.d_model if self.fusion == "concat" else self.d_model

    def violations(self):
        problems = []
        for name in ("d_model", "n_heads", "n_cross_blocks", "n_self_blocks", "ff_dim_cross", "ff_dim_self",
                     "conv_kernel", "seq_len", "audio_dim", "visual_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                problems.append(f"{name} must be a positive integer (got {value!r})")
        if problems:
            return problems
        if self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.fusion not in FUSIONS:
            problems.append(f"fusion must be one of {FUSIONS} (got {self.fusion!r})")
        elif self.self_stack_dim % self.n_heads:
            problems.append(f"self_stack_dim={self.self_stack_dim} not divisible by n_heads={self.n_heads}")
        if self.conv_kernel % 2 == 0:
            problems.append(f"conv_kernel={self.conv_kernel} must be odd")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout={self.dropout} outside [0, 1)")
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {unknown}")
        return cls(**data)


PRESETS = {
    "base": dict(d_model=288, n_heads=12, n_cross_blocks=6, n_self_blocks=6, ff_dim_cross=1152,
                 ff_dim_self=2304, seq_len=50),
    "large": dict(d_model=576, n_heads=12, n_cross_blocks=8, n_self_blocks=8, ff_dim_cross=1536,
                  ff_dim_self=3072, seq_len=50),
    # desk-scale configuration for tests and synthetic data
    "tiny": dict(d_model=8, n_heads=2, n_cross_blocks=1, n_self_blocks=1, ff_dim_cross=32,
                 ff_dim_self=64, seq_len=10, audio_dim=32, visual_dim=17),
}


def preset(name, **overrides):
    try:
        values = dict(PRESETS[name.lower()])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    values.update(overrides)
    return ModelConfig.from_dict(values).validate()


class MultModel(Module):
    def __init__(self, config, rng=None):
        c = config
        d = c.d_model
        self.config = c
        self.conv_a = Conv1dTemporal(c.audio_dim, d, c.conv_kernel, rng)
        self.conv_v = Conv1dTemporal(c.visual_dim, d, c.conv_kernel, rng)
        self.cross_v2a = CrossModalStack(c.n_cross_blocks, d, c.n_heads, c.ff_dim_cross, c.dropout, rng,
                                         ("visual", "audio"), c.source_norm)
        self.cross_a2v = CrossModalStack(c.n_cross_blocks, d, c.n_heads, c.ff_dim_cross, c.dropout, rng,
                                         ("audio", "visual"), c.source_norm)
        self.fusion_proj = Linear(2 * d, d, rng) if c.fusion == "project" else None
        s = c.self_stack_dim
        if c.cross_modal:
            self.self_stack = SelfAttentionStack(c.n_self_blocks, s, c.n_heads, c.ff_dim_self, c.dropout, rng)
        else:
            self.self_stack_a = SelfAttentionStack(c.n_self_blocks, d, c.n_heads, c.ff_dim_self // 2, c.dropout, rng)
            self.self_stack_v = SelfAttentionStack(c.n_self_blocks, d, c.n_heads, c.ff_dim_self // 2, c.dropout, rng)
        self.head_a = Linear(s, c.audio_dim, rng)
        self.head_v = Linear(s, c.visual_dim, rng)
        self._pe = PositionalEncoding(c.seq_len, d)

    def embed(self, audio, visual, train=False, rng=None):
        """Temporal conv projection plus positions; returns (targets, sources) per modality."""
        c = self.config
        xa, xv = self.conv_a(audio), self.conv_v(visual)
        xa_pe, xv_pe = apply_positional_encoding(xa, self._pe), apply_positional_encoding(xv, self._pe)
        xa_pe = ops.dropout(xa_pe, c.dropout, rng, train)
        xv_pe = ops.dropout(xv_pe, c.dropout, rng, train)
        if c.source_positional:
            return (xa_pe, xv_pe), (xa_pe, xv_pe)
        return (xa_pe, xv_pe), (xa, xv)

    def forward(self, audio, visual, train_mode=False, rng=None, padding_mask=None):
        """Returns (audio_recon [.., T, Da], visual_recon [.., T, Dv], fused [.., T, self_stack_dim])."""
        c = self.config
        audio, visual = as_tensor(audio), as_tensor(visual)
        if audio.shape[:-1] != visual.shape[:-1]:
            raise ShapeError(f"audio {audio.shape} and visual {visual.shape} are not aligned in time")
        if audio.shape[-1] != c.audio_dim or visual.shape[-1] != c.visual_dim:
            raise ShapeError(f"feature dims {audio.shape[-1]}/{visual.shape[-1]} != "
                             f"configured {c.audio_dim}/{c.visual_dim}")
        if audio.shape[-2] > c.seq_len:
            raise ShapeError(f"sequence length {audio.shape[-2]} exceeds seq_len={c.seq_len}")
        (ta, tv), (sa, sv) = self.embed(audio, visual, train_mode, rng)
        kw = dict(key_padding_mask=padding_mask, train=train_mode, rng=rng)
        if c.cross_modal:
            h_a = self.cross_v2a(ta, sv, **kw)
            h_v = self.cross_a2v(tv, sa, **kw)
            fused = ops.concat([h_a, h_v], axis=-1)
            if self.fusion_proj is not None:
                fused = self.fusion_proj(fused)
            fused = self.self_stack(fused, **kw)
        else:
            h_a = self.self_stack_a(self.cross_v2a(ta, sa, **kw), **kw)
            h_v = self.self_stack_v(self.cross_a2v(tv, sv, **kw), **kw)
            fused = ops.concat([h_a, h_v], axis=-1)
            if self.fusion_proj is not None:
                fused = self.fusion_proj(fused)
        return self.head_a(fused), self.head_v(fused), fused


def build(config, seed=0):
    """Build a model; ``seed=None`` gives an abstract (memory-free) model usable only for counting."""
    config.validate()
    rng = None if seed is None else np.random.default_rng(seed)
    return MultModel(config, rng)


def forward(model, audio, visual, train_mode=False, rng=None, padding_mask=None):
    return model(audio, visual, train_mode=train_mode, rng=rng, padding_mask=padding_mask)


COMPONENTS = ("conv_a", "conv_v", "cross_v2a", "cross_a2v", "fusion_proj", "self_stack", "self_stack_a", "self_stack_v",
              "head_a", "head_v")


def parameter_breakdown(model):
    counts = OrderedDict()
    for name in COMPONENTS:
        part = getattr(model, name, None)
        if part is not None:
            counts[name] = part.num_parameters()
    return counts


def parameter_count(model):
    return int(sum(parameter_breakdown(model).values()))


def count_parameters(config):
    return parameter_count(build(config, seed=None))

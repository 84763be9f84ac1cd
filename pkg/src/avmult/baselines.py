"""Recurrent and static-fusion comparison models.

Every model here exposes ``predict(audio, visual, lengths, train, rng)``
returning ``[B, n_out]`` so the fine-tuning loop can train any of them.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError
from .numerics import Linear, Module, as_tensor, ops, parameter
from .numerics.tensor import ShapeError
from .training import FinetuneHead

BASE_TARGET = 38.3e6
KINDS = ("ef_gru", "lf_gru", "tfn", "gru_probe")


class GRUCell(Module):
    """Gates ordered reset, update, candidate; weights stored ``[in, 3H]``.

    r = s(x Wr + h Ur + b),  z = s(x Wz + h Uz + b),
    n = tanh(x Wn + bn + r * (h Un + un)),  h' = (1 - z) n + z h
    """

    def __init__(self, d_in, hidden, rng=None):
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.weight_ih = parameter((d_in, 3 * hidden), rng, bound)
        self.weight_hh = parameter((hidden, 3 * hidden), rng, bound)
        self.bias_ih = parameter((3 * hidden,), rng, bound)
        self.bias_hh = parameter((3 * hidden,), rng, bound)

    def project_inputs(self, x):
        return ops.linear(x, self.weight_ih, self.bias_ih)

    def step(self, gx, h):
        """One update from the pre-projected input ``gx`` [B, 3H] and state ``h`` [B, H]."""
        H = self.hidden
        gh = ops.linear(h, self.weight_hh, self.bias_hh)
        r = ops.sigmoid(gx[:, :H] + gh[:, :H])
        z = ops.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = ops.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        return (1.0 - z) * n + z * h

    def forward(self, x, h):
        return self.step(self.project_inputs(x), h)


def run_gru(cell, x, lengths, reverse=False):
    """Run ``cell`` over ``x`` [B, T, D]; returns (outputs [B, T, H], final state [B, H]).

    Steps at or beyond an item's length leave its state untouched, so the
    forward final state is the one at ``length - 1`` and the reverse pass
    starts from zeros at ``length - 1``.
    """
    x = as_tensor(x)
    b, t = x.shape[0], x.shape[1]
    lengths = np.asarray(lengths)
    gx = cell.project_inputs(x)
    h = as_tensor(np.zeros((b, cell.hidden), dtype=x.dtype))
    outs = [None] * t
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for i in steps:
        live = (i < lengths).astype(x.dtype)[:, None]
        h_new = cell.step(gx[:, i], h)
        h = h_new * live + h * (1.0 - live) if not live.all() else h_new
        outs[i] = ops.reshape(h, (b, 1, cell.hidden))
    return ops.concat(outs, axis=1), h


class BiGRU(Module):
    def __init__(self, d_in, hidden, layers=1, dropout=0.0, rng=None):
        self.hidden = hidden
        self.dropout = dropout
        self.forward_cells = []
        self.backward_cells = []
        for layer in range(layers):
            width = d_in if layer == 0 else 2 * hidden
            self.forward_cells.append(GRUCell(width, hidden, rng))
            self.backward_cells.append(GRUCell(width, hidden, rng))

    def forward(self, x, lengths, train=False, rng=None):
        """Returns (outputs [B, T, 2H], last forward state ++ first backward state [B, 2H])."""
        for layer, (fc, bc) in enumerate(zip(self.forward_cells, self.backward_cells)):
            if layer:
                x = ops.dropout(x, self.dropout, rng, train)
            out_f, last_f = run_gru(fc, x, lengths)
            out_b, first_b = run_gru(bc, x, lengths, reverse=True)
            x = ops.concat([out_f, out_b], axis=-1)
        return x, ops.concat([last_f, first_b], axis=-1)


def _check_aligned(audio, visual, lengths):
    if audio.shape[:2] != visual.shape[:2]:
        raise ShapeError(f"audio {audio.shape} and visual {visual.shape} are not aligned in time")
    if len(lengths) != audio.shape[0]:
        raise ShapeError(f"{len(lengths)} lengths for a batch of {audio.shape[0]}")


@dataclasses.dataclass(frozen=True)
class BaselineConfig:
    kind: str = "ef_gru"
    audio_dim: int = 512
    visual_dim: int = 17
    n_out: int = 6
    hidden: int = 64
    layers: int = 1
    dropout: float = 0.1
    seq_len: int = 50
    modality: str = "audio"  # gru_probe only

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown baseline {self.kind!r}; expected one of {KINDS}")
        for name in ("audio_dim", "visual_dim", "n_out", "hidden", "layers", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.modality not in ("audio", "visual"):
            raise ConfigError(f"modality must be audio or visual, got {self.modality!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown baseline fields: {unknown}")
        return cls(**data).validate()


class _Baseline(Module):
    def __init__(self, config):
        self.config = config

    @property
    def seq_len(self):
        return self.config.seq_len

    def trainable_parameters(self):
        return self.parameters()


class EFGRU(_Baseline):
    """Framewise concatenation, one bidirectional GRU, residual head."""

    def __init__(self, config, rng=None):
        super().__init__(config)
        c = config
        self.gru = BiGRU(c.audio_dim + c.visual_dim, c.hidden, c.layers, c.dropout, rng)
        self.head = FinetuneHead(2 * c.hidden, c.n_out, rng)

    def predict(self, audio, visual, lengths, train=False, rng=None):
        audio, visual = as_tensor(audio), as_tensor(visual)
        _check_aligned(audio, visual, lengths)
        _, state = self.gru(ops.concat([audio, visual], axis=-1), lengths, train, rng)
        return self.head(ops.dropout(state, self.config.dropout, rng, train))


class LFGRU(_Baseline):
    """One bidirectional GRU per modality; final states concatenated before the head."""

    def __init__(self, config, rng=None):
        super().__init__(config)
        c = config
        self.gru_a = BiGRU(c.audio_dim, c.hidden, c.layers, c.dropout, rng)
        self.gru_v = BiGRU(c.visual_dim, c.hidden, c.layers, c.dropout, rng)
        self.head = FinetuneHead(4 * c.hidden, c.n_out, rng)

    def predict(self, audio, visual, lengths, train=False, rng=None):
        audio, visual = as_tensor(audio), as_tensor(visual)
        _check_aligned(audio, visual, lengths)
        _, state_a = self.gru_a(audio, lengths, train, rng)
        _, state_v = self.gru_v(visual, lengths, train, rng)
        state = ops.concat([state_a, state_v], axis=-1)
        return self.head(ops.dropout(state, self.config.dropout, rng, train))


def tfn_fuse(z_a, z_v):
    """Flattened outer product of ``[z_a; 1]`` and ``[z_v; 1]``: [B, (Da+1)(Dv+1)]."""
    z_a, z_v = as_tensor(z_a), as_tensor(z_v)
    b = z_a.shape[0]
    one = np.ones((b, 1), dtype=z_a.dtype)
    a1 = ops.concat([z_a, one], axis=-1)
    v1 = ops.concat([z_v, one], axis=-1)
    outer = ops.reshape(a1, (b, -1, 1)) * ops.reshape(v1, (b, 1, -1))
    return ops.reshape(outer, (b, -1))


def masked_mean(x, lengths):
    """Mean over the first ``lengths[b]`` frames of each item of ``x`` [B, T, D]."""
    x = as_tensor(x)
    lengths = np.asarray(lengths)
    keep = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(x.dtype)
    weights = (keep / lengths[:, None].astype(x.dtype))[..., None]
    return ops.sum(x * weights, axis=1)


class TFN(_Baseline):
    """Utterance means of each modality, outer-product fusion, two-layer head."""

    def __init__(self, config, rng=None):
        super().__init__(config)
        c = config
        fused = (c.audio_dim + 1) * (c.visual_dim + 1)
        self.fc1 = Linear(fused, c.hidden, rng)
        self.fc2 = Linear(c.hidden, c.n_out, rng)

    def predict(self, audio, visual, lengths, train=False, rng=None):
        audio, visual = as_tensor(audio), as_tensor(visual)
        _check_aligned(audio, visual, lengths)
        fused = tfn_fuse(masked_mean(audio, lengths), masked_mean(visual, lengths))
        h = ops.dropout(ops.relu(self.fc1(fused)), self.config.dropout, rng, train)
        return self.fc2(h)


class GruProbe(_Baseline):
    """Single-layer unidirectional GRU over one modality, for comparing feature extractors."""

    def __init__(self, config, rng=None):
        super().__init__(config)
        c = config
        self.gru = GRUCell(c.audio_dim if c.modality == "audio" else c.visual_dim, c.hidden, rng)
        self.out = Linear(c.hidden, c.n_out, rng)

    def predict(self, audio, visual, lengths, train=False, rng=None):
        x = audio if self.config.modality == "audio" else visual
        _, state = run_gru(self.gru, x, lengths)
        return self.out(ops.dropout(state, self.config.dropout, rng, train))


def probe_config(input_dim, n_out, modality="audio", seq_len=50):
    """The probe at its reported size: hidden 512, dropout 0.2."""
    dims = {"audio_dim": input_dim} if modality == "audio" else {"visual_dim": input_dim}
    return BaselineConfig(kind="gru_probe", n_out=n_out, hidden=512, layers=1, dropout=0.2, seq_len=seq_len,
                          modality=modality, **dims)


_MODELS = {"ef_gru": EFGRU, "lf_gru": LFGRU, "tfn": TFN, "gru_probe": GruProbe}


def build_baseline(config, seed=0):
    """``seed=None`` builds an abstract model for parameter counting only."""
    config.validate()
    rng = None if seed is None else np.random.default_rng([seed, 0xBA5E])
    return _MODELS[config.kind](config, rng)


def count_baseline(config):
    return build_baseline(config, seed=None).num_parameters()


def solve_hidden(config, target=BASE_TARGET, tolerance=0.10, max_layers=2):
    """Pick ``(layers, hidden)`` whose parameter count is closest to ``target``.

    One layer is tried first; a second layer is used only if no hidden size
    lands within ``tolerance``.  Returns the updated config and its count.
    """
    best = None
    for layers in range(1, max_layers + 1):
        lo, hi = 1, 1
        while count_baseline(dataclasses.replace(config, layers=layers, hidden=hi)) < target:
            lo, hi = hi, hi * 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if count_baseline(dataclasses.replace(config, layers=layers, hidden=mid)) < target:
                lo = mid
            else:
                hi = mid
        for hidden in (lo, hi):
            cfg = dataclasses.replace(config, layers=layers, hidden=hidden)
            n = count_baseline(cfg)
            if best is None or abs(n - target) < abs(best[1] - target):
                best = (cfg, n)
        if abs(best[1] - target) <= tolerance * target:
            return best
    raise ConfigError(f"no {config.kind} size within {tolerance:.0%} of {target:,.0f} parameters")

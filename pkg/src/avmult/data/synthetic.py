"""Paired audio/visual sequences driven by a shared smooth latent path.

Each utterance has a latent path ``s`` in R^k: a per-utterance offset plus a
stationary AR(1) wander.  Audio frame ``t`` is ``s_t @ A`` and visual frame
``t`` is ``s_{t-lag} @ B``, each plus private noise and a per-speaker offset.
Labels are functions of the path mean: the sign pattern of its first
``log2(n_classes)`` coordinates, and two linear read-outs on a 1..5 scale.
"""
from __future__ import annotations

import dataclasses
import json

import numpy as np

from ..errors import ConfigError, DataError
from .sequences import FeatureSequence, UtteranceRecord


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    n_utterances: int = 1000
    min_frames: int = 6
    max_frames: int = 10
    audio_dim: int = 32
    visual_dim: int = 17
    factor_dim: int = 4
    lag: int = 3
    frame_rate: float = 5.0
    offset_scale: float = 1.0
    path_scale: float = 0.7
    smoothness: float = 0.8
    audio_noise: float = 0.3
    visual_noise: float = 0.3
    speaker_scale: float = 0.3
    n_speakers: int = 50
    n_sessions: int = 6
    n_classes: int = 4
    label_scale: float = 1.0
    label_noise: float = 0.1
    tie_mixing: bool = False
    seed: int = 0
    # corpora with the same seed share mixing matrices and speakers but draw
    # different utterances; corpus 0 is the labelled one
    corpus: int = 0

    def validate(self):
        if self.n_utterances < 1:
            raise ConfigError(f"n_utterances must be >= 1, got {self.n_utterances}")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError(f"need 1 <= min_frames <= max_frames, got {self.min_frames}, {self.max_frames}")
        if self.lag < 0:
            raise ConfigError("lag must be non-negative")
        bits = int(np.log2(self.n_classes)) if self.n_classes >= 2 else -1
        if bits < 1 or 2 ** bits != self.n_classes or bits > self.factor_dim:
            raise ConfigError(f"n_classes must be a power of two between 2 and 2**factor_dim, got {self.n_classes}")
        if self.tie_mixing and self.audio_dim != self.visual_dim:
            raise ConfigError("tie_mixing needs audio_dim == visual_dim")
        if not 0 <= self.smoothness < 1:
            raise ConfigError("smoothness must lie in [0, 1)")
        if self.offset_scale <= 0 and self.path_scale <= 0:
            raise DataError("latent factor has zero variance (offset_scale and path_scale both 0)")
        if self.corpus < 0:
            raise ConfigError("corpus must be >= 0")
        if self.n_speakers < 1:
            raise ConfigError("n_speakers must be >= 1")
        return self

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown SyntheticSpec fields: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclasses.dataclass(frozen=True)
class Generator:
    """The fixed parameters shared by every utterance of one synthetic corpus."""
    audio_mix: np.ndarray
    visual_mix: np.ndarray
    speaker_audio: np.ndarray
    speaker_visual: np.ndarray
    arousal_weights: np.ndarray
    valence_weights: np.ndarray


def make_generator(spec):
    rng = np.random.default_rng([spec.seed, 0])
    k = spec.factor_dim
    a_mix = rng.standard_normal((k, spec.audio_dim)) / np.sqrt(k)
    v_mix = a_mix.copy() if spec.tie_mixing else rng.standard_normal((k, spec.visual_dim)) / np.sqrt(k)
    spk_a = rng.standard_normal((spec.n_speakers, spec.audio_dim)) * spec.speaker_scale
    spk_v = rng.standard_normal((spec.n_speakers, spec.visual_dim)) * spec.speaker_scale
    w = rng.standard_normal((2, k))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return Generator(a_mix, v_mix, spk_a, spk_v, w[0], w[1])


def latent_path(rng, spec, length):
    """Offset plus AR(1) wander with unit stationary variance, ``length`` frames."""
    k = spec.factor_dim
    offset = rng.standard_normal(k) * spec.offset_scale
    rho = spec.smoothness
    z = np.empty((length, k))
    z[0] = rng.standard_normal(k)
    innov = rng.standard_normal((length, k)) * np.sqrt(1 - rho ** 2)
    for t in range(1, length):
        z[t] = rho * z[t - 1] + innov[t]
    return offset + spec.path_scale * z


def class_label(path_mean, n_classes):
    bits = int(np.log2(n_classes))
    return int(sum(int(path_mean[j] > 0) << j for j in range(bits)))


def generate_synthetic(spec=SyntheticSpec(), return_latent=False):
    spec.validate()
    gen = make_generator(spec)
    rng = np.random.default_rng([spec.seed, 1] if spec.corpus == 0 else [spec.seed, 1, spec.corpus])
    prefix = "utt" if spec.corpus == 0 else f"c{spec.corpus}utt"
    records, latents = [], []
    for i in range(spec.n_utterances):
        length = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        speaker = int(rng.integers(spec.n_speakers))
        s = latent_path(rng, spec, length + spec.lag)
        s_audio, s_visual = s[spec.lag:], s[:length]
        audio = s_audio @ gen.audio_mix + gen.speaker_audio[speaker]
        visual = s_visual @ gen.visual_mix + gen.speaker_visual[speaker]
        audio = audio + spec.audio_noise * rng.standard_normal(audio.shape)
        visual = visual + spec.visual_noise * rng.standard_normal(visual.shape)
        m = s_audio.mean(axis=0)
        noise = rng.standard_normal(2) * spec.label_noise
        arousal = float(np.clip(3 + spec.label_scale * gen.arousal_weights @ m + noise[0], 1, 5))
        valence = float(np.clip(3 + spec.label_scale * gen.valence_weights @ m + noise[1], 1, 5))
        records.append(UtteranceRecord(
            utterance_id=f"{prefix}{i:05d}",
            speaker_id=f"spk{speaker:03d}",
            audio=FeatureSequence("audio", spec.frame_rate, audio),
            visual=FeatureSequence("visual", spec.frame_rate, visual),
            label=class_label(m, spec.n_classes),
            arousal=arousal,
            valence=valence,
            session=f"session{speaker % spec.n_sessions + 1}",
        ))
        latents.append(s_audio)
    if return_latent:
        return records, latents
    return records

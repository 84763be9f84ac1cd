"""Per-modality feature sequences and the filter -> downsample -> align pipeline."""
from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from ..errors import DataError

MODALITIES = ("audio", "visual")


@dataclasses.dataclass
class FeatureSequence:
    modality: str
    frame_rate: float
    frames: np.ndarray
    confidence: np.ndarray | None = None
    start_time: float = 0.0
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if not self.frame_rate > 0:
            raise DataError(f"frame_rate must be positive, got {self.frame_rate}")
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise DataError(f"frames must be [T, D], got shape {self.frames.shape}")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float32)
            if self.confidence.shape != (len(self.frames),):
                raise DataError("confidence must have one entry per frame")
            if np.any((self.confidence < 0) | (self.confidence > 1)):
                raise DataError("confidence values must lie in [0, 1]")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float64)

    @property
    def length(self):
        return len(self.frames)

    @property
    def dim(self):
        return self.frames.shape[1]

    @property
    def times(self):
        if self.timestamps is not None:
            return self.timestamps
        return self.start_time + np.arange(self.length) / self.frame_rate

    @property
    def missing(self):
        return np.isnan(self.frames).any(axis=1)


@dataclasses.dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    audio: FeatureSequence
    visual: FeatureSequence
    label: int | None = None
    arousal: float | None = None
    valence: float | None = None
    session: str | None = None

    @property
    def length(self):
        return self.audio.length

    @property
    def regression_target(self):
        return (self.arousal, self.valence)


@dataclasses.dataclass(frozen=True)
class Rejection:
    utterance_id: str
    reason: str


def confidence_filter(seq, threshold=0.8):
    """Drop frames whose detection confidence is below ``threshold``; timestamps are kept."""
    if seq.confidence is None:
        raise DataError(f"{seq.modality} sequence carries no confidence values")
    keep = seq.confidence >= threshold
    if not keep.any():
        raise DataError(f"every {seq.modality} frame is below confidence {threshold}")
    return dataclasses.replace(seq, frames=seq.frames[keep], confidence=seq.confidence[keep],
                               timestamps=seq.times[keep])


def downsample(seq, target_rate):
    """Average frames into bins of width 1/target_rate; empty bins become NaN rows."""
    if target_rate > seq.frame_rate * (1 + 1e-9):
        raise DataError(f"cannot downsample {seq.frame_rate} Hz to a higher rate {target_rate} Hz")
    if seq.length == 0:
        raise DataError("cannot downsample an empty sequence")
    rel = seq.times - seq.start_time
    bins = np.floor(rel * target_rate + 1e-6).astype(np.int64)
    n_bins = int(bins.max()) + 1
    sums = np.zeros((n_bins, seq.dim), dtype=np.float64)
    counts = np.zeros(n_bins, dtype=np.int64)
    np.add.at(sums, bins, seq.frames.astype(np.float64))
    np.add.at(counts, bins, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    means[counts == 0] = np.nan
    return FeatureSequence(seq.modality, float(target_rate), means.astype(np.float32), None, seq.start_time)


def fill_missing(seq):
    """Hold the previous valid frame over NaN rows (leading gaps take the first valid frame)."""
    missing = seq.missing
    if not missing.any():
        return seq
    if missing.all():
        raise DataError(f"{seq.modality} sequence has no valid frames")
    idx = np.where(~missing, np.arange(seq.length), 0)
    np.maximum.accumulate(idx, out=idx)
    first = int(np.argmax(~missing))
    idx[:first] = first
    return dataclasses.replace(seq, frames=seq.frames[idx])


def alignment_check(audio, visual, max_skew=1.0, utterance_id="", speaker_id="", **labels):
    """Accept pairs whose lengths differ by at most ``max_skew`` seconds, trimmed to the shorter one."""
    if abs(audio.frame_rate - visual.frame_rate) > 1e-9:
        raise DataError(f"modalities at different rates: {audio.frame_rate} vs {visual.frame_rate}")
    max_frames = int(round(max_skew * audio.frame_rate))
    skew = abs(audio.length - visual.length)
    if skew > max_frames:
        return Rejection(utterance_id, f"audio/visual length differ by {skew} frames (> {max_frames})")
    t = min(audio.length, visual.length)
    trim = lambda s: dataclasses.replace(
        s, frames=s.frames[:t], confidence=None if s.confidence is None else s.confidence[:t],
        timestamps=None if s.timestamps is None else s.timestamps[:t])
    return UtteranceRecord(utterance_id, speaker_id, trim(audio), trim(visual), **labels)


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    target_rate: float = 5.0
    confidence_threshold: float = 0.8
    max_skew: float = 1.0


def preprocess_pair(audio, visual, config=PipelineConfig(), utterance_id="", speaker_id="", **labels):
    """Fixed order: confidence filter, downsample to the common rate, fill gaps, align."""
    streams = []
    for seq in (audio, visual):
        if seq.confidence is not None:
            seq = confidence_filter(seq, config.confidence_threshold)
        if seq.frame_rate != config.target_rate or seq.timestamps is not None:
            seq = downsample(seq, config.target_rate)
        streams.append(fill_missing(seq))
    return alignment_check(streams[0], streams[1], config.max_skew, utterance_id, speaker_id, **labels)


def pipeline_fingerprint(config, records):
    h = hashlib.sha256(json.dumps(dataclasses.asdict(config), sort_keys=True).encode())
    for r in records:
        h.update(r.utterance_id.encode())
        h.update(np.ascontiguousarray(r.audio.frames).tobytes())
        h.update(np.ascontiguousarray(r.visual.frames).tobytes())
    return h.hexdigest()

"""MMF1 feature containers and JSON-lines manifests.

MMF1 layout (little-endian)::

    b"MMF1" | u32 modality (0 audio, 1 visual) | u32 T | u32 D
    | u32 rate numerator | u32 rate denominator | T*D f32 frames | [T f32 confidences]
"""
from __future__ import annotations

import json
import os
import struct
from fractions import Fraction

import numpy as np

from ..errors import DataError, FormatError
from .sequences import MODALITIES, FeatureSequence, PipelineConfig, Rejection, preprocess_pair

MAGIC = b"MMF1"
_HEADER = struct.Struct("<4s5I")
MANIFEST = "manifest.jsonl"


def encode_features(seq):
    rate = Fraction(seq.frame_rate).limit_denominator(10_000)
    t, d = seq.frames.shape
    parts = [_HEADER.pack(MAGIC, MODALITIES.index(seq.modality), t, d, rate.numerator, rate.denominator),
             np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()]
    if seq.confidence is not None:
        parts.append(np.ascontiguousarray(seq.confidence, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(blob):
    if len(blob) < _HEADER.size:
        raise FormatError("truncated MMF1 header", offset=len(blob))
    magic, modality, t, d, num, den = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if modality >= len(MODALITIES):
        raise FormatError(f"unknown modality tag {modality}", offset=4)
    if den == 0:
        raise FormatError("zero frame-rate denominator", offset=20)
    body = _HEADER.size + 4 * t * d
    if len(blob) < body:
        raise FormatError("truncated frame block", offset=len(blob))
    frames = np.frombuffer(blob, dtype="<f4", count=t * d, offset=_HEADER.size).reshape(t, d)
    confidence = None
    rest = len(blob) - body
    if rest == 4 * t and t > 0:
        confidence = np.frombuffer(blob, dtype="<f4", count=t, offset=body)
    elif rest != 0:
        raise FormatError(f"{rest} trailing bytes do not form a confidence block", offset=body)
    return FeatureSequence(MODALITIES[modality], num / den, frames.astype(np.float32),
                           None if confidence is None else confidence.astype(np.float32))


def write_features(path, seq):
    with open(path, "wb") as fh:
        fh.write(encode_features(seq))


def read_features(path):
    with open(path, "rb") as fh:
        return decode_features(fh.read())


def manifest_entry(record, audio_path, visual_path):
    entry = {"utterance_id": record.utterance_id, "speaker_id": record.speaker_id,
             "audio_path": audio_path, "visual_path": visual_path}
    for field in ("label", "arousal", "valence", "session"):
        value = getattr(record, field)
        if value is not None:
            entry[field] = value
    return entry


def save_dataset(out_dir, records):
    """Write one MMF1 file per stream plus ``manifest.jsonl``; returns the manifest path."""
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    lines = []
    for r in records:
        a_rel = os.path.join("features", f"{r.utterance_id}.audio.mmf")
        v_rel = os.path.join("features", f"{r.utterance_id}.visual.mmf")
        write_features(os.path.join(out_dir, a_rel), r.audio)
        write_features(os.path.join(out_dir, v_rel), r.visual)
        lines.append(json.dumps(manifest_entry(r, a_rel, v_rel), sort_keys=True))
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST} in {data_dir}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(data_dir, config=PipelineConfig()):
    """Read every manifest entry through the preprocessing pipeline.

    Returns ``(records, rejections)``.
    """
    records, rejections = [], []
    for entry in read_manifest(data_dir):
        audio = read_features(os.path.join(data_dir, entry["audio_path"]))
        visual = read_features(os.path.join(data_dir, entry["visual_path"]))
        labels = {k: entry[k] for k in ("label", "arousal", "valence", "session") if k in entry}
        out = preprocess_pair(audio, visual, config, entry["utterance_id"], entry["speaker_id"], **labels)
        (rejections if isinstance(out, Rejection) else records).append(out)
    return records, rejections

"""Masked-frame corruption plans.

A plan marks ``ceil(ratio * T)`` frames, assembled from non-overlapping runs
of ``chunk`` consecutive frames (the last run trimmed so the count is
exact).  Each run is tagged zero / random / keep with probabilities
0.8 / 0.1 / 0.1.  The same positions are applied to both modalities.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math

import numpy as np

TAGS = ("zero", "random", "keep")
TAG_PROBS = (0.8, 0.1, 0.1)


@dataclasses.dataclass(frozen=True)
class MaskPlan:
    utterance_id: str
    length: int
    chunk: int
    runs: tuple  # ((start, length), ...) sorted by start
    tags: tuple  # one tag per run
    seed: int

    @property
    def positions(self):
        return tuple(t for start, n in self.runs for t in range(start, start + n))

    def target_mask(self):
        mask = np.zeros(self.length, dtype=bool)
        for start, n in self.runs:
            mask[start:start + n] = True
        return mask

    def to_dict(self):
        return {"utterance_id": self.utterance_id, "length": self.length, "chunk": self.chunk,
                "runs": [list(r) for r in self.runs], "tags": list(self.tags), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["utterance_id"], int(d["length"]), int(d["chunk"]),
                   tuple(tuple(r) for r in d["runs"]), tuple(d["tags"]), int(d["seed"]))


def n_masked(length, ratio):
    # 0.15 * 20 == 3.0000000000000004 in floating point
    return max(1, math.ceil(ratio * length - 1e-9))


def make_plan(length, chunk=3, ratio=0.15, seed=0, utterance_id="", per_frame_tags=False):
    if length < chunk:
        raise ValueError(f"sequence length {length} shorter than mask chunk {chunk}")
    if not 0.0 < ratio <= 0.5:
        raise ValueError(f"mask ratio must lie in (0, 0.5], got {ratio}")
    rng = np.random.default_rng(seed)
    target = n_masked(length, ratio)
    masked = np.zeros(length, dtype=bool)
    runs = []
    count = 0
    while count < target:
        # admissible starts: a whole free chunk fits; otherwise any free frame
        csum = np.concatenate([[0], np.cumsum(masked)])
        starts = np.arange(length - chunk + 1)
        candidates = starts[csum[starts + chunk] - csum[starts] == 0]
        if candidates.size == 0:
            candidates = np.flatnonzero(~masked)
        start = int(rng.choice(candidates))
        n = 0
        while n < chunk and start + n < length and not masked[start + n]:
            n += 1
        n = min(n, target - count)
        masked[start:start + n] = True
        runs.append((start, n))
        count += n
    runs.sort()
    if per_frame_tags:
        runs = [(t, 1) for s, n in runs for t in range(s, s + n)]
    tags = tuple(TAGS[i] for i in rng.choice(3, size=len(runs), p=TAG_PROBS))
    return MaskPlan(str(utterance_id), int(length), int(chunk), tuple(runs), tags, int(seed))


def apply_plan(plan, audio, visual, rng=None):
    """Corrupt copies of both streams; returns (audio, visual, target_mask).

    Random-tagged frames copy a frame drawn uniformly from the utterance's
    unmasked positions, the same source position for both modalities.
    """
    audio, visual = np.asarray(audio), np.asarray(visual)
    if audio.shape[0] != plan.length or visual.shape[0] != plan.length:
        raise ValueError(f"plan length {plan.length} does not match sequences "
                         f"({audio.shape[0]}, {visual.shape[0]})")
    if rng is None:
        rng = np.random.default_rng([plan.seed, 0x5EED])
    target = plan.target_mask()
    unmasked = np.flatnonzero(~target)
    out_a, out_v = audio.copy(), visual.copy()
    for (start, n), tag in zip(plan.runs, plan.tags):
        if tag == "zero":
            out_a[start:start + n] = 0
            out_v[start:start + n] = 0
        elif tag == "random":
            src = rng.choice(unmasked, size=n)
            out_a[start:start + n] = audio[src]
            out_v[start:start + n] = visual[src]
    return out_a, out_v, target


def masking_mode(split):
    """Training data is re-masked every epoch; held-out splits reuse one precomputed plan."""
    return "dynamic" if split == "train" else "static"


def _stable_int(*parts):
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def plan_seed(utterance_id, split, epoch=0, base_seed=0):
    if masking_mode(split) == "dynamic":
        return _stable_int("dynamic", base_seed, epoch, utterance_id)
    return _stable_int("static", base_seed, utterance_id)


def plan_for(utterance_id, length, split, epoch=0, base_seed=0, chunk=3, ratio=0.15, per_frame_tags=False):
    seed = plan_seed(utterance_id, split, epoch, base_seed)
    return make_plan(length, chunk, ratio, seed, utterance_id, per_frame_tags)


def save_plans(path, plans):
    with open(path, "w") as fh:
        for plan in plans:
            fh.write(json.dumps(plan.to_dict(), sort_keys=True) + "\n")


def load_plans(path):
    with open(path) as fh:
        return [MaskPlan.from_dict(json.loads(line)) for line in fh if line.strip()]


def plans_digest(plans):
    h = hashlib.sha256()
    for plan in plans:
        h.update(json.dumps(plan.to_dict(), sort_keys=True).encode())
    return h.hexdigest()

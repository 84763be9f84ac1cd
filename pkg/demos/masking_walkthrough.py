"""
Masked frames on one utterance
==============================

Pick a synthetic utterance, draw a mask plan for it and look at what the
corruption does to both streams.
"""

import numpy as np

from avmult.data import SyntheticSpec, generate_synthetic
from avmult.masking import apply_plan, plan_for

record = generate_synthetic(SyntheticSpec(n_utterances=1, min_frames=20, max_frames=20))[0]
print(record.utterance_id, "frames:", record.length)

# %%
# 15% of 20 frames rounds up to 3, so a single chunk of three frames is masked.
# The same positions are masked in audio and visual.
plan = plan_for(record.utterance_id, record.length, "train", epoch=0)
print("runs (start, length):", plan.runs, "tags:", plan.tags)

audio, visual, target = apply_plan(plan, record.audio.frames, record.visual.frames)
changed_a = np.flatnonzero(np.any(audio != record.audio.frames, axis=1))
changed_v = np.flatnonzero(np.any(visual != record.visual.frames, axis=1))
print("target positions:", np.flatnonzero(target))
print("changed audio frames:", changed_a, "changed visual frames:", changed_v)

# %%
# Training masks are redrawn every epoch; validation masks never change.
for epoch in range(3):
    train = plan_for(record.utterance_id, record.length, "train", epoch=epoch)
    held = plan_for(record.utterance_id, record.length, "validation", epoch=epoch)
    print(f"epoch {epoch}: train {train.runs}  validation {held.runs}")

# %%
# At T=50 the masked share is ceil(7.5) / 50 = 16%.
plan = plan_for("long", 50, "validation")
print("T=50 masked:", len(plan.positions), "frames in runs", plan.runs)

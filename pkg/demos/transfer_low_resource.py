"""
Pretrained versus scratch with few labels
=========================================

Pretrain on a separate unlabelled corpus, then fine-tune on 10% and 100% of a
labelled one.  The frames are noisy enough that one frame alone says little
about the utterance label.  The pretrained backbone has learnt to pool
context across both streams.  One seed here; the acceptance suite averages
five.
"""

import dataclasses

from avmult.data import SyntheticSpec, generate_synthetic, split, subsample_training
from avmult.mult import build, preset
from avmult.training import TrainSchedule, evaluate, finetune_classification, finetune_model, pretrain

spec = SyntheticSpec(n_utterances=3000, audio_noise=1.5, visual_noise=1.5, path_scale=0.5)
parts = split(generate_synthetic(spec), seed=spec.seed)
unlabelled = generate_synthetic(dataclasses.replace(spec, n_utterances=6000, corpus=1))

backbone = build(preset("tiny"), seed=0)
result = pretrain(backbone, unlabelled, parts["validation"], TrainSchedule(epochs=15), seed=0)
print(f"pretraining masked-L1 {result.val_loss[0]:.3f} -> {result.val_loss[-1]:.3f}")
weights = {k: v.copy() for k, v in backbone.state_dict().items()}

# %%
schedule = TrainSchedule(peak_lr=1e-3, epochs=40, batch_size=16, patience=6)
for percent in (100, 10):
    train = subsample_training(parts["train"], percent, seed=0)
    scores = {}
    for init in ("pretrained", "scratch"):
        fresh = build(preset("tiny"), seed=100)
        if init == "pretrained":
            fresh.load_state_dict(weights)
        model = finetune_model(fresh, "classify", spec.n_classes, seed=0)
        finetune_classification(model, train, parts["validation"], schedule, seed=0)
        scores[init] = evaluate(model, parts["test"], "classify").accuracy
    print(f"{percent:>3}% labels ({len(train)} utterances): pretrained {scores['pretrained']:.3f}, "
          f"scratch {scores['scratch']:.3f}")

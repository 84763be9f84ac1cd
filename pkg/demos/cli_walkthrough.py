"""
The command line end to end
===========================

Every step below is what ``avmult <command> ...`` runs from a shell; calling
``main`` keeps the demo in one process.
"""

import json
import os
import tempfile

from avmult.cli import main

work = tempfile.mkdtemp(prefix="avmult-")
path = lambda *p: os.path.join(work, *p)

with open(path("spec.json"), "w") as fh:
    json.dump({"n_utterances": 300, "seed": 1}, fh)
with open(path("experiment.json"), "w") as fh:
    json.dump({"preset": "tiny", "pretrain": {"epochs": 5, "batch_size": 16},
               "finetune": {"epochs": 10, "batch_size": 16, "peak_lr": 1e-3}}, fh)

# %%
# A dataset directory holds one MMF1 container per stream and a manifest.
main(["synth", "--spec", path("spec.json"), "--out", path("data")])

# %%
# Pretraining writes the best checkpoint, a ``.last`` one for resuming and a CSV log.
main(["pretrain", "--config", path("experiment.json"), "--data", path("data"), "--out", path("pre.mmck")])
print(open(path("pre.mmck.log.csv")).read())

# %%
main(["finetune", "--task", "classify", "--init", path("pre.mmck"), "--data", path("data"),
      "--config", path("experiment.json"), "--out", path("metrics.json"), "--save", path("ft.mmck")])
main(["eval", "--ckpt", path("ft.mmck"), "--data", path("data"), "--split", "test"])
main(["inspect", "--ckpt", path("ft.mmck")])
print("artifacts in", work)

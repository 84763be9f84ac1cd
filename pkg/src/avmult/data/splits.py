"""Speaker- or session-disjoint splits and label-stratified training subsets."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..errors import DataError

SPLITS = ("train", "validation", "test")


def split(records, scheme="speaker", ratios=(0.6, 0.2, 0.2), seed=0, sessions=None):
    """Partition records so that no speaker (or session) spans two partitions.

    ``scheme="speaker"`` shuffles speaker ids and cuts them at ``ratios``;
    ``scheme="session"`` takes an explicit mapping split -> list of session ids.
    """
    if scheme == "speaker":
        groups = sorted({r.speaker_id for r in records})
        if len(groups) < 3:
            raise DataError(f"need at least 3 speakers for a disjoint 3-way split, got {len(groups)}")
        if len(ratios) != 3 or any(r <= 0 for r in ratios):
            raise DataError(f"ratios must be three positive numbers, got {ratios}")
        order = np.random.default_rng(seed).permutation(len(groups))
        total = float(sum(ratios))
        n_val = max(1, int(round(len(groups) * ratios[1] / total)))
        n_test = max(1, int(round(len(groups) * ratios[2] / total)))
        n_train = len(groups) - n_val - n_test
        if n_train < 1:
            raise DataError("too few speakers left for training")
        assign = {}
        for rank, gi in enumerate(order):
            assign[groups[gi]] = "train" if rank < n_train else ("validation" if rank < n_train + n_val else "test")
        key = lambda r: r.speaker_id
    elif scheme == "session":
        if not sessions:
            raise DataError("session scheme needs a split -> sessions mapping")
        assign = {}
        for part, ids in sessions.items():
            if part not in SPLITS:
                raise DataError(f"unknown split name {part!r}")
            for sid in ids:
                if sid in assign:
                    raise DataError(f"session {sid!r} assigned to two splits")
                assign[sid] = part
        key = lambda r: r.session
    else:
        raise DataError(f"unknown split scheme {scheme!r}")
    out = {name: [] for name in SPLITS}
    for r in records:
        part = assign.get(key(r))
        if part is not None:
            out[part].append(r)
    return out


def subsample_training(train, percent, seed=0, stratify=True):
    """Keep ``percent``% of the training records, per class when labels exist.

    Each class keeps the first ``round(n_c * percent / 100)`` records of one
    seeded permutation, so smaller fractions are subsets of larger ones.
    """
    if not 0 < percent <= 100:
        raise DataError(f"percent must lie in (0, 100], got {percent}")
    if percent == 100:
        return list(train)
    labelled = stratify and train and all(r.label is not None for r in train)
    groups = defaultdict(list)
    for i, r in enumerate(train):
        groups[r.label if labelled else None].append(i)
    rng = np.random.default_rng(seed)
    keep = []
    for label in sorted(groups, key=lambda x: (x is None, x)):
        idx = groups[label]
        perm = rng.permutation(len(idx))
        n = int(round(len(idx) * percent / 100.0))
        keep.extend(idx[j] for j in perm[:n])
    if not keep:
        raise DataError(f"{percent}% of {len(train)} records is empty")
    return [train[i] for i in sorted(keep)]

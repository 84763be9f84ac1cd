"""Accuracy, MAE and concordance correlation, always evaluated in float64."""
from __future__ import annotations

import dataclasses
import json

import numpy as np

from .errors import UndefinedMetric


def _pair(x, y, min_n):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise ValueError(f"need at least {min_n} samples, got {x.size}")
    return x, y


def accuracy(preds, truths):
    preds, truths = np.asarray(preds).reshape(-1), np.asarray(truths).reshape(-1)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.size} vs {truths.size}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(preds == truths))


def mae(x, y):
    x, y = _pair(x, y, 1)
    return float(np.mean(np.abs(x - y)))


def pearson(x, y):
    x, y = _pair(x, y, 2)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise UndefinedMetric("Pearson correlation of a constant series")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def ccc(x, y):
    """Concordance correlation 2*cov / (var_x + var_y + (mu_x - mu_y)^2), population moments.

    Raises :class:`UndefinedMetric` if either series is constant.
    """
    x, y = _pair(x, y, 2)
    vx, vy = x.var(), y.var()
    if vx == 0 or vy == 0:
        raise UndefinedMetric("CCC is undefined for a constant series")
    cov = np.mean((x - x.mean()) * (y - y.mean()))
    return float(2.0 * cov / (vx + vy + (x.mean() - y.mean()) ** 2))


@dataclasses.dataclass
class MetricsReport:
    task: str
    n: int
    accuracy: float | None = None
    targets: dict | None = None  # target name -> {"MAE": .., "CCC": ..}

    def to_dict(self):
        out = {"task": self.task, "n": self.n}
        if self.task == "classify":
            out["accuracy"] = self.accuracy
        else:
            out.update(self.targets)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def classification_report(preds, truths):
    return MetricsReport("classify", int(np.asarray(truths).size), accuracy=accuracy(preds, truths))


def prediction_ccc(preds, truths):
    """CCC of predictions against annotations.

    A constant prediction scores 0, the value of the formula, since its
    covariance with anything is 0.  A constant annotation series is still an
    error because no predictor can be ranked against it.
    """
    preds, truths = _pair(preds, truths, 2)
    if np.ptp(truths) == 0:
        raise UndefinedMetric("CCC is undefined against constant targets")
    if np.ptp(preds) == 0:
        return 0.0
    return ccc(preds, truths)


def regression_report(preds, truths, names=("arousal", "valence")):
    preds = np.asarray(preds, dtype=np.float64).reshape(len(preds), -1)
    truths = np.asarray(truths, dtype=np.float64).reshape(len(truths), -1)
    targets = {}
    for j, name in enumerate(names):
        targets[name] = {"MAE": mae(preds[:, j], truths[:, j]), "CCC": prediction_ccc(preds[:, j], truths[:, j])}
    return MetricsReport("regress", len(truths), targets=targets)

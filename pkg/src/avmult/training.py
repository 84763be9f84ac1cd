"""Masked-frame pretraining, fine-tuning heads and loops, learning-rate schedule.

All randomness is derived from ``(seed, epoch, batch index)`` so a run that is
stopped after any epoch and resumed from its checkpoint replays exactly.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import warnings

import numpy as np

from .errors import ConfigError, DataError, TrainingDivergence
from .masking import apply_plan, plan_for
from .metrics import accuracy, classification_report, prediction_ccc, regression_report
from .numerics import ops
from .numerics.layers import Linear, Module
from .numerics.optim import Adam
from .numerics.tensor import default_dtype, no_grad


# -- schedule -----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TrainSchedule:
    peak_lr: float = 5e-4
    warmup: float = 0.1
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5

    def validate(self):
        if self.peak_lr < 0:
            raise ConfigError(f"peak_lr must be >= 0, got {self.peak_lr}")
        if not 0 <= self.warmup < 1:
            raise ConfigError(f"warmup must lie in [0, 1), got {self.warmup}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, epochs and patience must be positive")
        return self

    def steps_per_epoch(self, n_records):
        return math.ceil(n_records / self.batch_size)

    def total_steps(self, n_records):
        return self.epochs * self.steps_per_epoch(n_records)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown schedule fields: {unknown}")
        return cls(**data).validate()


PRETRAIN_SCHEDULE = TrainSchedule()
FINETUNE_SCHEDULE = TrainSchedule(peak_lr=1e-4)


def lr_at(schedule, step, total_steps):
    """Linear warmup from 0 to ``peak_lr`` at ``floor(warmup * total)``, then linear decay to 0."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > total_steps:
        warnings.warn(f"step {step} is past the end of the schedule ({total_steps}); using lr 0", stacklevel=2)
        return 0.0
    peak = schedule.peak_lr
    warm = math.floor(schedule.warmup * total_steps)
    if step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    return peak * (total_steps - step) / (total_steps - warm)


# -- batching -----------------------------------------------------------------

@dataclasses.dataclass
class Batch:
    ids: list
    audio: np.ndarray  # [B, T, Da], zero padded
    visual: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None  # [B, 2] arousal, valence

    @property
    def padding(self):
        return np.arange(self.audio.shape[1])[None, :] >= self.lengths[:, None]

    def __len__(self):
        return len(self.ids)


def make_batch(records, seq_len):
    """Stack records into padded arrays, keeping the first ``seq_len`` frames of each."""
    if not records:
        raise DataError("cannot batch zero records")
    lengths = np.array([min(r.length, seq_len) for r in records])
    t = int(lengths.max())
    dt = default_dtype()
    audio = np.zeros((len(records), t, records[0].audio.dim), dtype=dt)
    visual = np.zeros((len(records), t, records[0].visual.dim), dtype=dt)
    for i, (r, n) in enumerate(zip(records, lengths)):
        audio[i, :n] = r.audio.frames[:n]
        visual[i, :n] = r.visual.frames[:n]
    labels = None
    if all(r.label is not None for r in records):
        labels = np.array([r.label for r in records], dtype=np.int64)
    targets = None
    if all(r.arousal is not None and r.valence is not None for r in records):
        targets = np.array([r.regression_target for r in records], dtype=dt)
    return Batch([r.utterance_id for r in records], audio, visual, lengths, labels, targets)


def batch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch, 0x5A4F]).permutation(n)


def iterate_batches(records, batch_size, seq_len, seed=0, epoch=0, shuffle=True):
    order = batch_order(len(records), seed, epoch) if shuffle else np.arange(len(records))
    for start in range(0, len(records), batch_size):
        yield make_batch([records[i] for i in order[start:start + batch_size]], seq_len)


def step_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, index, 0xD809])


# -- pretraining ----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class MaskConfig:
    chunk: int = 3
    ratio: float = 0.15
    per_frame_tags: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class PretrainLossReport:
    """Masked-frame L1 per modality; ``total`` is their sum."""
    l1_audio: float
    l1_visual: float
    total: float
    n_masked: int

    @classmethod
    def of(cls, l1_audio, l1_visual, n_masked):
        return cls(float(l1_audio), float(l1_visual), float(l1_audio) + float(l1_visual), int(n_masked))


def plans_for_batch(batch, split, epoch=0, base_seed=0, mask=MaskConfig()):
    return [plan_for(uid, int(n), split, epoch, base_seed, mask.chunk, mask.ratio, mask.per_frame_tags)
            for uid, n in zip(batch.ids, batch.lengths)]


def corrupt_batch(batch, plans):
    """Apply one plan per utterance; returns (audio_in, visual_in, target_mask [B, T])."""
    if len(plans) != len(batch):
        raise DataError(f"{len(plans)} plans for a batch of {len(batch)}")
    audio, visual = batch.audio.copy(), batch.visual.copy()
    target = np.zeros(batch.padding.shape, dtype=bool)
    for i, (plan, n) in enumerate(zip(plans, batch.lengths)):
        if plan.utterance_id and plan.utterance_id != batch.ids[i]:
            raise DataError(f"plan for {plan.utterance_id!r} applied to {batch.ids[i]!r}")
        audio[i, :n], visual[i, :n], target[i, :n] = apply_plan(plan, batch.audio[i, :n], batch.visual[i, :n])
    return audio, visual, target


def masked_l1(pred_audio, pred_visual, audio, visual, target_mask):
    """Per-modality L1 over masked frames only; returns (total, l1_audio, l1_visual) tensors.

    Each masked frame contributes its mean absolute error over feature
    dimensions; frames are averaged over every masked frame in the batch.
    """
    n = int(target_mask.sum())
    if n == 0:
        raise DataError("no masked frames in batch")
    weight = target_mask.astype(pred_audio.dtype) / n
    l1_a = ops.sum(ops.mean(ops.abs(pred_audio - audio), axis=-1) * weight)
    l1_v = ops.sum(ops.mean(ops.abs(pred_visual - visual), axis=-1) * weight)
    return l1_a + l1_v, l1_a, l1_v


def pretrain_step(model, batch, plans, optimizer, lr, rng=None, step=None):
    """Corrupt ``batch`` with ``plans``, reconstruct, and take one Adam step at ``lr``."""
    audio_in, visual_in, target = corrupt_batch(batch, plans)
    optimizer.zero_grad()
    pred_a, pred_v, _ = model(audio_in, visual_in, train_mode=True, rng=rng, padding_mask=batch.padding)
    loss, l1_a, l1_v = masked_l1(pred_a, pred_v, batch.audio, batch.visual, target)
    if not np.isfinite(loss.data):
        raise TrainingDivergence(f"non-finite pretraining loss {float(loss.data)} at step {step} "
                                 f"(lr {lr:g}, batch {batch.ids})")
    loss.backward()
    optimizer.step(lr)
    return PretrainLossReport.of(l1_a.data, l1_v.data, target.sum())


def evaluate_pretrain(model, records, seq_len, base_seed=0, mask=MaskConfig(), batch_size=64, split="validation"):
    """Masked L1 under the fixed held-out plans, pooled over every masked frame."""
    if not records:
        raise DataError(f"empty {split} split")
    sum_a = sum_v = 0.0
    count = 0
    with no_grad():
        for batch in iterate_batches(records, batch_size, seq_len, shuffle=False):
            plans = plans_for_batch(batch, split, 0, base_seed, mask)
            audio_in, visual_in, target = corrupt_batch(batch, plans)
            pred_a, pred_v, _ = model(audio_in, visual_in, padding_mask=batch.padding)
            n = int(target.sum())
            _, l1_a, l1_v = masked_l1(pred_a, pred_v, batch.audio, batch.visual, target)
            sum_a += float(l1_a.data) * n
            sum_v += float(l1_v.data) * n
            count += n
    return PretrainLossReport.of(sum_a / count, sum_v / count, count)


class CsvLog:
    """Per-epoch rows ``epoch, split, loss, metric, lr``; floats written with ``repr``."""

    FIELDS = ("epoch", "split", "loss", "metric", "lr")

    def __init__(self, path, append=False):
        self.path = path
        if not append:
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.FIELDS)

    def write(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in self.FIELDS])

    def __call__(self, row):
        self.write(row)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


@dataclasses.dataclass
class PretrainResult:
    rows: list
    train_loss: list
    val_loss: list
    best_epoch: int
    best_val: float
    best_state: dict


def pretrain(model, train, validation, schedule=PRETRAIN_SCHEDULE, seed=0, mask=MaskConfig(), optimizer=None,
             start_epoch=0, best_val=math.inf, log=None, on_epoch=None, stop_epoch=None):
    """Masked-frame pretraining with dynamic training masks and static validation masks.

    ``on_epoch(epoch, model, optimizer, row, improved)`` runs after every
    epoch; the CLI uses it to write checkpoints.  ``stop_epoch`` ends the run
    early without changing the learning-rate schedule, for staged runs.  The model is left holding
    the last epoch's parameters; ``best_state`` holds the best validation ones.
    """
    schedule.validate()
    if not train:
        raise DataError("empty training split")
    seq_len = model.config.seq_len
    if optimizer is None:
        optimizer = Adam(model.parameters(), lr=schedule.peak_lr)
    per_epoch = schedule.steps_per_epoch(len(train))
    total = schedule.total_steps(len(train))
    rows, train_curve, val_curve = [], [], []
    best_epoch, best_state = None, None
    last = schedule.epochs if stop_epoch is None else min(stop_epoch, schedule.epochs)
    for epoch in range(start_epoch, last):
        model.train()
        sum_loss = 0.0
        count = 0
        lr = 0.0
        for i, batch in enumerate(iterate_batches(train, schedule.batch_size, seq_len, seed, epoch)):
            step = epoch * per_epoch + i
            lr = lr_at(schedule, step, total)
            plans = plans_for_batch(batch, "train", epoch, seed, mask)
            report = pretrain_step(model, batch, plans, optimizer, lr, step_rng(seed, epoch, i), step)
            sum_loss += report.total * report.n_masked
            count += report.n_masked
        model.eval()
        val = evaluate_pretrain(model, validation, seq_len, seed, mask, schedule.batch_size)
        train_curve.append(sum_loss / count)
        val_curve.append(val.total)
        epoch_rows = [
            {"epoch": epoch + 1, "split": "train", "loss": sum_loss / count, "metric": sum_loss / count, "lr": lr},
            {"epoch": epoch + 1, "split": "validation", "loss": val.total, "metric": val.total, "lr": lr},
        ]
        rows.extend(epoch_rows)
        if log is not None:
            for row in epoch_rows:
                log(row)
        improved = val.total < best_val
        if improved:
            best_val, best_epoch = val.total, epoch + 1
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if on_epoch is not None:
            on_epoch(epoch + 1, model, optimizer, epoch_rows[-1], improved)
    return PretrainResult(rows, train_curve, val_curve, best_epoch, best_val, best_state)


# -- fine-tuning ------------------------------------------------------------------

TASKS = {"classify", "regress"}


class FinetuneHead(Module):
    """Residual block (two affine maps around a ReLU, plus skip) then an affine read-out."""

    def __init__(self, dim, n_out, rng=None):
        super().__init__()
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.out = Linear(dim, n_out, rng)

    def forward(self, x):
        h = x + self.fc2(ops.relu(self.fc1(x)))
        return self.out(h)


def last_frames(seq, lengths):
    """Pick ``seq[b, lengths[b] - 1]`` for each batch item: the final non-padded step."""
    lengths = np.asarray(lengths)
    return seq[np.arange(len(lengths)), lengths - 1]


class FinetuneModel(Module):
    """A MulT backbone with a task head on its last fused frame."""

    def __init__(self, backbone, head, freeze_backbone=False):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.freeze_backbone = freeze_backbone

    @property
    def seq_len(self):
        return self.backbone.config.seq_len

    def trainable_parameters(self):
        if self.freeze_backbone:
            return self.head.parameters()
        return self.parameters()

    def predict(self, audio, visual, lengths, train=False, rng=None):
        padding = np.arange(audio.shape[1])[None, :] >= np.asarray(lengths)[:, None]
        _, _, fused = self.backbone(audio, visual, train_mode=train, rng=rng, padding_mask=padding)
        if self.freeze_backbone:
            fused = fused.detach()
        return self.head(last_frames(fused, lengths))


def finetune_model(backbone, task, n_out, seed=0, freeze_backbone=False):
    head = FinetuneHead(backbone.config.self_stack_dim, n_out, np.random.default_rng([seed, 0x4EAD]))
    return FinetuneModel(backbone, head, freeze_backbone)


def ccc_loss(pred, target, eps=1e-8):
    """``1 - mean CCC`` over target columns, population moments over the batch."""
    mp = ops.mean(pred, axis=0, keepdims=True)
    mt = target.mean(axis=0, keepdims=True)
    dp = pred - mp
    dt = target - mt
    cov = ops.mean(dp * dt, axis=0)
    vp = ops.mean(ops.square(dp), axis=0)
    vt = (dt ** 2).mean(axis=0)
    ccc = 2.0 * cov / (vp + vt + ops.square(ops.reshape(mp, (-1,)) - mt.reshape(-1)) + eps)
    return 1.0 - ops.mean(ccc)


def task_loss(task, outputs, batch, regression_loss="ccc"):
    if task == "classify":
        return ops.cross_entropy(outputs, batch.labels)
    if regression_loss == "mse":
        return ops.mean(ops.square(outputs - batch.targets))
    return ccc_loss(outputs, batch.targets)


def predict_records(model, records, batch_size=64):
    outs = []
    with no_grad():
        for batch in iterate_batches(records, batch_size, model.seq_len, shuffle=False):
            outs.append(model.predict(batch.audio, batch.visual, batch.lengths).data)
    return np.concatenate(outs, axis=0)


def evaluate(model, records, task, batch_size=64):
    """A :class:`MetricsReport` for ``records``."""
    if not records:
        raise DataError("cannot evaluate an empty split")
    model.eval()
    out = predict_records(model, records, batch_size)
    if task == "classify":
        return classification_report(out.argmax(axis=-1), [r.label for r in records])
    return regression_report(out, [r.regression_target for r in records])


def selection_metric(model, records, task, batch_size=64):
    """Validation accuracy or mean CCC over targets; higher is better."""
    model.eval()
    out = predict_records(model, records, batch_size)
    if task == "classify":
        return accuracy(out.argmax(axis=-1), [r.label for r in records])
    truth = np.array([r.regression_target for r in records])
    return float(np.mean([prediction_ccc(out[:, j], truth[:, j]) for j in range(truth.shape[1])]))


@dataclasses.dataclass
class FinetuneResult:
    model: object
    curve: list  # validation metric per epoch
    train_loss: list
    rows: list
    best_epoch: int
    best_metric: float


def check_task(task, records):
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    if task == "classify" and any(r.label is None for r in records):
        raise DataError("classification needs a label on every record")
    if task == "regress" and any(r.arousal is None or r.valence is None for r in records):
        raise DataError("regression needs arousal and valence on every record")


def finetune(model, train, validation, task, schedule=FINETUNE_SCHEDULE, seed=0, regression_loss="ccc", log=None):
    """Train ``model.predict`` outputs on ``task`` with early stopping on the validation metric.

    Stops after ``schedule.patience`` epochs without improvement and loads
    the parameters of the best validation epoch back into ``model``.
    """
    schedule.validate()
    if not train:
        raise DataError("empty training split")
    if not validation:
        raise DataError("empty validation split")
    check_task(task, train)
    check_task(task, validation)
    optimizer = Adam(model.trainable_parameters(), lr=schedule.peak_lr)
    per_epoch = schedule.steps_per_epoch(len(train))
    total = schedule.total_steps(len(train))
    curve, train_curve, rows = [], [], []
    best_metric, best_epoch, best_state = -math.inf, 0, None
    for epoch in range(schedule.epochs):
        model.train()
        sum_loss, count, lr = 0.0, 0, 0.0
        for i, batch in enumerate(iterate_batches(train, schedule.batch_size, model.seq_len, seed, epoch)):
            step = epoch * per_epoch + i
            lr = lr_at(schedule, step, total)
            optimizer.zero_grad()
            out = model.predict(batch.audio, batch.visual, batch.lengths, train=True, rng=step_rng(seed, epoch, i))
            loss = task_loss(task, out, batch, regression_loss)
            if not np.isfinite(loss.data):
                raise TrainingDivergence(f"non-finite {task} loss at step {step} (lr {lr:g}, batch {batch.ids})")
            loss.backward()
            optimizer.step(lr)
            sum_loss += float(loss.data) * len(batch)
            count += len(batch)
        metric = selection_metric(model, validation, task, schedule.batch_size)
        curve.append(metric)
        train_curve.append(sum_loss / count)
        epoch_rows = [
            {"epoch": epoch + 1, "split": "train", "loss": sum_loss / count, "metric": None, "lr": lr},
            {"epoch": epoch + 1, "split": "validation", "loss": None, "metric": metric, "lr": lr},
        ]
        rows.extend(epoch_rows)
        if log is not None:
            for row in epoch_rows:
                log(row)
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch + 1
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        elif epoch + 1 - best_epoch >= schedule.patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return FinetuneResult(model, curve, train_curve, rows, best_epoch, best_metric)


def finetune_classification(model, train, validation, schedule=FINETUNE_SCHEDULE, seed=0, log=None):
    return finetune(model, train, validation, "classify", schedule, seed, log=log)


def finetune_regression(model, train, validation, schedule=FINETUNE_SCHEDULE, seed=0, regression_loss="ccc",
                        log=None):
    return finetune(model, train, validation, "regress", schedule, seed, regression_loss, log)

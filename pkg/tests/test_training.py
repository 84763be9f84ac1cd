import math

import numpy as np
import pytest

from avmult.data import SyntheticSpec, generate_synthetic, split
from avmult.errors import DataError, TrainingDivergence, UndefinedMetric
from avmult.metrics import ccc
from avmult.mult import build, preset
from avmult.numerics import Adam, Tensor, check_gradients, precision
from avmult.training import (
    CsvLog, FinetuneHead, TrainSchedule, ccc_loss, corrupt_batch, evaluate, finetune_classification,
    finetune_model, finetune_regression, last_frames, lr_at, make_batch, masked_l1,
    plans_for_batch, pretrain, pretrain_step, step_rng,
)


# -- schedule -----------------------------------------------------------------

@pytest.mark.parametrize("total", [20, 100, 1000, 3000])
def test_lr_hand_values(total):
    s = TrainSchedule()
    assert lr_at(s, 0, total) == 0.0
    assert lr_at(s, total // 10, total) == 5e-4
    assert lr_at(s, total, total) == 0.0
    assert lr_at(s, int(0.55 * total), total) == pytest.approx(2.5e-4, rel=1e-12)


def test_lr_is_piecewise_linear():
    s = TrainSchedule()
    lrs = np.array([lr_at(s, k, 1000) for k in range(1001)])
    assert np.all(np.diff(lrs[:101]) > 0) and np.all(np.diff(lrs[100:]) < 0)
    np.testing.assert_allclose(np.diff(lrs[:101]), 5e-6, rtol=1e-9)
    np.testing.assert_allclose(np.diff(lrs[100:]), -5e-4 / 900, rtol=1e-9)


def test_lr_past_end_clamps_with_warning():
    with pytest.warns(UserWarning):
        assert lr_at(TrainSchedule(), 11, 10) == 0.0
    with pytest.raises(ValueError):
        lr_at(TrainSchedule(), -1, 10)


# -- masked reconstruction loss --------------------------------------------------

def test_masked_l1_hand_value():
    # two masked frames; audio errors 1 and 3 (dim 2), visual errors 2 and 0 (dim 1)
    target = np.array([[False, True, True, False]])
    pa = np.zeros((1, 4, 2))
    pa[0, 1] = [1.0, 1.0]
    pa[0, 2] = [3.0, -3.0]
    pa[0, 0] = [100.0, 100.0]  # unmasked, ignored
    pv = np.zeros((1, 4, 1))
    pv[0, 1] = 2.0
    total, l1_a, l1_v = masked_l1(Tensor(pa), Tensor(pv), np.zeros((1, 4, 2)), np.zeros((1, 4, 1)), target)
    assert float(l1_a.data) == pytest.approx((1 + 3) / 2)
    assert float(l1_v.data) == pytest.approx((2 + 0) / 2)
    assert float(total.data) == pytest.approx(3.0)


def test_perfect_reconstruction_is_zero():
    rng = np.random.default_rng(0)
    a, v = rng.standard_normal((3, 6, 4)), rng.standard_normal((3, 6, 2))
    target = rng.random((3, 6)) < 0.4
    target[0, 0] = True
    total, _, _ = masked_l1(Tensor(a), Tensor(v), a, v, target)
    assert float(total.data) == 0.0


def test_gradient_is_zero_at_unmasked_positions():
    rng = np.random.default_rng(1)
    a, v = rng.standard_normal((2, 8, 3)), rng.standard_normal((2, 8, 2))
    target = np.zeros((2, 8), dtype=bool)
    target[0, 2:5] = target[1, 6] = True
    pa = Tensor(rng.standard_normal(a.shape), requires_grad=True)
    pv = Tensor(rng.standard_normal(v.shape), requires_grad=True)
    total, _, _ = masked_l1(pa, pv, a, v, target)
    total.backward()
    assert np.all(pa.grad[~target] == 0) and np.all(pv.grad[~target] == 0)
    assert np.any(pa.grad[target] != 0)
    bumped = pa.data.copy()
    bumped[~target] += 10.0
    again, _, _ = masked_l1(Tensor(bumped), pv, a, v, target)
    assert float(again.data) == float(total.data)


def _small_records(n=12, seed=0, **kw):
    return generate_synthetic(SyntheticSpec(n_utterances=n, seed=seed, **kw))


def test_corruption_stays_inside_each_utterance():
    recs = _small_records(8)
    batch = make_batch(recs, 10)
    batch.lengths[0] = 6  # pretend a short utterance
    plans = plans_for_batch(batch, "train")
    _, _, target = corrupt_batch(batch, plans)
    assert not (target & batch.padding).any()
    assert target.sum(axis=1).tolist() == [math.ceil(0.15 * n - 1e-9) for n in batch.lengths]
    with pytest.raises(DataError):
        corrupt_batch(batch, plans[:-1])
    with pytest.raises(DataError):
        corrupt_batch(batch, plans[::-1])


def test_batch_crops_and_pads():
    recs = _small_records(5, min_frames=4, max_frames=15)
    batch = make_batch(recs, 10)
    assert batch.audio.shape[1] == min(10, max(r.length for r in recs))
    for i, r in enumerate(recs):
        n = batch.lengths[i]
        assert n == min(r.length, 10)
        np.testing.assert_array_equal(batch.audio[i, :n], r.audio.frames[:n])
        assert not batch.audio[i, n:].any()


def test_pretrain_step_updates_and_reports():
    model = build(preset("tiny"), seed=0)
    opt = Adam(model.parameters())
    batch = make_batch(_small_records(8), model.config.seq_len)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    report = pretrain_step(model, batch, plans_for_batch(batch, "train"), opt, 1e-3, step_rng(0, 0, 0))
    assert report.total == pytest.approx(report.l1_audio + report.l1_visual, abs=1e-6)
    assert report.n_masked == sum(math.ceil(0.15 * n - 1e-9) for n in batch.lengths)
    changed = [k for k, v in model.state_dict().items() if not np.array_equal(v, before[k])]
    assert "head_a.weight" in changed and "conv_v.kernel" in changed


def test_pretrain_step_zero_lr_keeps_parameters():
    model = build(preset("tiny"), seed=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    batch = make_batch(_small_records(4), 10)
    pretrain_step(model, batch, plans_for_batch(batch, "train"), Adam(model.parameters()), 0.0, step_rng(0, 0, 0))
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_nan_loss_aborts_with_diagnostic():
    model = build(preset("tiny"), seed=0)
    model.head_a.weight.data[:] = np.nan
    batch = make_batch(_small_records(3), 10)
    with pytest.raises(TrainingDivergence, match=r"lr 0\.0005.*utt00000"):
        pretrain_step(model, batch, plans_for_batch(batch, "train"), Adam(model.parameters()), 5e-4,
                      step_rng(0, 0, 0), step=7)


def test_pretraining_reduces_validation_loss():
    recs = generate_synthetic(SyntheticSpec(n_utterances=200, seed=1))
    parts = split(recs, seed=1)
    model = build(preset("tiny"), seed=0)
    # 120 training utterances give only 2 steps per epoch at batch 64
    result = pretrain(model, parts["train"], parts["validation"], TrainSchedule(batch_size=4), seed=0)
    assert len(result.val_loss) == 30
    assert result.val_loss[-1] <= 0.7 * result.val_loss[0]
    assert result.best_val == min(result.val_loss)


def test_pretrain_rows_and_log(tmp_path):
    recs = _small_records(40)
    parts = split(recs)
    log = CsvLog(tmp_path / "log.csv")
    result = pretrain(build(preset("tiny"), seed=0), parts["train"], parts["validation"],
                      TrainSchedule(epochs=2), log=log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,metric,lr"
    assert len(lines) == 1 + 4 and lines[2].startswith("1,validation,")
    assert float(lines[2].split(",")[2]) == result.val_loss[0]


def test_pretrain_resume_matches_uninterrupted_run():
    parts = split(_small_records(40))
    sched = TrainSchedule(epochs=3, batch_size=8)
    full = build(preset("tiny"), seed=0)
    pretrain(full, parts["train"], parts["validation"], sched, seed=4)

    part = build(preset("tiny"), seed=0)
    opt = Adam(part.parameters(), lr=sched.peak_lr)
    pretrain(part, parts["train"], parts["validation"], TrainSchedule(epochs=3, batch_size=8), seed=4, optimizer=opt,
             on_epoch=lambda e, *a: None)
    # replay epochs 2-3 on a copy stopped after epoch 1
    head = build(preset("tiny"), seed=0)
    opt2 = Adam(head.parameters(), lr=sched.peak_lr)
    stop = TrainSchedule(epochs=3, batch_size=8)
    snapshots = {}
    pretrain(head, parts["train"], parts["validation"], stop, seed=4, optimizer=opt2,
             on_epoch=lambda e, m, o, *a: snapshots.setdefault(e, ({k: v.copy() for k, v in m.state_dict().items()},
                                                                  o.state["step"],
                                                                  [x.copy() for x in o.state["m"]],
                                                                  [x.copy() for x in o.state["v"]])))
    resumed = build(preset("tiny"), seed=1)
    params, step, m, v = snapshots[1]
    resumed.load_state_dict(params)
    opt3 = Adam(resumed.parameters(), lr=sched.peak_lr)
    opt3.state = {"step": step, "m": m, "v": v}
    pretrain(resumed, parts["train"], parts["validation"], sched, seed=4, optimizer=opt3, start_epoch=1)
    for k, val in full.state_dict().items():
        np.testing.assert_array_equal(val, resumed.state_dict()[k])
        np.testing.assert_array_equal(val, part.state_dict()[k])


# -- fine-tuning ------------------------------------------------------------------

def test_last_frames_picks_final_real_step():
    seq = Tensor(np.arange(2 * 4 * 3, dtype=float).reshape(2, 4, 3))
    out = last_frames(seq, [2, 4]).data
    np.testing.assert_array_equal(out, [seq.data[0, 1], seq.data[1, 3]])


def test_head_is_residual_plus_readout():
    head = FinetuneHead(4, 3, np.random.default_rng(0))
    head.fc2.weight.data[:] = 0
    head.fc2.bias.data[:] = 0
    x = np.random.default_rng(1).standard_normal((5, 4))
    expected = x @ head.out.weight.data + head.out.bias.data
    np.testing.assert_allclose(head(Tensor(x)).data, expected, atol=1e-6)


def test_prediction_ignores_padding():
    model = finetune_model(build(preset("tiny"), seed=0), "classify", 4)
    recs = _small_records(3, min_frames=5, max_frames=8)
    batch = make_batch(recs, 10)
    solo = [model.predict(make_batch([r], 10).audio, make_batch([r], 10).visual, [min(r.length, 10)]).data[0]
            for r in recs]
    np.testing.assert_allclose(model.predict(batch.audio, batch.visual, batch.lengths).data, solo, atol=1e-5)


def test_ccc_loss_matches_metric_and_gradient():
    rng = np.random.default_rng(2)
    pred, target = rng.standard_normal((16, 2)), rng.standard_normal((16, 2)) + 1
    expected = 1 - np.mean([ccc(pred[:, j], target[:, j]) for j in range(2)])
    with precision(np.float64):
        loss = ccc_loss(Tensor(pred), target, eps=0.0)
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)
        err = check_gradients(lambda p: ccc_loss(p, target), pred)
    assert err < 1e-6


def _classification_data(seed, n=600, **kw):
    spec = SyntheticSpec(n_utterances=n, seed=seed, n_classes=2, **kw)
    parts = split(generate_synthetic(spec), seed=seed)
    return parts["train"], parts["validation"], parts["test"]


def test_finetune_is_deterministic():
    train, val, _ = _classification_data(0, n=120)
    sched = TrainSchedule(peak_lr=1e-3, epochs=3, batch_size=16)
    curves = []
    for _ in range(2):
        model = finetune_model(build(preset("tiny"), seed=0), "classify", 2, seed=0)
        res = finetune_classification(model, train, val, sched, seed=3)
        curves.append((res.curve, res.train_loss, model.state_dict()))
    assert curves[0][0] == curves[1][0] and curves[0][1] == curves[1][1]
    for k, v in curves[0][2].items():
        np.testing.assert_array_equal(v, curves[1][2][k])


def test_early_stopping_restores_best_epoch():
    train, val, _ = _classification_data(1, n=200)
    model = finetune_model(build(preset("tiny"), seed=0), "classify", 2)
    res = finetune_classification(model, train, val, TrainSchedule(peak_lr=3e-3, epochs=12, batch_size=16,
                                                                  patience=2), seed=0)
    assert res.best_metric == max(res.curve)
    assert res.curve[res.best_epoch - 1] == res.best_metric
    assert len(res.curve) <= 12 and len(res.curve) - res.best_epoch <= 2
    assert evaluate(model, val, "classify").accuracy == res.best_metric


def test_zero_lr_leaves_backbone_bit_identical():
    train, val, _ = _classification_data(2, n=60)
    backbone = build(preset("tiny"), seed=5)
    before = {k: v.copy() for k, v in backbone.state_dict().items()}
    model = finetune_model(backbone, "classify", 2)
    finetune_classification(model, train, val, TrainSchedule(peak_lr=0.0, epochs=2, batch_size=16))
    for k, v in backbone.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_frozen_backbone_only_moves_head():
    train, val, _ = _classification_data(2, n=60)
    backbone = build(preset("tiny"), seed=5)
    before = {k: v.copy() for k, v in backbone.state_dict().items()}
    model = finetune_model(backbone, "classify", 2, freeze_backbone=True)
    finetune_classification(model, train, val, TrainSchedule(peak_lr=1e-2, epochs=2, batch_size=16))
    for k, v in backbone.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_empty_split_is_an_error():
    train, val, _ = _classification_data(0, n=60)
    model = finetune_model(build(preset("tiny"), seed=0), "classify", 2)
    with pytest.raises(DataError):
        finetune_classification(model, [], val)
    with pytest.raises(DataError):
        finetune_classification(model, train, [])


def test_separable_classification():
    train, val, test = _classification_data(3, n=800)
    backbone = build(preset("tiny"), seed=0)
    pretrain(backbone, train, val, TrainSchedule(epochs=5, batch_size=16), seed=0)
    model = finetune_model(backbone, "classify", 2)
    finetune_classification(model, train, val, TrainSchedule(peak_lr=3e-3, epochs=30, batch_size=32), seed=0)
    assert evaluate(model, test, "classify").accuracy >= 0.95


def test_shuffled_labels_give_chance_accuracy():
    train, val, test = _classification_data(4, n=800)
    rng = np.random.default_rng(0)
    for part in (train, val, test):
        labels = rng.permutation([r.label for r in part])
        for r, lab in zip(part, labels):
            r.label = int(lab)
    model = finetune_model(build(preset("tiny"), seed=0), "classify", 2)
    finetune_classification(model, train, val, TrainSchedule(peak_lr=3e-3, epochs=10, batch_size=32), seed=0)
    acc = evaluate(model, test, "classify").accuracy
    assert abs(acc - 0.5) <= 3 * math.sqrt(0.25 / len(test))


def test_recoverable_regression():
    spec = SyntheticSpec(n_utterances=800, seed=6, label_noise=0.05)
    parts = split(generate_synthetic(spec), seed=6)
    model = finetune_model(build(preset("tiny"), seed=0), "regress", 2)
    finetune_regression(model, parts["train"], parts["validation"],
                        TrainSchedule(peak_lr=3e-3, epochs=30, batch_size=32), seed=0)
    report = evaluate(model, parts["test"], "regress")
    assert report.targets["arousal"]["CCC"] >= 0.8 and report.targets["valence"]["CCC"] >= 0.8


class _MeanPredictor:
    seq_len = 10

    def __init__(self, value):
        self.value = np.asarray(value)

    def eval(self):
        return self

    def predict(self, audio, visual, lengths, train=False, rng=None):
        return Tensor(np.tile(self.value, (len(lengths), 1)))


def test_mean_predictor_scores_zero_ccc():
    recs = _small_records(30)
    truth = np.array([r.regression_target for r in recs])
    report = evaluate(_MeanPredictor(truth.mean(axis=0)), recs, "regress")
    for j, name in enumerate(("arousal", "valence")):
        assert report.targets[name]["CCC"] == 0.0
        assert report.targets[name]["MAE"] == pytest.approx(np.mean(np.abs(truth[:, j] - truth[:, j].mean())))


def test_constant_targets_are_an_error():
    recs = _small_records(10)
    for r in recs:
        r.arousal = 3.0
    with pytest.raises(UndefinedMetric):
        evaluate(_MeanPredictor([3.0, 3.0]), recs, "regress")

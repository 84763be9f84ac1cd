import dataclasses
import hashlib
import os

import numpy as np
import pytest

from avmult.data import (
    FeatureSequence, PipelineConfig, Rejection, SyntheticSpec, UtteranceRecord, alignment_check, confidence_filter,
    decode_features, downsample, encode_features, fill_missing, generate_synthetic, load_dataset, make_generator,
    pipeline_fingerprint, preprocess_pair, read_manifest, save_dataset, split, subsample_training,
)
from avmult.errors import ConfigError, DataError, FormatError
from avmult.metrics import ccc


def _seq(frames, rate=30.0, conf=None, modality="visual"):
    return FeatureSequence(modality, rate, np.asarray(frames, dtype=np.float32), conf)


# -- confidence filter -------------------------------------------------------

def test_filter_all_confident_is_identity():
    seq = _seq(np.arange(12).reshape(4, 3), conf=np.ones(4))
    out = confidence_filter(seq)
    np.testing.assert_array_equal(out.frames, seq.frames)
    np.testing.assert_allclose(out.times, seq.times)


def test_filter_threshold_point_eight():
    seq = _seq([[1.0], [2.0], [3.0]], conf=[0.9, 0.5, 0.85])
    out = confidence_filter(seq, 0.8)
    np.testing.assert_array_equal(out.frames[:, 0], [1.0, 3.0])
    np.testing.assert_allclose(out.times, [0.0, 2 / 30])


def test_filter_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        conf = rng.uniform(0, 1, 40)
        seq = _seq(np.arange(40)[:, None], conf=conf)
        kept = set(confidence_filter(seq).frames[:, 0].astype(int))
        brute = {i for i in range(40) if conf[i] >= 0.8}
        if not brute:
            continue
        assert kept == brute


def test_filter_errors():
    with pytest.raises(DataError):
        confidence_filter(_seq([[1.0], [2.0]]))
    with pytest.raises(DataError):
        confidence_filter(_seq([[1.0], [2.0]], conf=[0.1, 0.2]))


# -- downsampling -------------------------------------------------------------

def test_downsample_constant():
    out = downsample(_seq(np.full((30, 2), 7.0)), 5.0)
    assert out.length == 5 and out.frame_rate == 5.0
    np.testing.assert_allclose(out.frames, 7.0)


def test_downsample_timestamp_frames_hand_values():
    t = np.arange(12) / 30.0
    out = downsample(_seq(t[:, None]), 5.0)
    # bins hold frames 0-5 and 6-11: means of i/30
    np.testing.assert_allclose(out.frames[:, 0], [2.5 / 30, 8.5 / 30], atol=1e-7)


def test_downsample_same_rate_is_identity():
    seq = _seq(np.random.default_rng(1).standard_normal((9, 3)), rate=5.0)
    np.testing.assert_allclose(downsample(seq, 5.0).frames, seq.frames, atol=1e-7)


def test_downsample_marks_empty_bins_and_fill_holds_previous():
    seq = _seq(np.arange(18)[:, None].astype(float), conf=np.r_[np.ones(6), np.zeros(6), np.ones(6)])
    out = downsample(confidence_filter(seq), 5.0)
    assert list(out.missing) == [False, True, False]
    np.testing.assert_allclose(fill_missing(out).frames[:, 0], [2.5, 2.5, 14.5])


def test_upsampling_rejected():
    with pytest.raises(DataError):
        downsample(_seq(np.zeros((5, 1)), rate=5.0), 30.0)


# -- alignment ------------------------------------------------------------------

def _pair(ta, tv):
    return _seq(np.zeros((ta, 2)), 5.0, modality="audio"), _seq(np.zeros((tv, 3)), 5.0)


@pytest.mark.parametrize("ta, tv, accepted, length", [
    (25, 25, True, 25), (25, 29, True, 25), (25, 30, True, 25), (25, 31, False, None), (31, 25, False, None),
])
def test_alignment_skew_rule(ta, tv, accepted, length):
    out = alignment_check(*_pair(ta, tv), max_skew=1.0, utterance_id="u")
    if accepted:
        assert isinstance(out, UtteranceRecord)
        assert out.audio.length == out.visual.length == length
    else:
        assert isinstance(out, Rejection) and "6 frames" in out.reason


def test_pipeline_end_to_end_and_fingerprint():
    rng = np.random.default_rng(2)
    audio = _seq(rng.standard_normal((25, 4)), 5.0, modality="audio")
    visual = _seq(rng.standard_normal((150, 3)), 30.0, conf=rng.uniform(0.7, 1.0, 150))
    rec = preprocess_pair(audio, visual, PipelineConfig(), "u1", "s1", label=2)
    assert isinstance(rec, UtteranceRecord)
    assert rec.audio.length == rec.visual.length == 25 and rec.label == 2
    assert not rec.visual.missing.any()
    fp = pipeline_fingerprint(PipelineConfig(), [rec])
    assert fp == pipeline_fingerprint(PipelineConfig(), [preprocess_pair(audio, visual, PipelineConfig(), "u1", "s1",
                                                                          label=2)])
    assert fp != pipeline_fingerprint(PipelineConfig(confidence_threshold=0.9), [rec])


# -- synthetic generator ------------------------------------------------------

SMALL = SyntheticSpec(n_utterances=200, seed=3)


def test_generator_is_deterministic():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    for x, y in zip(a, b):
        assert x.utterance_id == y.utterance_id and x.label == y.label
        np.testing.assert_array_equal(x.audio.frames, y.audio.frames)
    assert len(a) == 200
    assert all(6 <= r.length <= 10 and r.audio.length == r.visual.length for r in a)
    assert all(1 <= r.arousal <= 5 and 1 <= r.valence <= 5 for r in a)


def test_noiseless_audio_lies_in_mixing_row_space():
    spec = dataclasses.replace(SMALL, n_utterances=5, audio_noise=0.0, visual_noise=0.0, speaker_scale=0.0)
    gen = make_generator(spec)
    for r in generate_synthetic(spec):
        stacked = np.vstack([gen.audio_mix, r.audio.frames.astype(np.float64)])
        assert np.linalg.matrix_rank(stacked, tol=1e-4) == spec.factor_dim


def test_tied_unlagged_noiseless_streams_are_identical():
    spec = SyntheticSpec(n_utterances=4, audio_dim=17, visual_dim=17, lag=0, tie_mixing=True, audio_noise=0.0,
                         visual_noise=0.0, speaker_scale=0.0)
    for r in generate_synthetic(spec):
        np.testing.assert_array_equal(r.audio.frames, r.visual.frames)


def test_degenerate_specs():
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(offset_scale=0.0, path_scale=0.0))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec(n_classes=6))
    with pytest.raises(ConfigError):
        SyntheticSpec.from_dict({"bogus": 1})


def _r2(x_train, y_train, x_test, y_test):
    x_train = np.c_[x_train, np.ones(len(x_train))]
    x_test = np.c_[x_test, np.ones(len(x_test))]
    coef, *_ = np.linalg.lstsq(x_train, y_train, rcond=None)
    resid = y_test - x_test @ coef
    return 1 - resid.var() / y_test.var()


def test_cross_modal_linear_probe():
    """Audio frames are predictable from the surrounding visual frames alone."""
    spec = SyntheticSpec(n_utterances=300, seed=4, min_frames=20, max_frames=30)
    xs, ys = [], []
    for r in generate_synthetic(spec):
        v = r.visual.frames
        for t in range(1, r.length - spec.lag - 1):
            xs.append(v[t + spec.lag - 1:t + spec.lag + 2].reshape(-1))
            ys.append(r.audio.frames[t])
    xs, ys = np.array(xs, dtype=np.float64), np.array(ys, dtype=np.float64)
    half = len(xs) // 2
    assert _r2(xs[:half], ys[:half], xs[half:], ys[half:]) > 0.5


def test_labels_recoverable_from_true_latent():
    records, latents = generate_synthetic(SyntheticSpec(n_utterances=600, seed=5), return_latent=True)
    means = np.array([s.mean(axis=0) for s in latents])
    labels = np.array([r.label for r in records])
    # one-vs-rest least squares on the latent means
    onehot = np.eye(4)[labels]
    design = np.c_[means, np.sign(means[:, :2]), np.ones(len(means))]
    coef, *_ = np.linalg.lstsq(design, onehot, rcond=None)
    assert np.mean((design @ coef).argmax(1) == labels) >= 0.99
    targets = np.array([r.regression_target for r in records])
    coef, *_ = np.linalg.lstsq(np.c_[means, np.ones(len(means))], targets, rcond=None)
    pred = np.c_[means, np.ones(len(means))] @ coef
    assert ccc(pred[:, 0], targets[:, 0]) >= 0.95 and ccc(pred[:, 1], targets[:, 1]) >= 0.95


# -- splits -------------------------------------------------------------------------

def _records(n_speakers, per_speaker=3, labels=None):
    out = []
    for s in range(n_speakers):
        for k in range(per_speaker):
            i = len(out)
            out.append(UtteranceRecord(f"u{i}", f"s{s}", *_pair(5, 5), label=None if labels is None else labels[i],
                                       session=f"session{s % 6 + 1}"))
    return out


def test_ten_speakers_split_six_two_two():
    parts = split(_records(10), "speaker", (0.6, 0.2, 0.2), seed=0)
    spk = {k: {r.speaker_id for r in v} for k, v in parts.items()}
    assert [len(spk[k]) for k in ("train", "validation", "test")] == [6, 2, 2]
    assert not (spk["train"] & spk["validation"]) and not (spk["train"] & spk["test"])
    assert not (spk["validation"] & spk["test"])


def test_split_set_algebra_and_determinism():
    recs = _records(23, per_speaker=4)
    parts = split(recs, seed=9)
    ids = [{r.utterance_id for r in parts[k]} for k in ("train", "validation", "test")]
    assert set.union(*ids) == {r.utterance_id for r in recs}
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert parts == split(recs, seed=9)


def test_single_speaker_split_is_an_error():
    with pytest.raises(DataError):
        split(_records(1))


def test_session_split():
    parts = split(_records(12), "session", sessions={"train": ["session1", "session2", "session3", "session4"],
                                                     "validation": ["session5"], "test": ["session6"]})
    assert {r.session for r in parts["validation"]} == {"session5"}
    assert sum(map(len, parts.values())) == 36


# -- subsampling --------------------------------------------------------------------

def test_subsample_full_is_identity():
    recs = _records(4)
    assert subsample_training(recs, 100) == recs


def test_subsample_stratified_counts():
    labels = [i % 6 for i in range(480)]
    recs = _records(160, per_speaker=3, labels=labels)
    out = subsample_training(recs, 10, seed=1)
    assert len(out) == 48
    assert np.bincount([r.label for r in out]).tolist() == [8] * 6


def test_subsample_nesting():
    labels = [i % 4 for i in range(400)]
    recs = _records(100, per_speaker=4, labels=labels)
    for seed in range(5):
        small = {r.utterance_id for r in subsample_training(recs, 10, seed=seed)}
        large = {r.utterance_id for r in subsample_training(recs, 20, seed=seed)}
        assert small <= large


def test_subsample_errors():
    with pytest.raises(DataError):
        subsample_training(_records(3), 0)
    with pytest.raises(DataError):
        subsample_training(_records(1, per_speaker=2), 10)


# -- container format and manifest ----------------------------------------------------

def test_mmf1_roundtrip_with_and_without_confidence():
    rng = np.random.default_rng(6)
    for conf in (None, rng.uniform(0, 1, 7)):
        seq = _seq(rng.standard_normal((7, 3)), 30.0, conf=conf)
        back = decode_features(encode_features(seq))
        np.testing.assert_array_equal(back.frames, seq.frames)
        assert back.frame_rate == 30.0 and back.modality == "visual"
        if conf is None:
            assert back.confidence is None
        else:
            np.testing.assert_array_equal(back.confidence, seq.confidence)


def test_mmf1_header_layout():
    blob = encode_features(_seq(np.ones((2, 3)), 5.0, modality="audio"))
    assert blob[:4] == b"MMF1"
    assert np.frombuffer(blob[4:24], "<u4").tolist() == [0, 2, 3, 5, 1]
    assert len(blob) == 24 + 2 * 3 * 4


def test_mmf1_corruption():
    blob = encode_features(_seq(np.ones((2, 3))))
    with pytest.raises(FormatError, match="offset 0"):
        decode_features(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_features(blob[:-3])


def test_dataset_roundtrip(tmp_path):
    recs = generate_synthetic(SyntheticSpec(n_utterances=12, seed=7))
    save_dataset(tmp_path, recs)
    manifest = read_manifest(tmp_path)
    assert len(manifest) == 12 and set(manifest[0]) >= {"utterance_id", "speaker_id", "audio_path", "visual_path",
                                                         "label", "arousal", "valence"}
    loaded, rejected = load_dataset(tmp_path)
    assert not rejected and [r.utterance_id for r in loaded] == [r.utterance_id for r in recs]
    for a, b in zip(loaded, recs):
        np.testing.assert_array_equal(a.audio.frames, b.audio.frames)
        assert a.label == b.label and a.arousal == pytest.approx(b.arousal)


def test_dataset_files_are_reproducible(tmp_path):
    spec = SyntheticSpec(n_utterances=5, seed=8)

    def digest(d):
        h = hashlib.sha256()
        for root, _, files in sorted(os.walk(d)):
            for f in sorted(files):
                h.update(open(os.path.join(root, f), "rb").read())
        return h.hexdigest()

    save_dataset(tmp_path / "a", generate_synthetic(spec))
    save_dataset(tmp_path / "b", generate_synthetic(spec))
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_corpora_share_generator_but_not_utterances():
    base = SyntheticSpec(n_utterances=5, seed=2)
    other = dataclasses.replace(base, corpus=1)
    a, b = generate_synthetic(base), generate_synthetic(other)
    assert {r.utterance_id for r in a}.isdisjoint({r.utterance_id for r in b})
    assert not np.array_equal(a[0].audio.frames[:5], b[0].audio.frames[:5])
    np.testing.assert_array_equal(make_generator(base).audio_mix, make_generator(other).audio_mix)

from __future__ import annotations

import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idleak.embedder import embed_images
from idleak.regenerator import (
    CalibratedThresholds,
    DecoderConfig,
    DecoderModel,
    InsufficientImpostorsError,
    UntrainedModelError,
    calibrate_from_scores,
    empirical_far,
    impostor_scores,
    pass_level,
    regenerate,
    regenerate_batch,
    success_metrics,
    threshold_from_scores,
    train_decoder,
    verify_local,
)

TH = CalibratedThresholds({1e-3: 0.3, 1e-4: 0.5, 1e-5: 0.7}, 100_000, 0)
SMALL_DECODER = dict(steps=250, batch_size=16, widths=(32, 16, 16, 8), noise_dim=16, seed=0)


@pytest.fixture(scope="module")
def decoder(small_teacher, tiny_corpus):
    return train_decoder(small_teacher, tiny_corpus.split("train"), DecoderConfig(**SMALL_DECODER))


def test_untrained_decoder_rejected():
    with pytest.raises(UntrainedModelError):
        regenerate(DecoderModel(None), np.ones(4) / 2, k=1)


def test_regenerate_deterministic(decoder, small_teacher, tiny_corpus):
    e = embed_images(small_teacher, tiny_corpus.pixels[:1])[0]
    a, b = regenerate(decoder, e, 5, seed=3), regenerate(decoder, e, 5, seed=3)
    assert a.shape == (5, 64, 64, 3) and np.array_equal(a, b)


def test_regenerate_is_stochastic(decoder, small_teacher, tiny_corpus):
    e = embed_images(small_teacher, tiny_corpus.pixels[:1])[0]
    imgs = regenerate(decoder, e, 5, seed=3)
    assert len({hashlib.sha256(x.tobytes()).hexdigest() for x in imgs}) >= 2


def test_regenerate_dimension_mismatch(decoder):
    with pytest.raises(ValueError):
        regenerate(decoder, np.ones(7) / math.sqrt(7), 2)


def test_batch_matches_shape(decoder, small_teacher, tiny_corpus):
    e = embed_images(small_teacher, tiny_corpus.pixels[:3])
    assert regenerate_batch(decoder, e, 4, seed=0).shape == (3, 4, 64, 64, 3)


def test_identity_control_is_monotone(decoder, small_teacher, tiny_corpus):
    emb = embed_images(small_teacher, tiny_corpus.pixels)
    g = emb @ emb.T
    far_i, far_j = np.unravel_index(np.argmin(g), g.shape)
    assert g[far_i, far_j] < 0
    labels = tiny_corpus.labels
    near = [(i, j) for i in range(len(emb)) for j in range(i + 1, len(emb)) if g[i, j] > 0.9 and labels[i] == labels[j]]
    near_i, near_j = near[0]
    noise = np.random.default_rng(0).standard_normal((50, decoder.noise_dim)).astype(np.float32)

    def out_cos(a, b):
        ia = decoder.generate(np.repeat(emb[a][None], 50, 0), noise)
        ib = decoder.generate(np.repeat(emb[b][None], 50, 0), noise)
        return float(np.mean(np.sum(embed_images(small_teacher, ia) * embed_images(small_teacher, ib), axis=1)))

    assert out_cos(far_i, far_j) < out_cos(near_i, near_j)


def test_zero_identity_weight_ablation_is_worse(decoder, small_teacher, tiny_corpus):
    ablated = train_decoder(small_teacher, tiny_corpus.split("train"),
                            DecoderConfig(**{**SMALL_DECODER, "identity_weight": 0.0}))
    val = tiny_corpus.split("validation")
    e = embed_images(small_teacher, val.pixels)

    def consistency(model):
        imgs = regenerate_batch(model, e, 2, seed=1)
        out = embed_images(small_teacher, imgs.reshape(-1, 64, 64, 3)).reshape(len(e), 2, -1)
        return float(np.mean(np.einsum("nkd,nd->nk", out, e)))

    assert consistency(ablated) < consistency(decoder)


def test_decoder_save_load(decoder, tmp_path):
    decoder.save(tmp_path / "d")
    again = DecoderModel.load(tmp_path / "d")
    assert again.param_hash == decoder.param_hash


def test_threshold_is_order_statistic():
    scores = 0.01 * np.arange(1, 100_001)
    t = threshold_from_scores(scores, 1e-3)
    assert t == np.sort(scores)[::-1][99]


def test_threshold_at_far_one_is_minimum(rng):
    s = rng.random(50)
    assert threshold_from_scores(s, 1.0) == s.min()


def test_insufficient_impostors_names_required_count(rng):
    with pytest.raises(InsufficientImpostorsError, match="10000"):
        threshold_from_scores(rng.random(500), 1e-3)


def test_pass_level_hand_cases():
    assert pass_level(1.0, TH) == 1e-5
    assert pass_level(0.2, TH) is None
    assert pass_level(0.6, TH) == 1e-4


def test_identical_images_pass_strictest(small_teacher, tiny_corpus, rng):
    scores = rng.uniform(-0.5, 0.5, 1_000_000)
    th = calibrate_from_scores(scores, [1e-3, 1e-4, 1e-5])
    img = tiny_corpus.pixels[0]
    assert verify_local(small_teacher, img, img, th) == 1e-5


def test_thresholds_must_be_monotone():
    with pytest.raises(ValueError):
        CalibratedThresholds({1e-3: 0.7, 1e-4: 0.5}, 10, 0)


def test_thresholds_round_trip(tmp_path):
    TH.save(tmp_path / "t.json")
    assert CalibratedThresholds.load(tmp_path / "t.json") == TH


def test_impostor_scores_exclude_genuine(rng):
    e = rng.standard_normal((6, 4))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    s = impostor_scores(e, np.array([0, 0, 1, 1, 2, 2]))
    assert len(s) == 15 - 3


def test_empirical_far():
    assert empirical_far(np.array([0.1, 0.5, 0.9, 0.2]), 0.5) == 0.5


def test_success_all_pass_strictest():
    r = success_metrics({"a": [1e-5] * 5, "b": [1e-5] * 5}, TH)
    assert r.pass_at == {1e-3: 1.0, 1e-4: 1.0, 1e-5: 1.0}
    assert r.success_at_k == 1.0


def test_success_hand_enumeration():
    r = success_metrics({"a": [None, None, None, None, 1e-3], "b": [1e-4] * 5}, TH)
    assert r.success_at_k == 1.0
    assert r.pass_at[1e-3] == 0.5 and r.pass_at[1e-4] == 0.5 and r.pass_at[1e-5] == 0.0


def test_ragged_attempts_rejected():
    with pytest.raises(ValueError, match="ragged"):
        success_metrics({"a": [None] * 5, "b": [None] * 4}, TH)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from([None, 1e-3, 1e-4, 1e-5]), min_size=5, max_size=5), min_size=1, max_size=20))
def test_pass_at_is_monotone_and_bounded_by_success(rows):
    r = success_metrics({str(i): row for i, row in enumerate(rows)}, TH)
    assert r.pass_at[1e-5] <= r.pass_at[1e-4] <= r.pass_at[1e-3] <= r.success_at_k
    assert all(a <= b for a, b in zip(r.success_curve, r.success_curve[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_calibrated_thresholds_monotone(seed):
    scores = np.random.default_rng(seed).normal(0, 0.2, 100_000)
    th = calibrate_from_scores(scores, [1e-3, 1e-4])
    assert th.thresholds[1e-4] >= th.thresholds[1e-3]
    assert empirical_far(scores, th.thresholds[1e-3]) == pytest.approx(1e-3, abs=1e-5)

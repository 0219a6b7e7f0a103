from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idleak.protectors import (
    InvalidConfigError,
    InvalidImageError,
    Method,
    ProtectorConfig,
    block_dct,
    gaussian_blur,
    highpass_residual,
    inverse_block_dct,
    invert_full_partial,
    make_oracle,
    protect,
    protect_batch,
    protect_highpass,
    protect_minus,
    protect_partial,
    render_partial,
    zigzag_order,
)

FULL = ProtectorConfig(Method.PARTIAL, 0, {"n_selected": 64, "n_lowest_dropped": 0})


def test_zigzag_is_a_permutation_starting_at_dc():
    z = zigzag_order(8)
    assert z[0] == (0, 0) and z[1] == (0, 1) and z[2] == (1, 0)
    assert sorted(z) == [(r, c) for r in range(8) for c in range(8)]


def test_full_band_partial_round_trip(tiny_corpus):
    for img in tiny_corpus.pixels[:8]:
        t = protect(img, FULL)
        assert t.tensor.shape == (192, 8, 8)
        assert np.max(np.abs(invert_full_partial(t) - img)) <= 1e-4


def test_invert_rejects_lossy_template(tiny_corpus):
    with pytest.raises(InvalidConfigError):
        invert_full_partial(protect(tiny_corpus.pixels[0], ProtectorConfig(Method.PARTIAL)))


def test_highpass_constant_image_is_zero():
    img = np.full((64, 64, 3), 0.4, dtype=np.float32)
    for cfg in (ProtectorConfig(Method.HIGHPASS), ProtectorConfig(Method.MINUS)):
        assert np.max(np.abs(protect(img, cfg).tensor)) < 1e-6


def test_partial_24_selected_is_deterministic(tiny_corpus):
    cfg = ProtectorConfig(Method.PARTIAL, 0, {"n_selected": 24})
    a = protect_partial(tiny_corpus.pixels[0], cfg)
    b = protect_partial(tiny_corpus.pixels[0], cfg)
    # one plane per (sub-band, colour channel)
    assert cfg.channels == 72 and a.tensor.shape == (72, 8, 8)
    assert len(a.layout) == 24
    assert a.tensor.tobytes() == b.tensor.tobytes()


def test_n_selected_exceeding_available_rejected():
    with pytest.raises(InvalidConfigError):
        ProtectorConfig(Method.PARTIAL, 0, {"n_selected": 60, "n_lowest_dropped": 8})


def test_dropping_8_never_keeps_dc():
    for seed in range(50):
        cfg = ProtectorConfig(Method.PARTIAL, seed, {"n_lowest_dropped": 8})
        assert min(cfg.selected_subbands()) >= 8


def test_different_seeds_select_different_subbands():
    sets = [ProtectorConfig(Method.PARTIAL, s).selected_subbands() for s in range(100)]
    collisions = sum(a == b for i, a in enumerate(sets) for b in sets[i + 1:])
    assert collisions == 0
    assert sets[0] != sets[1]


def test_sigma_must_be_positive():
    for m in (Method.MINUS, Method.HIGHPASS):
        with pytest.raises(InvalidConfigError):
            ProtectorConfig(m, 0, {"sigma": 0.0})


def test_small_sigma_residue_vanishes(rng):
    img = rng.random((1, 64, 64, 3))
    assert np.max(np.abs(highpass_residual(img, 0.01))) <= 1e-3


def test_non_64_image_rejected(rng):
    with pytest.raises(InvalidImageError):
        protect(rng.random((32, 32, 3)), ProtectorConfig(Method.MINUS))


def test_out_of_range_pixels_rejected():
    with pytest.raises(InvalidImageError):
        protect(np.full((64, 64, 3), 2.0), ProtectorConfig(Method.HIGHPASS))


def test_method_specific_entry_points_check_config(tiny_corpus):
    img = tiny_corpus.pixels[0]
    with pytest.raises(InvalidConfigError):
        protect_minus(img, ProtectorConfig(Method.HIGHPASS))
    assert protect_highpass(img, ProtectorConfig(Method.HIGHPASS)).method is Method.HIGHPASS
    assert protect_minus(img, ProtectorConfig(Method.MINUS)).tensor.shape == (3, 64, 64)


def test_unknown_param_rejected():
    with pytest.raises(InvalidConfigError):
        ProtectorConfig(Method.MINUS, 0, {"radius": 3})


def test_oracle_matches_batch(tiny_corpus):
    cfg = ProtectorConfig(Method.PARTIAL)
    oracle = make_oracle(cfg)
    out = oracle(tiny_corpus.pixels[:4])
    assert out.shape == (4, oracle.channels, oracle.spatial, oracle.spatial)
    assert np.array_equal(out, protect_batch(tiny_corpus.pixels[:4], cfg))


def test_config_dict_round_trip():
    cfg = ProtectorConfig(Method.PARTIAL, 3, {"n_selected": 10})
    again = ProtectorConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.config_hash == cfg.config_hash


def test_render_partial_zero_fills_missing_subbands(tiny_corpus):
    cfg = ProtectorConfig(Method.PARTIAL, 0, {"n_selected": 64, "n_lowest_dropped": 0})
    t = protect_batch(tiny_corpus.pixels[:1], cfg)
    only_dc = t[:, :3]
    img = render_partial(only_dc, (0,))[0]
    # the DC plane alone renders each 8x8 block as its mean
    block_means = tiny_corpus.pixels[0].reshape(8, 8, 8, 8, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(img[::8, ::8], block_means, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 64, 64, 3), elements=st.floats(0, 1)))
def test_block_dct_is_orthonormal(x):
    coef = block_dct(x)
    np.testing.assert_allclose(inverse_block_dct(coef), x, atol=1e-9)
    np.testing.assert_allclose(np.sum(coef ** 2), np.sum(x ** 2), rtol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.3, 4.0), st.floats(0.0, 1.0))
def test_blur_preserves_constants(sigma, value):
    x = np.full((1, 64, 64, 3), value)
    np.testing.assert_allclose(gaussian_blur(x, sigma), x, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 56), st.integers(0, 8))
def test_selected_subbands_valid(seed, n_sel, n_drop):
    cfg = ProtectorConfig(Method.PARTIAL, seed, {"n_selected": n_sel, "n_lowest_dropped": n_drop})
    sel = cfg.selected_subbands()
    assert len(sel) == n_sel == len(set(sel))
    assert all(n_drop <= k < 64 for k in sel)

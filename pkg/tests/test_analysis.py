"""Predictor formulas and similarity diagnostics."""

import warnings

import numpy as np
import pytest

from sbprop.analysis import (
    RunStats,
    cka_linear,
    frame_redundancy,
    mean_offdiagonal,
    measure_ratios,
    predict_space_ratio_stt,
    predict_space_ratio_transformer,
    predict_time_ratio,
)
from sbprop.errors import ConfigError, ContractError, ShapeError
from sbprop.tensor import Rng


def test_transformer_ratio_at_reference_point():
    # d=32, n=392, r=0.25: direct evaluation of the ratio formula
    assert predict_space_ratio_transformer(32, 392, 0.25) == pytest.approx(0.3260, abs=5e-4)


def test_transformer_ratio_one_at_full_keep():
    for d, n in [(8, 64), (32, 392), (1, 1)]:
        assert predict_space_ratio_transformer(d, n, 1.0) == pytest.approx(1.0)


def test_transformer_ratio_attention_dominant_limit():
    # d/n -> 0: the score maps dominate and the ratio approaches r
    assert predict_space_ratio_transformer(1, 10**7, 0.25) == pytest.approx(0.25, abs=1e-5)


def test_transformer_ratio_monotone_in_r():
    vals = [predict_space_ratio_transformer(32, 392, r) for r in (0.1, 0.3, 0.6, 1.0)]
    assert vals == sorted(vals)


def test_stt_ratio_arithmetic():
    assert predict_space_ratio_stt(10, 1, 0.125) == pytest.approx(2.25 / 11)
    assert predict_space_ratio_stt(5, 3, 1.0) == pytest.approx(1.0)


def test_stt_ratio_no_temporal_term_gives_r():
    assert predict_space_ratio_stt(7.0, 0.0, 0.37) == pytest.approx(0.37)


def test_stt_ratio_monotone_in_r():
    vals = [predict_space_ratio_stt(10, 1, r) for r in (0.1, 0.4, 0.9, 1.0)]
    assert vals == sorted(vals)


def test_time_ratio_values():
    assert predict_time_ratio(0.25) == pytest.approx(0.75)
    assert predict_time_ratio(1e-9) == pytest.approx(0.5, abs=1e-8)
    assert predict_time_ratio(1.0) == pytest.approx(1.5)
    with pytest.raises(ConfigError):
        predict_time_ratio(0.0)


# ---------------------------------------------------------------------------
# CKA


def test_cka_self_similarity_is_one():
    x = Rng(0).normal((50, 8))
    assert cka_linear(x, x) == pytest.approx(1.0, abs=1e-12)


def test_cka_orthogonal_and_scale_invariance():
    rng = Rng(1)
    x = rng.normal((40, 6))
    q, _ = np.linalg.qr(rng.normal((6, 6)))
    assert cka_linear(x, x @ q) == pytest.approx(1.0, abs=1e-10)
    assert cka_linear(x, 3.7 * x) == pytest.approx(1.0, abs=1e-10)
    y = rng.normal((40, 5))
    assert cka_linear(x, y) == pytest.approx(cka_linear(x @ q, 0.2 * y), abs=1e-10)


def test_cka_symmetric():
    rng = Rng(2)
    x, y = rng.normal((30, 4)), rng.normal((30, 7))
    assert cka_linear(x, y) == pytest.approx(cka_linear(y, x), abs=1e-12)


def test_cka_independent_random_is_small():
    for seed in range(20):
        rng = Rng(100 + seed)
        x, y = rng.normal((200, 16)), rng.normal((200, 16))
        assert cka_linear(x, y) < 0.2


def test_cka_bounds():
    rng = Rng(3)
    for seed in range(10):
        x = rng.normal((25, 5))
        y = x + rng.normal((25, 5), std=0.5)
        v = cka_linear(x, y)
        assert 0.0 <= v <= 1.0 + 1e-12


def test_cka_zero_variance_warns_and_returns_zero():
    x = np.ones((10, 3))
    y = Rng(4).normal((10, 3))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert cka_linear(x, y) == 0.0
    assert any("zero-variance" in str(w.message) for w in caught)


def test_cka_shape_errors():
    with pytest.raises(ShapeError):
        cka_linear(np.ones((5, 2)), np.ones((6, 2)))
    with pytest.raises(ShapeError):
        cka_linear(np.ones(5), np.ones(5))


# ---------------------------------------------------------------------------
# frame redundancy


def test_redundancy_identical_frames_all_ones():
    a = np.tile(Rng(5).normal((1, 12)), (6, 1))
    sim = frame_redundancy(a)
    assert np.abs(sim - 1.0).max() < 1e-12


def test_redundancy_orthogonal_frames_identity():
    sim = frame_redundancy(np.eye(5))
    assert np.abs(sim - np.eye(5)).max() < 1e-12


def test_redundancy_zero_vector_cosine_is_zero():
    a = np.zeros((3, 4))
    a[0, 0] = 1.0
    sim = frame_redundancy(a)
    assert sim[1, 2] == 0.0 and sim[0, 1] == 0.0 and sim[0, 0] == 1.0


def test_mean_offdiagonal():
    m = np.array([[1.0, 0.5], [0.5, 1.0]])
    assert mean_offdiagonal(m) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# measured ratios


def test_layerwise_cka_self_and_bounds():
    from sbprop.analysis import layerwise_cka

    rng = Rng(6)
    acts = [rng.normal((4, 8, 5)), rng.normal((4, 8, 7))]
    other = [a + rng.normal(a.shape, std=0.3) for a in acts]
    same = layerwise_cka(acts, acts)
    assert all(abs(v - 1.0) < 1e-12 for v in same)
    vals = layerwise_cka(acts, other)
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in vals)
    with pytest.raises(ShapeError):
        layerwise_cka(acts, acts[:1])


def test_measure_ratios_identity():
    s = RunStats(cached_elements=100, forward_ops=10, backward_ops=10, fingerprint="a")
    out = measure_ratios(s, s)
    assert out == {"space_ratio": 1.0, "time_ratio": 1.0}


def test_measure_ratios_rejects_mismatched_runs():
    a = RunStats(cached_elements=100, forward_ops=10, backward_ops=10, fingerprint="a")
    b = RunStats(cached_elements=50, forward_ops=10, backward_ops=5, fingerprint="b")
    with pytest.raises(ContractError):
        measure_ratios(a, b)

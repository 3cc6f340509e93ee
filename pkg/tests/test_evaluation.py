import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqbooster.evaluation import (
    FeatureStats,
    PooledPixels,
    RandomConvClassifier,
    diversity_score,
    feature_stats,
    frechet_distance,
    normalized_radius,
    spectral_profile,
    tokens_to_map,
)


def _stats1d(mean, var):
    return FeatureStats(np.array([mean], float), np.array([[var]], float), 10)


def _random_stats(rng, d=5):
    a = rng.standard_normal((d, d))
    return FeatureStats(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d), 100)


# -- statistics --------------------------------------------------------------


def test_feature_stats_hand_example():
    s = feature_stats(np.array([[0.0], [2.0]]))
    assert s.mean.tolist() == [1.0]
    assert s.cov.tolist() == [[2.0]]
    assert s.n == 2


def test_feature_stats_needs_two_samples():
    with pytest.raises(ValueError):
        feature_stats(np.zeros((1, 3)))


@pytest.mark.parametrize("a,b,expected", [((0, 1), (0, 1), 0.0), ((0, 1), (1, 1), 1.0),
                                          ((0, 1), (0, 4), 1.0)])
def test_frechet_one_dimensional_cases(a, b, expected):
    assert frechet_distance(_stats1d(*a), _stats1d(*b)) == pytest.approx(expected, abs=1e-8)


def test_frechet_closed_form_diagonal():
    a = FeatureStats(np.zeros(3), np.diag([1.0, 4.0, 9.0]), 10)
    b = FeatureStats(np.ones(3), np.diag([4.0, 1.0, 1.0]), 10)
    expected = 3 + sum(x + y - 2 * math.sqrt(x * y) for x, y in [(1, 4), (4, 1), (9, 1)])
    assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_frechet_symmetric_and_self_zero(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_stats(rng), _random_stats(rng)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-8, rel=1e-10)
    assert frechet_distance(a, a) == 0.0
    assert frechet_distance(a, b) >= 0.0


def test_frechet_dimension_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(_stats1d(0, 1), FeatureStats(np.zeros(2), np.eye(2), 3))


def test_diversity_examples():
    assert diversity_score(np.full((4, 5), 0.2)) == pytest.approx(1.0)
    assert diversity_score(np.eye(4)) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        diversity_score(np.full((2, 3), 0.5))


def test_desk_extractors():
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, (6, 8, 8, 3))
    feats = PooledPixels(4)(images)
    assert feats.shape == (6, 12)
    assert np.allclose(feats[:, 0], images[:, :4, :4, 0].mean(axis=(1, 2)))
    probs = RandomConvClassifier(seed=1)(images)
    assert probs.shape == (6, 10)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.array_equal(probs, RandomConvClassifier(seed=1)(images))
    assert diversity_score(probs) >= 1.0


# -- spectra -----------------------------------------------------------------


def _brute_dft_power(x):
    rows, cols = x.shape
    out = np.zeros((rows, cols))
    for u in range(rows):
        for v in range(cols):
            acc = 0j
            for i in range(rows):
                for j in range(cols):
                    acc += x[i, j] * np.exp(-2j * np.pi * (u * i / rows + v * j / cols))
            out[u, v] = abs(acc) ** 2
    return out


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 4), st.integers(0, 1000))
def test_parseval(rows, cols, channels, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols, channels))
    prof = spectral_profile(x)
    spatial = (x**2).sum(axis=(0, 1)).mean()
    assert prof.radial_energy.sum() == pytest.approx(spatial, rel=1e-6)
    assert prof.low_ratio + prof.high_ratio == pytest.approx(1.0, abs=1e-9)


def test_power_matches_brute_force_dft():
    x = np.random.default_rng(3).standard_normal((5, 6))
    prof = spectral_profile(x)
    assert prof.radial_energy.sum() == pytest.approx(_brute_dft_power(x).sum() / 30, rel=1e-10)
    assert np.allclose(np.fft.ifftshift(prof.magnitude) ** 2, _brute_dft_power(x))


def test_constant_map_is_all_low():
    prof = spectral_profile(np.full((8, 8, 2), 3.0))
    assert prof.low_ratio == 1.0 and prof.high_ratio == 0.0
    assert spectral_profile(np.zeros((4, 4))).low_ratio == 1.0


def test_checkerboard_is_high():
    i, j = np.mgrid[0:16, 0:16]
    prof = spectral_profile(((-1.0) ** (i + j))[..., None])
    assert prof.high_ratio >= 0.99
    assert prof.radial_energy[-1] == pytest.approx(16 * 16)


def test_white_noise_matches_lattice_fraction():
    n = 32
    ks = [k if k <= n // 2 else n - k for k in range(n)]
    corner = math.hypot(n // 2, n // 2)
    inside = sum(1 for a in ks for b in ks if math.hypot(a, b) / corner <= 0.6)
    fraction = inside / n**2
    assert fraction == pytest.approx(0.565, abs=0.05)
    rng = np.random.default_rng(0)
    ratios = [spectral_profile(rng.standard_normal((n, n, 4))).low_ratio for _ in range(20)]
    assert np.mean(ratios) == pytest.approx(fraction, abs=0.02)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 100))
def test_low_ratio_scale_invariant(k, seed):
    x = np.random.default_rng(seed).standard_normal((8, 8, 3))
    assert spectral_profile(k * x).low_ratio == pytest.approx(spectral_profile(x).low_ratio, rel=1e-9)


def test_radius_normalisation():
    r = normalized_radius(8, 8)
    assert r[0, 0] == 0.0 and r.max() == 1.0 and r[4, 4] == 1.0


def test_rejects_tiny_maps():
    with pytest.raises(ValueError):
        spectral_profile(np.zeros((1, 8)))


def test_tokens_to_map():
    tokens = np.arange(24, dtype=float).reshape(6, 4)
    m = tokens_to_map(tokens, (2, 3))
    assert m.shape == (2, 3, 4)
    assert m[1, 0].tolist() == tokens[3].tolist()

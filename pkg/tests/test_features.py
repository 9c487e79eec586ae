import numpy as np
import pytest
from sklearn.base import clone

from igcl.features import SpectrogramFeaturizer, pool_matrix
from igcl.siggen import detrend_linear, log_spectrogram


def test_pool_matrix_block_means():
    M = np.arange(12, dtype=float).reshape(4, 3)
    assert np.array_equal(pool_matrix(M, 2, None), [[1.5, 2.5, 3.5], [7.5, 8.5, 9.5]])
    assert np.array_equal(pool_matrix(M, None, 1), M.mean(axis=1, keepdims=True))
    assert pool_matrix(M, 10, 10) is M


def test_featurizer_matches_direct_spectrogram(rng):
    X = rng.standard_normal((3, 1000))
    F = SpectrogramFeaturizer().fit_transform(X)
    direct = log_spectrogram(detrend_linear(X[1])).values.ravel()
    assert np.array_equal(F[1], direct)


def test_featurizer_pooled_shape(rng):
    f = SpectrogramFeaturizer(freq_bins=16, time_bins=12).fit(rng.standard_normal((2, 3000)))
    assert f.output_shape_ == (16, 12)
    assert f.transform(rng.standard_normal((5, 3000))).shape == (5, 192)


def test_featurizer_rejects_wrong_width(rng):
    f = SpectrogramFeaturizer().fit(rng.standard_normal((2, 1000)))
    with pytest.raises(ValueError):
        f.transform(rng.standard_normal((2, 900)))


def test_featurizer_clones():
    f = SpectrogramFeaturizer(freq_bins=8)
    assert clone(f).get_params() == f.get_params()

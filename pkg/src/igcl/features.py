"""Raw segment samples to flattened log-spectrogram features."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .siggen import detrend_linear, log_spectrogram


def pool_matrix(values: np.ndarray, rows: int | None, cols: int | None) -> np.ndarray:
    """Average contiguous blocks so the result is at most rows x cols."""
    if rows is not None and rows < values.shape[0]:
        values = np.stack([b.mean(axis=0) for b in np.array_split(values, rows, axis=0)])
    if cols is not None and cols < values.shape[1]:
        values = np.stack([b.mean(axis=1) for b in np.array_split(values, cols, axis=1)], axis=1)
    return values


class SpectrogramFeaturizer(TransformerMixin, BaseEstimator):
    """Detrend each row, take its log spectrogram and flatten it.

    Stateless apart from remembering the output shape.  ``freq_bins`` and
    ``time_bins`` optionally average the spectrogram down to a coarser grid,
    which keeps the encoder input small for desk-scale runs.
    """

    def __init__(self, sample_rate=100.0, win_s=2.56, hop_s=0.08, freq_bins=None, time_bins=None):
        self.sample_rate = sample_rate
        self.win_s = win_s
        self.hop_s = hop_s
        self.freq_bins = freq_bins
        self.time_bins = time_bins

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self.output_shape_ = self._one(X[0]).shape
        return self

    def _one(self, row: np.ndarray) -> np.ndarray:
        spec = log_spectrogram(detrend_linear(row), self.win_s, self.hop_s, self.sample_rate)
        return pool_matrix(spec.values, self.freq_bins, self.time_bins)

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        if hasattr(self, "n_features_in_") and X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} samples per row, got {X.shape[1]}")
        return np.stack([self._one(row).ravel() for row in X])

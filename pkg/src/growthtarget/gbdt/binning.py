"""Quantile binning of raw feature values.

Bin edges are midpoints between consecutive *observed* values chosen at
quantile ranks, so the partition of the training rows depends only on the
rank order of each feature.
"""
from __future__ import annotations

import numpy as np


def feature_edges(column: np.ndarray, n_bins: int) -> np.ndarray:
    x = column[~np.isnan(column)]
    if x.size == 0:
        return np.empty(0)
    uniq, counts = np.unique(x, return_counts=True)
    if uniq.size <= n_bins:
        cut = np.arange(uniq.size - 1)
    else:
        cum = np.cumsum(counts)
        targets = cum[-1] * np.arange(1, n_bins) / n_bins
        cut = np.unique(np.searchsorted(cum, targets, side="left"))
        cut = cut[cut < uniq.size - 1]
    lo, hi = uniq[cut], uniq[cut + 1]
    mid = lo + (hi - lo) / 2
    # x <= edge must put lo left and hi right
    return np.where(mid < hi, mid, lo)


class BinMapper:
    """Per-feature edges; code ``k`` means ``edges[k-1] < x <= edges[k]``.

    Missing values map to code ``n_bins`` (the last histogram column).
    """

    def __init__(self, n_bins: int):
        if not 2 <= n_bins <= 256:
            raise ValueError("n_bins must be in [2, 256]")
        self.n_bins = n_bins
        self.edges: list[np.ndarray] = []

    @property
    def missing_code(self) -> int:
        return self.n_bins

    def fit(self, X: np.ndarray) -> "BinMapper":
        self.edges = [feature_edges(X[:, j], self.n_bins) for j in range(X.shape[1])]
        return self

    def n_value_bins(self) -> np.ndarray:
        # constant and all-missing features have a single value bin: no split candidates
        return np.array([e.size + 1 for e in self.edges], dtype=np.int64)

    def transform(self, X: np.ndarray) -> np.ndarray:
        n, p = X.shape
        codes = np.empty((n, p), dtype=np.uint16)
        for j in range(p):
            col = X[:, j]
            miss = np.isnan(col)
            c = np.searchsorted(self.edges[j], col, side="left")
            c[miss] = self.missing_code
            codes[:, j] = c
        return codes

"""Upper-tail outlier capping and correlation-based feature filtering.

Both are *fitted* statistics: callers must fit them on training rows only
and apply the result to any evaluation rows.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .matrix import FeatureMatrix

logger = logging.getLogger(__name__)

MIN_CAP_VALUES = 4
IQR_MULTIPLIER = 1.5


@dataclass(frozen=True)
class CapRule:
    feature_name: str
    q3: float
    iqr: float
    cap: float
    enabled: bool = True


def fit_caps(matrix: FeatureMatrix) -> list[CapRule]:
    """One rule per feature, cap = Q3 + 1.5 IQR with linearly interpolated quantiles.

    Features with fewer than four observed values get a disabled rule.
    """
    rules = []
    X = matrix.values
    counts = np.sum(~np.isnan(X), axis=0)
    ok = counts >= MIN_CAP_VALUES
    q1 = np.full(X.shape[1], np.nan)
    q3 = np.full(X.shape[1], np.nan)
    if ok.any():
        q = np.nanquantile(X[:, ok], [0.25, 0.75], axis=0, method="linear")
        q1[ok], q3[ok] = q[0], q[1]
    for j, name in enumerate(matrix.feature_names):
        if not ok[j]:
            logger.debug("cap disabled for %s (%d values)", name, counts[j])
            rules.append(CapRule(name, math.nan, math.nan, math.inf, enabled=False))
            continue
        iqr = float(q3[j] - q1[j])
        rules.append(CapRule(name, float(q3[j]), iqr, float(q3[j] + IQR_MULTIPLIER * iqr)))
    return rules


def apply_caps(matrix: FeatureMatrix, rules: Sequence[CapRule]) -> FeatureMatrix:
    caps = np.full(len(matrix.feature_names), np.inf)
    pos = {n: i for i, n in enumerate(matrix.feature_names)}
    for r in rules:
        if r.enabled and r.feature_name in pos:
            caps[pos[r.feature_name]] = r.cap
    with np.errstate(invalid="ignore"):
        values = np.where(matrix.values > caps, caps, matrix.values)
    return FeatureMatrix(list(matrix.client_ids), list(matrix.feature_names), values,
                         dict(matrix.provenance))


# --------------------------------------------------------------------------
# correlations

def _centered(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    present = ~np.isnan(X)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mu = np.nanmean(X, axis=0)
    mu = np.nan_to_num(mu)
    return np.where(present, X - mu, 0.0), present.astype(np.float64)


def pairwise_pearson(X: np.ndarray) -> np.ndarray:
    """Pearson r for every column pair over rows where both are present.

    Undefined entries (fewer than two shared rows or no variance on the shared
    rows) are NaN.
    """
    Z, M = _centered(np.asarray(X, dtype=np.float64))
    n = M.T @ M
    sx = Z.T @ M            # sx[i, j] = sum of x_i over rows where j is present
    sxx = (Z * Z).T @ M
    sxy = Z.T @ Z
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = sxy - sx * sx.T / n
        vi = sxx - sx * sx / n
        vj = vi.T
        scale_i, scale_j = sxx, sxx.T
        bad = (n < 2) | (vi <= 1e-12 * scale_i) | (vj <= 1e-12 * scale_j) | (vi <= 0) | (vj <= 0)
        r = cov / np.sqrt(vi * vj)
    r[bad] = np.nan
    return np.clip(r, -1.0, 1.0)


def target_pearson(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson r between each column and ``y`` over the column's present rows."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.full(X.shape[1], np.nan)
    present = ~np.isnan(X)
    for j in range(X.shape[1]):
        m = present[:, j]
        if m.sum() < 2:
            continue
        x, t = X[m, j], y[m]
        x = x - x.mean()
        t = t - t.mean()
        sx, st = np.dot(x, x), np.dot(t, t)
        if sx <= 1e-12 * max(1.0, np.dot(X[m, j], X[m, j])) or st <= 0:
            continue
        out[j] = np.dot(x, t) / math.sqrt(sx * st)
    return np.clip(out, -1.0, 1.0)


def constant_mask(X: np.ndarray) -> np.ndarray:
    """Columns with fewer than two observed values or a single distinct value."""
    X = np.asarray(X, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lo, hi = np.nanmin(X, axis=0), np.nanmax(X, axis=0)
    count = np.sum(~np.isnan(X), axis=0)
    return (count < 2) | ~(hi > lo)


@dataclass
class FilterReport:
    dropped_pairwise: list[tuple[str, str, float]] = field(default_factory=list)
    dropped_target: list[tuple[str, float]] = field(default_factory=list)
    dropped_constant: list[str] = field(default_factory=list)
    surviving: list[str] = field(default_factory=list)
    r_max: float = 0.80

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropped_pairwise"] = [{"kept": k, "dropped": x, "r": r} for k, x, r in self.dropped_pairwise]
        d["dropped_target"] = [{"feature": f, "r": r} for f, r in self.dropped_target]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FilterReport":
        return cls(
            dropped_pairwise=[(e["kept"], e["dropped"], e["r"]) for e in d["dropped_pairwise"]],
            dropped_target=[(e["feature"], e["r"]) for e in d["dropped_target"]],
            dropped_constant=list(d["dropped_constant"]),
            surviving=list(d["surviving"]),
            r_max=d.get("r_max", 0.80),
        )


def filter_from_correlations(names: Sequence[str], target_r: np.ndarray, pair_r: np.ndarray,
                             constant: np.ndarray, r_max: float = 0.80) -> FilterReport:
    """Leakage guard then greedy redundancy scan over precomputed correlations.

    ``pair_r`` and ``target_r`` are indexed like ``names``.
    """
    p = len(names)
    report = FilterReport(r_max=r_max)
    candidates = []
    for j in range(p):
        if constant[j]:
            report.dropped_constant.append(names[j])
        elif not np.isnan(target_r[j]) and abs(target_r[j]) > r_max:
            report.dropped_target.append((names[j], float(target_r[j])))
        else:
            candidates.append(j)
    strength = np.nan_to_num(np.abs(target_r), nan=0.0)
    # descending |r to label|, ties by original position
    candidates.sort(key=lambda j: (-strength[j], j))
    abs_pair = np.nan_to_num(np.abs(pair_r), nan=0.0)
    kept: list[int] = []
    for j in candidates:
        if kept:
            row = abs_pair[j, kept]
            k = int(np.argmax(row))
            if row[k] > r_max:
                partner = kept[k]
                report.dropped_pairwise.append((names[partner], names[j], float(pair_r[j, partner])))
                continue
        kept.append(j)
    kept_set = set(kept)
    report.surviving = [names[j] for j in range(p) if j in kept_set]
    return report


def correlation_filter(matrix: FeatureMatrix, labels: Sequence[int] | np.ndarray,
                       r_max: float = 0.80) -> FilterReport:
    X = matrix.values
    y = np.asarray(labels, dtype=np.float64)
    if len(y) != X.shape[0]:
        raise ValueError("labels must align with matrix rows")
    return filter_from_correlations(matrix.feature_names, target_pearson(X, y),
                                    pairwise_pearson(X), constant_mask(X), r_max)

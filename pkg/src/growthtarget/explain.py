"""Exact tree Shapley attributions, mean-|SHAP| ranking and summary export.

Attributions live in margin (log-odds) space and use the tree-path
conditional expectation: a feature outside the coalition is integrated out by
weighting both children of its split by their training cover.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .features.matrix import FeatureMatrix
from .gbdt.model import TreeEnsemble


@dataclass
class ShapExplanation:
    client_id: str
    base_value: float
    phi: np.ndarray
    model_output: float


ImportanceRanking = list[tuple[str, float]]


# --------------------------------------------------------------------------
# path bookkeeping; each recursion level owns the slice [base, base + depth]

@njit(cache=True)
def _extend(pf, pz, po, pw, base, depth, zero, one, feat):
    pf[base + depth] = feat
    pz[base + depth] = zero
    po[base + depth] = one
    pw[base + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[base + i + 1] += one * pw[base + i] * (i + 1) / (depth + 1)
        pw[base + i] = zero * pw[base + i] * (depth - i) / (depth + 1)


@njit(cache=True)
def _unwind(pf, pz, po, pw, base, depth, idx):
    one = po[base + idx]
    zero = pz[base + idx]
    nxt = pw[base + depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[base + i]
            pw[base + i] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - pw[base + i] * zero * (depth - i) / (depth + 1)
        else:
            pw[base + i] = pw[base + i] * (depth + 1) / (zero * (depth - i))
    for i in range(idx, depth):
        pf[base + i] = pf[base + i + 1]
        pz[base + i] = pz[base + i + 1]
        po[base + i] = po[base + i + 1]


@njit(cache=True)
def _unwound_sum(pz, po, pw, base, depth, idx):
    one = po[base + idx]
    zero = pz[base + idx]
    nxt = pw[base + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[base + i] - tmp * zero * ((depth - i) / (depth + 1))
        elif zero != 0.0:
            total += (pw[base + i] / zero) / ((depth - i) / (depth + 1))
    return total


# no on-disk cache: reloading a cached self-recursive kernel crashes
@njit
def _recurse(x, phi, feature, threshold, missing_left, left, right, value, cover,
             node, depth, pf, pz, po, pw, parent_base, zero, one, feat):
    base = parent_base + depth + 1
    for i in range(depth):
        pf[base + i] = pf[parent_base + i]
        pz[base + i] = pz[parent_base + i]
        po[base + i] = po[parent_base + i]
        pw[base + i] = pw[parent_base + i]
    _extend(pf, pz, po, pw, base, depth, zero, one, feat)

    split = feature[node]
    if split < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(pz, po, pw, base, depth, i)
            phi[pf[base + i]] += w * (po[base + i] - pz[base + i]) * value[node]
        return

    xv = x[split]
    if np.isnan(xv):
        go_left = missing_left[node]
    else:
        go_left = xv <= threshold[node]
    hot = left[node] if go_left else right[node]
    cold = right[node] if go_left else left[node]
    hot_zero = cover[hot] / cover[node]
    cold_zero = cover[cold] / cover[node]

    in_zero = 1.0
    in_one = 1.0
    k = -1
    for i in range(depth + 1):
        if pf[base + i] == split:
            k = i
            break
    if k >= 0:
        in_zero = pz[base + k]
        in_one = po[base + k]
        _unwind(pf, pz, po, pw, base, depth, k)
        depth -= 1

    _recurse(x, phi, feature, threshold, missing_left, left, right, value, cover,
             hot, depth + 1, pf, pz, po, pw, base, hot_zero * in_zero, in_one, split)
    _recurse(x, phi, feature, threshold, missing_left, left, right, value, cover,
             cold, depth + 1, pf, pz, po, pw, base, cold_zero * in_zero, 0.0, split)


@njit
def _shap_rows(X, n_features, feature, threshold, missing_left, left, right, value, cover,
               roots, max_depth):
    n = X.shape[0]
    out = np.zeros((n, n_features))
    size = (max_depth + 3) * (max_depth + 4) // 2 + max_depth + 4
    pf = np.empty(size, dtype=np.int64)
    pz = np.empty(size)
    po = np.empty(size)
    pw = np.empty(size)
    phi = np.zeros(n_features + 1)  # last slot absorbs the root's dummy feature
    for r in range(n):
        phi[:] = 0.0
        for t in range(roots.shape[0]):
            _recurse(X[r], phi, feature, threshold, missing_left, left, right, value, cover,
                     roots[t], 0, pf, pz, po, pw, 0, 1.0, 1.0, n_features)
        out[r] = phi[:n_features]
    return out


def _flat_cover(model: TreeEnsemble) -> np.ndarray:
    return np.concatenate([t.cover for t in model.trees]) if model.trees else np.empty(0)


def shap_matrix(model: TreeEnsemble, matrix: FeatureMatrix | np.ndarray) -> tuple[np.ndarray, float]:
    """(n_rows x n_model_features attributions, base value) in margin space."""
    X = model._model_values(matrix)
    base_value = model.expected_margin()
    p = len(model.feature_names)
    if not model.trees:
        return np.zeros((X.shape[0], p)), base_value
    feat, thr, ml, left, right, value, roots = model._flatten()
    depth = max(t.max_depth() for t in model.trees)
    phi = _shap_rows(X, p, feat, thr, ml, left, right, value, _flat_cover(model), roots, depth)
    return phi, base_value


def shap_values(model: TreeEnsemble, matrix: FeatureMatrix) -> list[ShapExplanation]:
    phi, base_value = shap_matrix(model, matrix)
    margin = model.predict_margin(matrix)
    return [ShapExplanation(cid, base_value, phi[i], float(margin[i]))
            for i, cid in enumerate(matrix.client_ids)]


def rank_importance(names: Sequence[str], mean_abs: np.ndarray) -> ImportanceRanking:
    order = sorted(range(len(names)), key=lambda j: (-mean_abs[j], names[j]))
    return [(names[j], float(mean_abs[j])) for j in order]


def mean_abs_importance(explanations: Sequence[ShapExplanation],
                        feature_names: Sequence[str]) -> ImportanceRanking:
    if not explanations:
        raise ValueError("need at least one explanation")
    phi = np.vstack([e.phi for e in explanations])
    return rank_importance(list(feature_names), np.mean(np.abs(phi), axis=0))


def summary_export(explanations: Sequence[ShapExplanation], matrix: FeatureMatrix,
                   feature_names: Sequence[str], top_k: int = 20,
                   path: str | Path | None = None) -> dict:
    """(feature value, SHAP value) pairs for the ``top_k`` features by mean |SHAP|.

    ``matrix`` supplies the raw values; its rows must match the explanations.
    """
    ranking = mean_abs_importance(explanations, feature_names)
    pos = {n: i for i, n in enumerate(feature_names)}
    row_of = {c: i for i, c in enumerate(matrix.client_ids)}
    rows = [row_of[e.client_id] for e in explanations]
    out = []
    for rank, (name, imp) in enumerate(ranking[:max(0, top_k)], start=1):
        col = matrix.column(name)[rows] if name in matrix.feature_names else np.full(len(rows), np.nan)
        j = pos[name]
        pairs = [[None if np.isnan(v) else float(v), float(e.phi[j])] for v, e in zip(col, explanations)]
        out.append({"rank": rank, "feature": name, "mean_abs_shap": imp, "pairs": pairs})
    doc = {
        "top_k": top_k,
        "n_rows": len(explanations),
        "base_value": explanations[0].base_value if explanations else None,
        "features": out,
    }
    if path is not None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    return doc


def rerank_summary(doc: dict) -> ImportanceRanking:
    """Recompute the ranking from exported pairs alone."""
    names = [f["feature"] for f in doc["features"]]
    imp = np.array([np.mean([abs(s) for _, s in f["pairs"]]) if f["pairs"] else 0.0
                    for f in doc["features"]])
    return rank_importance(names, imp)


def write_importance(ranking: ImportanceRanking, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mean_abs_shap"])
        for name, imp in ranking:
            w.writerow([name, repr(imp)])


def read_importance(path: str | Path) -> ImportanceRanking:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [(row["feature"], float(row["mean_abs_shap"])) for row in csv.DictReader(fh)]

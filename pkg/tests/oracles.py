"""Slow, direct reference implementations used as test oracles.

Each one recomputes a quantity from its definition with plain loops and
shares no code with the package.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def window_sums(transactions, client, window=12):
    pre = post = 0.0
    for t in transactions:
        if t.client_id != client.client_id:
            continue
        d = t.month - client.install_month
        if -window <= d <= -1:
            pre += t.volume_hl
        elif 1 <= d <= window:
            post += t.volume_hl
    return pre, post


def monthly_series(transactions, client, w, keep=lambda t: True):
    """Per-month volume over the ``w`` months before installation, oldest first, plus activity."""
    vol = [0.0] * w
    act = [False] * w
    for t in transactions:
        if t.client_id != client.client_id or not keep(t):
            continue
        d = t.month - client.install_month
        if -w <= d <= -1:
            vol[d + w] += t.volume_hl
            act[d + w] = True
    return vol, act


def gap_scan(active):
    """(average gap, max gap, months since last) by walking the month list."""
    months = [i for i, a in enumerate(active) if a]
    if not months:
        return math.nan, math.nan, math.nan
    since = len(active) - months[-1]
    if len(months) < 2:
        return math.nan, math.nan, since
    gaps = [b - a for a, b in zip(months, months[1:])]
    return sum(gaps) / len(gaps), max(gaps), since


def pair_auc(scores, labels):
    num = 0.0
    n = 0
    for i, yi in enumerate(labels):
        if yi != 1:
            continue
        for j, yj in enumerate(labels):
            if yj != 0:
                continue
            n += 1
            if scores[i] > scores[j]:
                num += 1.0
            elif scores[i] == scores[j]:
                num += 0.5
    return num / n


def sorted_precision_at_k(scores, labels, ids, k):
    k = min(k, len(scores))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    return sum(labels[i] for i in order[:k]) / k


def confusion(scores, labels, t):
    tp = fp = fn = 0
    for s, y in zip(scores, labels):
        pred = s >= t
        tp += pred and y == 1
        fp += pred and y == 0
        fn += (not pred) and y == 1
    return tp, fp, fn


def pearson(a, b):
    m = ~(np.isnan(a) | np.isnan(b))
    a, b = a[m], b[m]
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


# --------------------------------------------------------------------------
# trees

def trace_margin(model, x):
    total = model.base_score
    for tree in model.trees:
        node = 0
        while tree.feature[node] >= 0:
            v = x[tree.feature[node]]
            if np.isnan(v):
                left = tree.missing_left[node]
            else:
                left = v <= tree.threshold[node]
            node = tree.left[node] if left else tree.right[node]
        total += tree.value[node]
    return total


def conditional_value(tree, subset, x, node=0):
    """Tree output with features outside ``subset`` integrated out by cover."""
    f = tree.feature[node]
    if f < 0:
        return tree.value[node]
    if f in subset:
        v = x[f]
        left = tree.missing_left[node] if np.isnan(v) else v <= tree.threshold[node]
        return conditional_value(tree, subset, x, tree.left[node] if left else tree.right[node])
    lc, rc = tree.left[node], tree.right[node]
    return (tree.cover[lc] * conditional_value(tree, subset, x, lc)
            + tree.cover[rc] * conditional_value(tree, subset, x, rc)) / tree.cover[node]


def brute_shapley(model, x):
    m = len(x)
    value = {}
    for r in range(m + 1):
        for s in itertools.combinations(range(m), r):
            value[s] = sum(conditional_value(t, set(s), x) for t in model.trees)
    phi = np.zeros(m)
    for i in range(m):
        for s, v in value.items():
            if i in s:
                continue
            w = math.factorial(len(s)) * math.factorial(m - len(s) - 1) / math.factorial(m)
            phi[i] += w * (value[tuple(sorted(s + (i,)))] - v)
    return phi

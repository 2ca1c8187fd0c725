"""Trailing-window sales statistics and recency/frequency features.

Every window ends at the month before installation. A window of ``W`` months
covers offsets ``-W .. -1`` relative to the installation month. For each
group (all products, one product line, one brand) a client is *active* in a
window when it has at least one transaction line for that group in the
window; inactive clients get missing values, active clients get statistics
over the full ``W``-month series with explicit zeros for months without
purchases.
"""
from __future__ import annotations

import re
from typing import Sequence

import numpy as np

from ..ingest import ClientRecord, TransactionRecord
from .matrix import FeatureMatrix

DEFAULT_WINDOWS = (3, 6, 12)
MEASURES = ("VOLUME", "REVENUE", "DISCOUNT")
STATS = ("SUM", "MEAN", "MAX", "MIN", "STD")


def sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").upper() or "X"


class _Cube:
    """Per-client monthly aggregates over the longest window, one slab per group."""

    def __init__(self, transactions: Sequence[TransactionRecord], clients: Sequence[ClientRecord],
                 depth: int):
        self.depth = depth
        self.client_ids = [c.client_id for c in clients]
        pos = {c.client_id: i for i, c in enumerate(clients)}
        install = np.array([c.install_month for c in clients], dtype=np.int64)

        rows, offs, lines, brands, meas, days = [], [], [], [], [], []
        for t in transactions:
            i = pos.get(t.client_id)
            if i is None:
                continue
            off = t.month - int(install[i])
            if -depth <= off <= -1:
                rows.append(i)
                offs.append(off + depth)  # 0 = oldest month, depth-1 = month before install
                lines.append(t.product_line)
                brands.append(t.brand)
                meas.append((t.volume_hl, t.revenue, t.discount))
                days.append(t.order_days)
        self.rows = np.array(rows, dtype=np.int64)
        self.offs = np.array(offs, dtype=np.int64)
        self.lines = np.array(lines, dtype=object)
        self.brands = np.array(brands, dtype=object)
        self.meas = np.array(meas, dtype=np.float64).reshape(-1, 3)
        self.days = np.array(days, dtype=np.float64)
        all_lines = sorted({t.product_line for t in transactions})
        all_brands = sorted({t.brand for t in transactions})
        self.groups = _group_prefixes(all_lines, all_brands)

    def slab(self, grouping: str, group: str | None):
        if grouping == "global":
            mask = np.ones(len(self.rows), dtype=bool)
        elif grouping == "product_line":
            mask = self.lines == group
        else:
            mask = self.brands == group
        n = len(self.client_ids)
        cube = np.zeros((n, self.depth, 3))
        count = np.zeros((n, self.depth), dtype=np.int64)
        days = np.zeros((n, self.depth))
        r, o = self.rows[mask], self.offs[mask]
        np.add.at(cube, (r, o), self.meas[mask])
        np.add.at(count, (r, o), 1)
        # distinct purchase days are not additive across lines; the max is a lower bound
        np.maximum.at(days, (r, o), self.days[mask])
        return cube, count > 0, days


def _group_prefixes(lines: Sequence[str], brands: Sequence[str]) -> list[tuple[str, str | None, str]]:
    """(grouping, group value, feature-name prefix) in deterministic order."""
    out = [("global", None, "")]
    line_names = {sanitize(x) for x in lines}
    for x in lines:
        out.append(("product_line", x, sanitize(x) + "_"))
    for b in brands:
        p = sanitize(b)
        if p in line_names:
            p = "BRAND_" + p
        out.append(("brand", b, p + "_"))
    return out


def _window_stats(series: np.ndarray, active: np.ndarray) -> dict[str, np.ndarray]:
    stats = {
        "SUM": series.sum(axis=1),
        "MEAN": series.mean(axis=1),
        "MAX": series.max(axis=1),
        "MIN": series.min(axis=1),
        "STD": series.std(axis=1),
    }
    for v in stats.values():
        v[~active] = np.nan
    return stats


def _gap_stats(act: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Average gap, max gap and months since last purchase over an activity grid."""
    n, w = act.shape
    idx = np.arange(w)
    count = act.sum(axis=1)
    marked = np.where(act, idx, -1)
    last_seen = np.maximum.accumulate(marked, axis=1)
    first = np.where(act.any(axis=1), np.argmax(act, axis=1), -1)
    last = last_seen[:, -1]
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_gap = np.where(count >= 2, (last - first) / np.maximum(count - 1, 1), np.nan)
    prev = np.concatenate([np.full((n, 1), -1), last_seen[:, :-1]], axis=1)
    gaps = np.where(act & (prev >= 0), idx - prev, 0)
    max_gap = np.where(count >= 2, gaps.max(axis=1), np.nan).astype(float)
    since_last = np.where(count >= 1, w - last, np.nan).astype(float)
    return avg_gap.astype(float), max_gap, since_last


def rolling_stats(transactions: Sequence[TransactionRecord], clients: Sequence[ClientRecord],
                  windows: Sequence[int] = DEFAULT_WINDOWS) -> FeatureMatrix:
    windows = sorted(set(int(w) for w in windows))
    cube = _Cube(transactions, clients, max(windows))
    names, cols, prov = [], [], {}
    for grouping, group, prefix in cube.groups:
        data, active, _ = cube.slab(grouping, group)
        for w in windows:
            sl = slice(cube.depth - w, cube.depth)
            act_w = active[:, sl].any(axis=1)
            for m, measure in enumerate(MEASURES):
                stats = _window_stats(data[:, sl, m], act_w)
                for stat in STATS:
                    name = f"{prefix}{measure}_{stat}_L{w}M"
                    names.append(name)
                    cols.append(stats[stat])
                    prov[name] = {"family": "rolling", "window": w, "grouping": grouping,
                                  "group": group, "measure": measure.lower(), "statistic": stat.lower()}
    values = np.column_stack(cols) if cols else np.empty((len(clients), 0))
    return FeatureMatrix(cube.client_ids, names, values, prov)


def rfm_stats(transactions: Sequence[TransactionRecord], clients: Sequence[ClientRecord],
              windows: Sequence[int] = DEFAULT_WINDOWS) -> FeatureMatrix:
    """Frequency (order days per month) and recency (month gaps between purchases).

    Recency is measured in months because the data is monthly; a gap of 1
    means purchases in consecutive months.
    """
    windows = sorted(set(int(w) for w in windows))
    cube = _Cube(transactions, clients, max(windows))
    names, cols, prov = [], [], {}

    def add(name, col, **desc):
        names.append(name)
        cols.append(col)
        prov[name] = desc

    for grouping, group, prefix in cube.groups:
        _, active, days = cube.slab(grouping, group)
        if grouping == "global":
            add("MONTHS_WITH_TRANSACTION", active.sum(axis=1).astype(float), family="rfm",
                window=cube.depth, grouping=grouping, group=group, statistic="active_months")
        for w in windows:
            sl = slice(cube.depth - w, cube.depth)
            act = active[:, sl]
            any_act = act.any(axis=1)
            freq = days[:, sl]
            mean = np.where(any_act, freq.mean(axis=1), np.nan)
            std = np.where(any_act, freq.std(axis=1), np.nan)
            avg_gap, max_gap, since = _gap_stats(act)
            base = dict(family="rfm", window=w, grouping=grouping, group=group)
            add(f"{prefix}FREQUENCY_MEAN_L{w}M", mean, **base, statistic="frequency_mean")
            add(f"{prefix}FREQUENCY_STD_L{w}M", std, **base, statistic="frequency_std")
            add(f"{prefix}RECENCY_AVG_L{w}M", avg_gap, **base, statistic="recency_avg_gap")
            add(f"{prefix}RECENCY_MAX_L{w}M", max_gap, **base, statistic="recency_max_gap")
            add(f"{prefix}RECENCY_LAST_L{w}M", since, **base, statistic="months_since_last")
    values = np.column_stack(cols) if cols else np.empty((len(clients), 0))
    return FeatureMatrix(cube.client_ids, names, values, prov)

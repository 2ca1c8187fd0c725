"""Client-level feature construction."""
from __future__ import annotations

from typing import Sequence

from ..ingest import DatasetBundle
from .census import census_join, competition_density
from .matrix import FeatureMatrix, hstack, read_matrix, write_matrix
from .preprocess import (
    CapRule,
    FilterReport,
    apply_caps,
    correlation_filter,
    fit_caps,
)
from .rolling import DEFAULT_WINDOWS, rfm_stats, rolling_stats

__all__ = [
    "CapRule", "FeatureMatrix", "FilterReport", "apply_caps", "build_features",
    "census_join", "competition_density", "correlation_filter", "fit_caps",
    "hstack", "read_matrix", "rfm_stats", "rolling_stats", "write_matrix",
]


def build_features(bundle: DatasetBundle, windows: Sequence[int] = DEFAULT_WINDOWS,
                   client_ids: Sequence[str] | None = None) -> FeatureMatrix:
    """Raw (uncapped, unfiltered) feature matrix for ``client_ids`` (default: all clients)."""
    clients = bundle.clients
    if client_ids is not None:
        by_id = {c.client_id: c for c in clients}
        clients = [by_id[c] for c in client_ids]
    blocks = [
        rolling_stats(bundle.transactions, clients, windows),
        rfm_stats(bundle.transactions, clients, windows),
        census_join(clients, bundle.polygons),
    ]
    if bundle.competitors:
        blocks.append(competition_density(clients, bundle.competitors))
    return hstack(blocks)

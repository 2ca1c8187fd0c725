"""Spatial enrichment: census polygon join and competitor density."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..ingest import CensusPolygon, ClientRecord, CompetitorSite
from .matrix import FeatureMatrix
from .rolling import sanitize

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8
COMPETITION_RADIUS_M = 300.0


def points_in_ring(lat: np.ndarray, lon: np.ndarray, ring: Sequence[tuple[float, float]]) -> np.ndarray:
    """Even-odd ray casting for many points against one ring."""
    inside = np.zeros(lat.shape, dtype=bool)
    n = len(ring)
    for k in range(n):
        y1, x1 = ring[k - 1]
        y2, x2 = ring[k]
        if y1 == y2:
            continue
        crosses = (y1 > lat) != (y2 > lat)
        x_at = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (lon < x_at)
    return inside


def distance_to_ring(lat: np.ndarray, lon: np.ndarray, ring: Sequence[tuple[float, float]]) -> np.ndarray:
    """Euclidean distance in the (lat, lon) plane from points to the ring boundary."""
    best = np.full(lat.shape, np.inf)
    n = len(ring)
    for k in range(n):
        ay, ax = ring[k - 1]
        by, bx = ring[k]
        dy, dx = by - ay, bx - ax
        seg2 = dy * dy + dx * dx
        t = ((lat - ay) * dy + (lon - ax) * dx) / seg2
        t = np.clip(t, 0.0, 1.0)
        py, px = ay + t * dy, ax + t * dx
        best = np.minimum(best, np.hypot(lat - py, lon - px))
    return best


def assign_polygons(clients: Sequence[ClientRecord], polygons: Sequence[CensusPolygon]) -> list[str | None]:
    """Polygon id per client: the containing polygon, else the nearest one.

    Boundary points count as contained. Ties (several containing polygons or
    equal distances) go to the lexicographically smallest polygon_id.
    """
    if not polygons:
        return [None] * len(clients)
    lat = np.array([c.latitude for c in clients], dtype=float)
    lon = np.array([c.longitude for c in clients], dtype=float)
    order = sorted(range(len(polygons)), key=lambda i: polygons[i].polygon_id)
    dist = np.empty((len(order), len(clients)))
    for row, i in enumerate(order):
        ring = polygons[i].ring
        d = distance_to_ring(lat, lon, ring)
        d[points_in_ring(lat, lon, ring)] = 0.0
        dist[row] = d
    # argmin returns the first minimum, i.e. the smallest id
    best = np.argmin(dist, axis=0)
    return [polygons[order[b]].polygon_id for b in best]


def census_join(clients: Sequence[ClientRecord], polygons: Sequence[CensusPolygon]) -> FeatureMatrix:
    ids = [c.client_id for c in clients]
    if not polygons:
        logger.warning("no census polygons supplied; census features are missing")
        return FeatureMatrix(ids, [], np.empty((len(ids), 0)))
    attrs = sorted({a for p in polygons for a in p.attributes})
    by_id = {p.polygon_id: p for p in polygons}
    assigned = assign_polygons(clients, polygons)
    values = np.array([[by_id[pid].attributes.get(a, np.nan) for a in attrs] for pid in assigned],
                      dtype=float).reshape(len(ids), len(attrs))
    names = [f"CENSUS_{sanitize(a)}" for a in attrs]
    prov = {n: {"family": "census", "attribute": a} for n, a in zip(names, attrs)}
    return FeatureMatrix(ids, names, values, prov)


def haversine_m(lat1, lon1, lat2, lon2) -> np.ndarray:
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def competition_density(clients: Sequence[ClientRecord], sites: Sequence[CompetitorSite],
                        radius_m: float = COMPETITION_RADIUS_M) -> FeatureMatrix:
    ids = [c.client_id for c in clients]
    lat = np.array([c.latitude for c in clients], dtype=float)
    lon = np.array([c.longitude for c in clients], dtype=float)
    slat = np.array([s.latitude for s in sites], dtype=float)
    slon = np.array([s.longitude for s in sites], dtype=float)
    counts = np.zeros(len(ids))
    chunk = 512
    for start in range(0, len(ids), chunk):
        sl = slice(start, start + chunk)
        d = haversine_m(lat[sl, None], lon[sl, None], slat[None, :], slon[None, :])
        counts[sl] = (d <= radius_m).sum(axis=1)
    name = f"DENSITY_COMPETITION_{int(radius_m)}M"
    return FeatureMatrix(ids, [name], counts[:, None],
                         {name: {"family": "competition", "radius_m": radius_m}})

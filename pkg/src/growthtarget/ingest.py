"""Canonical data model and file formats for transactions, clients and census polygons.

All volumes are hectoliters. Months are handled internally as integer
indices (``year * 12 + month - 1``) so window arithmetic is plain subtraction.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

TRANSACTION_HEADER = [
    "client_id", "month", "product_line", "brand",
    "volume_hl", "revenue", "discount", "order_days",
]
CLIENT_HEADER = ["client_id", "install_month", "latitude", "longitude"]
COMPETITOR_HEADER = ["site_id", "latitude", "longitude"]

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


class IngestError(ValueError):
    """Raised for malformed or inconsistent input files."""


def parse_month(text: str) -> int:
    m = _MONTH_RE.match(text.strip())
    if not m:
        raise ValueError(f"invalid month {text!r}")
    year, month = int(m.group(1)), int(m.group(2))
    if not 1 <= month <= 12:
        raise ValueError(f"invalid month {text!r}")
    return year * 12 + month - 1


def format_month(index: int) -> str:
    year, month0 = divmod(index, 12)
    return f"{year:04d}-{month0 + 1:02d}"


@dataclass(frozen=True, slots=True)
class TransactionRecord:
    client_id: str
    month: int
    product_line: str
    brand: str
    volume_hl: float
    revenue: float
    discount: float
    order_days: int

    @property
    def key(self) -> tuple[str, int, str, str]:
        return (self.client_id, self.month, self.product_line, self.brand)


@dataclass(frozen=True, slots=True)
class ClientRecord:
    client_id: str
    install_month: int
    latitude: float
    longitude: float


@dataclass(frozen=True)
class CensusPolygon:
    polygon_id: str
    ring: tuple[tuple[float, float], ...]  # (lat, lon), closure implied
    attributes: dict[str, float]


@dataclass(frozen=True, slots=True)
class CompetitorSite:
    site_id: str
    latitude: float
    longitude: float


@dataclass
class DatasetBundle:
    transactions: list[TransactionRecord]
    clients: list[ClientRecord]
    polygons: list[CensusPolygon] = field(default_factory=list)
    # Optional; drives the competition-density feature when present.
    competitors: list[CompetitorSite] = field(default_factory=list)


@dataclass
class ValidationReport:
    orphans: list[str]
    zero_transaction_clients: list[str]
    coverage: dict[str, tuple[str, str, int]]  # client -> (first, last, n_months)

    @property
    def ok(self) -> bool:
        return not self.orphans and not self.zero_transaction_clients


# --------------------------------------------------------------------------
# transactions

def _float_field(value: str, name: str, line: int) -> float:
    try:
        x = float(value)
    except ValueError:
        raise IngestError(f"non-numeric {name} at line {line}: {value!r}") from None
    if not math.isfinite(x):
        raise IngestError(f"non-finite {name} at line {line}")
    if x < 0:
        raise IngestError(f"negative {name} at line {line}")
    return x


def merge_duplicates(records: Iterable[TransactionRecord]) -> list[TransactionRecord]:
    """Sum rows sharing (client, month, line, brand) and sort by that key.

    order_days of merged rows is summed and clipped to 31.
    """
    merged: dict[tuple, list] = {}
    for r in records:
        acc = merged.get(r.key)
        if acc is None:
            merged[r.key] = [r.volume_hl, r.revenue, r.discount, r.order_days]
        else:
            acc[0] += r.volume_hl
            acc[1] += r.revenue
            acc[2] += r.discount
            acc[3] = min(31, acc[3] + r.order_days)
    return [
        TransactionRecord(k[0], k[1], k[2], k[3], v[0], v[1], v[2], v[3])
        for k, v in sorted(merged.items())
    ]


def read_transactions(rows: Iterable[list[str]], source: str = "<rows>") -> list[TransactionRecord]:
    it = iter(rows)
    header = next(it, None)
    if header is None or [h.strip() for h in header] != TRANSACTION_HEADER:
        raise IngestError(f"{source}: header must be {','.join(TRANSACTION_HEADER)}")
    out = []
    for line, row in enumerate(it, start=2):
        if not row:
            continue
        if len(row) != len(TRANSACTION_HEADER):
            raise IngestError(f"expected {len(TRANSACTION_HEADER)} fields at line {line}, got {len(row)}")
        cid, month, pline, brand = (s.strip() for s in row[:4])
        try:
            month_idx = parse_month(month)
        except ValueError:
            raise IngestError(f"invalid month at line {line}: {month!r}") from None
        days_f = _float_field(row[7], "order_days", line)
        if days_f != int(days_f) or days_f > 31:
            raise IngestError(f"order_days must be an integer in [0, 31] at line {line}")
        out.append(TransactionRecord(
            cid, month_idx, pline, brand,
            _float_field(row[4], "volume_hl", line),
            _float_field(row[5], "revenue", line),
            _float_field(row[6], "discount", line),
            int(days_f),
        ))
    return out


def load_transactions(path: str | Path) -> list[TransactionRecord]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        raw = read_transactions(csv.reader(fh), source=str(path))
    records = merge_duplicates(raw)
    logger.info("loaded %d transaction rows from %s (%d after merging duplicates)",
                len(raw), path, len(records))
    return records


def write_transactions(records: Iterable[TransactionRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSACTION_HEADER)
        for r in records:
            w.writerow([r.client_id, format_month(r.month), r.product_line, r.brand,
                        repr(r.volume_hl), repr(r.revenue), repr(r.discount), r.order_days])


# --------------------------------------------------------------------------
# clients / competitors

def load_clients(path: str | Path) -> list[ClientRecord]:
    path = Path(path)
    out: list[ClientRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CLIENT_HEADER:
            raise IngestError(f"{path}: header must be {','.join(CLIENT_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise IngestError(f"expected 4 fields at line {line}")
            cid = row[0].strip()
            if cid in seen:
                raise IngestError(f"duplicate client_id {cid!r} at line {line}")
            seen.add(cid)
            try:
                month = parse_month(row[1])
            except ValueError:
                raise IngestError(f"invalid month at line {line}: {row[1]!r}") from None
            try:
                lat, lon = float(row[2]), float(row[3])
            except ValueError:
                raise IngestError(f"non-numeric coordinate at line {line}") from None
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise IngestError(f"coordinate out of range at line {line}")
            out.append(ClientRecord(cid, month, lat, lon))
    return out


def write_clients(clients: Iterable[ClientRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLIENT_HEADER)
        for c in clients:
            w.writerow([c.client_id, format_month(c.install_month), repr(c.latitude), repr(c.longitude)])


def load_competitors(path: str | Path) -> list[CompetitorSite]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != COMPETITOR_HEADER:
            raise IngestError(f"{path}: header must be {','.join(COMPETITOR_HEADER)}")
        out = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append(CompetitorSite(row[0].strip(), float(row[1]), float(row[2])))
            except (ValueError, IndexError):
                raise IngestError(f"malformed competitor row at line {line}") from None
    return out


def write_competitors(sites: Iterable[CompetitorSite], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPETITOR_HEADER)
        for s in sites:
            w.writerow([s.site_id, repr(s.latitude), repr(s.longitude)])


# --------------------------------------------------------------------------
# polygons

def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p) -> bool:
    return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True
    return ((d1 == 0 and _on_segment(q1, q2, p1)) or (d2 == 0 and _on_segment(q1, q2, p2))
            or (d3 == 0 and _on_segment(p1, p2, q1)) or (d4 == 0 and _on_segment(p1, p2, q2)))


def is_simple_ring(ring: tuple[tuple[float, float], ...]) -> bool:
    n = len(ring)
    if n < 3:
        return False
    if len(set(ring)) != n:
        return False
    edges = [(ring[i], ring[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges share a vertex
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    # collinear overlap between adjacent edges (spike) is also non-simple
    for i in range(n):
        a, b, c = ring[i - 1], ring[i], ring[(i + 1) % n]
        if _orient(a, b, c) == 0 and (
            (b[0] - a[0]) * (c[0] - b[0]) + (b[1] - a[1]) * (c[1] - b[1]) < 0
        ):
            return False
    return True


def parse_polygons(doc: dict) -> list[CensusPolygon]:
    if doc.get("type") != "FeatureCollection":
        raise IngestError("polygons file must be a GeoJSON FeatureCollection")
    out = []
    for k, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        props = dict(feat.get("properties") or {})
        pid = str(feat.get("id", props.pop("polygon_id", f"P{k}")))
        props.pop("polygon_id", None)
        if geom.get("type") != "Polygon" or len(geom.get("coordinates", [])) != 1:
            raise IngestError(f"polygon {pid}: only single-ring Polygon geometries are supported")
        coords = [(float(lat), float(lon)) for lon, lat in geom["coordinates"][0]]
        if len(coords) > 1 and coords[0] == coords[-1]:
            coords = coords[:-1]
        if len(coords) < 3:
            raise IngestError(f"polygon {pid}: ring needs at least 3 vertices")
        ring = tuple(coords)
        if not is_simple_ring(ring):
            raise IngestError(f"polygon {pid}: ring is self-intersecting")
        attrs = {}
        for name, value in props.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise IngestError(f"polygon {pid}: property {name!r} is not numeric")
            attrs[name] = float(value)
        out.append(CensusPolygon(pid, ring, attrs))
    if not out:
        logger.warning("polygon collection is empty")
    return out


def load_polygons(path: str | Path) -> list[CensusPolygon]:
    with Path(path).open(encoding="utf-8") as fh:
        doc = json.load(fh)
    polygons = parse_polygons(doc)
    names = sorted({n for p in polygons for n in p.attributes})
    logger.info("loaded %d polygons with attributes %s", len(polygons), names)
    return polygons


def polygons_to_geojson(polygons: Iterable[CensusPolygon]) -> dict:
    features = []
    for p in polygons:
        ring = [[lon, lat] for lat, lon in p.ring]
        ring.append(ring[0])
        features.append({
            "type": "Feature",
            "id": p.polygon_id,
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": dict(p.attributes),
        })
    return {"type": "FeatureCollection", "features": features}


def write_polygons(polygons: Iterable[CensusPolygon], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(polygons_to_geojson(polygons), fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# bundles

def load_bundle(directory: str | Path) -> DatasetBundle:
    """Load ``transactions.csv``, ``clients.csv`` and, if present,
    ``polygons.geojson`` and ``competitors.csv`` from one directory."""
    d = Path(directory)
    polygons = load_polygons(d / "polygons.geojson") if (d / "polygons.geojson").exists() else []
    competitors = load_competitors(d / "competitors.csv") if (d / "competitors.csv").exists() else []
    return DatasetBundle(
        transactions=load_transactions(d / "transactions.csv"),
        clients=load_clients(d / "clients.csv"),
        polygons=polygons,
        competitors=competitors,
    )


def write_bundle(bundle: DatasetBundle, directory: str | Path) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / "transactions.csv", d / "clients.csv", d / "polygons.geojson"]
    write_transactions(bundle.transactions, paths[0])
    write_clients(bundle.clients, paths[1])
    write_polygons(bundle.polygons, paths[2])
    if bundle.competitors:
        paths.append(d / "competitors.csv")
        write_competitors(bundle.competitors, paths[3])
    return paths


def validate_bundle(bundle: DatasetBundle) -> ValidationReport:
    known = {c.client_id for c in bundle.clients}
    months: dict[str, set[int]] = {}
    for t in bundle.transactions:
        months.setdefault(t.client_id, set()).add(t.month)
    orphans = sorted(cid for cid in months if cid not in known)
    zero = sorted(cid for cid in known if cid not in months)
    coverage = {
        cid: (format_month(min(ms)), format_month(max(ms)), len(ms))
        for cid, ms in sorted(months.items()) if cid in known
    }
    return ValidationReport(orphans=orphans, zero_transaction_clients=zero, coverage=coverage)


def canonical_counter(records: Iterable[TransactionRecord]) -> Counter:
    """Multiset view used to compare record collections irrespective of order."""
    return Counter(records)

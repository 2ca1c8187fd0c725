"""Synthetic client books with a known growth-response model.

Clients buy product lines and brands month by month around a cooler
installation. After the pre-installation window is drawn, a handful of
engineered-feature analogs (activity months, peak beer volume, nearby
competitors, census income) are standardized and combined into a score ``s``.
For each growth threshold ``tau_k``

    P(growth >= tau_k) = sigmoid(a_k + s)

with intercepts ``a_k`` solved so the population positive rates hit the
configured targets. One uniform draw per client then fixes the realized
growth, which makes labels monotone across thresholds by construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .features.census import assign_polygons, haversine_m
from .features.matrix import FeatureMatrix
from .ingest import (
    CensusPolygon,
    ClientRecord,
    CompetitorSite,
    DatasetBundle,
    TransactionRecord,
    parse_month,
)
from .labeling import MIN_PRE_VOLUME, WINDOW_MONTHS
from .metrics import expected_auc

# default positive shares at 10/30/50% growth, matching the reference client book
REFERENCE_RATES = (0.4600, 0.4184, 0.3795)

DEFAULT_SIGNAL = {
    "MONTHS_WITH_TRANSACTION": -0.9,
    "BEER_VOLUME_MAX_L12M": 0.7,
    "DENSITY_COMPETITION_300M": -0.6,
    "CENSUS_AVG_HOUSEHOLD_INCOME": 0.5,
}
# same strength, but nothing derived from the client's own volume
VOLUME_FREE_SIGNAL = {
    "DENSITY_COMPETITION_300M": -1.0,
    "CENSUS_AVG_HOUSEHOLD_INCOME": 1.0,
    "CENSUS_EDUCATION_YEARS": 0.6,
}
SIGNAL_SOURCES = {
    "MONTHS_WITH_TRANSACTION", "BEER_VOLUME_MAX_L12M", "DENSITY_COMPETITION_300M",
    "CENSUS_AVG_HOUSEHOLD_INCOME", "CENSUS_POPULATION_DENSITY", "CENSUS_EDUCATION_YEARS",
}

LINE_NAMES = ("BEER", "WATER", "SOFT_DRINKS", "ENERGY", "JUICE", "MALT", "CIDER", "SPIRITS")
LINE_PRICE = {"BEER": 120.0, "WATER": 40.0, "SOFT_DRINKS": 60.0, "ENERGY": 150.0,
              "JUICE": 70.0, "MALT": 90.0, "CIDER": 110.0, "SPIRITS": 400.0}
LINE_WEIGHT = {"BEER": 4.0, "WATER": 1.5, "SOFT_DRINKS": 2.0, "ENERGY": 0.5,
               "JUICE": 0.8, "MALT": 0.6, "CIDER": 0.4, "SPIRITS": 0.2}

REGION_LAT = (13.60, 13.80)
REGION_LON = (-89.30, -89.10)


@dataclass
class GeneratorConfig:
    n_clients: int = 3119
    n_product_lines: int = 4
    n_brands: int = 8
    months_span: int = 39
    start_month: str = "2022-01"
    seed: int = 0
    signal_spec: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SIGNAL))
    noise_feature_count: int = 2
    taus: tuple[float, ...] = (0.10, 0.30, 0.50)
    target_positive_rate: tuple[float, ...] = REFERENCE_RATES
    line_absent_rate: float = 0.3
    n_competitors: int = 1500
    polygon_grid: int = 6

    def __post_init__(self):
        self.taus = tuple(float(t) for t in self.taus)
        self.target_positive_rate = tuple(float(r) for r in self.target_positive_rate)
        if self.months_span < 2 * WINDOW_MONTHS + 2:
            raise ValueError("months_span must cover both 12-month windows plus the install month")
        if not 1 <= self.n_product_lines <= len(LINE_NAMES):
            raise ValueError(f"n_product_lines must be in [1, {len(LINE_NAMES)}]")
        if self.n_brands < self.n_product_lines:
            raise ValueError("need at least one brand per product line")
        if self.n_clients < 2:
            raise ValueError("n_clients must be >= 2")
        unknown = set(self.signal_spec) - SIGNAL_SOURCES
        if unknown:
            raise ValueError(f"unsupported signal features: {sorted(unknown)}")
        rates = self.target_positive_rate
        if len(rates) != len(self.taus):
            raise ValueError("one target positive rate per threshold is required")
        if any(not 0 < r < 1 for r in rates) or any(b >= a for a, b in zip(rates, rates[1:])):
            raise ValueError("target positive rates must lie in (0, 1) and strictly decrease "
                             "as the threshold increases")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


@dataclass
class GroundTruth:
    client_ids: list[str]
    taus: tuple[float, ...]
    probabilities: np.ndarray  # clients x taus
    growth: np.ndarray
    eligible: np.ndarray
    informative_features: list[str]
    signal_score: np.ndarray
    intercepts: list[float]

    def bayes_auc(self, tau_index: int) -> float:
        return expected_auc(self.probabilities[self.eligible, tau_index])

    def to_dict(self) -> dict:
        return {
            "taus": list(self.taus),
            "informative_features": list(self.informative_features),
            "intercepts": list(self.intercepts),
            "bayes_auc": {str(t): self.bayes_auc(k) for k, t in enumerate(self.taus)},
            "clients": [
                {"client_id": c, "eligible": bool(e), "growth": float(g), "signal": float(s),
                 "probabilities": [float(x) for x in p]}
                for c, e, g, s, p in zip(self.client_ids, self.eligible, self.growth,
                                         self.signal_score, self.probabilities)
            ],
        }

    def write(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _polygons(cfg: GeneratorConfig, rng: np.random.Generator) -> list[CensusPolygon]:
    k = cfg.polygon_grid
    lat_edges = np.linspace(*REGION_LAT, k + 1)
    lon_edges = np.linspace(*REGION_LON, k + 1)
    out = []
    for i in range(k):
        for j in range(k):
            a, b = float(lat_edges[i]), float(lat_edges[i + 1])
            c, d = float(lon_edges[j]), float(lon_edges[j + 1])
            attrs = {
                "avg_household_income": float(np.round(rng.lognormal(math.log(650), 0.45), 2)),
                "population_density": float(np.round(rng.lognormal(math.log(4000), 0.6), 1)),
                "education_years": float(np.round(rng.uniform(5, 13), 2)),
            }
            for n in range(cfg.noise_feature_count):
                attrs[f"noise_attr_{n}"] = float(np.round(rng.normal(), 4))
            out.append(CensusPolygon(f"P{i * k + j:03d}", ((a, c), (a, d), (b, d), (b, c)), attrs))
    return out


def _competitors(cfg: GeneratorConfig, rng: np.random.Generator) -> list[CompetitorSite]:
    n_clustered = int(cfg.n_competitors * 0.7)
    centers = np.column_stack([rng.uniform(*REGION_LAT, 25), rng.uniform(*REGION_LON, 25)])
    pick = rng.integers(0, len(centers), n_clustered)
    pts = centers[pick] + rng.normal(scale=0.004, size=(n_clustered, 2))
    rest = np.column_stack([rng.uniform(*REGION_LAT, cfg.n_competitors - n_clustered),
                            rng.uniform(*REGION_LON, cfg.n_competitors - n_clustered)])
    pts = np.vstack([pts, rest])
    return [CompetitorSite(f"S{i:05d}", float(round(la, 6)), float(round(lo, 6)))
            for i, (la, lo) in enumerate(pts)]


class _Client:
    """Purchase behaviour of one client; draws monthly transaction lines."""

    def __init__(self, cid, lines, brands_by_line, rng, cfg):
        self.cid = cid
        self.level = rng.lognormal(math.log(1.2), 0.45)  # hl per active month
        self.activity = rng.uniform(0.35, 1.0)
        present = [ln for ln in lines if ln == lines[0] or rng.random() >= cfg.line_absent_rate]
        w = np.array([LINE_WEIGHT[ln] for ln in present]) * rng.gamma(2.0, 0.5, len(present))
        self.lines = present
        self.line_share = w / w.sum()
        self.brands = {}
        for ln in present:
            cands = brands_by_line[ln]
            chosen = [b for b in cands if rng.random() < 0.6] or [cands[int(rng.integers(len(cands)))]]
            share = rng.dirichlet(np.ones(len(chosen)) * 2.0)
            self.brands[ln] = (chosen, share)
        self.discount_rate = rng.uniform(0.0, 0.08)

    def month(self, m: int, rng: np.random.Generator, force: bool = False) -> list[list]:
        if not force and rng.random() >= self.activity:
            return []
        season = 1.0 + 0.15 * math.sin(2 * math.pi * (m % 12) / 12)
        total = self.level * season * rng.lognormal(0.0, 0.3)
        on = rng.random(len(self.lines)) < 0.85
        if not on.any():
            on[0] = True
        share = np.where(on, self.line_share, 0.0)
        share = share / share.sum()
        rows = []
        for ln, s in zip(self.lines, share):
            if s == 0:
                continue
            brands, bshare = self.brands[ln]
            for b, bs in zip(brands, bshare):
                vol = total * s * bs
                revenue = vol * LINE_PRICE[ln] * rng.lognormal(0.0, 0.05)
                discount = revenue * self.discount_rate * rng.uniform(0.5, 1.5)
                days = min(31, 1 + int(rng.binomial(7, self.activity)))
                rows.append([m, ln, b, vol, revenue, discount, days])
        return rows


def _solve_intercept(score: np.ndarray, rate: float) -> float:
    f = lambda a: float(np.mean(_sigmoid(a + score))) - rate  # noqa: E731
    lo, hi = -30.0, 30.0
    if f(lo) > 0 or f(hi) < 0:
        raise ValueError(f"positive rate {rate} is infeasible for this signal")
    return brentq(f, lo, hi, xtol=1e-12)


def _draw_growth(u: float, surv: np.ndarray, taus: Sequence[float], rng: np.random.Generator) -> float:
    """Growth consistent with one uniform draw against the per-threshold survival probabilities."""
    k = int(np.sum(u < surv))  # number of thresholds reached
    eps = 1e-6
    if k == 0:
        return max(-0.9, taus[0] - eps - rng.exponential(0.2))
    if k == len(taus):
        return taus[-1] + eps + rng.exponential(0.4)
    return rng.uniform(taus[k - 1] + eps, taus[k] - eps)


def generate(config: GeneratorConfig | None = None) -> tuple[DatasetBundle, GroundTruth]:
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(cfg.seed)
    start = parse_month(cfg.start_month)
    lines = list(LINE_NAMES[:cfg.n_product_lines])
    brands_by_line: dict[str, list[str]] = {ln: [] for ln in lines}
    for b in range(cfg.n_brands):
        brands_by_line[lines[b % len(lines)]].append(f"BRAND{b + 1:02d}")

    polygons = _polygons(cfg, rng)
    competitors = _competitors(cfg, rng)

    n = cfg.n_clients
    lat = rng.uniform(REGION_LAT[0] - 0.01, REGION_LAT[1] + 0.01, n).round(6)
    lon = rng.uniform(REGION_LON[0] - 0.01, REGION_LON[1] + 0.01, n).round(6)
    first_install = start + WINDOW_MONTHS
    last_install = start + cfg.months_span - WINDOW_MONTHS - 1
    install = rng.integers(first_install, last_install + 1, n)
    ids = [f"C{i + 1:05d}" for i in range(n)]
    clients = [ClientRecord(ids[i], int(install[i]), float(lat[i]), float(lon[i])) for i in range(n)]

    behaviours = [_Client(ids[i], lines, brands_by_line, rng, cfg) for i in range(n)]
    pre_rows: list[list[list]] = []
    v_pre = np.zeros(n)
    months_active = np.zeros(n)
    beer_max = np.zeros(n)
    for i, beh in enumerate(behaviours):
        rows = []
        beer_by_month = np.zeros(WINDOW_MONTHS)
        for off in range(-WINDOW_MONTHS, 1):  # pre window plus the installation month
            month_rows = beh.month(int(install[i]) + off, rng)
            rows.extend(month_rows)
            if off < 0 and month_rows:
                months_active[i] += 1
                v_pre[i] += sum(r[3] for r in month_rows)
                beer_by_month[off + WINDOW_MONTHS] = sum(r[3] for r in month_rows if r[1] == lines[0])
        beer_max[i] = beer_by_month.max()
        pre_rows.append(rows)

    # engineered-feature analogs
    assigned = assign_polygons(clients, polygons)
    poly = {p.polygon_id: p for p in polygons}
    comp_lat = np.array([s.latitude for s in competitors])
    comp_lon = np.array([s.longitude for s in competitors])
    density = np.array([
        np.sum(haversine_m(lat[i], lon[i], comp_lat, comp_lon) <= 300.0) for i in range(n)
    ], dtype=float)
    sources = {
        "MONTHS_WITH_TRANSACTION": months_active,
        "BEER_VOLUME_MAX_L12M": beer_max,
        "DENSITY_COMPETITION_300M": density,
        "CENSUS_AVG_HOUSEHOLD_INCOME": np.array([poly[a].attributes["avg_household_income"] for a in assigned]),
        "CENSUS_POPULATION_DENSITY": np.array([poly[a].attributes["population_density"] for a in assigned]),
        "CENSUS_EDUCATION_YEARS": np.array([poly[a].attributes["education_years"] for a in assigned]),
    }
    eligible = v_pre >= MIN_PRE_VOLUME
    score = np.zeros(n)
    for name, beta in sorted(cfg.signal_spec.items()):
        x = sources[name]
        sd = x[eligible].std()
        if beta != 0 and sd > 0:
            score += beta * (x - x[eligible].mean()) / sd
    intercepts = [_solve_intercept(score[eligible], r) for r in cfg.target_positive_rate]
    probs = _sigmoid(np.array(intercepts)[None, :] + score[:, None])

    growth = np.zeros(n)
    transactions: list[TransactionRecord] = []
    for i, beh in enumerate(behaviours):
        u = rng.random()
        growth[i] = _draw_growth(u, probs[i], cfg.taus, rng)
        post = []
        for off in range(1, WINDOW_MONTHS + 1):
            post.extend(beh.month(int(install[i]) + off, rng))
        if not post:
            post = beh.month(int(install[i]) + 1 + int(rng.integers(WINDOW_MONTHS)), rng, force=True)
        if eligible[i]:
            raw = sum(r[3] for r in post)
            scale = v_pre[i] * (1.0 + growth[i]) / raw
            for r in post:
                r[3] *= scale
                r[4] *= scale
                r[5] *= scale
        for m, ln, b, vol, rev, disc, days in pre_rows[i] + post:
            transactions.append(TransactionRecord(ids[i], int(m), ln, b, float(vol), float(rev),
                                                  float(disc), int(days)))
    transactions.sort(key=lambda t: t.key)

    truth = GroundTruth(
        client_ids=ids, taus=cfg.taus, probabilities=probs, growth=growth, eligible=eligible,
        informative_features=sorted(n for n, b in cfg.signal_spec.items() if b != 0),
        signal_score=score, intercepts=intercepts,
    )
    bundle = DatasetBundle(transactions=transactions, clients=clients, polygons=polygons,
                           competitors=competitors)
    return bundle, truth


# --------------------------------------------------------------------------
# tabular planted-relevance data

@dataclass
class PlantedMatrix:
    matrix: FeatureMatrix
    labels: np.ndarray
    probabilities: np.ndarray
    informative: list[str]

    @property
    def bayes_auc(self) -> float:
        return expected_auc(self.probabilities)


def generate_planted_matrix(n_rows: int = 3000, n_informative: int = 10, n_noise: int = 90,
                            seed: int = 0, missing_rate: float = 0.05) -> PlantedMatrix:
    """Gaussian features where only the first ``n_informative`` drive the label.

    Effects are a mix of linear, step and saturating terms so that tree
    models have to learn non-linear shapes. Missing cells contribute nothing
    to the log-odds.
    """
    rng = np.random.default_rng(seed)
    p = n_informative + n_noise
    X = rng.normal(size=(n_rows, p))
    miss = rng.random((n_rows, p)) < missing_rate
    effects = np.linspace(1.2, 0.7, n_informative)
    logit = np.full(n_rows, -0.3)
    for j in range(n_informative):
        x = X[:, j]
        shape = j % 3
        if shape == 0:
            term = x
        elif shape == 1:
            term = np.where(x > 0, 1.0, -1.0)
        else:
            term = np.tanh(1.5 * x) * 1.2
        logit += effects[j] * np.where(miss[:, j], 0.0, term)
    prob = _sigmoid(logit)
    y = (rng.random(n_rows) < prob).astype(np.int64)
    X[miss] = np.nan
    names = [f"INFO_{j:02d}" for j in range(n_informative)] + [f"NOISE_{j:02d}" for j in range(n_noise)]
    # shuffle column order so informative features are not simply the first ones
    perm = rng.permutation(p)
    names = [names[k] for k in perm]
    X = X[:, perm]
    matrix = FeatureMatrix([f"R{i:05d}" for i in range(n_rows)], names, X,
                           {nm: {"family": "planted"} for nm in names})
    return PlantedMatrix(matrix, y, prob, sorted(nm for nm in names if nm.startswith("INFO_")))

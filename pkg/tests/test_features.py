from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from growthtarget.features import (
    FeatureMatrix,
    apply_caps,
    build_features,
    census_join,
    competition_density,
    correlation_filter,
    fit_caps,
    read_matrix,
    rfm_stats,
    rolling_stats,
    write_matrix,
)
from growthtarget.features.census import assign_polygons, haversine_m
from growthtarget.features.preprocess import pairwise_pearson, target_pearson
from growthtarget.ingest import CensusPolygon, ClientRecord, CompetitorSite, TransactionRecord

from oracles import gap_scan, monthly_series, pearson

INSTALL = 2023 * 12 + 5
CLIENT = ClientRecord("C", INSTALL, 0.0, 0.0)


def _tx(offset, vol, line="BEER", brand="B1", days=2, cid="C"):
    return TransactionRecord(cid, INSTALL + offset, line, brand, vol, vol * 10, 0.0, days)


def _row(matrix, name, i=0):
    return matrix.values[i, matrix.feature_names.index(name)]


# --------------------------------------------------------------------------
# rolling statistics

def test_constant_series_window_stats():
    tx = [_tx(d, 2.0) for d in range(-12, 0)]
    m = rolling_stats(tx, [CLIENT])
    for w in (3, 6, 12):
        assert _row(m, f"VOLUME_SUM_L{w}M") == 2.0 * w
        assert _row(m, f"VOLUME_MEAN_L{w}M") == 2.0
        assert _row(m, f"VOLUME_MAX_L{w}M") == _row(m, f"VOLUME_MIN_L{w}M") == 2.0
        assert _row(m, f"VOLUME_STD_L{w}M") == 0.0


def test_three_month_series_with_a_zero_month():
    tx = [_tx(-3, 1.0), _tx(-1, 3.0)]
    m = rolling_stats(tx, [CLIENT], windows=(3,))
    assert _row(m, "VOLUME_SUM_L3M") == 4.0
    assert _row(m, "VOLUME_MEAN_L3M") == pytest.approx(4.0 / 3.0)
    assert _row(m, "VOLUME_MIN_L3M") == 0.0
    assert _row(m, "VOLUME_MAX_L3M") == 3.0
    assert _row(m, "VOLUME_STD_L3M") == pytest.approx(np.std([1.0, 0.0, 3.0]))


def test_group_without_purchases_is_missing():
    tx = [_tx(-2, 1.0, line="WATER", brand="W1"), _tx(-4, 5.0, line="BEER", brand="B1",
                                                        cid="D")]
    clients = [CLIENT, ClientRecord("D", INSTALL, 0.0, 0.0)]
    m = rolling_stats(tx, clients)
    assert math.isnan(_row(m, "BEER_VOLUME_SUM_L12M", 0))
    assert _row(m, "WATER_VOLUME_SUM_L12M", 0) == 1.0
    # the other client bought beer four months out: active in L6M, not in L3M
    assert math.isnan(_row(m, "BEER_VOLUME_SUM_L3M", 1))
    assert _row(m, "BEER_VOLUME_SUM_L6M", 1) == 5.0


def test_months_outside_longest_window_are_ignored():
    m = rolling_stats([_tx(-13, 9.0), _tx(0, 9.0), _tx(1, 9.0)], [CLIENT])
    assert math.isnan(_row(m, "VOLUME_SUM_L12M"))


def test_rolling_matches_monthly_loop(small_bundle):
    clients = small_bundle.clients[:60]
    m = rolling_stats(small_bundle.transactions, clients)
    line = sorted({t.product_line for t in small_bundle.transactions})[0]
    for i, c in enumerate(clients):
        for prefix, keep in (("", lambda t: True), (f"{line}_", lambda t: t.product_line == line)):
            for w in (3, 6, 12):
                vol, act = monthly_series(small_bundle.transactions, c, w, keep)
                got = _row(m, f"{prefix}VOLUME_SUM_L{w}M", i)
                if not any(act):
                    assert math.isnan(got)
                    continue
                assert got == pytest.approx(sum(vol), rel=1e-12, abs=1e-12)
                assert _row(m, f"{prefix}VOLUME_MAX_L{w}M", i) == pytest.approx(max(vol))
                assert _row(m, f"{prefix}VOLUME_STD_L{w}M", i) == pytest.approx(
                    float(np.std(vol)), abs=1e-9)


# --------------------------------------------------------------------------
# recency and frequency

def test_dense_history():
    m = rfm_stats([_tx(d, 1.0, days=4) for d in range(-12, 0)], [CLIENT])
    assert _row(m, "MONTHS_WITH_TRANSACTION") == 12
    assert _row(m, "RECENCY_MAX_L12M") == 1
    assert _row(m, "RECENCY_AVG_L12M") == 1
    assert _row(m, "RECENCY_LAST_L12M") == 1
    assert _row(m, "FREQUENCY_MEAN_L12M") == 4
    assert _row(m, "FREQUENCY_STD_L12M") == 0


def test_two_purchases_eleven_months_apart():
    m = rfm_stats([_tx(-12, 1.0), _tx(-1, 1.0)], [CLIENT])
    assert _row(m, "MONTHS_WITH_TRANSACTION") == 2
    assert _row(m, "RECENCY_MAX_L12M") == 11
    assert _row(m, "RECENCY_AVG_L12M") == 11
    assert _row(m, "RECENCY_LAST_L12M") == 1


def test_single_purchase_has_no_gap():
    m = rfm_stats([_tx(-5, 1.0)], [CLIENT])
    assert math.isnan(_row(m, "RECENCY_AVG_L12M"))
    assert math.isnan(_row(m, "RECENCY_MAX_L12M"))
    assert _row(m, "RECENCY_LAST_L12M") == 5
    assert math.isnan(_row(m, "RECENCY_LAST_L3M"))


def test_gap_stats_match_month_walk(small_bundle):
    clients = small_bundle.clients[:80]
    m = rfm_stats(small_bundle.transactions, clients)
    for i, c in enumerate(clients):
        _, act12 = monthly_series(small_bundle.transactions, c, 12)
        assert _row(m, "MONTHS_WITH_TRANSACTION", i) == sum(act12)
        for w in (3, 6, 12):
            _, act = monthly_series(small_bundle.transactions, c, w)
            expected = gap_scan(act)
            got = tuple(_row(m, f"RECENCY_{s}_L{w}M", i) for s in ("AVG", "MAX", "LAST"))
            np.testing.assert_allclose(got, expected, equal_nan=True)


# --------------------------------------------------------------------------
# census and competition

def _poly(pid, lat0, lon0, size=1.0, **attrs):
    ring = ((lat0, lon0), (lat0, lon0 + size), (lat0 + size, lon0 + size), (lat0 + size, lon0))
    return CensusPolygon(pid, ring, {k: float(v) for k, v in attrs.items()})


def test_containment_and_nearest_fallback():
    polys = [_poly("A", 0, 0, income=1), _poly("B", 0, 2, income=2)]
    clients = [ClientRecord("in_a", 0, 0.5, 0.5), ClientRecord("in_b", 0, 0.5, 2.5),
               ClientRecord("near_b", 0, 0.5, 3.2), ClientRecord("edge_a", 0, 0.0, 0.5)]
    assert assign_polygons(clients, polys) == ["A", "B", "B", "A"]
    m = census_join(clients, polys)
    assert m.feature_names == ["CENSUS_INCOME"]
    assert list(m.values[:, 0]) == [1.0, 2.0, 2.0, 1.0]


def test_equidistant_point_goes_to_smallest_id():
    polys = [_poly("Z", 0, 2), _poly("M", 0, 0)]
    assert assign_polygons([ClientRecord("c", 0, 0.5, 1.5)], polys) == ["M"]


def test_shared_edge_goes_to_smallest_id():
    polys = [_poly("Q", 0, 1), _poly("P", 0, 0)]
    assert assign_polygons([ClientRecord("c", 0, 0.5, 1.0)], polys) == ["P"]


def test_missing_attribute_is_nan():
    polys = [_poly("A", 0, 0, income=1), _poly("B", 0, 2, density=5)]
    m = census_join([ClientRecord("c", 0, 0.5, 0.5)], polys)
    assert m.feature_names == ["CENSUS_DENSITY", "CENSUS_INCOME"]
    assert math.isnan(m.values[0, 0]) and m.values[0, 1] == 1.0


def test_haversine_one_degree_of_latitude():
    # arc length of one degree on a sphere of the mean earth radius
    assert float(haversine_m(0.0, 0.0, 1.0, 0.0)) == pytest.approx(6_371_008.8 * math.pi / 180)


def test_competition_counts_sites_within_radius():
    deg = 300.0 / (6_371_008.8 * math.pi / 180)  # 300 m in degrees of latitude
    sites = [CompetitorSite("s1", 0.0, 0.0), CompetitorSite("s2", deg * 0.99, 0.0),
             CompetitorSite("s3", deg * 1.01, 0.0), CompetitorSite("s4", 5.0, 5.0)]
    m = competition_density([ClientRecord("c", 0, 0.0, 0.0)], sites)
    assert m.feature_names == ["DENSITY_COMPETITION_300M"]
    assert m.values[0, 0] == 2


# --------------------------------------------------------------------------
# capping

def _matrix(cols: dict[str, list[float]]):
    names = list(cols)
    values = np.column_stack([np.asarray(cols[n], dtype=float) for n in names])
    return FeatureMatrix([f"c{i}" for i in range(values.shape[0])], names, values)


def test_cap_on_one_to_hundred():
    # linear quantiles: q1 = 1 + 0.25 * 99, q3 = 1 + 0.75 * 99
    (rule,) = fit_caps(_matrix({"x": list(range(1, 101))}))
    assert rule.q3 == pytest.approx(75.25)
    assert rule.iqr == pytest.approx(49.5)
    assert rule.cap == pytest.approx(149.5)
    capped = apply_caps(_matrix({"x": [200.0, 100.0, -50.0]}), [rule])
    assert list(capped.values[:, 0]) == [149.5, 100.0, -50.0]


def test_constant_column_is_untouched():
    (rule,) = fit_caps(_matrix({"x": [5, 5, 5, 5]}))
    assert rule.cap == 5.0
    assert list(apply_caps(_matrix({"x": [5, 5, 5, 5]}), [rule]).values[:, 0]) == [5] * 4


def test_single_outlier_is_capped():
    m = _matrix({"x": [0, 0, 0, 1000]})
    (rule,) = fit_caps(m)
    assert rule.cap == pytest.approx(625.0)
    assert list(apply_caps(m, [rule]).values[:, 0]) == [0, 0, 0, 625]


def test_too_few_values_disables_cap():
    m = _matrix({"x": [1.0, 2.0, 1e9, np.nan]})
    (rule,) = fit_caps(m)
    assert not rule.enabled
    np.testing.assert_array_equal(apply_caps(m, [rule]).values, m.values)


@given(arrays(np.float64, (30, 3), elements=st.floats(-1e6, 1e6) | st.just(np.nan)))
@settings(max_examples=60)
def test_capping_is_idempotent_and_only_lowers(values):
    m = FeatureMatrix([f"c{i}" for i in range(30)], ["a", "b", "c"], values)
    rules = fit_caps(m)
    once = apply_caps(m, rules)
    np.testing.assert_array_equal(apply_caps(once, rules).values, once.values)
    assert np.array_equal(np.isnan(once.values), np.isnan(values))
    ok = ~np.isnan(values)
    assert np.all(once.values[ok] <= values[ok])


# --------------------------------------------------------------------------
# correlation filter

def test_duplicate_pair_keeps_one():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    a = y + rng.normal(0, 2, 200)
    rep = correlation_filter(_matrix({"a": a, "a_copy": 2 * a + 1, "z": rng.normal(size=200)}), y)
    assert len(rep.dropped_pairwise) == 1
    kept, dropped, r = rep.dropped_pairwise[0]
    assert {kept, dropped} == {"a", "a_copy"}
    assert r == pytest.approx(1.0)
    assert "z" in rep.surviving


def test_label_copy_is_dropped_as_leakage():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 100)
    rep = correlation_filter(_matrix({"leak": y.astype(float), "x": rng.normal(size=100)}), y)
    assert [f for f, _ in rep.dropped_target] == ["leak"]
    assert rep.surviving == ["x"]


def test_constant_column_dropped():
    y = np.array([0, 1] * 10)
    rep = correlation_filter(_matrix({"k": [3.0] * 20, "x": np.arange(20.0)}), y)
    assert rep.dropped_constant == ["k"]


def _correlated_block(seed, n=150, p=20):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(n, 4))
    X = base[:, rng.integers(0, 4, p)] * rng.uniform(0.5, 2, p) + rng.normal(0, rng.uniform(0.05, 1, p), (n, p))
    X[rng.random((n, p)) < 0.05] = np.nan
    y = (base[:, 0] + rng.normal(size=n) > 0).astype(int)
    return X, y


@pytest.mark.parametrize("seed", range(5))
def test_filter_survivors_checked_by_brute_force(seed):
    X, y = _correlated_block(seed)
    names = [f"f{j:02d}" for j in range(X.shape[1])]
    rep = correlation_filter(FeatureMatrix([str(i) for i in range(len(y))], names, X), y)
    col = {n: X[:, j] for j, n in enumerate(names)}
    dropped = [d for _, d, _ in rep.dropped_pairwise]
    # partition of the input
    parts = rep.surviving + dropped + [f for f, _ in rep.dropped_target] + rep.dropped_constant
    assert sorted(parts) == names
    for i, a in enumerate(rep.surviving):
        for b in rep.surviving[i + 1:]:
            r = pearson(col[a], col[b])
            assert math.isnan(r) or abs(r) <= 0.8 + 1e-9
    for kept, d, r in rep.dropped_pairwise:
        assert kept in rep.surviving
        assert abs(pearson(col[kept], col[d])) > 0.8
        assert r == pytest.approx(pearson(col[kept], col[d]), abs=1e-9)
        assert abs(pearson(col[kept], y.astype(float))) >= abs(pearson(col[d], y.astype(float))) - 1e-12


def test_pairwise_pearson_matches_direct_computation():
    X, y = _correlated_block(9, n=60, p=6)
    R = pairwise_pearson(X)
    t = target_pearson(X, y)
    for i in range(6):
        assert t[i] == pytest.approx(pearson(X[:, i], y.astype(float)), abs=1e-10)
        for j in range(6):
            assert R[i, j] == pytest.approx(pearson(X[:, i], X[:, j]), abs=1e-10)


# --------------------------------------------------------------------------
# assembled matrix

def test_build_features_has_all_families(small_bundle):
    m = build_features(small_bundle)
    families = {m.provenance[n]["family"] for n in m.feature_names}
    assert families == {"rolling", "rfm", "census", "competition"}
    assert m.shape[0] == len(small_bundle.clients)
    assert "MONTHS_WITH_TRANSACTION" in m.feature_names


def test_matrix_roundtrip(tmp_path, small_bundle):
    m = build_features(small_bundle, client_ids=[c.client_id for c in small_bundle.clients[:20]])
    write_matrix(m, tmp_path / "f.csv", tmp_path / "f.json")
    back = read_matrix(tmp_path / "f.csv", tmp_path / "f.json")
    assert back.client_ids == m.client_ids and back.feature_names == m.feature_names
    np.testing.assert_array_equal(back.values, m.values)
    assert back.provenance == m.provenance


def test_duplicate_feature_names_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        FeatureMatrix(["a"], ["x", "x"], np.zeros((1, 2)))

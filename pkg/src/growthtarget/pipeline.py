"""Model development loop: stratified CV, random search, SHAP-driven elimination.

Every statistic fitted during development (caps, correlation filters, tuned
models, elimination models) is tagged with the row ids it saw, so holdout
isolation can be checked after the fact with :func:`check_lineage`.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .explain import shap_matrix
from .features import build_features
from .features.matrix import FeatureMatrix
from .features.preprocess import (
    CapRule,
    FilterReport,
    apply_caps,
    constant_mask,
    filter_from_correlations,
    fit_caps,
    pairwise_pearson,
    target_pearson,
)
from .gbdt import GbdtConfig, TreeEnsemble, fit
from .ingest import DatasetBundle
from .labeling import GrowthThresholds, label_clients, labels_for
from .metrics import MetricReport, auc, metric_report, threshold_metrics

logger = logging.getLogger(__name__)

CHANCE_AUC = 0.5
MIN_ELIGIBLE = 100


# --------------------------------------------------------------------------
# splitting

def _class_rows(y: np.ndarray) -> dict[int, np.ndarray]:
    return {c: np.flatnonzero(y == c) for c in (0, 1)}


def stratified_split(labels, test_fraction: float = 0.20,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, test_idx), each class contributing round(count * test_fraction) test rows."""
    y = np.asarray(labels).astype(np.int64)
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test = []
    for c, rows in _class_rows(y).items():
        if len(rows) < 2:
            raise ValueError(f"class {c} has fewer than 2 members")
        n_test = int(round(len(rows) * test_fraction))
        n_test = min(max(n_test, 1), len(rows) - 1)
        test.append(rng.permutation(rows)[:n_test])
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
    return train_idx, test_idx


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """``k`` disjoint sorted index arrays; per-class counts differ by at most one across folds."""
    y = np.asarray(labels).astype(np.int64)
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[np.ndarray]] = [[] for _ in range(k)]
    offset = 0
    for c, rows in _class_rows(y).items():
        if len(rows) < k:
            raise ValueError(f"class {c} has {len(rows)} members, fewer than k={k}")
        for f, part in enumerate(np.array_split(rng.permutation(rows), k)):
            # rotate so remainders of the two classes land on different folds
            folds[(f + offset) % k].append(part)
        offset += len(rows) % k
    return [np.sort(np.concatenate(parts)) for parts in folds]


# --------------------------------------------------------------------------
# lineage

@dataclass(frozen=True)
class LineageTag:
    stage: str  # caps | filter | tuning | rfe | final_fit
    detail: str
    rows: frozenset[str]


@dataclass
class LineageLog:
    tags: list[LineageTag] = field(default_factory=list)

    def record(self, stage: str, detail: str, rows: Sequence[str]) -> None:
        self.tags.append(LineageTag(stage, detail, frozenset(rows)))

    def summary(self) -> list[dict]:
        return [{"stage": t.stage, "detail": t.detail, "n_rows": len(t.rows)} for t in self.tags]


def check_lineage(log: LineageLog, holdout_ids: Sequence[str]) -> list[str]:
    """Descriptions of every fitted statistic that saw a holdout row (empty when clean)."""
    held = set(holdout_ids)
    bad = []
    for t in log.tags:
        leaked = t.rows & held
        if leaked:
            bad.append(f"{t.stage}/{t.detail}: {len(leaked)} holdout rows, e.g. {sorted(leaked)[0]}")
    return bad


# --------------------------------------------------------------------------
# search space

@dataclass
class SearchSpace:
    n_trees: tuple[int, int] = (50, 400)
    learning_rate: tuple[float, float] = (0.01, 0.2)
    max_depth: tuple[int, int] = (2, 6)
    max_leaves: tuple[int, int] = (4, 48)
    min_samples_leaf: tuple[int, int] = (10, 100)
    l2_leaf_reg: tuple[float, float] = (0.1, 20.0)
    feature_subsample: tuple[float, float] = (0.3, 1.0)
    pos_class_weight: tuple[float, float] = (1.0, 1.0)
    growth_policy: tuple[str, ...] = ("depth_wise", "leaf_wise")
    n_bins: int = 64
    trial_budget: int = 12
    seed: int = 0
    include_default: bool = False  # first trial uses GbdtConfig defaults

    def __post_init__(self):
        for name in ("n_trees", "learning_rate", "max_depth", "max_leaves", "min_samples_leaf",
                     "l2_leaf_reg", "feature_subsample", "pos_class_weight"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        if not self.growth_policy:
            raise ValueError("growth_policy choices must be non-empty")
        self.growth_policy = tuple(self.growth_policy)
        if self.trial_budget < 1:
            raise ValueError("trial_budget must be >= 1")
        if self.learning_rate[0] <= 0 or self.l2_leaf_reg[0] <= 0:
            raise ValueError("learning_rate and l2_leaf_reg ranges must be positive")

    def sample(self, rng: np.random.Generator) -> GbdtConfig:
        def uni_int(r):
            return int(rng.integers(r[0], r[1] + 1))

        def log_uni(r):
            return float(math.exp(rng.uniform(math.log(r[0]), math.log(r[1]))))

        return GbdtConfig(
            n_trees=uni_int(self.n_trees),
            learning_rate=log_uni(self.learning_rate),
            max_depth=uni_int(self.max_depth),
            max_leaves=uni_int(self.max_leaves),
            min_samples_leaf=uni_int(self.min_samples_leaf),
            l2_leaf_reg=log_uni(self.l2_leaf_reg),
            feature_subsample=float(rng.uniform(*self.feature_subsample)),
            pos_class_weight=float(rng.uniform(*self.pos_class_weight)),
            growth_policy=self.growth_policy[int(rng.integers(len(self.growth_policy)))],
            n_bins=self.n_bins,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**d)


@dataclass
class CvReport:
    fold_metrics: list[dict]
    mean_auc: float
    std_auc: float
    feature_set: list[str]
    config: GbdtConfig
    trial_id: int = -1
    failed: bool = False
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "failed": self.failed,
            "error": self.error,
            "n_features": len(self.feature_set),
            "fold_metrics": self.fold_metrics,
            "config": self.config.to_dict(),
        }


# --------------------------------------------------------------------------
# cross-validation with fold-local preprocessing

@dataclass
class _Fold:
    train: np.ndarray
    valid: np.ndarray
    X_train: np.ndarray  # capped
    X_valid: np.ndarray
    caps: list[CapRule]
    target_r: np.ndarray
    pair_r: np.ndarray | None
    constant: np.ndarray


class CvContext:
    """Folds with caps and correlations fitted on each training part only.

    Correlations are computed once for the full column set, so filtering any
    subset of features later is a cheap lookup.
    """

    def __init__(self, matrix: FeatureMatrix, labels, k: int = 5, seed: int = 0,
                 r_max: float = 0.80, lineage: LineageLog | None = None,
                 filter_features: bool = True, n_threads: int = 1):
        self.matrix = matrix
        self.y = np.asarray(labels).astype(np.int64)
        self.names = list(matrix.feature_names)
        self.pos = {n: i for i, n in enumerate(self.names)}
        self.r_max = r_max
        self.filter_features = filter_features
        self.n_threads = n_threads
        self.lineage = lineage if lineage is not None else LineageLog()
        self.folds: list[_Fold] = []
        parts = stratified_kfold(self.y, k, seed)
        all_rows = np.arange(len(self.y))
        for f, valid in enumerate(parts):
            train = np.setdiff1d(all_rows, valid)
            tr = matrix.take_rows(train)
            caps = fit_caps(tr)
            Xtr = apply_caps(tr, caps).values
            Xva = apply_caps(matrix.take_rows(valid), caps).values
            ids = tr.client_ids
            self.lineage.record("caps", f"fold{f}", ids)
            if filter_features:
                t_r = target_pearson(Xtr, self.y[train].astype(np.float64))
                p_r = pairwise_pearson(Xtr)
                const = constant_mask(Xtr)
                self.lineage.record("filter", f"fold{f}", ids)
            else:
                t_r = np.zeros(len(self.names))
                p_r = None
                const = np.zeros(len(self.names), dtype=bool)
            self.folds.append(_Fold(train, valid, Xtr, Xva, caps, t_r, p_r, const))

    @property
    def k(self) -> int:
        return len(self.folds)

    def surviving(self, fold: int, features: Sequence[str]) -> list[str]:
        if not self.filter_features:
            return list(features)
        fd = self.folds[fold]
        idx = np.array([self.pos[n] for n in features], dtype=np.int64)
        rep = filter_from_correlations(list(features), fd.target_r[idx],
                                       fd.pair_r[np.ix_(idx, idx)], fd.constant[idx], self.r_max)
        return rep.surviving

    def evaluate(self, features: Sequence[str], config: GbdtConfig, with_shap: bool = False,
                 stage: str = "tuning", detail: str = "") -> tuple[CvReport, np.ndarray | None]:
        """Mean CV AUC of ``config`` on ``features``; optionally pooled validation mean |SHAP|."""
        features = list(features)
        fpos = {n: i for i, n in enumerate(features)}
        abs_sum = np.zeros(len(features))
        n_rows = 0
        fold_metrics = []
        for f, fd in enumerate(self.folds):
            keep = self.surviving(f, features)
            ytr, yva = self.y[fd.train], self.y[fd.valid]
            if not keep:
                scores = np.full(len(fd.valid), float(np.mean(ytr)))
            else:
                cols = [self.pos[n] for n in keep]
                tr = FeatureMatrix([self.matrix.client_ids[i] for i in fd.train], keep,
                                   fd.X_train[:, cols])
                model = fit(tr, ytr, config, n_threads=self.n_threads)
                self.lineage.record(stage, f"{detail}fold{f}", tr.client_ids)
                Xva = fd.X_valid[:, cols]
                scores = model.predict_proba(Xva)
                if with_shap:
                    phi, _ = shap_matrix(model, Xva)
                    abs_sum[[fpos[n] for n in keep]] += np.abs(phi).sum(axis=0)
            n_rows += len(fd.valid)
            precision, recall, f1 = threshold_metrics(scores, yva)
            fold_metrics.append({"fold": f, "auc": auc(scores, yva), "precision_at_half": precision,
                                 "recall_at_half": recall, "n_features": len(keep)})
        aucs = np.array([m["auc"] for m in fold_metrics])
        report = CvReport(fold_metrics, float(aucs.mean()), float(aucs.std()), features, config)
        return report, (abs_sum / n_rows if with_shap else None)

    def out_of_fold(self, features: Sequence[str], config: GbdtConfig) -> np.ndarray:
        """Cross-fitted probabilities: each row scored by the model that did not see it."""
        out = np.empty(len(self.y))
        for f, fd in enumerate(self.folds):
            keep = self.surviving(f, list(features))
            if not keep:
                out[fd.valid] = float(np.mean(self.y[fd.train]))
                continue
            cols = [self.pos[n] for n in keep]
            tr = FeatureMatrix([self.matrix.client_ids[i] for i in fd.train], keep, fd.X_train[:, cols])
            model = fit(tr, self.y[fd.train], config, n_threads=self.n_threads)
            out[fd.valid] = model.predict_proba(fd.X_valid[:, cols])
        return out


# --------------------------------------------------------------------------
# Stage 1 and Stage 2

def tune(ctx: CvContext, space: SearchSpace, features: Sequence[str],
         round_id: int = 0) -> tuple[GbdtConfig, list[CvReport]]:
    """Seeded random search; returns the argmax-mean-AUC config (ties: earliest trial)."""
    rng = np.random.default_rng([space.seed, round_id])
    trials: list[CvReport] = []
    for t in range(space.trial_budget):
        config = space.sample(rng)
        if t == 0 and space.include_default:
            config = GbdtConfig(seed=space.seed, n_bins=space.n_bins)
        try:
            report, _ = ctx.evaluate(features, config, stage="tuning", detail=f"r{round_id}t{t}/")
        except ValueError as exc:
            logger.warning("trial %d failed: %s", t, exc)
            report = CvReport([], math.nan, math.nan, list(features), config, failed=True, error=str(exc))
        report.trial_id = t
        trials.append(report)
    ok = [r for r in trials if not r.failed]
    if not ok:
        raise RuntimeError("every tuning trial failed")
    best = max(ok, key=lambda r: (r.mean_auc, -r.trial_id))
    return best.config, trials


@dataclass
class EliminationRound:
    outer_round: int
    round: int
    n_features: int
    mean_auc: float
    std_auc: float
    removed_features: list[str]
    features: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RfeResult:
    best_features: list[str]
    best_auc: float
    history: list[EliminationRound]
    best_report: CvReport


def shap_rfe(ctx: CvContext, config: GbdtConfig, features: Sequence[str],
             drop_fraction: float = 0.10, epsilon: float = 1e-4, patience: int = 1,
             outer_round: int = 0) -> RfeResult:
    """Drop the lowest pooled mean-|SHAP| features until CV AUC stops improving.

    A round counts as an improvement when its AUC beats the best so far
    (chance level before the first round) by at least ``epsilon``. The
    returned set is the one with the highest recorded AUC.
    """
    features = list(features)
    if len(features) < 2:
        raise ValueError("SHAP elimination needs at least two features")
    history: list[EliminationRound] = []
    reports: list[CvReport] = []
    reference = CHANCE_AUC
    stale = 0
    r = 0
    while True:
        report, importance = ctx.evaluate(features, config, with_shap=True, stage="rfe",
                                          detail=f"o{outer_round}r{r}/")
        reports.append(report)
        n_drop = max(1, int(math.floor(drop_fraction * len(features))))
        order = sorted(range(len(features)), key=lambda j: (importance[j], features[j]))
        removed = sorted(features[j] for j in order[:n_drop])
        history.append(EliminationRound(outer_round, r, len(features), report.mean_auc,
                                        report.std_auc, removed, list(features)))
        if report.mean_auc >= reference + epsilon:
            stale = 0
        else:
            stale += 1
        reference = max(reference, report.mean_auc)
        remaining = [f for f in features if f not in set(removed)]
        if stale >= patience or len(remaining) < 2:
            break
        features = remaining
        r += 1
    best = max(range(len(history)), key=lambda i: (history[i].mean_auc, -i))
    return RfeResult(list(history[best].features), history[best].mean_auc, history, reports[best])


# --------------------------------------------------------------------------
# full pipeline

@dataclass
class PipelineConfig:
    tau: float = 0.30
    seed: int = 0
    k_folds: int = 5
    test_fraction: float = 0.20
    r_max: float = 0.80
    drop_fraction: float = 0.10
    epsilon: float = 1e-4
    patience: int = 1
    outer_rounds_limit: int = 2
    min_eligible: int = MIN_ELIGIBLE
    exclude_features: list[str] = field(default_factory=list)
    windows: tuple[int, ...] = (3, 6, 12)
    ks: tuple[int, ...] = (100, 500)
    space: SearchSpace = field(default_factory=SearchSpace)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = list(self.windows)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        space = SearchSpace.from_dict(d.pop("space", {}))
        if "windows" in d:
            d["windows"] = tuple(d["windows"])
        if "ks" in d:
            d["ks"] = tuple(d["ks"])
        return cls(space=space, **d)


@dataclass
class PipelineResult:
    tau: float
    best_config: GbdtConfig
    final_features: list[str]
    elimination_history: list[EliminationRound]
    final_model: TreeEnsemble
    holdout_metrics: MetricReport | None
    cv_auc: float
    outer_rounds: list[dict]
    trials: list[dict]
    train_ids: list[str]
    holdout_ids: list[str]
    cap_rules: list[CapRule]
    filter_report: FilterReport
    lineage: LineageLog
    holdout_scores: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "best_config": self.best_config.to_dict(),
            "final_features": list(self.final_features),
            "cv_auc": self.cv_auc,
            "holdout_metrics": self.holdout_metrics.to_dict() if self.holdout_metrics else None,
            "elimination_history": [h.to_dict() for h in self.elimination_history],
            "outer_rounds": self.outer_rounds,
            "trials": self.trials,
            "train_ids": list(self.train_ids),
            "holdout_ids": list(self.holdout_ids),
            "holdout_scores": list(self.holdout_scores),
            "cap_rules": [asdict(c) for c in self.cap_rules if c.feature_name in set(self.final_features)],
            "filter_report": self.filter_report.to_dict(),
            "lineage": self.lineage.summary(),
            "model_fingerprint": self.final_model.fingerprint(),
        }


def develop(matrix: FeatureMatrix, labels, cfg: PipelineConfig, lineage: LineageLog | None = None,
            n_threads: int = 1) -> tuple[GbdtConfig, RfeResult, list[dict], list[dict], list[EliminationRound]]:
    """Alternate tuning and SHAP elimination on development rows only.

    Returns (best config, best RFE result, outer-round log, trial log, full elimination history).
    """
    ctx = CvContext(matrix, labels, cfg.k_folds, cfg.seed, cfg.r_max, lineage, n_threads=n_threads)
    excluded = set(cfg.exclude_features)
    features = [n for n in matrix.feature_names if n not in excluded]
    best: tuple[float, GbdtConfig, RfeResult] | None = None
    outer_log, trial_log, history = [], [], []
    for o in range(cfg.outer_rounds_limit):
        config, trials = tune(ctx, cfg.space, features, round_id=o)
        trial_log.extend({"outer_round": o, **t.to_dict()} for t in trials)
        rfe = shap_rfe(ctx, config, features, cfg.drop_fraction, cfg.epsilon, cfg.patience, o)
        history.extend(rfe.history)
        outer_log.append({"outer_round": o, "best_trial_auc": max(t.mean_auc for t in trials if not t.failed),
                          "rfe_best_auc": rfe.best_auc, "n_features": len(rfe.best_features)})
        improved = best is None or rfe.best_auc >= best[0] + cfg.epsilon
        if best is None or rfe.best_auc > best[0]:
            best = (rfe.best_auc, config, rfe)
        if not improved or len(rfe.best_features) < 2:
            break
        features = rfe.best_features
    assert best is not None
    return best[1], best[2], outer_log, trial_log, history


def run_matrix_pipeline(matrix: FeatureMatrix, labels, cfg: PipelineConfig,
                        n_threads: int = 1) -> PipelineResult:
    y = np.asarray(labels).astype(np.int64)
    if len(y) < cfg.min_eligible:
        raise ValueError(f"{len(y)} eligible clients, below the floor of {cfg.min_eligible}")
    train_idx, test_idx = stratified_split(y, cfg.test_fraction, cfg.seed)
    dev = matrix.take_rows(train_idx)
    lineage = LineageLog()
    config, rfe, outer_log, trial_log, history = develop(dev, y[train_idx], cfg, lineage, n_threads)

    # retrain on the whole development split with its own caps and filter
    caps = fit_caps(dev)
    dev_capped = apply_caps(dev, caps)
    lineage.record("caps", "final", dev.client_ids)
    sub = dev_capped.select(rfe.best_features)
    ytr = y[train_idx]
    report = filter_from_correlations(sub.feature_names, target_pearson(sub.values, ytr.astype(float)),
                                      pairwise_pearson(sub.values), constant_mask(sub.values), cfg.r_max)
    lineage.record("filter", "final", dev.client_ids)
    model = fit(sub.select(report.surviving), ytr, config, n_threads=n_threads)
    lineage.record("final_fit", "train_split", dev.client_ids)

    test = apply_caps(matrix.take_rows(test_idx), caps)
    scores = model.predict_proba(test)
    metrics = metric_report(scores, y[test_idx], cfg.ks, ids=test.client_ids)
    return PipelineResult(
        tau=cfg.tau, best_config=config, final_features=list(rfe.best_features),
        elimination_history=history, final_model=model, holdout_metrics=metrics,
        cv_auc=rfe.best_auc, outer_rounds=outer_log, trials=trial_log,
        train_ids=list(dev.client_ids), holdout_ids=list(test.client_ids), cap_rules=caps,
        filter_report=report, lineage=lineage, holdout_scores=[float(s) for s in scores],
    )


def labeled_matrix(bundle: DatasetBundle, tau: float, windows: Sequence[int] = (3, 6, 12),
                   thresholds: GrowthThresholds | None = None) -> tuple[FeatureMatrix, np.ndarray]:
    """Raw features and labels at ``tau`` for eligible clients only."""
    thresholds = thresholds or GrowthThresholds()
    labeled = label_clients(bundle, thresholds)
    ids, ys = labels_for(labeled, tau)
    return build_features(bundle, windows, ids), np.asarray(ys, dtype=np.int64)


def run_full_pipeline(bundle: DatasetBundle, cfg: PipelineConfig | None = None,
                      n_threads: int = 1) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    matrix, y = labeled_matrix(bundle, cfg.tau, cfg.windows)
    return run_matrix_pipeline(matrix, y, cfg, n_threads)


def write_result(result: PipelineResult, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_history(history: Sequence[EliminationRound], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outer_round", "round", "n_features", "mean_auc", "std_auc", "removed_features"])
        for h in history:
            w.writerow([h.outer_round, h.round, h.n_features, repr(h.mean_auc), repr(h.std_auc),
                        ";".join(h.removed_features)])

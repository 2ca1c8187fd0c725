"""Fitted tree ensemble: node arrays, prediction and JSON serialization."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numba import njit

from ..features.matrix import FeatureMatrix

MODEL_FORMAT = "growthtarget.gbdt"
MODEL_VERSION = 1
LEAF = -1


class ModelFormatError(ValueError):
    """Raised when a serialized model cannot be decoded."""


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    max_depth: int = 6
    min_samples_leaf: int = 20
    l2_leaf_reg: float = 1.0
    n_bins: int = 64
    growth_policy: str = "depth_wise"
    pos_class_weight: float = 1.0
    seed: int = 0
    feature_subsample: float = 1.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if not 2 <= self.n_bins <= 256:
            raise ValueError("n_bins must be in [2, 256]")
        if self.growth_policy not in ("depth_wise", "leaf_wise"):
            raise ValueError(f"unknown growth_policy {self.growth_policy!r}")
        if self.growth_policy == "depth_wise" and self.max_depth < 1:
            raise ValueError("depth_wise growth needs max_depth >= 1")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.l2_leaf_reg < 0 or self.pos_class_weight < 0:
            raise ValueError("l2_leaf_reg and pos_class_weight must be non-negative")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Tree:
    """One regression tree in flat-array form; node 0 is the root.

    ``feature[i] == -1`` marks a leaf. Rows go left when ``x <= threshold``;
    missing values follow ``missing_left``. ``cover`` is the number of
    training rows that reached the node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray | None = None

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.missing_left = np.asarray(self.missing_left, dtype=np.bool_)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.cover = np.asarray(self.cover, dtype=np.float64)
        self.gain = (np.zeros(len(self.feature)) if self.gain is None
                     else np.asarray(self.gain, dtype=np.float64))

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == LEAF

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if not self.is_leaf(i):
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def expected_value(self) -> float:
        leaves = self.feature == LEAF
        return float(np.sum(self.value[leaves] * self.cover[leaves]) / self.cover[0])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "missing_left": self.missing_left.astype(int).tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(**{k: d[k] for k in ("feature", "threshold", "missing_left", "left",
                                        "right", "value", "cover")}, gain=d.get("gain"))


@dataclass
class TreeEnsemble:
    base_score: float
    trees: list[Tree]
    feature_names: list[str]
    config: GbdtConfig = field(default_factory=GbdtConfig)
    train_loss: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._flat = None

    # -- prediction --------------------------------------------------------

    def _flatten(self):
        if self._flat is None or self._flat[0] != len(self.trees):
            offsets, acc = [], 0
            for t in self.trees:
                offsets.append(acc)
                acc += t.n_nodes

            def cat(attr, dtype, shift=False):
                parts = []
                for off, t in zip(offsets, self.trees):
                    a = getattr(t, attr)
                    parts.append(np.where(a >= 0, a + off, a) if shift else a)
                return np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype=dtype)

            arrays = (
                cat("feature", np.int64), cat("threshold", np.float64),
                cat("missing_left", np.bool_), cat("left", np.int64, True),
                cat("right", np.int64, True), cat("value", np.float64),
                np.array(offsets, dtype=np.int64),
            )
            self._flat = (len(self.trees), arrays)
        return self._flat[1]

    def _model_values(self, matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
        if isinstance(matrix, FeatureMatrix):
            pos = {n: i for i, n in enumerate(matrix.feature_names)}
            missing = [n for n in self.feature_names if n not in pos]
            if missing:
                raise KeyError(f"matrix lacks model features: {missing[:5]}")
            X = matrix.values[:, [pos[n] for n in self.feature_names]]
        else:
            X = np.asarray(matrix, dtype=np.float64)
            if X.ndim != 2 or X.shape[1] != len(self.feature_names):
                raise ValueError("array must have one column per model feature")
        return np.ascontiguousarray(X, dtype=np.float64)

    def predict_margin(self, matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
        X = self._model_values(matrix)
        feat, thr, ml, left, right, value, roots = self._flatten()
        return _predict_margin(X, feat, thr, ml, left, right, value, roots, self.base_score)

    def predict_proba(self, matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
        return sigmoid(self.predict_margin(matrix))

    def expected_margin(self) -> float:
        return self.base_score + sum(t.expected_value() for t in self.trees)

    def used_features(self) -> set[str]:
        return {self.feature_names[f] for t in self.trees for f in t.feature if f != LEAF}

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "base_score": self.base_score,
            "feature_names": list(self.feature_names),
            "config": self.config.to_dict(),
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()


def serialize(model: TreeEnsemble) -> bytes:
    return json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def deserialize(payload: bytes) -> TreeEnsemble:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model payload: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a growthtarget model")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r} "
                               f"(expected {MODEL_VERSION})")
    try:
        trees = [Tree.from_dict(t) for t in doc["trees"]]
        model = TreeEnsemble(
            base_score=float(doc["base_score"]),
            trees=trees,
            feature_names=list(doc["feature_names"]),
            config=GbdtConfig.from_dict(doc["config"]),
            train_loss=list(doc.get("train_loss", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model payload: {exc}") from None
    for t in trees:
        n = t.n_nodes
        ok = all(len(a) == n for a in (t.threshold, t.missing_left, t.left, t.right, t.value, t.cover))
        internal = t.feature != LEAF
        if not ok or n == 0 or np.any(t.feature[internal] >= len(model.feature_names)) \
                or np.any(t.left[internal] >= n) or np.any(t.right[internal] >= n) \
                or not np.all(np.isfinite(t.value)):
            raise ModelFormatError("inconsistent tree arrays")
    return model


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@njit(cache=True, nogil=True)
def _predict_margin(X, feature, threshold, missing_left, left, right, value, roots, base):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = base
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                x = X[i, feature[node]]
                if np.isnan(x):
                    node = left[node] if missing_left[node] else right[node]
                elif x <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            s += value[node]
        out[i] = s
    return out

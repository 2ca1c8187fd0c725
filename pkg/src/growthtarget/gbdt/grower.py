"""Second-order boosting on logistic loss with histogram split finding."""
from __future__ import annotations

import heapq
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..features.matrix import FeatureMatrix
from .binning import BinMapper
from .model import LEAF, GbdtConfig, Tree, TreeEnsemble, logit, sigmoid

logger = logging.getLogger(__name__)

MIN_GAIN = 1e-12


@njit(cache=True, nogil=True)
def _build_histogram(codes, rows, grad, hess, feats, n_cols):
    nf = feats.shape[0]
    hist = np.zeros((nf, n_cols, 3))
    for r in rows:
        g = grad[r]
        h = hess[r]
        for k in range(nf):
            b = codes[r, feats[k]]
            hist[k, b, 0] += g
            hist[k, b, 1] += h
            hist[k, b, 2] += 1.0
    return hist


@njit(cache=True, nogil=True)
def _best_split(hist, n_value_bins, lam, min_leaf):
    """Scan features then bins in order; strict improvement keeps the earliest tie."""
    nf, n_cols, _ = hist.shape
    miss = n_cols - 1
    best_gain = MIN_GAIN
    best_k = -1
    best_b = -1
    best_ml = False
    for k in range(nf):
        nb = n_value_bins[k]
        if nb < 2:
            continue
        gm = hist[k, miss, 0]
        hm = hist[k, miss, 1]
        nm = hist[k, miss, 2]
        gv = 0.0
        hv = 0.0
        nv = 0.0
        for b in range(nb):
            gv += hist[k, b, 0]
            hv += hist[k, b, 1]
            nv += hist[k, b, 2]
        G = gv + gm
        H = hv + hm
        N = nv + nm
        parent = G * G / (H + lam)
        gl = 0.0
        hl = 0.0
        nl = 0.0
        for b in range(nb - 1):
            gl += hist[k, b, 0]
            hl += hist[k, b, 1]
            nl += hist[k, b, 2]
            if nm > 0:
                # missing left
                GL = gl + gm
                HL = hl + hm
                NL = nl + nm
                if NL >= min_leaf and N - NL >= min_leaf:
                    gain = 0.5 * (GL * GL / (HL + lam) + (G - GL) ** 2 / (H - HL + lam) - parent)
                    if gain > best_gain:
                        best_gain, best_k, best_b, best_ml = gain, k, b, True
                # missing right
                if nl >= min_leaf and N - nl >= min_leaf:
                    gain = 0.5 * (gl * gl / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent)
                    if gain > best_gain:
                        best_gain, best_k, best_b, best_ml = gain, k, b, False
            else:
                if nl >= min_leaf and N - nl >= min_leaf:
                    gain = 0.5 * (gl * gl / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent)
                    if gain > best_gain:
                        # unseen missing values follow the larger child
                        best_gain, best_k, best_b, best_ml = gain, k, b, nl >= N - nl
    return best_gain, best_k, best_b, best_ml


@njit(cache=True, nogil=True)
def _partition(codes, rows, feat, bin_, missing_left, missing_code):
    n = rows.shape[0]
    go_left = np.empty(n, dtype=np.bool_)
    for i in range(n):
        c = codes[rows[i], feat]
        if c == missing_code:
            go_left[i] = missing_left
        else:
            go_left[i] = c <= bin_
    return go_left


def log_loss(y: np.ndarray, margin: np.ndarray, weight: np.ndarray) -> float:
    # log(1 + exp(-s*m)) in a stable form
    s = np.where(y > 0, 1.0, -1.0)
    return float(np.sum(weight * np.logaddexp(0.0, -s * margin)) / np.sum(weight))


@dataclass
class _Leaf:
    node: int
    rows: np.ndarray
    depth: int
    hist: np.ndarray
    gain: float = 0.0
    feat_pos: int = -1
    bin: int = -1
    missing_left: bool = False


class _TreeBuilder:
    def __init__(self, codes, grad, hess, feats, n_value_bins, mapper: BinMapper,
                 config: GbdtConfig, n_threads: int, pool):
        self.codes = codes
        self.grad = grad
        self.hess = hess
        self.feats = feats
        self.nvb = n_value_bins[feats]
        self.mapper = mapper
        self.cfg = config
        self.n_threads = n_threads
        self.pool = pool
        self.n_cols = mapper.n_bins + 1
        self.nodes: list[list] = []  # feature, threshold, missing_left, left, right, value, cover, gain
        self.leaf_rows: dict[int, np.ndarray] = {}

    def histogram(self, rows: np.ndarray) -> np.ndarray:
        if self.pool is None or len(self.feats) < 2 * self.n_threads:
            return _build_histogram(self.codes, rows, self.grad, self.hess, self.feats, self.n_cols)
        chunks = np.array_split(self.feats, self.n_threads)
        parts = self.pool.map(
            lambda fs: _build_histogram(self.codes, rows, self.grad, self.hess, fs, self.n_cols),
            chunks)
        return np.concatenate(list(parts), axis=0)

    def new_leaf(self, rows: np.ndarray, depth: int, hist: np.ndarray | None = None) -> _Leaf:
        if hist is None:
            hist = self.histogram(rows)
        node = len(self.nodes)
        g = float(np.sum(self.grad[rows]))
        h = float(np.sum(self.hess[rows]))
        value = -g / (h + self.cfg.l2_leaf_reg) * self.cfg.learning_rate
        self.nodes.append([LEAF, 0.0, False, -1, -1, value, float(len(rows)), 0.0])
        self.leaf_rows[node] = rows
        leaf = _Leaf(node, rows, depth, hist)
        if len(rows) >= 2 * self.cfg.min_samples_leaf:
            gain, k, b, ml = _best_split(hist, self.nvb, self.cfg.l2_leaf_reg,
                                         float(self.cfg.min_samples_leaf))
            if k >= 0:
                leaf.gain, leaf.feat_pos, leaf.bin, leaf.missing_left = gain, k, b, ml
        return leaf

    def split(self, leaf: _Leaf) -> tuple[_Leaf, _Leaf]:
        feat = int(self.feats[leaf.feat_pos])
        go_left = _partition(self.codes, leaf.rows, feat, leaf.bin, leaf.missing_left,
                             self.mapper.missing_code)
        lrows, rrows = leaf.rows[go_left], leaf.rows[~go_left]
        # build the smaller child's histogram, derive the sibling by subtraction
        if len(lrows) <= len(rrows):
            lh = self.histogram(lrows)
            rh = leaf.hist - lh
        else:
            rh = self.histogram(rrows)
            lh = leaf.hist - rh
        leaf.hist = None
        del self.leaf_rows[leaf.node]
        left = self.new_leaf(lrows, leaf.depth + 1, lh)
        right = self.new_leaf(rrows, leaf.depth + 1, rh)
        rec = self.nodes[leaf.node]
        rec[0] = feat
        rec[1] = float(self.mapper.edges[feat][leaf.bin])
        rec[2] = bool(leaf.missing_left)
        rec[3], rec[4] = left.node, right.node
        rec[7] = float(leaf.gain)
        return left, right

    def training_outputs(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        for node, rows in self.leaf_rows.items():
            out[rows] = self.nodes[node][5]
        return out

    def grow(self, rows: np.ndarray) -> Tree:
        root = self.new_leaf(rows, 0)
        if self.cfg.growth_policy == "depth_wise":
            frontier = [root]
            for _ in range(self.cfg.max_depth):
                nxt = []
                for leaf in frontier:
                    if leaf.feat_pos >= 0:
                        nxt.extend(self.split(leaf))
                    else:
                        leaf.hist = None
                frontier = nxt
                if not frontier:
                    break
        else:
            max_depth = self.cfg.max_depth if self.cfg.max_depth > 0 else math.inf
            heap = []
            if root.feat_pos >= 0:
                heap.append((-root.gain, root.node, root))
            n_leaves = 1
            while heap and n_leaves < self.cfg.max_leaves:
                _, _, leaf = heapq.heappop(heap)
                for child in self.split(leaf):
                    if child.feat_pos >= 0 and child.depth < max_depth:
                        heapq.heappush(heap, (-child.gain, child.node, child))
                    else:
                        child.hist = None
                n_leaves += 1
        cols = list(zip(*self.nodes))
        return Tree(feature=cols[0], threshold=cols[1], missing_left=cols[2], left=cols[3],
                    right=cols[4], value=cols[5], cover=cols[6], gain=cols[7])


def fit(matrix: FeatureMatrix, labels, config: GbdtConfig | None = None,
        n_threads: int = 1) -> TreeEnsemble:
    """Fit a boosted binary classifier on ``matrix`` (NaN = missing).

    ``n_threads`` only parallelizes histogram construction across features;
    the fitted model is identical for every thread count.
    """
    config = config or GbdtConfig()
    X = np.ascontiguousarray(matrix.values, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if len(y) != X.shape[0]:
        raise ValueError("labels must have one entry per matrix row")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("training labels contain a single class")

    mapper = BinMapper(config.n_bins).fit(X)
    codes = mapper.transform(X)
    nvb = mapper.n_value_bins()
    n, p = X.shape

    weight = np.where(y > 0, config.pos_class_weight, 1.0)
    base = logit(n_pos / n)
    margin = np.full(n, base)
    rng = np.random.default_rng(config.seed)
    rows = np.arange(n, dtype=np.int64)
    n_sub = max(1, int(round(config.feature_subsample * p)))

    trees: list[Tree] = []
    losses = [log_loss(y, margin, weight)]
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
    try:
        for _ in range(config.n_trees):
            prob = sigmoid(margin)
            grad = weight * (prob - y)
            hess = weight * prob * (1.0 - prob)
            if n_sub < p:
                feats = np.sort(rng.choice(p, size=n_sub, replace=False)).astype(np.int64)
            else:
                feats = np.arange(p, dtype=np.int64)
            builder = _TreeBuilder(codes, grad, hess, feats, nvb, mapper, config, n_threads, pool)
            tree = builder.grow(rows)
            trees.append(tree)
            margin = margin + builder.training_outputs(n)
            losses.append(log_loss(y, margin, weight))
    finally:
        if pool is not None:
            pool.shutdown()
    return TreeEnsemble(base_score=base, trees=trees, feature_names=list(matrix.feature_names),
                        config=config, train_loss=losses)

"""Gradient boosted regression trees on quantile-binned features.

Features are binned once at fit time (at most 64 bins, exact values when
there are few distinct ones); trees use exact greedy splits over bin
boundaries with a minimum leaf count. Leaf values are Newton steps
(sum g / sum h), which for squared loss reduce to leaf means of the
residuals. No row/feature subsampling, so fitting is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from ..design import DesignMatrix
from ..errors import FitError

MAX_BINS = 64


def _bin_edges(col: np.ndarray) -> np.ndarray:
    uniq = np.unique(col)
    if uniq.size <= 1:
        return np.empty(0)
    if uniq.size <= MAX_BINS:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.quantile(col, np.arange(1, MAX_BINS) / MAX_BINS)
    return np.unique(qs)


def _bin_codes(col: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, col, side="left").astype(np.int64)


@dataclass
class _Tree:
    # parallel node arrays; leaf nodes have feature = -1 and carry value
    feature: np.ndarray
    threshold: np.ndarray  # bin index: go left when code <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict_codes(self, codes: np.ndarray) -> np.ndarray:
        n = codes.shape[0]
        node = np.zeros(n, dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            goes_left = codes[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(goes_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass
class GbModel:
    kind: str
    names: tuple
    loss: str
    base_score: float
    edges: list
    trees: list
    learning_rate: float
    diagnostics: dict = field(default_factory=dict)

    def _codes(self, V: np.ndarray) -> np.ndarray:
        out = np.empty(V.shape, dtype=np.int64)
        for f in range(V.shape[1]):
            out[:, f] = _bin_codes(V[:, f], self.edges[f])
        return out

    def raw_score(self, X: DesignMatrix) -> np.ndarray:
        codes = self._codes(X.values)
        F = np.full(X.n_rows, self.base_score)
        for tree in self.trees:
            F += self.learning_rate * tree.predict_codes(codes)
        return F

    def predict(self, X: DesignMatrix) -> np.ndarray:
        F = self.raw_score(X)
        return expit(F) if self.loss == "logistic" else F


def _grow_tree(codes, g, h, depth, min_leaf, n_bins, h_unit=False):
    n, n_feat = codes.shape
    feature, threshold, left, right, value = [], [], [], [], []
    node_of_row = np.zeros(n, dtype=np.int64)

    def new_node():
        feature.append(-1)
        threshold.append(-1)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    new_node()
    frontier = [0]
    for level in range(depth):
        if not frontier:
            break
        splits = {}
        idx = np.arange(len(frontier))
        for f in range(n_feat):
            nb = n_bins[f]
            if nb <= 1:
                continue
            key = codes[:, f] if level == 0 else node_of_row * nb + codes[:, f]
            length = (max(frontier) + 1) * nb
            hist_c = np.bincount(key, minlength=length).reshape(-1, nb)
            hist_g = np.bincount(key, weights=g,
                                 minlength=length).reshape(-1, nb)
            if h_unit:
                hist_h = hist_c.astype(float)
            else:
                hist_h = np.bincount(key, weights=h,
                                     minlength=length).reshape(-1, nb)
            cg = np.cumsum(hist_g[frontier], axis=1)
            ch = np.cumsum(hist_h[frontier], axis=1)
            cc = np.cumsum(hist_c[frontier], axis=1)
            G, H, Cn = cg[:, -1:], ch[:, -1:], cc[:, -1:]
            gl, hl, cl = cg[:, :-1], ch[:, :-1], cc[:, :-1]
            valid = (cl >= min_leaf) & ((Cn - cl) >= min_leaf) \
                & (hl > 0) & ((H - hl) > 0) \
                & (Cn >= 2 * min_leaf) & (H > 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = np.where(valid,
                                gl * gl / hl + (G - gl) ** 2 / (H - hl)
                                - G * G / H, -np.inf)
            b = np.argmax(gain, axis=1)
            best = gain[idx, b]
            for i, nd in enumerate(frontier):
                if best[i] > 1e-12:
                    prev = splits.get(nd)
                    if prev is None or best[i] > prev[0]:
                        splits[nd] = (float(best[i]), f, int(b[i]))
        next_frontier = []
        for nd in frontier:
            if nd not in splits:
                continue
            _, f, b = splits[nd]
            feature[nd] = f
            threshold[nd] = b
            lo = new_node()
            hi = new_node()
            left[nd], right[nd] = lo, hi
            rows = node_of_row == nd
            goes_left = codes[:, f] <= b
            node_of_row[rows & goes_left] = lo
            node_of_row[rows & ~goes_left] = hi
            next_frontier += [lo, hi]
        frontier = next_frontier

    # Newton leaf values
    sum_g = np.bincount(node_of_row, weights=g, minlength=len(feature))
    sum_h = np.bincount(node_of_row, weights=h, minlength=len(feature))
    for nd in range(len(feature)):
        if feature[nd] == -1 and sum_h[nd] > 0:
            value[nd] = sum_g[nd] / sum_h[nd]
    tree = _Tree(np.array(feature), np.array(threshold), np.array(left),
                 np.array(right), np.array(value))
    return tree, tree.value[node_of_row]


def fit_gb(X: DesignMatrix, target: np.ndarray, loss: str = "squared",
           rounds: int = 200, depth: int = 3, learning_rate: float = 0.1,
           min_leaf: int = 5) -> GbModel:
    """Greedy boosted trees; squared loss gradients are residuals, logistic
    loss gradients are a - p with hessian p(1-p)."""
    if loss not in ("squared", "logistic"):
        raise FitError(f"unknown loss {loss!r}")
    V = X.values
    n = V.shape[0]
    if n < 2 * min_leaf:
        raise FitError("too few rows for the minimum leaf size")
    target = np.asarray(target, dtype=float)
    edges = [_bin_edges(V[:, f]) for f in range(V.shape[1])]
    n_bins = np.array([e.size + 1 for e in edges])
    codes = np.empty(V.shape, dtype=np.int64)
    for f in range(V.shape[1]):
        codes[:, f] = _bin_codes(V[:, f], edges[f])

    if loss == "logistic":
        pbar = float(np.clip(target.mean(), 1e-12, 1 - 1e-12))
        base = float(logit(pbar))
    else:
        base = float(target.mean())
    F = np.full(n, base)
    trees: list[_Tree] = []
    loss_path = []

    def current_loss():
        if loss == "logistic":
            return float(np.logaddexp(0.0, -(2 * target - 1) * F).mean())
        return float(((target - F) ** 2).mean())

    loss_path.append(current_loss())
    if np.all(target == target[0]):
        return GbModel("Gb", X.names, loss, base, edges, [], learning_rate,
                       {"rounds": 0, "note": "constant-target",
                        "loss_path": loss_path})
    for _ in range(rounds):
        if loss == "logistic":
            p = expit(F)
            g = target - p
            h = p * (1 - p)
        else:
            g = target - F
            h = np.ones(n)
        tree, contrib = _grow_tree(codes, g, h, depth, min_leaf, n_bins,
                                   h_unit=loss == "squared")
        if tree.feature[0] == -1 and abs(tree.value[0]) < 1e-15:
            break
        trees.append(tree)
        F = F + learning_rate * contrib
        loss_path.append(current_loss())
    return GbModel("Gb", X.names, loss, base, edges, trees, learning_rate,
                   {"rounds": len(trees), "loss_path": loss_path})

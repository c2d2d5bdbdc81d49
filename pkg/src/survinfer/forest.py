"""CART-style decision trees and bagged ensembles.

Determinism is the design priority: split ties break on the lowest feature
index, then the lowest threshold; bootstrap resamples use per-tree streams
derived from the master seed, so results do not depend on fitting order.
Regression trees split on weighted SSE reduction, classification trees on
weighted Gini; class-probability output is the bagged mean of per-tree leaf
class frequencies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass
class DecisionTree:
    task: str
    n_classes: int
    # parallel node arrays; feature == -1 marks a leaf
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list = field(default_factory=list)  # mean (regression) or class-weight vector

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(None)
        return len(self.feature) - 1

    # -- fitting ------------------------------------------------------------

    def fit(self, X: np.ndarray, y: np.ndarray, w: np.ndarray,
            max_depth: int, min_leaf: int) -> "DecisionTree":
        self._X, self._y, self._w = X, y, w
        self._max_depth = max_depth
        self._min_leaf = min_leaf
        self._grow(np.arange(len(y), dtype=np.intp), depth=0)
        del self._X, self._y, self._w
        self._finalize()
        return self

    def _leaf_value(self, idx: np.ndarray):
        w = self._w[idx]
        total = w.sum()
        if self.task == REGRESSION:
            if total <= 0:
                return float(self._y[idx].mean())
            return float((w * self._y[idx]).sum() / total)
        counts = np.zeros(self.n_classes)
        np.add.at(counts, self._y[idx].astype(np.intp), w)
        return counts

    def _grow(self, idx: np.ndarray, depth: int) -> int:
        node = self._new_node()
        split = None
        if depth < self._max_depth and len(idx) >= 2 * self._min_leaf:
            split = self._best_split(idx)
        if split is None:
            self.value[node] = self._leaf_value(idx)
            return node
        j, thr = split
        go_left = self._X[idx, j] <= thr
        left = self._grow(idx[go_left], depth + 1)
        right = self._grow(idx[~go_left], depth + 1)
        self.feature[node] = j
        self.threshold[node] = thr
        self.left[node] = left
        self.right[node] = right
        return node

    def _best_split(self, idx: np.ndarray):
        y, w = self._y[idx], self._w[idx]
        m = len(idx)
        if self.task == REGRESSION:
            W = w.sum()
            S = (w * y).sum()
            Q = (w * y * y).sum()
            parent = Q - (S * S / W if W > 0 else 0.0)
        else:
            counts = np.zeros(self.n_classes)
            np.add.at(counts, y.astype(np.intp), w)
            W = counts.sum()
            parent = W - (counts @ counts) / W if W > 0 else 0.0

        best_gain = 0.0
        best = None
        for j in range(self._X.shape[1]):
            x = self._X[idx, j]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            cuttable = xs[:-1] < xs[1:]
            lo, hi = self._min_leaf, m - self._min_leaf
            cuttable[: lo - 1] = False
            cuttable[hi:] = False
            if not cuttable.any():
                continue
            ws, ys = w[order], y[order]
            if self.task == REGRESSION:
                cw = np.cumsum(ws)[:-1]
                cs = np.cumsum(ws * ys)[:-1]
                cq = np.cumsum(ws * ys * ys)[:-1]
                with np.errstate(divide="ignore", invalid="ignore"):
                    sse_l = cq - np.where(cw > 0, cs * cs / cw, 0.0)
                    rw = W - cw
                    rs = S - cs
                    rq = Q - cq
                    sse_r = rq - np.where(rw > 0, rs * rs / rw, 0.0)
                gains = parent - sse_l - sse_r
            else:
                onehot = np.zeros((m, self.n_classes))
                onehot[np.arange(m), ys.astype(np.intp)] = ws
                cc = np.cumsum(onehot, axis=0)[:-1]
                cw = cc.sum(axis=1)
                rc = cc[-1] + onehot[-1] - cc
                rw = W - cw
                with np.errstate(divide="ignore", invalid="ignore"):
                    imp_l = cw - np.where(cw > 0, (cc * cc).sum(axis=1) / cw, 0.0)
                    imp_r = rw - np.where(rw > 0, (rc * rc).sum(axis=1) / rw, 0.0)
                gains = parent - imp_l - imp_r
            gains = np.where(cuttable, gains, -np.inf)
            pos = int(np.argmax(gains))  # first max -> lowest threshold
            if gains[pos] > best_gain:
                best_gain = float(gains[pos])
                best = (j, float((xs[pos] + xs[pos + 1]) / 2.0))
        return best

    def _finalize(self) -> None:
        self.feature = np.asarray(self.feature, dtype=np.intp)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.intp)
        self.right = np.asarray(self.right, dtype=np.intp)
        if self.task == REGRESSION:
            self.value = np.asarray([v if v is not None else 0.0 for v in self.value])
        else:
            vals = np.zeros((len(self.feature), self.n_classes))
            for i, v in enumerate(self.value):
                if v is not None:
                    vals[i] = v
            self.value = vals

    # -- prediction ---------------------------------------------------------

    def _leaves_for(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            rows = np.flatnonzero(active)
            f = feat[rows]
            goes_left = X[rows, f] <= self.threshold[node[rows]]
            node[rows] = np.where(goes_left, self.left[node[rows]], self.right[node[rows]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self._leaves_for(X)]

    def class_frequencies(self, X: np.ndarray) -> np.ndarray:
        counts = self.value[self._leaves_for(X)]
        totals = counts.sum(axis=1, keepdims=True)
        freq = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / self.n_classes)
        return freq

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_classes": self.n_classes,
            "feature": np.asarray(self.feature).tolist(),
            "threshold": np.asarray(self.threshold).tolist(),
            "left": np.asarray(self.left).tolist(),
            "right": np.asarray(self.right).tolist(),
            "value": np.asarray(self.value).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        tree = cls(task=d["task"], n_classes=d["n_classes"])
        tree.feature = np.asarray(d["feature"], dtype=np.intp)
        tree.threshold = np.asarray(d["threshold"], dtype=float)
        tree.left = np.asarray(d["left"], dtype=np.intp)
        tree.right = np.asarray(d["right"], dtype=np.intp)
        tree.value = np.asarray(d["value"], dtype=float)
        return tree


class BaggedTrees:
    """Bootstrap ensemble of decision trees."""

    def __init__(self, task: str, n_classes: int = 0):
        self.task = task
        self.n_classes = n_classes
        self.trees: list[DecisionTree] = []

    def fit(self, X: np.ndarray, y: np.ndarray, w: np.ndarray,
            n_trees: int, max_depth: int, min_leaf: int, seed: int) -> "BaggedTrees":
        n = len(y)
        self.trees = []
        for t in range(n_trees):
            if n_trees == 1:
                idx = np.arange(n)  # a single tree is plain CART, no resampling
            else:
                rng = derive_rng(seed, t)  # per-tree stream: schedule-independent
                idx = rng.integers(0, n, size=n)
            tree = DecisionTree(self.task, self.n_classes)
            tree.fit(X[idx], y[idx], w[idx], max_depth=max_depth, min_leaf=min_leaf)
            self.trees.append(tree)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        acc = np.zeros(len(X))
        for tree in self.trees:
            acc += tree.predict(X)
        return acc / len(self.trees)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        acc = np.zeros((len(X), self.n_classes))
        for tree in self.trees:
            acc += tree.class_frequencies(X)
        return acc / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_classes": self.n_classes,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaggedTrees":
        ens = cls(task=d["task"], n_classes=d["n_classes"])
        ens.trees = [DecisionTree.from_dict(t) for t in d["trees"]]
        return ens

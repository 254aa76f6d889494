"""Second-order gradient boosted trees for binary log-loss, exact greedy splits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense import sigmoid


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r = rows[inner]
            n_in = node[inner]
            go_left = X[r, f[inner]] < self.threshold[n_in]
            node[r] = np.where(go_left, self.left[n_in], self.right[n_in])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Tree":
        return cls(
            np.array(doc["feature"], dtype=np.int64),
            np.array(doc["threshold"], dtype=float),
            np.array(doc["left"], dtype=np.int64),
            np.array(doc["right"], dtype=np.int64),
            np.array(doc["value"], dtype=float),
        )


@dataclass
class GBDT:
    n_features: int
    trees: list[Tree] = field(default_factory=list)
    base_score: float = 0.0

    def margin(self, X: np.ndarray) -> np.ndarray:
        m = np.full(len(X), self.base_score)
        for t in self.trees:
            m += t.predict(X)
        return m

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.margin(X))


def weighted_logloss(margin: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # softplus(m) - y*m, computed stably
    ell = np.logaddexp(0.0, margin) - y * margin
    return float((w * ell).sum() / w.sum())


def _best_splits(X_cols, order, row_node, frontier_mask, g, h, node_G, node_H, lam, mcw):
    """Best (gain, feature, threshold) per frontier node over all features."""
    n_nodes = len(node_G)
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    sort_dtype = np.int16 if n_nodes < np.iinfo(np.int16).max else np.int64
    parent_score = node_G ** 2 / (node_H + lam)
    for j, o in enumerate(order):
        nid = row_node[o]
        sel = frontier_mask[nid]
        o = o[sel]
        nid = nid[sel]
        if o.size < 2:
            continue
        perm = np.argsort(nid.astype(sort_dtype), kind="stable")
        o = o[perm]
        nid = nid[perm]
        xs = X_cols[j][o]
        cg = np.cumsum(g[o])
        ch = np.cumsum(h[o])
        new_group = np.empty(o.size, dtype=bool)
        new_group[0] = True
        np.not_equal(nid[1:], nid[:-1], out=new_group[1:])
        starts = np.flatnonzero(new_group)
        group = np.cumsum(new_group) - 1
        base_g = np.concatenate([[0.0], cg])[starts][group]
        base_h = np.concatenate([[0.0], ch])[starts][group]
        GL = cg - base_g
        HL = ch - base_h
        Gt = node_G[nid]
        Ht = node_H[nid]
        GR = Gt - GL
        HR = Ht - HL
        valid = np.zeros(o.size, dtype=bool)
        valid[:-1] = (~new_group[1:]) & (xs[1:] > xs[:-1])
        valid &= (HL >= mcw) & (HR >= mcw)
        if not valid.any():
            continue
        gain = np.full(o.size, -np.inf)
        gain[valid] = (GL[valid] ** 2 / (HL[valid] + lam) + GR[valid] ** 2 / (HR[valid] + lam)
                       - parent_score[nid[valid]])
        gmax = np.maximum.reduceat(gain, starts)
        hit = np.flatnonzero((gain == gmax[group]) & valid)
        if hit.size == 0:
            continue
        _, first = np.unique(group[hit], return_index=True)
        idx = hit[first]
        nodes = nid[idx]
        better = gain[idx] > best_gain[nodes]
        idx = idx[better]
        nodes = nodes[better]
        lo = xs[idx]
        hi = xs[idx + 1]
        thr = lo + (hi - lo) / 2.0
        thr = np.where((thr > lo) & (thr <= hi), thr, hi)
        best_gain[nodes] = gain[idx]
        best_feat[nodes] = j
        best_thr[nodes] = thr
    return best_gain, best_feat, best_thr


def fit_tree(X_cols, order, g, h, max_depth: int, lam: float, mcw: float) -> tuple[Tree, np.ndarray]:
    """Grow one depth-limited tree level by level; returns the tree and each row's leaf."""
    n = len(g)
    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    row_node = np.zeros(n, dtype=np.int64)
    frontier = [0]
    for _ in range(max_depth):
        if not frontier:
            break
        n_nodes = len(feature)
        node_G = np.bincount(row_node, weights=g, minlength=n_nodes)
        node_H = np.bincount(row_node, weights=h, minlength=n_nodes)
        mask = np.zeros(n_nodes, dtype=bool)
        mask[frontier] = True
        gain, feat, thr = _best_splits(X_cols, order, row_node, mask, g, h, node_G, node_H, lam, mcw)
        next_frontier = []
        split_feat = np.full(n_nodes, -1, dtype=np.int64)
        split_thr = np.zeros(n_nodes)
        child_l = np.zeros(n_nodes, dtype=np.int64)
        child_r = np.zeros(n_nodes, dtype=np.int64)
        for node in frontier:
            if feat[node] < 0 or gain[node] <= 0.0:
                continue
            l_id, r_id = len(feature), len(feature) + 1
            feature[node] = int(feat[node])
            threshold[node] = float(thr[node])
            left[node], right[node] = l_id, r_id
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            split_feat[node] = feat[node]
            split_thr[node] = thr[node]
            child_l[node], child_r[node] = l_id, r_id
            next_frontier += [l_id, r_id]
        if not next_frontier:
            break
        moving = split_feat[row_node] >= 0
        rows = np.flatnonzero(moving)
        nodes = row_node[rows]
        f = split_feat[nodes]
        vals = _gather(X_cols, f, rows)
        row_node[rows] = np.where(vals < split_thr[nodes], child_l[nodes], child_r[nodes])
        frontier = next_frontier
    n_nodes = len(feature)
    node_G = np.bincount(row_node, weights=g, minlength=n_nodes)
    node_H = np.bincount(row_node, weights=h, minlength=n_nodes)
    value = np.where(np.array(feature) < 0, -node_G / (node_H + lam), 0.0)
    tree = Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), value)
    return tree, row_node


def _gather(X_cols, f, rows):
    out = np.empty(rows.size)
    for j in np.unique(f):
        sel = f == j
        out[sel] = X_cols[j][rows[sel]]
    return out


def train_gbdt(X: np.ndarray, y: np.ndarray, w: np.ndarray, rounds: int, learning_rate: float,
               max_depth: int, reg_lambda: float, min_child_weight: float) -> GBDT:
    """Boost ``rounds`` trees on the weighted logistic loss.

    Leaf values are ``-G / (H + lambda)`` scaled by ``learning_rate``. A tree
    whose step would raise the training loss (Newton overshoot) is halved until
    it does not, or dropped.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    X_cols = [np.ascontiguousarray(X[:, j]) for j in range(X.shape[1])]
    order = [np.argsort(c, kind="stable") for c in X_cols]
    model = GBDT(X.shape[1])
    margin = np.full(len(y), model.base_score)
    loss = weighted_logloss(margin, y, w)
    for _ in range(rounds):
        p = sigmoid(margin)
        g = w * (p - y)
        h = w * p * (1.0 - p)
        tree, leaf = fit_tree(X_cols, order, g, h, max_depth, reg_lambda, min_child_weight)
        step = tree.value * learning_rate
        scale = 1.0
        while scale > 2.0 ** -30:
            cand = margin + scale * step[leaf]
            new_loss = weighted_logloss(cand, y, w)
            if new_loss <= loss:
                break
            scale *= 0.5
        else:
            continue
        tree.value = step * scale
        model.trees.append(tree)
        margin, loss = cand, new_loss
    return model

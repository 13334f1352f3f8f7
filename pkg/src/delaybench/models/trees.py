"""Tree learners: a conditional-inference style regression tree split by
maximally selected rank statistics, an extremely randomized forest, and
gradient boosting over CART regression trees.

Trees are stored as flat node arrays; forests and boosters concatenate them
with global child indices so one vectorized walk serves every tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import log_ndtr
from scipy.stats import rankdata

from .base import (
    HyperConfig,
    TrainedModel,
    UnsupportedModelError,
    as_xy,
    base_meta,
    register,
)

RF_SAMPLE_FRACTION = 0.6321
LEAF = -1


class _NodeBuffer:
    def __init__(self):
        self.feature, self.threshold = [], []
        self.left, self.right = [], []
        self.value, self.gain = [], []

    def add(self, value) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(float(value))
        self.gain.append(0.0)
        return len(self.value) - 1

    def split(self, node, feature, threshold, gain, left, right):
        self.feature[node] = int(feature)
        self.threshold[node] = float(threshold)
        self.gain[node] = float(gain)
        self.left[node] = left
        self.right[node] = right

    def arrays(self) -> dict:
        return {
            "feature": np.array(self.feature, dtype=np.int64),
            "threshold": np.array(self.threshold, dtype=float),
            "left": np.array(self.left, dtype=np.int64),
            "right": np.array(self.right, dtype=np.int64),
            "value": np.array(self.value, dtype=float),
            "gain": np.array(self.gain, dtype=float),
        }


def _concat(trees: list[dict]) -> dict:
    """Stack per-tree node arrays, rebasing child indices."""
    sizes = np.array([t["value"].size for t in trees], dtype=np.int64)
    roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    out = {}
    for key in ("feature", "threshold", "value", "gain"):
        out[key] = np.concatenate([t[key] for t in trees])
    for key in ("left", "right"):
        out[key] = np.concatenate(
            [np.where(t[key] == LEAF, LEAF, t[key] + r) for t, r in zip(trees, roots)]
        )
    out["roots"] = roots
    return out


def apply_forest(nodes: dict, X) -> np.ndarray:
    """Leaf index reached by every row in every tree, shape (n_trees, n)."""
    idx = np.repeat(nodes["roots"][:, None], X.shape[0], axis=1)
    feat, thr = nodes["feature"], nodes["threshold"]
    left, right = nodes["left"], nodes["right"]
    cols = np.arange(X.shape[0])[None, :]
    while True:
        f = feat[idx]
        inner = f >= 0
        if not inner.any():
            return idx
        xv = X[cols.repeat(idx.shape[0], 0), np.where(inner, f, 0)]
        step = np.where(xv <= thr[idx], left[idx], right[idx])
        idx = np.where(inner, step, idx)


def _importance(nodes: dict, n_features: int) -> np.ndarray:
    inner = nodes["feature"] >= 0
    imp = np.bincount(nodes["feature"][inner], weights=nodes["gain"][inner], minlength=n_features)
    total = imp.sum()
    if total <= 0:
        return np.full(n_features, 1.0 / n_features)
    return imp / total


# --------------------------------------------------------------------------
# maximally selected rank statistics


@dataclass(frozen=True)
class RankSplit:
    split_value: float
    statistic: float
    log_p: float  # log of the Bonferroni-adjusted p-value

    @property
    def adjusted_p(self) -> float:
        return math.exp(self.log_p)


def _best_rank_split(x, scores, minprop) -> RankSplit | None:
    n = x.shape[0]
    if n < 2:
        return None
    order = np.argsort(x, kind="stable")
    xs = x[order]
    s = scores[order]
    mean = s.mean()
    total_var = float(((s - mean) ** 2).sum())
    if total_var <= 0:
        return None
    n_left = np.arange(1, n)
    candidate = (xs[:-1] < xs[1:]) & (n_left >= minprop * n) & (n_left <= (1.0 - minprop) * n)
    if not candidate.any():
        return None
    pos = np.flatnonzero(candidate)
    nl = n_left[pos].astype(float)
    lin = np.cumsum(s)[pos]
    var = nl * (n - nl) / (n * (n - 1.0)) * total_var
    stat = np.abs(lin - nl * mean) / np.sqrt(var)
    best = int(np.argmax(stat))
    t = float(stat[best])
    # two-sided normal tail, Bonferroni over the candidate cut points
    log_p = min(0.0, math.log(pos.size) + math.log(2.0) + float(log_ndtr(-t)))
    i = pos[best]
    split = 0.5 * (xs[i] + xs[i + 1])
    if not split < xs[i + 1]:
        split = xs[i]
    return RankSplit(float(split), t, log_p)


def max_sel_rank_split(feature_values, targets, minprop=0.1, alpha=0.05):
    """Best cut of one feature by the standardized linear rank statistic.

    Returns ``(split_value, adjusted_p)`` or ``None`` if no cut is
    admissible or the adjusted p-value exceeds ``alpha``. Rows with
    ``x <= split_value`` go left.
    """
    if not 0.0 < minprop < 0.5:
        raise ValueError("minprop must lie in (0, 0.5)")
    x = np.asarray(feature_values, dtype=float)
    y = np.asarray(targets, dtype=float)
    res = _best_rank_split(x, rankdata(y), minprop)
    if res is None or not _significant(res.log_p, alpha):
        return None
    return res.split_value, res.adjusted_p


def _significant(log_p, alpha):
    return alpha > 0 and log_p <= math.log(alpha)


@register
class RegressionTreeModel(TrainedModel):
    family = "RT"

    def _predict(self, X, groups=None):
        nodes = {**self.state, "roots": np.zeros(1, dtype=np.int64)}
        return self.state["value"][apply_forest(nodes, X)[0]]

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.state["feature"] == LEAF))


def rt_fit(X, y, params, seed=0) -> RegressionTreeModel:
    X, y = as_xy(X, y)
    min_node = int(params["min_node_size"])
    minprop = float(params.get("minprop", 0.1))
    alpha = float(params.get("alpha", 0.05))
    if min_node < 1:
        raise ValueError("min_node_size must be at least 1")
    if not 0.0 < minprop < 0.5:
        raise ValueError("minprop must lie in (0, 0.5)")
    buf = _NodeBuffer()
    stack = [(buf.add(y.mean()), np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size <= min_node:
            continue
        yr = y[rows]
        scores = rankdata(yr)
        best_j, best = None, None
        for j in range(X.shape[1]):
            res = _best_rank_split(X[rows, j], scores, minprop)
            if res is None:
                continue
            # strict comparison keeps the lowest feature index on ties
            if best is None or res.log_p < best.log_p:
                best_j, best = j, res
        if best is None or not _significant(best.log_p, alpha):
            continue
        go_left = X[rows, best_j] <= best.split_value
        lrows, rrows = rows[go_left], rows[~go_left]
        sse = lambda v: float(((v - v.mean()) ** 2).sum())
        gain = sse(yr) - sse(y[lrows]) - sse(y[rrows])
        li, ri = buf.add(y[lrows].mean()), buf.add(y[rrows].mean())
        buf.split(node, best_j, best.split_value, gain, li, ri)
        stack.append((ri, rrows))
        stack.append((li, lrows))
    cfg = HyperConfig("RT", {"min_node_size": min_node, "minprop": minprop, "alpha": alpha})
    return RegressionTreeModel(cfg, buf.arrays(), base_meta(X, seed))


# --------------------------------------------------------------------------
# extremely randomized forest


@njit(cache=True)
def _extra_tree_kernel(X, y, rows, min_node, mtry, n_cuts, U):
    """Grow one randomized tree over ``rows``.

    ``U`` holds the uniforms consumed by the i-th split attempt: the first p
    entries rank features (the mtry smallest keys are drawn), the rest place
    the cut values.
    """
    p = X.shape[1]
    cap = 2 * rows.size + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    idx = rows.copy()
    scratch = np.empty(idx.size, np.int64)
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    total = 0.0
    for r in idx:
        total += y[r]
    value[0] = total / idx.size
    n_nodes = 1
    top = 0
    st_node[0], st_lo[0], st_hi[0] = 0, 0, idx.size
    top = 1
    attempt = 0
    cuts = np.empty(n_cuts)
    while top > 0:
        top -= 1
        node, lo, hi = st_node[top], st_lo[top], st_hi[top]
        m = hi - lo
        if m <= min_node:
            continue
        ymin, ymax, tot = np.inf, -np.inf, 0.0
        for t in range(lo, hi):
            v = y[idx[t]]
            tot += v
            ymin = min(ymin, v)
            ymax = max(ymax, v)
        if ymax == ymin:
            continue
        u = U[attempt]
        attempt += 1
        feats = np.sort(np.argsort(u[:p], kind="mergesort")[:mtry])
        best_g, best_f, best_c = -np.inf, -1, 0.0
        for fi in range(mtry):
            f = feats[fi]
            xmin, xmax = np.inf, -np.inf
            for t in range(lo, hi):
                v = X[idx[t], f]
                xmin = min(xmin, v)
                xmax = max(xmax, v)
            base = p + fi * n_cuts
            for c in range(n_cuts):
                cuts[c] = xmin + (xmax - xmin) * u[base + c]
            if not xmax > xmin:
                continue
            cs = np.sort(cuts)
            for c in range(n_cuts):
                nl, sl = 0, 0.0
                for t in range(lo, hi):
                    if X[idx[t], f] <= cs[c]:
                        nl += 1
                        sl += y[idx[t]]
                nr = m - nl
                if nl == 0 or nr == 0:
                    continue
                g = sl * sl / nl + (tot - sl) ** 2 / nr - tot * tot / m
                if g > best_g:
                    best_g, best_f, best_c = g, f, cs[c]
        if not best_g > 0:
            continue
        # stable partition of idx[lo:hi]
        nl, k = 0, 0
        sl = 0.0
        for t in range(lo, hi):
            if X[idx[t], best_f] <= best_c:
                scratch[nl] = idx[t]
                nl += 1
                sl += y[idx[t]]
        k = nl
        for t in range(lo, hi):
            if not X[idx[t], best_f] <= best_c:
                scratch[k] = idx[t]
                k += 1
        for t in range(m):
            idx[lo + t] = scratch[t]
        li, ri = n_nodes, n_nodes + 1
        n_nodes += 2
        value[li] = sl / nl
        value[ri] = (tot - sl) / (m - nl)
        feature[node], threshold[node], gain[node] = best_f, best_c, best_g
        left[node], right[node] = li, ri
        # right pushed first so the left subtree is numbered first
        st_node[top], st_lo[top], st_hi[top] = ri, lo + nl, hi
        top += 1
        st_node[top], st_lo[top], st_hi[top] = li, lo, lo + nl
        top += 1
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], gain[:n_nodes]


_NODE_KEYS = ("feature", "threshold", "left", "right", "value", "gain")


def _grow_extra_tree(X, y, rows, min_node, mtry, n_cuts, rng) -> dict:
    n_attempts = max(rows.size, 1)
    U = rng.random((n_attempts, X.shape[1] + mtry * n_cuts))
    out = _extra_tree_kernel(X, y, np.asarray(rows, dtype=np.int64), min_node, mtry, n_cuts, U)
    return dict(zip(_NODE_KEYS, out))


@register
class RandomForestModel(TrainedModel):
    family = "RF"

    def tree_predictions(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.state["value"][apply_forest(self.state, X)]

    def _predict(self, X, groups=None):
        return self.tree_predictions(X).mean(axis=0)


def rf_fit(X, y, params, seed=0) -> RandomForestModel:
    X, y = as_xy(X, y)
    n_trees = int(params["n_trees"])
    min_node = int(params["min_node_size"])
    mtry = int(params["n_split_vars"])
    n_cuts = int(params["n_random_cuts"])
    if not 1 <= mtry <= X.shape[1]:
        raise ValueError(f"n_split_vars={mtry} must lie in [1, {X.shape[1]}]")
    if n_trees < 1 or n_cuts < 1 or min_node < 1:
        raise ValueError("n_trees, n_random_cuts and min_node_size must be positive")
    n = X.shape[0]
    n_sample = min(n, math.ceil(RF_SAMPLE_FRACTION * n))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        rows = np.sort(rng.choice(n, size=n_sample, replace=False))
        trees.append(_grow_extra_tree(X, y, rows, min_node, mtry, n_cuts, rng))
    cfg = HyperConfig(
        "RF",
        {"n_trees": n_trees, "min_node_size": min_node, "n_split_vars": mtry, "n_random_cuts": n_cuts},
    )
    return RandomForestModel(cfg, _concat(trees), base_meta(X, seed, n_sample=n_sample))


# --------------------------------------------------------------------------
# gradient boosting


@njit(cache=True)
def _cart_kernel(X, r, rows, max_depth, min_split):
    p = X.shape[1]
    cap = 2 * rows.size + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    leaf_of = np.full(X.shape[0], -1, np.int64)
    idx = rows.copy()
    scratch = np.empty(idx.size, np.int64)
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    tot0 = 0.0
    for t in idx:
        tot0 += r[t]
    value[0] = tot0 / idx.size
    n_nodes = 1
    st_node[0], st_lo[0], st_hi[0], st_depth[0] = 0, 0, idx.size, 0
    top = 1
    while top > 0:
        top -= 1
        node, lo, hi, depth = st_node[top], st_lo[top], st_hi[top], st_depth[top]
        m = hi - lo
        rmin, rmax, tot = np.inf, -np.inf, 0.0
        for t in range(lo, hi):
            v = r[idx[t]]
            tot += v
            rmin = min(rmin, v)
            rmax = max(rmax, v)
        best_g, best_f, best_thr = -np.inf, -1, 0.0
        if depth < max_depth and m >= min_split and m >= 2 and rmax > rmin:
            xs = np.empty(m)
            rs = np.empty(m)
            for f in range(p):
                for t in range(m):
                    xs[t] = X[idx[lo + t], f]
                order = np.argsort(xs, kind="mergesort")
                cs = 0.0
                for t in range(m - 1):
                    cs += r[idx[lo + order[t]]]
                    a, b = xs[order[t]], xs[order[t + 1]]
                    if not a < b:
                        continue
                    nl = t + 1.0
                    g = cs * cs / nl + (tot - cs) ** 2 / (m - nl) - tot * tot / m
                    if g > best_g:
                        thr = 0.5 * (a + b)
                        if not thr < b:
                            thr = a
                        best_g, best_f, best_thr = g, f, thr
        if not best_g > 0:
            for t in range(lo, hi):
                leaf_of[idx[t]] = node
            continue
        nl, sl = 0, 0.0
        for t in range(lo, hi):
            if X[idx[t], best_f] <= best_thr:
                scratch[nl] = idx[t]
                nl += 1
                sl += r[idx[t]]
        k = nl
        for t in range(lo, hi):
            if not X[idx[t], best_f] <= best_thr:
                scratch[k] = idx[t]
                k += 1
        for t in range(m):
            idx[lo + t] = scratch[t]
        li, ri = n_nodes, n_nodes + 1
        n_nodes += 2
        value[li] = sl / nl
        value[ri] = (tot - sl) / (m - nl)
        feature[node], threshold[node], gain[node] = best_f, best_thr, best_g
        left[node], right[node] = li, ri
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = ri, lo + nl, hi, depth + 1
        top += 1
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = li, lo, lo + nl, depth + 1
        top += 1
    return (
        feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
        value[:n_nodes], gain[:n_nodes], leaf_of,
    )


def _grow_cart(X, r, rows, max_depth, min_split) -> tuple[dict, np.ndarray]:
    """Exhaustive variance-reduction tree; also returns each row's leaf
    (-1 for rows outside ``rows``)."""
    *arrays, leaf_of = _cart_kernel(X, r, np.asarray(rows, dtype=np.int64), max_depth, min_split)
    return dict(zip(_NODE_KEYS, arrays)), leaf_of


@register
class GradientBoostingModel(TrainedModel):
    family = "GBM"

    @property
    def init(self) -> float:
        return float(self.state["init"])

    @property
    def learning_rate(self) -> float:
        return float(self.config.params["learning_rate"])

    def stage_predictions(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.state["roots"].size == 0:
            return np.zeros((0, X.shape[0]))
        return self.state["value"][apply_forest(self.state, X)]

    def _predict(self, X, groups=None):
        return self.init + self.learning_rate * self.stage_predictions(X).sum(axis=0)


def gbm_fit(X, y, params, seed=0) -> GradientBoostingModel:
    X, y = as_xy(X, y)
    n_trees = int(params["n_trees"])
    depth = int(params["max_depth"])
    min_split = int(params.get("min_samples_split", 2))
    lr = float(params["learning_rate"])
    subsample = float(params.get("subsample", 1.0))
    loss = params.get("loss", "squared")
    if not 0.0 <= lr <= 1.0:
        raise ValueError("learning_rate must lie in [0, 1]")
    if not 0.0 < subsample <= 1.0:
        raise ValueError("subsample must lie in (0, 1]")
    if loss not in ("squared", "absolute"):
        raise ValueError(f"unknown loss {loss!r}")
    n = X.shape[0]
    f0 = float(np.mean(y)) if loss == "squared" else float(np.median(y))
    F = np.full(n, f0)
    rng = np.random.default_rng([seed, 7])
    n_sub = max(1, int(math.floor(subsample * n)))
    trees, train_loss = [], []
    for _ in range(n_trees):
        rows = np.arange(n) if n_sub == n else np.sort(rng.choice(n, size=n_sub, replace=False))
        resid = y - F
        target = resid if loss == "squared" else np.sign(resid)
        tree, leaf_of = _grow_cart(X, target, rows, depth, min_split)
        if loss == "absolute":
            # line search per leaf: median of the raw residuals it holds
            leaves = leaf_of[rows]
            for leaf in np.unique(leaves):
                tree["value"][leaf] = np.median(resid[rows][leaves == leaf])
        trees.append(tree)
        step = tree["value"][apply_forest({**tree, "roots": np.zeros(1, dtype=np.int64)}, X)[0]]
        F = F + lr * step
        train_loss.append(float(np.mean((y - F) ** 2)))
    state = _concat(trees) if trees else {
        k: np.zeros(0, dtype=np.int64 if k in ("feature", "left", "right", "roots") else float)
        for k in ("feature", "threshold", "left", "right", "value", "gain", "roots")
    }
    state["init"] = np.array(f0)
    state["train_mse"] = np.array(train_loss)
    cfg = HyperConfig(
        "GBM",
        {
            "n_trees": n_trees,
            "max_depth": depth,
            "min_samples_split": min_split,
            "learning_rate": lr,
            "subsample": subsample,
            "loss": loss,
        },
    )
    return GradientBoostingModel(cfg, state, base_meta(X, seed))


def feature_importance(model: TrainedModel) -> np.ndarray:
    """Impurity (SSE) decrease per feature summed over all splits, normalized."""
    if model.family not in ("RF", "GBM"):
        raise UnsupportedModelError(f"importance needs an RF or GBM model, got {model.family}")
    return _importance(model.state, model.n_features)

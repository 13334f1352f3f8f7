"""K-means with random-swap refinement and silhouette-based choice of k.

Used to place the hidden units of the RBF network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SWAP_REFINE_ITERS = 2


@dataclass
class Clustering:
    centers: np.ndarray
    assignment: np.ndarray
    sse: float
    # SSE after every Lloyd step / accepted swap, for monotonicity checks
    history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("no points to cluster")
    return x


def _sq_dists(x, centers):
    d = (x**2).sum(1)[:, None] - 2.0 * x @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _assign(x, centers):
    d = _sq_dists(x, centers)
    # argmin keeps the lowest center index on ties
    a = np.argmin(d, axis=1)
    # exact residuals for the chosen centers; the expanded form above is noisy
    return a, ((x - centers[a]) ** 2).sum(1)


def sse_of(points, centers, assignment) -> float:
    x = _as_points(points)
    return float(((x - np.asarray(centers)[assignment]) ** 2).sum())


def _lloyd(x, centers, max_iters):
    centers = centers.copy()
    k = centers.shape[0]
    assignment, d = _assign(x, centers)
    history = [float(d.sum())]
    for _ in range(max_iters):
        counts = np.bincount(assignment, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assignment, x)
        new_centers = centers.copy()
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            # empty cluster: move it onto the worst-served point
            _, d_cur = _assign(x, new_centers)
            far = int(np.argmax(d_cur))
            new_centers[j] = x[far]
        new_assignment, d = _assign(x, new_centers)
        centers = new_centers
        history.append(float(d.sum()))
        if np.array_equal(new_assignment, assignment) and nonempty.all():
            assignment = new_assignment
            break
        assignment = new_assignment
    return centers, assignment, history


def _init_centers(x, k, rng):
    # distinct rows when possible so no cluster starts empty by construction
    uniq = np.unique(x, axis=0)
    if uniq.shape[0] >= k:
        return uniq[np.sort(rng.choice(uniq.shape[0], size=k, replace=False))]
    return x[rng.choice(x.shape[0], size=k, replace=False)]


def kmeans(points, k: int, max_iters: int = 100, seed: int = 0, init=None) -> Clustering:
    x = _as_points(points)
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {x.shape[0]}]")
    if init is None:
        centers = _init_centers(x, k, np.random.default_rng(seed))
    else:
        centers = np.asarray(init, dtype=float).reshape(k, x.shape[1])
    centers, assignment, history = _lloyd(x, centers, max_iters)
    return Clustering(centers, assignment, history[-1], history)


def random_swap(
    points, k: int, swap_iters: int = 30, seed: int = 0, max_iters: int = 100, init=None
) -> Clustering:
    """Plain k-means followed by random center-to-point swaps, each refined by
    a short k-means run and kept only if the SSE strictly drops."""
    x = _as_points(points)
    best = kmeans(x, k, max_iters=max_iters, seed=seed, init=init)
    history = [best.sse]
    rng = np.random.default_rng([seed, 1])
    for _ in range(swap_iters):
        centers = best.centers.copy()
        centers[rng.integers(k)] = x[rng.integers(x.shape[0])]
        c, a, h = _lloyd(x, centers, SWAP_REFINE_ITERS)
        if h[-1] < best.sse:
            best = Clustering(c, a, h[-1])
            history.append(h[-1])
    best.history = history
    return best


def _pairwise(x):
    return np.sqrt(_sq_dists(x, x))


def silhouette(points, clustering: Clustering, distances=None) -> float:
    x = _as_points(points)
    labels = np.asarray(clustering.assignment)
    k = clustering.k
    if k < 2:
        raise ValueError("silhouette needs at least two clusters")
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        raise ValueError("silhouette needs every cluster non-empty")
    n = x.shape[0]
    dist = _pairwise(x) if distances is None else distances
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    totals = dist @ onehot  # summed distance from each point to each cluster
    own = counts[labels]
    a = np.where(own > 1, totals[np.arange(n), labels] / np.maximum(own - 1, 1), 0.0)
    mean_other = totals / counts[None, :]
    mean_other[np.arange(n), labels] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.clip(s.mean(), -1.0, 1.0))


def default_k_range(n: int) -> tuple[int, int]:
    return 2, max(2, min(25, math.isqrt(n)))


def select_cluster_count(
    points, k_min: int | None = None, k_max: int | None = None, seed: int = 0, swap_iters: int = 30
) -> tuple[int, Clustering]:
    """Random-swap clustering for every k in range; keep the best silhouette
    (smallest k on ties)."""
    x = _as_points(points)
    lo, hi = default_k_range(x.shape[0])
    k_min = lo if k_min is None else k_min
    k_max = hi if k_max is None else k_max
    if not 2 <= k_min <= k_max <= x.shape[0]:
        raise ValueError(f"need 2 <= k_min <= k_max <= n, got [{k_min}, {k_max}] for n={x.shape[0]}")
    dist = _pairwise(x)
    best_k, best_c, best_si = None, None, -np.inf
    for k in range(k_min, k_max + 1):
        c = random_swap(x, k, swap_iters=swap_iters, seed=seed + k)
        if (np.bincount(c.assignment, minlength=k) == 0).any():
            continue
        si = silhouette(x, c, distances=dist)
        if si > best_si:
            best_k, best_c, best_si = k, c, si
    if best_c is None:
        raise ValueError("no k in range produced non-empty clusters")
    return best_k, best_c

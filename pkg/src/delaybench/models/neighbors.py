"""Naive Bayes over equal-width target bins, and k-nearest-neighbour regression."""
from __future__ import annotations

import numpy as np

from .base import HyperConfig, TrainedModel, as_xy, base_meta, register

VAR_FLOOR = 1e-6


def bin_edges(y, n_bins):
    return np.linspace(float(np.min(y)), float(np.max(y)), n_bins + 1)


@register
class NaiveBayesModel(TrainedModel):
    family = "NB"

    def _predict(self, X, groups=None):
        mids = self.state["midpoints"]
        if mids.size == 1:
            return np.full(X.shape[0], mids[0])
        mu, var = self.state["means"], self.state["variances"]
        # log N(x | mu, var) summed over features, per class
        ll = -0.5 * (
            np.log(2 * np.pi * var)[None, :, :] + (X[:, None, :] - mu[None, :, :]) ** 2 / var[None, :, :]
        ).sum(axis=2)
        ll += self.state["log_prior"][None, :]
        return mids[np.argmax(ll, axis=1)]


def nb_fit(X, y, params, seed=0) -> NaiveBayesModel:
    X, y = as_xy(X, y)
    n_bins = int(params["n_bins"])
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    if X.shape[0] <= n_bins:
        raise ValueError(f"need more rows than bins ({X.shape[0]} <= {n_bins})")
    cfg = HyperConfig("NB", {"n_bins": n_bins})
    meta = base_meta(X, seed)
    if np.ptp(y) == 0:
        state = {"midpoints": np.array([y[0]]), "edges": np.array([y[0], y[0]])}
        return NaiveBayesModel(cfg, state, meta)
    edges = bin_edges(y, n_bins)
    # right edge closed on the last bin
    labels = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, n_bins - 1)
    present = np.unique(labels)
    means = np.empty((present.size, X.shape[1]))
    variances = np.empty_like(means)
    log_prior = np.empty(present.size)
    for i, c in enumerate(present):
        rows = X[labels == c]
        means[i] = rows.mean(axis=0)
        variances[i] = np.maximum(rows.var(axis=0), VAR_FLOOR)
        log_prior[i] = np.log(rows.shape[0] / X.shape[0])
    state = {
        "edges": edges,
        "midpoints": 0.5 * (edges[present] + edges[present + 1]),
        "means": means,
        "variances": variances,
        "log_prior": log_prior,
    }
    return NaiveBayesModel(cfg, state, meta)


@register
class KnnModel(TrainedModel):
    family = "KNN"
    chunk = 512

    def _predict(self, X, groups=None):
        Xt, yt = self.state["X"], self.state["y"]
        k = int(self.config.params["k"])
        inverse = self.config.params["weighting"] == "inverse_distance"
        out = np.empty(X.shape[0])
        sq_t = (Xt**2).sum(1)
        for start in range(0, X.shape[0], self.chunk):
            q = X[start : start + self.chunk]
            d2 = np.maximum((q**2).sum(1)[:, None] - 2 * q @ Xt.T + sq_t[None, :], 0.0)
            # stable sort: equal distances resolve to the lower training index
            nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
            dist = np.sqrt(((q[:, None, :] - Xt[nn]) ** 2).sum(-1))
            targets = yt[nn]
            if not inverse:
                out[start : start + q.shape[0]] = targets.mean(axis=1)
                continue
            exact = dist == 0
            hit = exact.any(axis=1)
            w = 1.0 / np.where(exact, 1.0, dist)
            pred = (w * targets).sum(1) / w.sum(1)
            if hit.any():
                dup = (exact * targets).sum(1) / np.maximum(exact.sum(1), 1)
                pred = np.where(hit, dup, pred)
            out[start : start + q.shape[0]] = pred
        return out


def knn_fit(X, y, params, seed=0) -> KnnModel:
    X, y = as_xy(X, y)
    k = int(params["k"])
    weighting = params.get("weighting", "uniform")
    if weighting not in ("uniform", "inverse_distance"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if not 1 <= k <= X.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {X.shape[0]}]")
    cfg = HyperConfig("KNN", {"k": k, "weighting": weighting})
    return KnnModel(cfg, {"X": X.copy(), "y": y.copy()}, base_meta(X, seed))

"""Radial-basis and feed-forward networks trained by gradient descent.

Both hold out 25% of their training rows and keep the weights from the
epoch with the best validation G-score.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from .. import metrics
from ..clustering import default_k_range, select_cluster_count
from .base import (
    DivergenceError,
    HyperConfig,
    TrainedModel,
    as_xy,
    base_meta,
    register,
    split_fit_validation,
)


def _val_g(pred, y, y_max):
    if not np.all(np.isfinite(pred)):
        return -np.inf
    r = metrics.evaluate(pred, y, y_max)
    return r.g


# --------------------------------------------------------------------------
# RBF network


_CENTER_CACHE: OrderedDict = OrderedDict()
_CENTER_CACHE_SIZE = 32


def _select_centers(X, k_min, k_max, seed):
    """Silhouette-selected centers, memoized because grid points that differ
    only in learning rate or width cluster the same rows."""
    key = (hashlib.sha1(X.tobytes()).hexdigest(), X.shape, k_min, k_max, seed)
    if key in _CENTER_CACHE:
        _CENTER_CACHE.move_to_end(key)
        return _CENTER_CACHE[key].copy()
    _, clustering = select_cluster_count(X, k_min, k_max, seed=seed)
    _CENTER_CACHE[key] = clustering.centers.copy()
    if len(_CENTER_CACHE) > _CENTER_CACHE_SIZE:
        _CENTER_CACHE.popitem(last=False)
    return clustering.centers


def rbf_features(X, centers, width):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * width**2))


def rbfn_loss_and_grad(w, b, phi, y):
    """Half mean squared error of ``phi @ w + b`` and its gradient."""
    r = phi @ w + b - y
    m = y.shape[0]
    return 0.5 * float(r @ r) / m, phi.T @ r / m, float(r.sum()) / m


@register
class RbfnModel(TrainedModel):
    family = "RBFN"

    def _predict(self, X, groups=None):
        phi = rbf_features(X, self.state["centers"], float(self.config.params["gaussian_width"]))
        return phi @ self.state["weights"] + float(self.state["bias"])


def rbfn_fit(X, y, params, seed=0, centers=None) -> RbfnModel:
    """``centers`` bypasses the silhouette-driven clustering (tests, reuse)."""
    X, y = as_xy(X, y)
    lr = float(params["learning_rate"])
    width = float(params["gaussian_width"])
    epochs = int(params["max_epochs"])
    if width <= 0:
        raise ValueError("gaussian_width must be positive")
    fit_rows, val_rows = split_fit_validation(X.shape[0], seed)
    Xf, yf, Xv, yv = X[fit_rows], y[fit_rows], X[val_rows], y[val_rows]
    if centers is None:
        k_min, k_max = default_k_range(Xf.shape[0])
        k_min = int(params.get("k_min", k_min))
        k_max = int(params.get("k_max", k_max))
        centers = _select_centers(Xf, k_min, min(k_max, Xf.shape[0]), seed)
    centers = np.asarray(centers, dtype=float)
    y_max = float(np.max(np.abs(y))) or 1.0

    rng = np.random.default_rng([seed, 11])
    w = rng.normal(0.0, 0.01, centers.shape[0])
    b = 0.0
    phi_f = rbf_features(Xf, centers, width)
    phi_v = rbf_features(Xv, centers, width)
    best = (_val_g(phi_v @ w + b, yv, y_max), w.copy(), b, 0)
    history = [best[0]]
    for epoch in range(1, epochs + 1):
        loss, gw, gb = rbfn_loss_and_grad(w, b, phi_f, yf)
        if not np.isfinite(loss):
            raise DivergenceError(f"RBFN loss became non-finite at epoch {epoch}")
        w = w - lr * gw
        b = b - lr * gb
        g = _val_g(phi_v @ w + b, yv, y_max)
        history.append(g)
        if g > best[0]:
            best = (g, w.copy(), b, epoch)
    if not np.all(np.isfinite(w)):
        raise DivergenceError(f"RBFN weights became non-finite by epoch {epochs}")
    _, w_best, b_best, epoch_best = best
    cfg = HyperConfig("RBFN", {"learning_rate": lr, "gaussian_width": width, "max_epochs": epochs})
    meta = base_meta(
        X, seed, n_centers=int(centers.shape[0]), best_epoch=int(epoch_best),
        best_validation_g=float(best[0]),
    )
    state = {
        "centers": centers,
        "weights": w_best,
        "bias": np.array(b_best),
        "validation_g": np.array(history),
    }
    return RbfnModel(cfg, state, meta)


# --------------------------------------------------------------------------
# feed-forward network


def ffnn_forward(layers, X):
    """Returns the output and the list of hidden activations."""
    acts = [X]
    h = X
    for W, c in layers[:-1]:
        h = np.tanh(h @ W + c)
        acts.append(h)
    W, c = layers[-1]
    return (h @ W + c).ravel(), acts


def ffnn_loss_and_grad(layers, X, y):
    """Half mean squared error and per-layer (dW, db) gradients."""
    out, acts = ffnn_forward(layers, X)
    m = y.shape[0]
    r = out - y
    loss = 0.5 * float(r @ r) / m
    delta = (r / m)[:, None]
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(0)))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
    grads.reverse()
    return loss, grads


def init_layers(n_in, hidden_layers, nodes, rng, zeros=False):
    sizes = [n_in] + [nodes] * hidden_layers + [1]
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        if zeros:
            W = np.zeros((a, b))
        else:
            lim = np.sqrt(6.0 / (a + b))
            W = rng.uniform(-lim, lim, (a, b))
        layers.append((W, np.zeros(b)))
    return layers


def _flatten(layers):
    return np.concatenate([np.concatenate([W.ravel(), c]) for W, c in layers])


def _unflatten(vec, shapes):
    layers, pos = [], 0
    for a, b in shapes:
        W = vec[pos : pos + a * b].reshape(a, b)
        pos += a * b
        c = vec[pos : pos + b]
        pos += b
        layers.append((W, c))
    return layers


@register
class FfnnModel(TrainedModel):
    family = "FFNN"

    def _layers(self):
        return _unflatten(self.state["weights"], self.state["shapes"].tolist())

    def _predict(self, X, groups=None):
        out, _ = ffnn_forward(self._layers(), X)
        return out


def ffnn_fit(X, y, params, seed=0) -> FfnnModel:
    X, y = as_xy(X, y)
    n_hidden = int(params["hidden_layers"])
    nodes = int(params["nodes_per_layer"])
    lr = float(params["learning_rate"])
    epochs = int(params.get("max_epochs", 5000))
    batch = int(params.get("batch_size", 32))
    init = params.get("init", "glorot")
    if n_hidden < 1 or nodes < 1:
        raise ValueError("FFNN needs at least one hidden layer with one node")
    fit_rows, val_rows = split_fit_validation(X.shape[0], seed)
    Xf, yf, Xv, yv = X[fit_rows], y[fit_rows], X[val_rows], y[val_rows]
    y_max = float(np.max(np.abs(y))) or 1.0

    rng = np.random.default_rng([seed, 13])
    layers = init_layers(X.shape[1], n_hidden, nodes, rng, zeros=(init == "zeros"))
    shapes = [W.shape for W, _ in layers]
    best_g = _val_g(ffnn_forward(layers, Xv)[0], yv, y_max)
    best_vec, best_epoch = _flatten(layers), 0
    m = Xf.shape[0]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(m)
        for start in range(0, m, batch):
            rows = order[start : start + batch]
            loss, grads = ffnn_loss_and_grad(layers, Xf[rows], yf[rows])
            if not np.isfinite(loss):
                raise DivergenceError(f"FFNN loss became non-finite at epoch {epoch}")
            layers = [(W - lr * gW, c - lr * gc) for (W, c), (gW, gc) in zip(layers, grads)]
        g = _val_g(ffnn_forward(layers, Xv)[0], yv, y_max)
        if g > best_g:
            best_g, best_vec, best_epoch = g, _flatten(layers), epoch
    if not np.all(np.isfinite(_flatten(layers))):
        raise DivergenceError(f"FFNN weights became non-finite by epoch {epochs}")
    cfg = HyperConfig(
        "FFNN",
        {
            "hidden_layers": n_hidden,
            "nodes_per_layer": nodes,
            "learning_rate": lr,
            "max_epochs": epochs,
            "batch_size": batch,
            "init": init,
        },
    )
    meta = base_meta(X, seed, best_epoch=int(best_epoch), best_validation_g=float(best_g))
    state = {"weights": best_vec, "shapes": np.array(shapes, dtype=np.int64)}
    return FfnnModel(cfg, state, meta)

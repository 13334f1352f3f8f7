"""Epsilon-insensitive support vector regression.

The dual is solved over the 2n variables (alpha, alpha*) with sequential
two-variable updates; the working pair is the maximal violating pair chosen
with second-order information.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .base import HyperConfig, KERNELS, TrainedModel, as_xy, base_meta, register

TAU = 1e-12
KERNEL_DEFAULTS = {
    "LIN": {},
    "POL": {"degree": 2, "coef0": 1.0},
    "TAH": {"kappa": 1.0, "theta": 0.0},
    "RBF": {"gamma": 1.0},
    "VS": {"gamma": 1.0},
}


def _kernel_params(kernel, params):
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    out = dict(KERNEL_DEFAULTS[kernel])
    out.update({k: params[k] for k in out if k in params})
    return out


def kernel_matrix(kernel, A, B, **kp) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError("kernel arguments differ in dimension")
    kp = _kernel_params(kernel, kp)
    if kernel == "LIN":
        return A @ B.T
    if kernel == "POL":
        return (A @ B.T + kp["coef0"]) ** int(kp["degree"])
    if kernel == "TAH":
        return np.tanh(kp["kappa"] * (A @ B.T) + kp["theta"])
    if kernel == "RBF":
        d2 = (A**2).sum(1)[:, None] - 2 * A @ B.T + (B**2).sum(1)[None, :]
        return np.exp(-kp["gamma"] * np.maximum(d2, 0.0))
    # VS: exponential of the L1 distance
    out = np.empty((A.shape[0], B.shape[0]))
    for start in range(0, A.shape[0], 256):
        blk = A[start : start + 256]
        out[start : start + blk.shape[0]] = np.abs(blk[:, None, :] - B[None, :, :]).sum(-1)
    return np.exp(-kp["gamma"] * out)


def kernel_eval(kernel, x, y, **kp) -> float:
    return float(kernel_matrix(kernel, np.ravel(x)[None, :], np.ravel(y)[None, :], **kp)[0, 0])


@njit(cache=True)
def _smo(K, y, C, epsilon, tol, max_iter):
    n = y.shape[0]
    m = 2 * n
    z = np.empty(m)
    z[:n] = 1.0
    z[n:] = -1.0
    beta = np.zeros(m)
    G = np.empty(m)
    G[:n] = epsilon - y
    G[n:] = epsilon + y
    src = np.empty(m, np.int64)
    for t in range(n):
        src[t] = t
        src[n + t] = t
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        # maximal violating pair: i by first order, j by second order
        gmax, i = -np.inf, -1
        gmin = np.inf
        for t in range(m):
            v = -z[t] * G[t]
            up = beta[t] < C if z[t] > 0 else beta[t] > 0
            low = beta[t] > 0 if z[t] > 0 else beta[t] < C
            if up and v > gmax:
                gmax, i = v, t
            if low and v < gmin:
                gmin = v
        if gmax - gmin < tol:
            converged = True
            break
        si = src[i]
        best, j = np.inf, -1
        for t in range(m):
            low = beta[t] > 0 if z[t] > 0 else beta[t] < C
            if not low:
                continue
            b = gmax + z[t] * G[t]
            if b <= 0:
                continue
            a = K[si, si] + K[src[t], src[t]] - 2.0 * K[si, src[t]]
            if a <= 0:
                a = TAU
            score = -(b * b) / a
            if score < best:
                best, j = score, t
        sj = src[j]
        quad = K[si, si] + K[sj, sj] - 2.0 * K[si, sj]
        if quad <= 0:
            quad = TAU
        bi, bj = beta[i], beta[j]
        if z[i] != z[j]:
            delta = (-G[i] - G[j]) / quad
            diff = bi - bj
            ni, nj = bi + delta, bj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            delta = (G[i] - G[j]) / quad
            total = bi + bj
            ni, nj = bi - delta, bj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        di, dj = ni - bi, nj - bj
        beta[i], beta[j] = ni, nj
        # Q[t, s] = z_t z_s K[src t, src s]
        ci, cj = z[i] * di, z[j] * dj
        for t in range(m):
            G[t] += z[t] * (ci * K[si, src[t]] + cj * K[sj, src[t]])
    # bias from free variables, else the midpoint of the feasible interval
    acc, n_free = 0.0, 0
    gmax, gmin = -np.inf, np.inf
    for t in range(m):
        v = -z[t] * G[t]
        if 0 < beta[t] < C:
            acc += v
            n_free += 1
        up = beta[t] < C if z[t] > 0 else beta[t] > 0
        low = beta[t] > 0 if z[t] > 0 else beta[t] < C
        if up:
            gmax = max(gmax, v)
        if low:
            gmin = min(gmin, v)
    if n_free > 0:
        bias = acc / n_free
    else:
        gmax = 0.0 if gmax == -np.inf else gmax
        gmin = 0.0 if gmin == np.inf else gmin
        bias = 0.5 * (gmax + gmin)
    return beta[:n].copy(), beta[n:].copy(), bias, it, converged


def solve_svr_dual(K, y, C, epsilon, tol=1e-3, max_iter=None):
    """Return (alpha, alpha_star, bias, iterations, converged)."""
    n = y.shape[0]
    max_iter = int(max_iter or max(10_000_000, 100 * n))
    return _smo(
        np.ascontiguousarray(K, dtype=float), np.ascontiguousarray(y, dtype=float),
        float(C), float(epsilon), float(tol), max_iter,
    )


@register
class SvrModel(TrainedModel):
    family = "SVR"

    def _kp(self):
        return _kernel_params(self.config.params["kernel"], self.config.params)

    def _predict(self, X, groups=None):
        sv = self.state["support_vectors"]
        if sv.shape[0] == 0:
            return np.full(X.shape[0], float(self.state["bias"]))
        K = kernel_matrix(self.config.params["kernel"], X, sv, **self._kp())
        return K @ self.state["dual_coef"] + float(self.state["bias"])

    @property
    def n_support(self) -> int:
        return int(self.state["support_vectors"].shape[0])


def svr_fit(X, y, params, seed=0) -> SvrModel:
    X, y = as_xy(X, y)
    C = float(params["C"])
    eps = float(params["epsilon"])
    kernel = params["kernel"]
    tol = float(params.get("tol", 1e-3))
    if C <= 0:
        raise ValueError("C must be positive")
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    kp = _kernel_params(kernel, params)
    K = kernel_matrix(kernel, X, X, **kp)
    alpha, alpha_star, bias, iters, converged = solve_svr_dual(
        K, y, C, eps, tol=tol, max_iter=params.get("max_iter")
    )
    coef = alpha - alpha_star
    support = np.flatnonzero((alpha > 0) | (alpha_star > 0))
    cfg = HyperConfig("SVR", {"kernel": kernel, "C": C, "epsilon": eps, "tol": tol, **kp})
    meta = base_meta(X, seed, iterations=int(iters), converged=bool(converged))
    state = {
        "support_vectors": X[support],
        "dual_coef": coef[support],
        "alpha": alpha[support],
        "alpha_star": alpha_star[support],
        "support_index": support,
        "bias": np.array(bias),
    }
    return SvrModel(cfg, state, meta)


def kkt_residual(model: SvrModel, X, y) -> float:
    """Largest violation of the dual optimality conditions on the training set.

    Covers the box constraints, the equality constraint and complementary
    slackness against the epsilon tube, using the residual y - f(x).
    """
    X, y = as_xy(X, y)
    n = y.shape[0]
    C = float(model.config.params["C"])
    eps = float(model.config.params["epsilon"])
    alpha = np.zeros(n)
    alpha_star = np.zeros(n)
    idx = model.state["support_index"]
    alpha[idx] = model.state["alpha"]
    alpha_star[idx] = model.state["alpha_star"]
    e = y - model.predict(X)
    viol = [
        np.maximum(0, -alpha).max(initial=0),
        np.maximum(0, alpha - C).max(initial=0),
        np.maximum(0, -alpha_star).max(initial=0),
        np.maximum(0, alpha_star - C).max(initial=0),
        abs(float(alpha.sum() - alpha_star.sum())),
        np.where(alpha < C, np.maximum(0, e - eps), 0).max(initial=0),
        np.where(alpha > 0, np.maximum(0, eps - e), 0).max(initial=0),
        np.where(alpha_star < C, np.maximum(0, -eps - e), 0).max(initial=0),
        np.where(alpha_star > 0, np.maximum(0, e + eps), 0).max(initial=0),
    ]
    return float(max(viol))

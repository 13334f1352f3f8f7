"""Linear mixed model with crossed student and course effects.

Fixed effects carry a flat prior; every random-effect term is Gaussian with
its own variance. Variances are estimated by EM over Henderson's mixed
model equations (the REML flavour, since the flat prior integrates the
fixed effects out), and predictions use the posterior-mode effects.
"""
from __future__ import annotations

import warnings

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lapack

from .base import GroupStructure, HyperConfig, TrainedModel, as_xy, base_meta, register

VAR_FLOOR = 1e-6
RIDGE = 1e-8
PIVOT_TOL = 1e-12


def _codes(labels):
    uniq, inv = np.unique(np.asarray(labels).astype(str), return_inverse=True)
    return uniq, inv.astype(np.int64)


def _lookup(labels, query):
    """Position of each query label in sorted ``labels`` and whether it exists."""
    query = np.asarray(query).astype(str)
    if labels.size == 0:
        return np.zeros(query.size, dtype=np.int64), np.zeros(query.size, dtype=bool)
    pos = np.clip(np.searchsorted(labels, query), 0, labels.size - 1)
    return pos, labels[pos] == query


def _cholesky(Cm, flags):
    """Lower Cholesky factor, ridge-stabilized when the system is singular.

    Exactly collinear columns often survive factorization with round-off
    sized pivots, so tiny pivots count as singular too.
    """
    try:
        cf = cho_factor(Cm, lower=True)
        pivots = np.diag(cf[0]) ** 2
        if pivots.min() > PIVOT_TOL * Cm.diagonal().max():
            return cf
    except LinAlgError:
        pass
    flags["ridge"] = True
    Cm = Cm + RIDGE * np.trace(Cm) / Cm.shape[0] * np.eye(Cm.shape[0])
    return cho_factor(Cm, lower=True)


def _factor(Cm, flags):
    """Cholesky factor and the diagonal of the inverse."""
    cf = _cholesky(Cm, flags)
    inv, info = lapack.dpotri(cf[0], lower=1)
    if info != 0:
        raise LinAlgError("mixed-model equations could not be inverted")
    return cf, np.diag(inv).copy()


def _design(X, stud, course, n_students, n_courses, slope_cols):
    """Random-effect design and the term each column belongs to."""
    n = X.shape[0]
    blocks = []
    terms = []
    Zs = np.zeros((n, n_students))
    Zs[np.arange(n), stud] = 1.0
    blocks.append(Zs)
    terms.append(np.zeros(n_students, dtype=np.int64))
    Zc = np.zeros((n, n_courses))
    Zc[np.arange(n), course] = 1.0
    blocks.append(Zc)
    terms.append(np.ones(n_courses, dtype=np.int64))
    for t, col in enumerate(slope_cols):
        blocks.append(Zc * X[:, [col]])
        terms.append(np.full(n_courses, 2 + t, dtype=np.int64))
    return np.hstack(blocks), np.concatenate(terms)


@register
class MixedModel(TrainedModel):
    family = "MLM_RI"
    needs_groups = True

    def _predict(self, X, groups=None):
        beta = self.state["beta"]
        out = beta[0] + X @ beta[1:]
        if groups is None:
            return out
        s_labels, c_labels = self.state["student_labels"], self.state["course_labels"]
        s_eff, c_eff = self.state["student_effects"], self.state["course_effects"]
        slopes = self.state["course_slopes"]  # (n_courses, n_slopes)
        slope_cols = self.state["slope_columns"]
        s_pos, s_hit = _lookup(s_labels, groups.student)
        c_pos, c_hit = _lookup(c_labels, groups.course)
        # unseen groups contribute zero
        out = out + np.where(s_hit, s_eff[s_pos], 0.0) + np.where(c_hit, c_eff[c_pos], 0.0)
        for t, col in enumerate(slope_cols):
            out = out + np.where(c_hit, slopes[c_pos, t], 0.0) * X[:, col]
        return out

    @property
    def variance_components(self) -> dict:
        names = ["student", "course"] + [f"course_slope_{c}" for c in self.state["slope_columns"]]
        return dict(zip(names, self.state["variances"].tolist()))

    @property
    def residual_variance(self) -> float:
        return float(self.state["residual_variance"])


@register
class MixedSlopesModel(MixedModel):
    family = "MLM_RS"


def mlm_fit(
    X, y, groups: GroupStructure, variant="RI", slope_columns=(), seed=0,
    tol=1e-6, max_iter=2000,
):
    """Fit random intercepts (RI) or intercepts plus course slopes (RS).

    ``slope_columns`` lists the feature indices that get a random slope by
    course under RS; RI ignores it.
    """
    X, y = as_xy(X, y)
    if groups is None or len(groups) != X.shape[0]:
        raise ValueError("groups must cover every row")
    if variant not in ("RI", "RS"):
        raise ValueError(f"unknown variant {variant!r}")
    slope_cols = tuple(int(c) for c in slope_columns) if variant == "RS" else ()
    s_labels, stud = _codes(groups.student)
    c_labels, course = _codes(groups.course)
    n, p = X.shape
    Xf = np.hstack([np.ones((n, 1)), X])
    pf = Xf.shape[1]
    Z, term = _design(X, stud, course, len(s_labels), len(c_labels), slope_cols)
    n_terms = 2 + len(slope_cols)
    W = np.hstack([Xf, Z])
    WtW = W.T @ W
    Wty = W.T @ y
    q = Z.shape[1]

    # start from OLS residual variance split evenly
    beta_ols, *_ = np.linalg.lstsq(Xf, y, rcond=None)
    resid_var = max(float(np.var(y - Xf @ beta_ols)), VAR_FLOOR)
    theta = np.append(np.full(n_terms, max(resid_var / (n_terms + 1), VAR_FLOOR)), resid_var)
    flags = {"ridge": False}

    def em_step(theta):
        sig2, sig_e = theta[:-1], theta[-1]
        D = np.zeros(pf + q)
        D[pf:] = sig_e / sig2[term]
        cf, Cinv_diag = _factor(WtW + np.diag(D), flags)
        sol = cho_solve(cf, Wty)
        u = sol[pf:]
        resid = y - W @ sol
        # sigma_e^2 * C^{-1} is the posterior covariance of the effects
        tr_u = Cinv_diag[pf:] * sig_e
        out = np.empty_like(theta)
        for k in range(n_terms):
            sel = term == k
            out[k] = (u[sel] @ u[sel] + tr_u[sel].sum()) / sel.sum()
        # tr(C^{-1} W'W) = (p + q) - tr(C^{-1} D)
        tr_fit = (pf + q) - float((Cinv_diag * D).sum())
        out[-1] = (resid @ resid + sig_e * tr_fit) / n
        return np.maximum(out, VAR_FLOOR)

    def rel_change(a, b):
        # relative to the total variance: a component drifting to zero
        # converges sublinearly and would never meet a per-component test
        return float(np.max(np.abs(b - a)) / a.sum())

    # SQUAREM-accelerated EM; every accepted point is followed by a plain EM
    # step, so the stopping rule is the ordinary EM relative change.
    converged = False
    it = 0
    while it < max_iter:
        t1 = em_step(theta)
        it += 1
        if rel_change(theta, t1) < tol:
            theta, converged = t1, True
            break
        t2 = em_step(t1)
        it += 1
        r = t1 - theta
        v = t2 - t1 - r
        if float(v @ v) > 0:
            step = -np.sqrt(float(r @ r) / float(v @ v))
            step = min(step, -1.0)
            cand = np.maximum(theta - 2 * step * r + step * step * v, VAR_FLOOR)
            theta = em_step(cand)
            it += 1
        else:
            theta = t2
    sig2, sig_e = theta[:-1], theta[-1]

    D = np.zeros(pf + q)
    D[pf:] = sig_e / sig2[term]
    sol = cho_solve(_cholesky(WtW + np.diag(D), flags), Wty)
    ridge_used = flags["ridge"]
    if ridge_used:
        warnings.warn("singular mixed-model equations; ridge-stabilized", RuntimeWarning)
    beta, u = sol[:pf], sol[pf:]
    n_s, n_c = len(s_labels), len(c_labels)
    slopes = u[n_s + n_c :].reshape(len(slope_cols), n_c).T if slope_cols else np.zeros((n_c, 0))
    family = "MLM_RI" if variant == "RI" else "MLM_RS"
    cfg = HyperConfig(family, {"slope_columns": list(slope_cols)} if variant == "RS" else {})
    meta = base_meta(
        X, seed, iterations=int(it), converged=bool(converged), ridge_stabilized=bool(ridge_used)
    )
    state = {
        "beta": beta,
        "student_labels": s_labels,
        "course_labels": c_labels,
        "student_effects": u[:n_s],
        "course_effects": u[n_s : n_s + n_c],
        "course_slopes": slopes,
        "slope_columns": np.array(slope_cols, dtype=np.int64),
        "variances": sig2,
        "residual_variance": np.array(sig_e),
    }
    cls = MixedModel if variant == "RI" else MixedSlopesModel
    return cls(cfg, state, meta)

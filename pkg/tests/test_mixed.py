import numpy as np
import pytest

from delaybench.models import GroupStructure, mlm_fit


def _ols(X, y):
    Xf = np.column_stack([np.ones(len(y)), X])
    return np.linalg.lstsq(Xf, y, rcond=None)[0]


def test_no_group_variance_matches_ols():
    r = np.random.default_rng(0)
    n = 2000
    X = r.normal(size=(n, 3))
    y = 0.4 + X @ [0.5, -0.2, 0.1] + 0.3 * r.normal(size=n)
    # well-populated groups keep the chance group variance near zero
    groups = GroupStructure(r.integers(0, 10, n), r.integers(0, 5, n))
    model = mlm_fit(X, y, groups, "RI")
    assert np.abs(model.state["beta"] - _ols(X, y)).max() < 1e-3


def test_single_group_matches_pooled_regression():
    r = np.random.default_rng(1)
    n = 200
    X = r.normal(size=(n, 2))
    y = 1.0 + X @ [0.3, 0.6] + r.normal(size=n)
    groups = GroupStructure(np.zeros(n, dtype=int), np.zeros(n, dtype=int))
    model = mlm_fit(X, y, groups, "RI")
    Xf = np.column_stack([np.ones(n), X])
    np.testing.assert_allclose(model.predict(X, groups), Xf @ _ols(X, y), atol=1e-4)


def _grouped(seed, n=2000, slope_sd=0.0):
    r = np.random.default_rng(seed)
    n_s, n_c = 200, 20
    stud, course = r.integers(0, n_s, n), r.integers(0, n_c, n)
    a = r.normal(0, 0.5, n_s)
    b = r.normal(0, 0.5, n_c)
    s = r.normal(0, slope_sd, n_c)
    X = r.normal(size=(n, 2))
    y = X @ [0.3, -0.4] + a[stud] + b[course] + s[course] * X[:, 0] + 0.3 * r.normal(size=n)
    return X, y, GroupStructure(stud, course)


def test_recovers_intercept_sd():
    X, y, groups = _grouped(2)
    model = mlm_fit(X, y, groups, "RI")
    assert model.meta["converged"]
    sd = np.sqrt(model.variance_components["student"])
    assert abs(sd - 0.5) <= 0.1


def test_random_slopes_by_course():
    X, y, groups = _grouped(3, slope_sd=0.4)
    ri = mlm_fit(X, y, groups, "RI")
    rs = mlm_fit(X, y, groups, "RS", slope_columns=[0])
    comps = rs.variance_components
    assert set(comps) == {"student", "course", "course_slope_0"}
    assert comps["course_slope_0"] > 0.05
    mse = lambda m: np.mean((m.predict(X, groups) - y) ** 2)
    assert mse(rs) < mse(ri)


def test_unseen_groups_get_zero_effects():
    X, y, groups = _grouped(4, n=400)
    model = mlm_fit(X, y, groups, "RI")
    fresh = GroupStructure(np.full(5, 10_000), np.full(5, 10_000))
    beta = model.state["beta"]
    np.testing.assert_allclose(model.predict(X[:5], fresh), beta[0] + X[:5] @ beta[1:])


def test_singular_design_is_ridge_stabilized():
    r = np.random.default_rng(5)
    n = 100
    x = r.normal(size=n)
    X = np.column_stack([x, x])
    y = x + r.normal(size=n)
    groups = GroupStructure(r.integers(0, 5, n), r.integers(0, 3, n))
    with pytest.warns(RuntimeWarning):
        model = mlm_fit(X, y, groups, "RI")
    assert model.meta["ridge_stabilized"]
    assert np.all(np.isfinite(model.predict(X, groups)))


def test_groups_must_cover_rows():
    with pytest.raises(ValueError):
        mlm_fit(np.zeros((5, 1)), np.zeros(5), GroupStructure([0, 1], [0, 1]))

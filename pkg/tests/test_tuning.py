import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delaybench import metrics, models
from delaybench.models import HyperConfig
from delaybench.tuning import (
    DEFAULT_GRIDS,
    HyperGrid,
    TuningError,
    cross_validate,
    default_grid,
    derive_seed,
    grid_for,
    kfold_indices,
    load_grid_overrides,
)


# --------------------------------------------------------------------------
# folds


def test_fold_sizes_of_protocol():
    assert [f.size for f in kfold_indices(888, 4, 0)] == [222] * 4
    assert sorted(f.size for f in kfold_indices(885, 4, 0)) == [221, 221, 221, 222]
    assert [f.size for f in kfold_indices(10, 2, 3)] == [5, 5]


@given(st.integers(2, 300), st.integers(2, 12), st.integers(0, 2**32))
def test_folds_partition_rows(n, K, seed):
    if n < K:
        with pytest.raises(ValueError):
            kfold_indices(n, K, seed)
        return
    folds = kfold_indices(n, K, seed)
    sizes = [f.size for f in folds]
    assert max(sizes) - min(sizes) <= 1
    np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(n))
    again = kfold_indices(n, K, seed)
    for a, b in zip(folds, again):
        np.testing.assert_array_equal(a, b)


def test_fold_count_bounds():
    with pytest.raises(ValueError):
        kfold_indices(10, 1, 0)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert 0 <= derive_seed("x") < 2**63


# --------------------------------------------------------------------------
# grids


def test_product_is_row_major():
    grid = HyperGrid.product("KNN", {"k": [1, 2], "weighting": ["uniform", "inverse_distance"]})
    assert [tuple(c.params.values()) for c in grid] == [
        (1, "uniform"), (1, "inverse_distance"), (2, "uniform"), (2, "inverse_distance"),
    ]


def test_grid_validation():
    with pytest.raises(ValueError):
        HyperGrid("KNN", ())
    with pytest.raises(ValueError):
        HyperGrid("KNN", (HyperConfig("NB", {"n_bins": 4}),))


def test_default_grids():
    knn = default_grid("KNN")
    assert sorted({c.params["k"] for c in knn}) == [1, 3, 5, 9, 15, 25]
    assert {c.params["weighting"] for c in knn} == {"uniform", "inverse_distance"}
    assert len(knn) == 12
    assert [c.params["n_bins"] for c in default_grid("NB")] == [4, 8, 16, 32, 64]
    assert len(default_grid("MLM-RI")) == 1 and len(default_grid("MLM_RS")) == 1
    assert {c.params["kernel"] for c in default_grid("SVR")} == {"LIN", "POL", "TAH", "RBF", "VS"}
    with pytest.raises(ValueError):
        default_grid("XGB")


@pytest.mark.parametrize("variant", sorted(DEFAULT_GRIDS))
def test_default_grid_configs_fit(variant):
    r = np.random.default_rng(0)
    X, y = r.normal(size=(70, 3)), r.uniform(-1, 1, 70)
    groups = models.GroupStructure(r.integers(0, 6, 70), r.integers(0, 3, 70))
    cfg = default_grid(variant, n_features=3).configs[0]
    if cfg.family in ("RBFN", "FFNN"):
        cfg = HyperConfig(cfg.family, {**cfg.params, "max_epochs": 3})
    if cfg.family in ("RF", "GBM"):
        cfg = HyperConfig(cfg.family, {**cfg.params, "n_trees": 3})
    model = models.fit(cfg, X, y, seed=1, groups=groups, feature_names=["a", "b", "c"])
    assert np.all(np.isfinite(model.predict(X, groups)))


def test_rf_grid_respects_feature_count():
    assert {c.params["n_split_vars"] for c in default_grid("RF", n_features=2)} == {2}
    assert {c.params["n_split_vars"] for c in default_grid("RF", n_features=1)} == {1}


def test_override_file(tmp_path):
    path = tmp_path / "grids.toml"
    path.write_text('[grids.KNN]\nk = [3, 7]\nweighting = "uniform"\n\n[grids.SVR-RBF]\nC = [1.0]\nepsilon = [0.1]\ngamma = [2.0]\n')
    overrides = load_grid_overrides(path)
    knn = grid_for("KNN", overrides)
    assert [c.params for c in knn] == [{"k": 3, "weighting": "uniform"}, {"k": 7, "weighting": "uniform"}]
    rbf = grid_for("SVR-RBF", overrides)
    assert len(rbf) == 1 and rbf.configs[0].params["kernel"] == "RBF"
    assert len(grid_for("NB", overrides)) == 5


def test_override_file_rejects_unknown_name(tmp_path):
    path = tmp_path / "grids.toml"
    path.write_text("[grids.BOGUS]\nk = [1]\n")
    with pytest.raises(ValueError):
        load_grid_overrides(path)


# --------------------------------------------------------------------------
# cross-validation


def _smooth(seed, n=400):
    r = np.random.default_rng(seed)
    x = r.uniform(size=(n, 1))
    y = np.sin(8 * np.pi * x[:, 0]) + 0.3 * r.normal(size=n)
    return x, y / np.abs(y).max()


def test_singleton_grid():
    X, y = _smooth(0, 120)
    grid = HyperGrid.product("KNN", {"k": 5})
    res = cross_validate("KNN", grid, X, y, K=4, seed=2)
    assert res.best_config == grid.configs[0]
    assert len(res.scores[0].fold_g) == 4
    assert res.mean_g[0] == pytest.approx(np.mean(res.scores[0].fold_g), abs=0)


def test_planted_knn_optimum():
    grid = HyperGrid.product("KNN", {"k": [1, 5, 50]})
    picks = [cross_validate("KNN", grid, *_smooth(s), seed=s).best_config.params["k"] for s in range(10)]
    assert picks.count(5) >= 8


def _hand_g(pred, y, y_max):
    late_p, late_y = pred > 0, y > 0
    tp = np.sum(late_p & late_y)
    tn = np.sum(~late_p & ~late_y)
    fp = np.sum(late_p & ~late_y)
    fn = np.sum(~late_p & late_y)
    f1 = lambda a: 2 * a / (2 * a + fp + fn) if (2 * a + fp + fn) else 0.0
    e = np.mean(np.abs(pred - y)) / y_max
    return ((1 - e) + f1(tp) + f1(tn)) / 3


def test_matches_naive_fold_loop():
    r = np.random.default_rng(3)
    X = r.normal(size=(90, 2))
    y = np.tanh(X[:, 0]) + 0.2 * r.normal(size=90)
    grid = HyperGrid.product("KNN", {"k": [1, 4, 9]})
    res = cross_validate("KNN", grid, X, y, K=3, seed=11, y_max=1.0)
    folds = kfold_indices(90, 3, 11)
    for cfg, score in zip(grid, res.scores):
        gs = []
        for test in folds:
            train = np.setdiff1d(np.arange(90), test)
            model = models.knn_fit(X[train], y[train], cfg.params)
            gs.append(_hand_g(model.predict(X[test]), y[test], 1.0))
        assert score.mean_g == pytest.approx(np.mean(gs), abs=1e-12)


def test_best_is_table_maximum_and_ties_go_first():
    X, y = _smooth(4, 100)
    grid = HyperGrid.product("KNN", {"k": [3, 3, 1]})
    res = cross_validate("KNN", grid, X, y, seed=0)
    assert res.mean_g[res.best_index] == res.mean_g.max()
    assert res.best_index == 0


def test_parallel_equals_serial():
    X, y = _smooth(5, 150)
    grid = HyperGrid.product("KNN", {"k": [1, 3, 7], "weighting": ["uniform", "inverse_distance"]})
    serial = cross_validate("KNN", grid, X, y, seed=7, jobs=1)
    parallel = cross_validate("KNN", grid, X, y, seed=7, jobs=2)
    assert serial.table() == parallel.table()
    assert [s.fold_e for s in serial.scores] == [s.fold_e for s in parallel.scores]


def test_cv_uses_metrics_module(monkeypatch):
    calls = []
    real = metrics.evaluate

    def spy(*args):
        calls.append(args[2])
        return real(*args)

    monkeypatch.setattr(metrics, "evaluate", spy)
    X, y = _smooth(6, 80)
    cross_validate("KNN", HyperGrid.product("KNN", {"k": [1, 3]}), X, y, K=4, seed=0, y_max=2.5)
    assert calls == [2.5] * 8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_config_is_excluded():
    r = np.random.default_rng(7)
    X, y = r.normal(size=(60, 2)), r.uniform(-1, 1, 60)
    grid = HyperGrid.product(
        "RBFN", {"learning_rate": [1e8, 0.1], "gaussian_width": [5.0], "max_epochs": [300], "k_max": [4]}
    )
    res = cross_validate("RBFN", grid, X, y, seed=1)
    assert res.scores[0].mean_g == -np.inf and "epoch" in res.scores[0].error
    assert res.best_index == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_all_divergent_raises():
    r = np.random.default_rng(8)
    X, y = r.normal(size=(60, 2)), r.uniform(-1, 1, 60)
    grid = HyperGrid.product("RBFN", {"learning_rate": [1e8], "gaussian_width": [5.0], "max_epochs": [300], "k_max": [4]})
    with pytest.raises(TuningError):
        cross_validate("RBFN", grid, X, y, seed=1).best_config

import numpy as np
import pytest

from delaybench import models
from delaybench.models import (
    DivergenceError,
    GroupStructure,
    HyperConfig,
    knn_fit,
    load_model,
    nb_fit,
    save_model,
)
from delaybench.models.neighbors import bin_edges

CONFIGS = {
    "MLM_RI": {},
    "MLM_RS": {},
    "NB": {"n_bins": 4},
    "KNN": {"k": 3, "weighting": "inverse_distance"},
    "RBFN": {"learning_rate": 0.3, "gaussian_width": 0.5, "max_epochs": 40},
    "FFNN": {"hidden_layers": 2, "nodes_per_layer": 4, "learning_rate": 0.05, "max_epochs": 20},
    "RT": {"min_node_size": 5, "minprop": 0.1, "alpha": 0.5},
    "RF": {"n_trees": 15, "min_node_size": 3, "n_split_vars": 2, "n_random_cuts": 2},
    "GBM": {"n_trees": 15, "max_depth": 2, "learning_rate": 0.1, "subsample": 0.8, "loss": "absolute"},
    "SVR": {"kernel": "RBF", "C": 1.0, "epsilon": 0.05, "gamma": 1.0},
}
NAMES = ["clicks_assignment", "interval_days", "other"]


@pytest.fixture(scope="module")
def toy():
    r = np.random.default_rng(5)
    n = 80
    X = r.normal(size=(n, 3))
    groups = GroupStructure(r.integers(0, 8, n), r.integers(0, 4, n))
    y = np.tanh(X[:, 0] - 0.5 * X[:, 1]) + 0.1 * r.normal(size=n)
    return X, y / np.abs(y).max(), groups


def _fit(family, toy, seed=3):
    X, y, groups = toy
    return models.fit(HyperConfig(family, CONFIGS[family]), X, y, seed=seed, groups=groups, feature_names=NAMES)


@pytest.mark.parametrize("family", sorted(CONFIGS))
def test_fit_predict_contract(family, toy, tmp_path):
    X, y, groups = toy
    model = _fit(family, toy)
    pred = models.predict(model, X, groups)
    assert pred.shape == (X.shape[0],) and np.all(np.isfinite(pred))

    # deterministic given data, config and seed
    np.testing.assert_array_equal(models.predict(_fit(family, toy), X, groups), pred)

    # predict leaves the model untouched
    before = {k: np.array(v, copy=True) for k, v in model.state.items()}
    models.predict(model, X[:7], groups.subset(np.arange(7)))
    for k, v in model.state.items():
        np.testing.assert_array_equal(v, before[k])

    path = save_model(model, tmp_path / f"{family}.npz")
    again = load_model(path)
    assert again.family == model.family and again.config == model.config
    np.testing.assert_array_equal(models.predict(again, X, groups), pred)

    with pytest.raises(ValueError):
        model.predict(X[:, :2], groups)


def test_non_finite_prediction_is_divergence():
    model = knn_fit([[0.0], [1.0]], [0.0, 1.0], {"k": 1})
    model.state["y"] = np.array([np.nan, 1.0])
    with pytest.raises(DivergenceError):
        model.predict([[0.0]])


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        HyperConfig("XGB", {})


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.array('{"format": "other"}'))
    with pytest.raises(models.ModelError):
        load_model(path)


# --------------------------------------------------------------------------
# naive Bayes


def test_nb_bin_edges_and_midpoints():
    y = np.linspace(-1, 1, 41)
    np.testing.assert_allclose(bin_edges(y, 2), [-1, 0, 1])
    X = y[:, None]
    model = nb_fit(X, y, {"n_bins": 2})
    np.testing.assert_allclose(model.state["midpoints"], [-0.5, 0.5])


def test_nb_separating_feature():
    r = np.random.default_rng(0)
    x = r.uniform(-1, 1, 300)
    y = np.sign(x) * r.uniform(0.2, 1, 300)
    X = np.column_stack([x, r.normal(size=300)])
    pred = nb_fit(X, y, {"n_bins": 2}).predict(X)
    assert np.mean((pred > 0) == (y > 0)) >= 0.95


def test_nb_constant_target():
    X = np.random.default_rng(1).normal(size=(20, 2))
    pred = nb_fit(X, np.full(20, 0.3), {"n_bins": 4}).predict(X)
    assert np.all(pred == 0.3)


def test_nb_preconditions():
    with pytest.raises(ValueError):
        nb_fit(np.zeros((10, 1)), np.arange(10.0), {"n_bins": 1})
    with pytest.raises(ValueError):
        nb_fit(np.zeros((4, 1)), np.arange(4.0), {"n_bins": 4})


# --------------------------------------------------------------------------
# k nearest neighbours


def test_knn_hand_examples():
    X, y = [[0.0], [1.0]], [0.0, 10.0]
    assert knn_fit(X, y, {"k": 2}).predict([[0.4]])[0] == pytest.approx(5.0)
    inv = knn_fit(X, y, {"k": 2, "weighting": "inverse_distance"})
    assert inv.predict([[0.4]])[0] == pytest.approx(4.0)


@pytest.mark.parametrize("weighting", ["uniform", "inverse_distance"])
def test_knn_identity_on_training_points(weighting):
    r = np.random.default_rng(2)
    X, y = r.normal(size=(30, 3)), r.normal(size=30)
    np.testing.assert_allclose(knn_fit(X, y, {"k": 1, "weighting": weighting}).predict(X), y)


def test_knn_inverse_exact_duplicate_returns_target():
    X = np.array([[0.0], [1.0], [2.0]])
    model = knn_fit(X, [1.0, 2.0, 3.0], {"k": 3, "weighting": "inverse_distance"})
    assert model.predict([[1.0]])[0] == 2.0


def test_knn_tie_prefers_lower_index():
    model = knn_fit([[-1.0], [1.0]], [5.0, 7.0], {"k": 1})
    assert model.predict([[0.0]])[0] == 5.0


def test_knn_k_bounds():
    with pytest.raises(ValueError):
        knn_fit(np.zeros((3, 1)), np.zeros(3), {"k": 4})
    with pytest.raises(ValueError):
        knn_fit(np.zeros((3, 1)), np.zeros(3), {"k": 0})

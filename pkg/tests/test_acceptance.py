"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; conftest prints the collected lines at
the end of the session. The last two criteria run the full pipeline and take
most of the suite's wall time.
"""
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.stats import rankdata

from delaybench import clustering, data, metrics
from delaybench.cli import RunConfig, run_experiment
from delaybench.models import (
    GroupStructure,
    feature_importance,
    gbm_fit,
    kkt_residual,
    max_sel_rank_split,
    mlm_fit,
    rf_fit,
    rt_fit,
    svr_fit,
)
from delaybench.models.neural import (
    _flatten,
    _unflatten,
    ffnn_loss_and_grad,
    init_layers,
    rbfn_loss_and_grad,
)
from delaybench.report import cell_stats, emit_tables
from delaybench.tuning import kfold_indices

RESULTS: list[str] = []


@contextmanager
def criterion(number, title):
    t0 = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        line = f"criterion {number:>2} FAIL  {title} ({time.perf_counter() - t0:.1f}s): {exc}".splitlines()[0]
        RESULTS.append(line)
        print(line)
        raise
    detail = f"; {', '.join(notes)}" if notes else ""
    line = f"criterion {number:>2} PASS  {title} ({time.perf_counter() - t0:.1f}s{detail})"
    RESULTS.append(line)
    print(line)


# --------------------------------------------------------------------------
# 1


def _naive_metrics(pred, y, y_max):
    tp = tn = fp = fn = 0
    abs_err = 0.0
    for p, t in zip(pred.tolist(), y.tolist()):
        if p > 0 and t > 0:
            tp += 1
        elif p <= 0 and t <= 0:
            tn += 1
        elif p > 0:
            fp += 1
        else:
            fn += 1
        abs_err += abs(p - t)
    div = lambda a, b: a / b if b else 0.0
    e = abs_err / len(y) / y_max
    f_tp = div(2 * tp, 2 * tp + fp + fn)
    f_tn = div(2 * tn, 2 * tn + fp + fn)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return {
        "mae": e,
        "f_tp": f_tp,
        "f_tn": f_tn,
        "g": ((1 - e) + f_tp + f_tn) / 3,
        "ppv": div(tp, tp + fp),
        "tpr": div(tp, tp + fn),
        "acc": div(tp + tn, len(y)),
        "mcc": (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0,
    }


def test_c01_metric_oracle():
    with criterion(1, "metric oracle, 1000 random vectors") as notes:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            y = rng.normal(size=n)
            pred = rng.normal(size=n)
            # exact zeros exercise the timely side of the threshold
            pred[rng.random(n) < 0.1] = 0.0
            y_max = float(np.abs(y).max()) or 1.0
            got = metrics.evaluate(pred, y, y_max).as_dict()
            for key, value in _naive_metrics(pred, y, y_max).items():
                worst = max(worst, abs(got[key] - value))
        elapsed = time.perf_counter() - t0
        notes.append(f"max deviation {worst:.1e}")
        assert worst <= 1e-12
        assert elapsed < 5.0


# --------------------------------------------------------------------------
# 2


def test_c02_protocol_shape():
    with criterion(2, "split and fold sizes, test overlap") as notes:
        for seed in range(5):
            plan = data.make_split_plan(1107, seed, 10, 0.8)
            assert all(tr.size == 885 and te.size == 222 for tr, te in plan.partitions)
        assert [f.size for f in kfold_indices(888, 4, 0)] == [222] * 4
        means = [data.overlap_stats(data.make_split_plan(1107, s, 10, 0.8))[0] for s in range(50)]
        mean = float(np.mean(means))
        notes.append(f"mean overlap {mean:.2f}")
        assert abs(mean - 44.6) <= 3.0


# --------------------------------------------------------------------------
# 3


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _central(f, theta, h=1e-6):
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def test_c03_gradient_checks():
    with criterion(3, "FFNN and RBFN gradients vs finite differences") as notes:
        t0 = time.perf_counter()
        worst = 0.0
        for point in range(10):
            r = np.random.default_rng(point)
            X, y = r.normal(size=(15, 3)), r.normal(size=15)
            layers = [(W, r.normal(scale=0.3, size=c.shape)) for W, c in init_layers(3, 2, 5, r)]
            shapes = [W.shape for W, _ in layers]
            analytic = _flatten(ffnn_loss_and_grad(layers, X, y)[1])
            numeric = _central(lambda t: ffnn_loss_and_grad(_unflatten(t, shapes), X, y)[0], _flatten(layers))
            worst = max(worst, _rel_err(analytic, numeric))

            phi = r.uniform(size=(15, 4))
            theta = r.normal(size=5)
            loss = lambda t: rbfn_loss_and_grad(t[:4], t[4], phi, y)[0]
            _, gw, gb = rbfn_loss_and_grad(theta[:4], theta[4], phi, y)
            worst = max(worst, _rel_err(np.append(gw, gb), _central(loss, theta)))
        notes.append(f"max relative error {worst:.1e}")
        assert worst < 1e-4
        assert time.perf_counter() - t0 < 30


# --------------------------------------------------------------------------
# 4


def test_c04_svr():
    with criterion(4, "SVR KKT residuals and linear tube") as notes:
        r = np.random.default_rng(4)
        X = r.normal(size=(200, 3))
        y = np.tanh(X[:, 0] - 0.5 * X[:, 1] * X[:, 2]) + 0.1 * r.normal(size=200)
        extra = {"POL": {"degree": 2, "coef0": 1.0}, "TAH": {"kappa": 0.1, "theta": -1.0},
                 "RBF": {"gamma": 0.5}, "VS": {"gamma": 0.5}}
        residuals = {}
        for kernel in ("LIN", "POL", "TAH", "RBF", "VS"):
            model = svr_fit(X, y, {"kernel": kernel, "C": 1.0, "epsilon": 0.05, **extra.get(kernel, {})})
            assert model.meta["converged"]
            residuals[kernel] = kkt_residual(model, X, y)
        notes.append("KKT max " + f"{max(residuals.values()):.1e}")
        assert max(residuals.values()) < 1e-3

        Xl = r.uniform(-1, 1, size=(200, 3))
        yl = Xl @ [0.4, -0.3, 0.2] + 0.1
        model = svr_fit(Xl, yl, {"kernel": "LIN", "C": 100.0, "epsilon": 0.02})
        worst = float(np.abs(model.predict(Xl) - yl).max())
        notes.append(f"linear residual max {worst:.4f}")
        assert worst <= 0.02 + 1e-3


# --------------------------------------------------------------------------
# 5


def _exhaustive_stat(x, y, minprop):
    n = len(x)
    a = rankdata(y)
    s2 = a.var(ddof=1)
    best = None
    for c in np.unique(x)[:-1]:
        m = int(np.sum(x <= c))
        if m < minprop * n or m > (1 - minprop) * n:
            continue
        stat = abs(a[x <= c].sum() - m * a.mean()) / math.sqrt(m * (n - m) / n * s2)
        if best is None or stat > best[0] + 1e-12:
            best = (stat, c, np.min(x[x > c]))
    return best


def test_c05_rank_split_oracle_and_null_rate():
    with criterion(5, "rank-split oracle and null false-split rate") as notes:
        checked = 0
        for seed in range(300):
            r = np.random.default_rng(seed)
            n = int(r.integers(4, 21))
            x = r.integers(0, 10, n).astype(float)
            y = r.normal(size=n) + 0.5 * x
            minprop = float(r.choice([0.05, 0.1, 0.2]))
            oracle = _exhaustive_stat(x, y, minprop)
            got = max_sel_rank_split(x, y, minprop, alpha=1.0)
            if oracle is None:
                assert got is None
                continue
            assert got is not None and oracle[1] <= got[0] < oracle[2], (seed, oracle, got)
            checked += 1
        false_splits = 0
        for seed in range(100):
            r = np.random.default_rng(10_000 + seed)
            X, y = r.normal(size=(100, 3)), r.normal(size=100)
            false_splits += rt_fit(X, y, {"min_node_size": 5, "minprop": 0.1, "alpha": 0.05}).n_leaves > 1
        notes.append(f"{checked} oracle cases, null rate {false_splits}%")
        assert false_splits <= 10


# --------------------------------------------------------------------------
# 6


def _walk(nodes, root, x):
    i = root
    while nodes["feature"][i] >= 0:
        i = nodes["left"][i] if x[nodes["feature"][i]] <= nodes["threshold"][i] else nodes["right"][i]
    return nodes["value"][i]


def test_c06_ensemble_identities():
    with criterion(6, "RF mean-of-trees, GBM telescoping, monotone GBM loss"):
        r = np.random.default_rng(6)
        X, y = r.normal(size=(150, 4)), r.normal(size=150)
        Q = r.normal(size=(40, 4))
        rf = rf_fit(X, y, {"n_trees": 50, "min_node_size": 3, "n_split_vars": 2, "n_random_cuts": 3}, seed=1)
        for q, got in zip(Q, rf.predict(Q)):
            total = 0.0
            for root in rf.state["roots"]:
                total += _walk(rf.state, root, q)
            assert got == total / rf.state["roots"].size
        params = {"n_trees": 60, "max_depth": 3, "min_samples_split": 2, "learning_rate": 0.1,
                  "subsample": 1.0, "loss": "squared"}
        gbm = gbm_fit(X, y, params, seed=1)
        for q, got in zip(Q, gbm.predict(Q)):
            total = 0.0
            for root in gbm.state["roots"]:
                total += _walk(gbm.state, root, q)
            assert got == gbm.init + gbm.learning_rate * total
        assert np.all(np.diff(gbm.state["train_mse"]) <= 0)


# --------------------------------------------------------------------------
# 7


def test_c07_clustering():
    with criterion(7, "SSE monotonicity, 3-blob k selection, silhouette range") as notes:
        hits = 0
        for seed in range(10):
            r = np.random.default_rng(seed)
            # comparably spaced blobs: a jittered triangle, random size and rotation
            angle = r.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3
            side = r.uniform(12, 20)
            centers = side / np.sqrt(3) * np.column_stack([np.cos(angle), np.sin(angle)])
            centers += r.uniform(-2, 2, size=(3, 2))
            X = np.concatenate([c + r.normal(size=(40, 2)) for c in centers])
            k, _ = clustering.select_cluster_count(X, 2, 8, seed=seed)
            hits += k == 3
            for kk in range(1, 7):
                c = clustering.random_swap(X, kk, swap_iters=20, seed=seed)
                h = c.history
                assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))
                base = clustering.kmeans(X, kk, seed=seed).history
                assert all(b <= a * (1 + 1e-12) for a, b in zip(base, base[1:]))
                if kk >= 2:
                    assert -1.0 <= clustering.silhouette(X, c) <= 1.0
        notes.append(f"k=3 in {hits}/10 seeds")
        assert hits >= 9


# --------------------------------------------------------------------------
# 8


def _hierarchical(seed, n=2000, n_students=200, n_courses=100):
    r = np.random.default_rng(seed)
    stud, course = r.integers(0, n_students, n), r.integers(0, n_courses, n)
    a = r.normal(0, 0.5, n_students)
    b = r.normal(0, 0.5, n_courses)
    slope = r.normal(0, 0.3, n_courses)
    X = r.normal(size=(n, 2))
    y = X @ [0.3, -0.2] + a[stud] + b[course] + slope[course] * X[:, 0] + 0.3 * r.normal(size=n)
    return X, y, GroupStructure(stud, course)


def test_c08_mixed_model_recovery():
    with criterion(8, "mixed-model variance recovery, RS beats RI") as notes:
        t0 = time.perf_counter()
        truth = {"student": 0.5, "course": 0.5, "course_slope_0": 0.3}
        worst, wins = 0.0, 0
        for seed in range(10):
            X, y, groups = _hierarchical(seed)
            comps = mlm_fit(X, y, groups, "RS", slope_columns=[0]).variance_components
            for name, sd in truth.items():
                worst = max(worst, abs(math.sqrt(comps[name]) / sd - 1))
            tr, te = np.arange(1600), np.arange(1600, 2000)
            scale = np.abs(y[tr]).max()
            g = {}
            for variant in ("RI", "RS"):
                model = mlm_fit(X[tr], y[tr] / scale, groups.subset(tr), variant, slope_columns=[0])
                g[variant] = metrics.evaluate(model.predict(X[te], groups.subset(te)), y[te] / scale, 1.0).g
            wins += g["RS"] > g["RI"]
        notes.append(f"worst SD error {100 * worst:.1f}%, RS wins {wins}/10")
        assert worst <= 0.20
        assert wins >= 8
        assert time.perf_counter() - t0 < 120


# --------------------------------------------------------------------------
# 9 and 10

REDUCED_GRIDS = """
[grids.RF]
n_trees = [100]
min_node_size = [5]
n_split_vars = [2]
n_random_cuts = [3]

[grids.GBM]
n_trees = [100]
max_depth = [3]
min_samples_split = [10]
learning_rate = [0.1]
subsample = [0.8]
loss = ["squared"]
"""


def test_c09_predictor_set_ordering(tmp_path):
    with criterion(9, "COMB >= OBJ >= SUBJ for RF and GBM") as notes:
        t0 = time.perf_counter()
        grids = tmp_path / "grids.toml"
        grids.write_text(REDUCED_GRIDS)
        ordered = 0
        for master in range(10):
            cfg = RunConfig(seed=master, variants=("RF", "GBM"), grids=str(grids),
                            out=str(tmp_path / f"seed{master}"), save_models=False, jobs=0)
            cfg.validate()
            report, failed = run_experiment(cfg)
            assert not failed
            ok = True
            for v in ("RF", "GBM"):
                g = {p: cell_stats(report, v, p, "g")[0] for p in ("subj", "obj", "comb")}
                ok &= g["comb"] >= g["obj"] >= g["subj"]
            ordered += ok
        elapsed = time.perf_counter() - t0
        notes.append(f"ordered in {ordered}/10 seeds")
        assert ordered >= 8
        assert elapsed < 15 * 60


def test_c10_interval_days_importance():
    with criterion(10, "interval_days ranks first in RF importance on COMB") as notes:
        firsts = 0
        names = list(data.PredictorSet("comb").columns)
        for seed in range(10):
            ds = data.generate_synthetic(data.SynthConfig(), seed=seed)
            nd = data.apply_normalizer(ds, data.fit_normalizer(ds, "all_rows"))
            X, y = data.project(nd, "comb")
            rf = rf_fit(X, y, {"n_trees": 200, "min_node_size": 5, "n_split_vars": 3, "n_random_cuts": 3}, seed=seed)
            firsts += names[int(np.argmax(feature_importance(rf)))] == "interval_days"
        notes.append(f"first in {firsts}/10 seeds")
        assert firsts >= 9


# --------------------------------------------------------------------------
# 11


def test_c11_end_to_end_determinism(tmp_path):
    with criterion(11, "full default run twice, byte-identical reports") as notes:
        outputs, times = [], []
        for run in ("a", "b"):
            cfg = RunConfig(seed=20240, out=str(tmp_path / run))
            cfg.validate()
            t0 = time.perf_counter()
            report, failed = run_experiment(cfg)
            assert not failed, [c.key for c in failed]
            emit_tables(report, tmp_path / run / "report", "csv")
            times.append(time.perf_counter() - t0)
            outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run / "report").iterdir())})
        notes.append(f"{len(outputs[0])} files, runs took {times[0] / 60:.1f} and {times[1] / 60:.1f} min "
                     f"on {cfg.n_jobs} worker(s)")
        assert outputs[0] == outputs[1]
        assert max(times) < 60 * 60

"""K-fold grid search that picks the configuration with the best mean G."""
from __future__ import annotations

import hashlib
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .models import VARIANTS, DivergenceError, GroupStructure, HyperConfig, ModelError, fit

try:  # Python < 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class TuningError(ModelError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class HyperGrid:
    family: str
    configs: tuple

    def __post_init__(self):
        if not self.configs:
            raise ValueError(f"empty grid for {self.family}")
        for cfg in self.configs:
            if cfg.family != self.family:
                raise ValueError(f"grid for {self.family} holds a {cfg.family} config")

    @classmethod
    def product(cls, family: str, values: dict) -> "HyperGrid":
        """Cartesian product, last declared parameter varying fastest."""
        names = list(values)
        lists = [v if isinstance(v, (list, tuple)) else [v] for v in values.values()]
        configs = tuple(HyperConfig(family, dict(zip(names, combo))) for combo in itertools.product(*lists))
        return cls(family, configs)

    def __len__(self):
        return len(self.configs)

    def __iter__(self):
        return iter(self.configs)


_SVR_BASE = {"C": [0.1, 1.0, 10.0], "epsilon": [0.01, 0.05]}

# keyed by report variant; the families map onto these via VARIANTS
DEFAULT_GRIDS: dict[str, dict] = {
    "MLM-RI": {},
    "MLM-RS": {},
    "NB": {"n_bins": [4, 8, 16, 32, 64]},
    "KNN": {"k": [1, 3, 5, 9, 15, 25], "weighting": ["uniform", "inverse_distance"]},
    "RBFN": {"learning_rate": [0.1, 0.5], "gaussian_width": [0.1, 0.3], "max_epochs": [500]},
    "FFNN": {
        "hidden_layers": [1, 2],
        "nodes_per_layer": [8],
        "learning_rate": [0.05],
        "max_epochs": [1000],
        "batch_size": [32],
    },
    "RT": {"min_node_size": [5, 20], "minprop": [0.1, 0.2], "alpha": [0.05, 0.5]},
    "RF": {"n_trees": [200], "min_node_size": [5], "n_split_vars": [2, 3], "n_random_cuts": [1, 5]},
    "GBM": {
        "n_trees": [200],
        "max_depth": [2, 3],
        "min_samples_split": [10],
        "learning_rate": [0.05, 0.1],
        "subsample": [0.8],
        "loss": ["squared", "absolute"],
    },
    "SVR-LIN": {"kernel": ["LIN"], **_SVR_BASE},
    "SVR-POL": {"kernel": ["POL"], **_SVR_BASE, "degree": [2], "coef0": [1.0]},
    "SVR-TAH": {"kernel": ["TAH"], **_SVR_BASE, "kappa": [0.1, 0.5], "theta": [-1.0]},
    "SVR-RBF": {"kernel": ["RBF"], **_SVR_BASE, "gamma": [0.5, 2.0]},
    "SVR-VS": {"kernel": ["VS"], **_SVR_BASE, "gamma": [0.5, 2.0]},
}


def _family_of(name: str) -> str:
    if name in VARIANTS:
        return VARIANTS[name][0]
    if name in ("MLM_RI", "MLM_RS", "NB", "KNN", "RBFN", "FFNN", "RT", "RF", "GBM", "SVR"):
        return name
    raise ValueError(f"unknown model family or variant {name!r}")


def _fit_to_features(family: str, values: dict, n_features: int | None) -> dict:
    if family == "RF" and n_features is not None:
        kept = [m for m in values["n_split_vars"] if m <= n_features]
        values = {**values, "n_split_vars": kept or [n_features]}
    return values


def default_grid(name: str, n_features: int | None = None) -> HyperGrid:
    """Built-in grid for a family (``"KNN"``) or report variant (``"SVR-RBF"``).

    The bare ``"SVR"`` family chains the five kernel grids. RF drops
    ``n_split_vars`` values above ``n_features`` when that is given.
    """
    family = _family_of(name)
    if family == "SVR" and name == "SVR":
        configs = []
        for variant in ("SVR-LIN", "SVR-POL", "SVR-TAH", "SVR-RBF", "SVR-VS"):
            configs.extend(default_grid(variant).configs)
        return HyperGrid("SVR", tuple(configs))
    key = {"MLM_RI": "MLM-RI", "MLM_RS": "MLM-RS"}.get(name, name)
    values = _fit_to_features(family, DEFAULT_GRIDS[key], n_features)
    return HyperGrid.product(family, values)


def load_grid_overrides(path) -> dict[str, dict]:
    """Read per-variant parameter lists from a TOML file.

    Layout: one table per family or variant under ``[grids]``, e.g.::

        [grids.KNN]
        k = [3, 5]
        weighting = ["uniform"]

    Scalars are treated as one-element lists. An override replaces the
    whole built-in grid for that name.
    """
    with open(Path(path), "rb") as fh:
        doc = tomllib.load(fh)
    grids = doc.get("grids", doc)
    out = {}
    for name, values in grids.items():
        _family_of(name)
        if not isinstance(values, dict):
            raise ValueError(f"grid entry {name!r} must be a table")
        out[name] = values
    return out


def grid_for(name: str, overrides: dict | None = None, n_features: int | None = None) -> HyperGrid:
    family = _family_of(name)
    overrides = overrides or {}
    values = overrides.get(name)
    if values is None and name in VARIANTS and family != "SVR":
        values = overrides.get(family)
    if values is None:
        return default_grid(name, n_features)
    fixed = VARIANTS.get(name, (family, {}))[1]
    merged = {**values, **{k: [v] for k, v in fixed.items()}}
    return HyperGrid.product(family, _fit_to_features(family, merged, n_features))


# --------------------------------------------------------------------------
# cross-validation


def kfold_indices(n: int, K: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into K folds whose sizes differ by at most one."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if n < K:
        raise ValueError(f"cannot cut {n} rows into {K} folds")
    perm = np.random.default_rng([seed, 4]).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, K)]


@dataclass
class ConfigScore:
    config: HyperConfig
    fold_g: tuple
    fold_e: tuple
    fold_f_tp: tuple
    fold_f_tn: tuple
    error: str | None = None

    @property
    def mean_g(self) -> float:
        if self.error is not None:
            return -np.inf
        return float(np.mean(self.fold_g))

    @property
    def sd_g(self) -> float:
        if self.error is not None or len(self.fold_g) < 2:
            return float("nan")
        return float(np.std(self.fold_g, ddof=1))


@dataclass
class CvResult:
    family: str
    scores: list = field(default_factory=list)

    @property
    def mean_g(self) -> np.ndarray:
        return np.array([s.mean_g for s in self.scores])

    @property
    def best_index(self) -> int:
        g = self.mean_g
        if not np.isfinite(g).any():
            errors = "; ".join(f"{s.config.label()}: {s.error}" for s in self.scores)
            raise TuningError(f"no configuration of {self.family} could be fitted ({errors})")
        return int(np.argmax(g))  # first maximum, i.e. grid order on ties

    @property
    def best_config(self) -> HyperConfig:
        return self.scores[self.best_index].config

    @property
    def best_score(self) -> ConfigScore:
        return self.scores[self.best_index]

    def table(self) -> list[dict]:
        return [
            {"config": s.config.as_dict(), "mean_g": s.mean_g, "sd_g": s.sd_g, "error": s.error}
            for s in self.scores
        ]


def _fold_task(args):
    cfg, X, y, groups, train, test, fit_seed, y_max, feature_names = args
    try:
        gtr = groups.subset(train) if groups is not None else None
        gte = groups.subset(test) if groups is not None else None
        model = fit(cfg, X[train], y[train], seed=fit_seed, groups=gtr, feature_names=feature_names)
        rep = metrics.evaluate(model.predict(X[test], gte), y[test], y_max)
    except DivergenceError as exc:
        return None, str(exc)
    return (rep.g, rep.mae, rep.f_tp, rep.f_tn), None


def cross_validate(
    family: str,
    grid: HyperGrid,
    X,
    y,
    groups: GroupStructure | None = None,
    K: int = 4,
    seed: int = 0,
    y_max: float | None = None,
    feature_names=None,
    jobs: int = 1,
) -> CvResult:
    """Score every configuration of ``grid`` by K-fold cross-validation.

    ``y_max`` is the scale of the normalized target for the whole training
    set (1.0 after max-abs normalization); it defaults to ``max|y|``. A
    configuration whose fit diverges in any fold gets G = -inf and keeps the
    error message.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(grid) == 0:
        raise ValueError("empty grid")
    if y_max is None:
        y_max = float(np.max(np.abs(y))) or 1.0
    folds = kfold_indices(X.shape[0], K, seed)
    all_rows = np.arange(X.shape[0])
    tasks = []
    for cfg in grid:
        for k, test in enumerate(folds):
            train = np.setdiff1d(all_rows, test, assume_unique=True)
            # the fit seed depends on the fold only, so grid points share clusterings
            fit_seed = derive_seed(seed, "fold", k)
            tasks.append((cfg, X, y, groups, train, test, fit_seed, y_max, feature_names))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]

    result = CvResult(family)
    for c, cfg in enumerate(grid):
        chunk = results[c * K : (c + 1) * K]
        errors = [err for _, err in chunk if err is not None]
        if errors:
            result.scores.append(ConfigScore(cfg, (), (), (), (), error=errors[0]))
            continue
        vals = np.array([v for v, _ in chunk])
        result.scores.append(
            ConfigScore(cfg, tuple(vals[:, 0]), tuple(vals[:, 1]), tuple(vals[:, 2]), tuple(vals[:, 3]))
        )
    return result

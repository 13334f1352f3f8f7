from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "delaybench-model"
FORMAT_VERSION = 1

FAMILIES = ("MLM_RI", "MLM_RS", "NB", "KNN", "RBFN", "FFNN", "RT", "RF", "GBM", "SVR")
KERNELS = ("LIN", "POL", "TAH", "RBF", "VS")


class ModelError(RuntimeError):
    pass


class DivergenceError(ModelError):
    pass


class UnsupportedModelError(ModelError):
    pass


@dataclass(frozen=True)
class HyperConfig:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")

    @property
    def kernel(self):
        return self.params.get("kernel")

    def as_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    def label(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.family}({inner})"


@dataclass
class GroupStructure:
    student: np.ndarray
    course: np.ndarray

    def __post_init__(self):
        self.student = np.asarray(self.student)
        self.course = np.asarray(self.course)
        if self.student.shape != self.course.shape:
            raise ValueError("student and course labels differ in length")

    def __len__(self):
        return self.student.shape[0]

    def subset(self, rows) -> "GroupStructure":
        return GroupStructure(self.student[rows], self.course[rows])


class TrainedModel:
    """Fitted regressor. Subclasses fill ``state`` with numpy arrays only,
    which is what gets written to disk."""

    family: str = ""
    needs_groups = False

    def __init__(self, config: HyperConfig, state: dict, meta: dict | None = None):
        self.config = config
        self.state = state
        self.meta = dict(meta or {})

    @property
    def n_features(self) -> int:
        return int(self.meta["n_features"])

    def _predict(self, X, groups):
        raise NotImplementedError

    def predict(self, X, groups: GroupStructure | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"model expects {self.n_features} features, got {X.shape[1]}")
        out = np.asarray(self._predict(X, groups), dtype=float)
        if not np.all(np.isfinite(out)):
            raise DivergenceError(f"{self.family} produced non-finite predictions")
        return out


_REGISTRY: dict[str, type] = {}


def register(cls):
    _REGISTRY[cls.family] = cls
    return cls


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def save_model(model: TrainedModel, path) -> Path:
    """Write an ``.npz`` holding a JSON header plus the model's arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "family": model.family,
        "config": _jsonable(model.config.as_dict()),
        "meta": _jsonable(model.meta),
        "arrays": sorted(model.state),
    }
    arrays = {f"state.{k}": np.asarray(v) for k, v in model.state.items()}
    with path.open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_model(path) -> TrainedModel:
    with np.load(Path(path), allow_pickle=False) as npz:
        header = json.loads(str(npz["header"]))
        if header.get("format") != FORMAT_NAME:
            raise ModelError(f"{path}: not a {FORMAT_NAME} file")
        if int(header["version"]) > FORMAT_VERSION:
            raise ModelError(f"{path}: format version {header['version']} is newer than supported")
        state = {name: npz[f"state.{name}"] for name in header["arrays"]}
    cls = _REGISTRY[header["family"]]
    cfg = header["config"]
    return cls(HyperConfig(cfg["family"], cfg["params"]), state, header["meta"])


def base_meta(X, seed, **extra) -> dict:
    return {"n_features": int(np.asarray(X).shape[1]), "seed": int(seed), **extra}


def as_xy(X, y):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.ascontiguousarray(np.asarray(y, dtype=float).ravel())
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] == 0:
        raise ValueError("no training rows")
    return X, y


def split_fit_validation(n: int, seed: int, fit_fraction: float = 0.75):
    """Seeded internal split used for checkpointing the neural models."""
    rng = np.random.default_rng([seed, 75])
    perm = rng.permutation(n)
    cut = max(1, min(n - 1, int(round(fit_fraction * n))))
    return np.sort(perm[:cut]), np.sort(perm[cut:])

"""Nine regressor families behind one fit/predict contract.

Every model is a regression on the normalized delay; its classification
reading is the sign of the prediction.
"""
from __future__ import annotations

import numpy as np

from .base import (
    FAMILIES,
    KERNELS,
    DivergenceError,
    GroupStructure,
    HyperConfig,
    ModelError,
    TrainedModel,
    UnsupportedModelError,
    load_model,
    save_model,
)
from .mixed import mlm_fit
from .neighbors import knn_fit, nb_fit
from .neural import ffnn_fit, rbfn_fit
from .svr import kernel_eval, kernel_matrix, kkt_residual, svr_fit
from .trees import feature_importance, gbm_fit, max_sel_rank_split, rf_fit, rt_fit

# report row -> (family, fixed params)
VARIANTS = {
    "MLM-RI": ("MLM_RI", {}),
    "MLM-RS": ("MLM_RS", {}),
    "NB": ("NB", {}),
    "KNN": ("KNN", {}),
    "RBFN": ("RBFN", {}),
    "FFNN": ("FFNN", {}),
    "RT": ("RT", {}),
    "RF": ("RF", {}),
    "GBM": ("GBM", {}),
    "SVR-LIN": ("SVR", {"kernel": "LIN"}),
    "SVR-POL": ("SVR", {"kernel": "POL"}),
    "SVR-TAH": ("SVR", {"kernel": "TAH"}),
    "SVR-RBF": ("SVR", {"kernel": "RBF"}),
    "SVR-VS": ("SVR", {"kernel": "VS"}),
}

# assignment-level predictors that get random slopes by course under MLM_RS
SLOPE_FEATURES = ("clicks_assignment", "interval_days")

_FITTERS = {
    "NB": nb_fit,
    "KNN": knn_fit,
    "RBFN": rbfn_fit,
    "FFNN": ffnn_fit,
    "RT": rt_fit,
    "RF": rf_fit,
    "GBM": gbm_fit,
    "SVR": svr_fit,
}


def fit(config: HyperConfig, X, y, seed=0, groups: GroupStructure | None = None, feature_names=None) -> TrainedModel:
    """Fit one configuration. Mixed models need ``groups``; their random
    slopes are placed on the features named in ``SLOPE_FEATURES``."""
    if config.family in ("MLM_RI", "MLM_RS"):
        names = list(feature_names or [])
        slopes = [names.index(f) for f in SLOPE_FEATURES if f in names]
        variant = config.family.split("_")[1]
        return mlm_fit(X, y, groups, variant=variant, slope_columns=slopes, seed=seed)
    return _FITTERS[config.family](X, y, config.params, seed=seed)


def predict(model: TrainedModel, X, groups: GroupStructure | None = None) -> np.ndarray:
    return model.predict(X, groups)


__all__ = [
    "FAMILIES",
    "KERNELS",
    "VARIANTS",
    "SLOPE_FEATURES",
    "DivergenceError",
    "GroupStructure",
    "HyperConfig",
    "ModelError",
    "TrainedModel",
    "UnsupportedModelError",
    "feature_importance",
    "ffnn_fit",
    "fit",
    "gbm_fit",
    "kernel_eval",
    "kernel_matrix",
    "kkt_residual",
    "knn_fit",
    "load_model",
    "max_sel_rank_split",
    "mlm_fit",
    "nb_fit",
    "predict",
    "rbfn_fit",
    "rf_fit",
    "rt_fit",
    "save_model",
    "svr_fit",
]

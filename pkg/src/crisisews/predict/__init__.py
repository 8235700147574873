"""Crisis predictors behind one interface."""

from .attn_lstm import fit_attn_lstm
from .base import (
    PREDICTOR_KINDS,
    ForecastSeries,
    ImportanceTable,
    Predictor,
    PredictorError,
    binarize,
)
from .klr import fit_klr
from .logit import fit_stepwise_logit
from .mlp import fit_mlp
from .trees import fit_gradient_boost, fit_random_forest, gbt_importance, rf_importance, tune_gradient_boost

FITTERS = {
    "stepwise_logit": fit_stepwise_logit,
    "klr": fit_klr,
    "mlp": fit_mlp,
    "random_forest": fit_random_forest,
    "gradient_boost": fit_gradient_boost,
    "attn_lstm": fit_attn_lstm,
}


def fit_predictor(kind: str, features, labels, seed: int = 0, **hyperparams) -> Predictor:
    if kind not in FITTERS:
        raise PredictorError(f"unknown predictor kind {kind!r}")
    return FITTERS[kind](features, labels, seed=seed, **hyperparams)


__all__ = [
    "PREDICTOR_KINDS", "FITTERS", "ForecastSeries", "ImportanceTable", "Predictor", "PredictorError",
    "binarize", "fit_predictor", "fit_attn_lstm", "fit_klr", "fit_stepwise_logit", "fit_mlp",
    "fit_random_forest", "fit_gradient_boost", "gbt_importance", "rf_importance", "tune_gradient_boost",
]

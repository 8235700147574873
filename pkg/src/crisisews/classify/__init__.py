"""Crisis classifiers: threshold indices and regime-switching filters."""

from .cutoff import CutoffPolicy, long_term_transform, swarch_label, two_peak_cutoff
from .labels import LONG_TERM, SHORT_TERM, CrisisLabels, perfect_signal
from .misspec import (
    BootstrapMisspecification,
    bootstrap_misspecification,
    compare_on_test,
    misspecification_rate,
)
from .swarch import (
    RegimeModel,
    SwarchError,
    filter_probabilities,
    filtered_high_vol,
    fit_swarch,
    rcm,
    rcm_from_probabilities,
    select_regimes,
)
from .tqi import LAMBDA_GRID, TqiIndex, compute_cmax, compute_epi, compute_fpi, tqi_label

__all__ = [
    "CutoffPolicy", "long_term_transform", "swarch_label", "two_peak_cutoff",
    "LONG_TERM", "SHORT_TERM", "CrisisLabels", "perfect_signal",
    "BootstrapMisspecification", "bootstrap_misspecification", "compare_on_test",
    "misspecification_rate", "RegimeModel", "SwarchError", "filter_probabilities",
    "filtered_high_vol", "fit_swarch", "rcm", "rcm_from_probabilities", "select_regimes",
    "LAMBDA_GRID", "TqiIndex", "compute_cmax", "compute_epi", "compute_fpi", "tqi_label",
]

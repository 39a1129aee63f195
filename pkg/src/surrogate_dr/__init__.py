"""Sufficient dimension reduction for regressions with error-prone predictors."""

from .errors import SdrError
from .estimators import FitResult, SdrConfig, contour_matrix, cr, cr_factorized, fit, ols_direction, phd, sir
from .spectral import Basis, inv_sqrt, orthonormalize, projection, subspace_distance, sym_eig
from .surrogate import (
    Adjustment,
    CovEstimates,
    PrimarySample,
    ReplicationSample,
    SplitHalvesSample,
    ValidationSample,
    adjust,
    estimate_from_replication,
    estimate_from_split_halves,
    estimate_from_validation,
    make_adjustment,
    surrogate_sigma_u,
)

__version__ = "0.1.0"

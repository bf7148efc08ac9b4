"""Ensemble square-root Kalman filtering with covariance localization,
in sequential and all-at-once modes, on a tiled symmetric-matrix engine.
"""

from .filters import (Ensemble, GaussianBelief, ObservationSet, SolverConfig,
                      enkf_perturbed_update, ensrf_aao_update,
                      ensrf_sequential_update, kf_forecast, kf_update)
from .kernels import GridGeometry, KernelSpec, build_localization, matern32, sample_gp
from .metrics import energy_score, rmse, rmse_skill_score
from .randsvd import (TruncatedSVD, approximate_inverse, approximate_sqrt,
                      randomized_svd)
from .tiled import (TallMatrix, TiledMatrix, empirical_covariance,
                    extract_columns, multiply_tall, schur_product, set_threads)

__all__ = [
    "Ensemble", "GaussianBelief", "ObservationSet", "SolverConfig",
    "enkf_perturbed_update", "ensrf_aao_update", "ensrf_sequential_update",
    "kf_forecast", "kf_update",
    "GridGeometry", "KernelSpec", "build_localization", "matern32", "sample_gp",
    "energy_score", "rmse", "rmse_skill_score",
    "TruncatedSVD", "approximate_inverse", "approximate_sqrt", "randomized_svd",
    "TallMatrix", "TiledMatrix", "empirical_covariance", "extract_columns",
    "multiply_tall", "schur_product", "set_threads",
]

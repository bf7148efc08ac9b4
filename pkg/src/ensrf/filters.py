"""Assimilation algorithms: dense Kalman filter, perturbed-observation
ensemble filter, and the square-root ensemble filter in sequential
(per-observation) and all-at-once (single-batch) modes.

All updates are pure: they take an ensemble (or belief) and return a new
one.  Batch-mode gains come from :func:`assemble_gains`, which factors
the n-by-n innovation matrix either exactly or with the randomized SVD.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import randsvd
from .tiled import (DEFAULT_TILE_SIZE, TiledMatrix, empirical_covariance,
                    extract_columns, schur_product)

DENSE_KF_DIM_LIMIT = 5000


class NumericalFailure(RuntimeError):
    """A factorization or PSD check failed during an update."""


class Ensemble:
    """p state vectors stored as mean + zero-sum deviations."""

    def __init__(self, members):
        members = np.asarray(members, dtype=float)
        if members.ndim != 2:
            raise ValueError("expected a (p, m) member array")
        if not np.isfinite(members).all():
            raise ValueError("non-finite ensemble member entry")
        self._mean = members.mean(axis=0)
        dev = members - self._mean
        self._dev = dev - dev.mean(axis=0)  # second pass kills rounding drift

    @classmethod
    def from_mean_deviations(cls, mean, deviations) -> "Ensemble":
        return cls(np.asarray(mean) + np.asarray(deviations))

    @property
    def size(self) -> int:
        return self._dev.shape[0]

    @property
    def dim(self) -> int:
        return self._dev.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def deviations(self) -> np.ndarray:
        return self._dev

    @property
    def members(self) -> np.ndarray:
        return self._mean + self._dev


@dataclass(frozen=True)
class ObservationSet:
    """Pointwise observations: state indices, values, diagonal noise variances."""

    indices: np.ndarray
    values: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=int).reshape(-1))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).reshape(-1))
        object.__setattr__(self, "noise_vars", np.asarray(self.noise_vars, dtype=float).reshape(-1))
        n = self.indices.size
        if self.values.size != n or self.noise_vars.size != n:
            raise ValueError("indices, values and noise_vars must have equal length")
        if n and self.noise_vars.min() <= 0:
            raise ValueError("observation noise variances must be > 0")

    @property
    def count(self) -> int:
        return self.indices.size

    def check_dim(self, m: int) -> None:
        if self.count and (self.indices.min() < 0 or self.indices.max() >= m):
            raise IndexError("observation index out of range")

    def permuted(self, order) -> "ObservationSet":
        order = np.asarray(order, dtype=int)
        return ObservationSet(self.indices[order], self.values[order],
                              self.noise_vars[order])


@dataclass
class GaussianBelief:
    """Dense mean/covariance pair for the small-m reference filter."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=float)
        m = self.mean.size
        if self.covariance.shape != (m, m):
            raise ValueError("covariance shape does not match mean length")


@dataclass
class DynamicsOperator:
    """Linear dynamics x -> F x + noise; None fields mean identity / no noise."""

    matrix: np.ndarray | None = None
    noise_cov: np.ndarray | None = None


@dataclass(frozen=True)
class SolverConfig:
    """How to factor the n-by-n innovation matrix for batch gains.

    mode "exact" always uses a dense symmetric eigendecomposition.  In
    "randomized" mode, the randomized SVD is used once the observation
    count exceeds exact_threshold (the dense path is both cheaper and
    exact below it).
    """

    mode: str = "exact"
    rank: int = 2000
    oversample: int = randsvd.DEFAULT_OVERSAMPLE
    power_iters: int = randsvd.DEFAULT_POWER_ITERS
    exact_threshold: int = 8000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "randomized"):
            raise ValueError(f"unknown solver mode {self.mode!r}")
        if self.mode == "randomized" and self.rank < 1:
            raise ValueError("randomized solver needs rank >= 1")


def kf_forecast(belief: GaussianBelief, dyn: DynamicsOperator) -> GaussianBelief:
    """Propagate mean and covariance through the linear dynamics."""
    m = belief.mean.size
    if dyn.matrix is None:
        mean = belief.mean.copy()
        cov = belief.covariance.copy()
    else:
        f = np.asarray(dyn.matrix, dtype=float)
        if f.shape != (m, m):
            raise ValueError("dynamics matrix shape does not match state")
        mean = f @ belief.mean
        cov = f @ belief.covariance @ f.T
    if dyn.noise_cov is not None:
        q = np.asarray(dyn.noise_cov, dtype=float)
        if q.shape != (m, m):
            raise ValueError("dynamics noise shape does not match state")
        cov = cov + q
    cov = (cov + cov.T) / 2.0
    return GaussianBelief(mean, cov)


def kf_update(belief: GaussianBelief, obs: ObservationSet) -> GaussianBelief:
    """Exact dense Kalman update for pointwise observations (small m only)."""
    m = belief.mean.size
    if m > DENSE_KF_DIM_LIMIT:
        raise ValueError(f"dense Kalman update limited to m <= {DENSE_KF_DIM_LIMIT}")
    obs.check_dim(m)
    if obs.count == 0:
        return GaussianBelief(belief.mean.copy(), belief.covariance.copy())
    idx = obs.indices
    sigma = belief.covariance
    c = sigma[:, idx]                                   # Sigma G^T
    b = c[idx, :] + np.diag(obs.noise_vars)             # G Sigma G^T + E
    b = (b + b.T) / 2.0
    try:
        gain = np.linalg.solve(b, c.T).T                # K = C B^-1
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("singular innovation matrix") from exc
    mean = belief.mean + gain @ (obs.values - belief.mean[idx])
    cov = sigma - gain @ c.T
    cov = (cov + cov.T) / 2.0
    if np.trace(cov) > np.trace(sigma) + 1e-10:
        raise NumericalFailure("posterior trace exceeds prior trace")
    return GaussianBelief(mean, cov)


def _localized_covariance(ens: Ensemble, loc: TiledMatrix | None,
                          tile_size: int) -> TiledMatrix:
    cov = empirical_covariance(ens.members, tile_size=tile_size)
    if loc is not None:
        cov = schur_product(cov, loc)
    return cov


def assemble_gains(cov: TiledMatrix, obs: ObservationSet,
                   solver: SolverConfig | None = None):
    """Standard and square-root Kalman gains for a batch of observations.

    Returns (khat, ktilde), both (m, n) arrays, for the covariance already
    localized.  khat = C B^-1 and ktilde = C (sqrt B)^-1 (sqrt B + sqrt E)^-1
    with C the gathered covariance columns and B the symmetrized
    innovation matrix; square roots are the symmetric PSD ones.
    """
    solver = solver or SolverConfig()
    obs.check_dim(cov.dim)
    idx = obs.indices
    n = obs.count
    c = extract_columns(cov, idx).values
    b = (c[idx, :] + c[idx, :].T) / 2.0
    b = b + np.diag(obs.noise_vars)
    sqrt_e = np.sqrt(obs.noise_vars)

    use_exact = solver.mode == "exact" or n <= solver.exact_threshold
    if use_exact:
        try:
            w, v = np.linalg.eigh(b)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("innovation eigendecomposition failed") from exc
        w_max = max(w[-1], 0.0)
        if w[0] < -1e-8 * max(w_max, 1.0):
            raise NumericalFailure("covariance not PSD")
        w = np.maximum(w, max(1e-12 * w_max, np.finfo(float).tiny))
        khat = (c @ v) @ ((1.0 / w)[:, None] * v.T)
        sqrt_b = (v * np.sqrt(w)) @ v.T
        c_inv_sqrt = (c @ v) @ ((1.0 / np.sqrt(w))[:, None] * v.T)
    else:
        rank = solver.rank
        if rank > n:
            warnings.warn(f"SVD rank {rank} exceeds observation count {n}; clamped")
            rank = n
        bt = TiledMatrix.from_dense(b, tile_size=min(DEFAULT_TILE_SIZE, n))
        svd = randsvd.randomized_svd(bt, rank, oversample=solver.oversample,
                                     power_iters=solver.power_iters,
                                     seed=solver.seed)
        lam_max = svd.values[0] if svd.rank else 0.0
        probe = b.diagonal().min()
        if probe < -1e-8 * max(lam_max, 1.0):
            raise NumericalFailure("covariance not PSD")
        inv_op = randsvd.approximate_inverse(svd)
        sqrt_op = randsvd.approximate_sqrt(svd)
        inv_sqrt_op = randsvd.approximate_inverse_sqrt(svd)
        khat = inv_op.apply(c.T).T
        sqrt_b = sqrt_op.apply(np.eye(n))
        c_inv_sqrt = inv_sqrt_op.apply(c.T).T
    # (sqrt B + sqrt E) is symmetric positive definite; solve rather than invert
    mixed = sqrt_b + np.diag(sqrt_e)
    try:
        ktilde = np.linalg.solve(mixed.T, c_inv_sqrt.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("singular square-root innovation matrix") from exc
    return khat, ktilde


def _canonical_order(obs: ObservationSet) -> np.ndarray:
    # batch updates are order-free in exact arithmetic; sorting makes them
    # order-free bitwise as well
    return np.lexsort((obs.noise_vars, obs.values, obs.indices))


def ensrf_aao_update(ens: Ensemble, obs: ObservationSet,
                     loc: TiledMatrix | None = None,
                     solver: SolverConfig | None = None,
                     cov: TiledMatrix | None = None,
                     tile_size: int = DEFAULT_TILE_SIZE) -> Ensemble:
    """Square-root ensemble update assimilating all observations in one batch.

    The mean moves by the standard gain, the deviations by the square-root
    gain.  ``cov`` overrides the localized empirical covariance (used for
    the true-covariance control scheme).  Output is invariant under
    permutation of the observations.
    """
    if ens.size < 2:
        raise ValueError("degenerate ensemble: need at least 2 members")
    obs.check_dim(ens.dim)
    if obs.count == 0:
        raise ValueError("all-at-once update needs at least one observation")
    obs = obs.permuted(_canonical_order(obs))
    if cov is None:
        cov = _localized_covariance(ens, loc, tile_size)
    khat, ktilde = assemble_gains(cov, obs, solver)
    idx = obs.indices
    mean = ens.mean + khat @ (obs.values - ens.mean[idx])
    dev = ens.deviations - ens.deviations[:, idx] @ ktilde.T
    return Ensemble.from_mean_deviations(mean, dev)


def ensrf_sequential_update(ens: Ensemble, obs: ObservationSet,
                            taper=None, order=None) -> Ensemble:
    """Square-root ensemble update assimilating observations one at a time.

    Each observation sees the covariance column of the *current* ensemble,
    optionally tapered by ``taper.column(j)`` (see
    :class:`ensrf.kernels.LocalizationColumns`), and the updated ensemble
    becomes the background for the next observation.  With tapering the
    result depends on ``order``; without, it matches the batch update.
    """
    if ens.size < 2:
        raise ValueError("degenerate ensemble: need at least 2 members")
    obs.check_dim(ens.dim)
    mean = ens.mean.copy()
    dev = ens.deviations.copy()
    p = ens.size
    if order is None:
        order = range(obs.count)
    for k in order:
        j = int(obs.indices[k])
        e = obs.noise_vars[k]
        s_col = dev.T @ dev[:, j] / (p - 1)
        if taper is not None:
            s_col = s_col * taper.column(j)
        denom = s_col[j] + e
        if denom <= 0:
            raise NumericalFailure(f"zero innovation variance at observation {k}")
        gain = s_col / denom
        alpha = 1.0 / (np.sqrt(denom) * (np.sqrt(denom) + np.sqrt(e)))
        mean = mean + gain * (obs.values[k] - mean[j])
        dev = dev - np.outer(dev[:, j], alpha * s_col)
        dev -= dev.mean(axis=0)
    return Ensemble.from_mean_deviations(mean, dev)


def enkf_perturbed_update(ens: Ensemble, obs: ObservationSet,
                          loc: TiledMatrix | None = None,
                          seed: int = 0,
                          tile_size: int = DEFAULT_TILE_SIZE) -> Ensemble:
    """Stochastic ensemble update with per-member perturbed observations."""
    if ens.size < 2:
        raise ValueError("degenerate ensemble: need at least 2 members")
    obs.check_dim(ens.dim)
    if obs.count == 0:
        return Ensemble(ens.members)
    obs = obs.permuted(_canonical_order(obs))
    cov = _localized_covariance(ens, loc, tile_size)
    idx = obs.indices
    c = extract_columns(cov, idx).values
    b = (c[idx, :] + c[idx, :].T) / 2.0 + np.diag(obs.noise_vars)
    try:
        khat = np.linalg.solve(b, c.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("singular innovation matrix") from exc
    rng = np.random.default_rng(seed)
    perturbed = obs.values + rng.standard_normal((ens.size, obs.count)) \
        * np.sqrt(obs.noise_vars)
    members = ens.members
    members = members + (perturbed - members[:, idx]) @ khat.T
    return Ensemble(members)

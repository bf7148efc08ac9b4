"""Randomized truncated SVD of symmetric PSD tiled matrices.

Gaussian range finder with power iterations and Rayleigh-Ritz extraction,
plus lazy spectral operators (inverse, square root, inverse square root)
built from the truncated eigenpairs.  The m-by-m reconstruction is never
materialized by the operators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tiled import TiledMatrix, multiply_tall

DEFAULT_OVERSAMPLE = 10
DEFAULT_POWER_ITERS = 2


@dataclass(frozen=True)
class TruncatedSVD:
    """Top-r eigenpairs: values sorted non-increasing, orthonormal vectors."""

    values: np.ndarray   # (r,)
    vectors: np.ndarray  # (m, r)

    @property
    def rank(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]


def randomized_svd(a: TiledMatrix, rank: int,
                   oversample: int = DEFAULT_OVERSAMPLE,
                   power_iters: int = DEFAULT_POWER_ITERS,
                   seed: int = 0) -> TruncatedSVD:
    """Approximate top-``rank`` eigenpairs of a symmetric tiled matrix.

    Gaussian test matrix of width rank + oversample (clamped at dim),
    ``power_iters`` subspace iterations with re-orthonormalization each
    pass, then Rayleigh-Ritz on the range basis.  Deterministic per seed.
    Negative Ritz values are clamped to zero.
    """
    m = a.dim
    if not 1 <= rank <= m:
        raise ValueError(f"rank {rank} out of range for dim {m}")
    if oversample < 0 or power_iters < 0:
        raise ValueError("oversample and power_iters must be >= 0")
    a.validate_finite()

    rng = np.random.default_rng(seed)
    width = min(m, rank + oversample)
    y = multiply_tall(a, rng.standard_normal((m, width)))
    q, _ = np.linalg.qr(y)
    for _ in range(power_iters):
        q, _ = np.linalg.qr(multiply_tall(a, q))
    b = q.T @ multiply_tall(a, q)
    b = (b + b.T) / 2.0
    w, v = np.linalg.eigh(b)
    order = np.argsort(w)[::-1][:rank]
    values = np.clip(w[order], 0.0, None)
    vectors = q @ v[:, order]
    return TruncatedSVD(values, vectors)


_TRANSFORMS = ("inverse", "sqrt", "inverse-sqrt")


@dataclass(frozen=True)
class SpectralOperator:
    """Lazy U f(Lambda) U^T action built from a TruncatedSVD."""

    svd: TruncatedSVD
    transform: str
    floor: float = 0.0

    def _spectrum(self) -> np.ndarray:
        lam = self.svd.values
        if self.transform == "inverse":
            return 1.0 / np.maximum(lam, self.floor)
        if self.transform == "sqrt":
            return np.sqrt(lam)
        if self.transform == "inverse-sqrt":
            return 1.0 / np.sqrt(np.maximum(lam, self.floor))
        raise ValueError(f"unknown transform {self.transform!r}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply to a vector (m,) or tall matrix (m, k)."""
        u = self.svd.vectors
        f = self._spectrum()
        if x.ndim == 1:
            return u @ (f * (u.T @ x))
        return u @ (f[:, None] * (u.T @ x))


def _default_floor(svd: TruncatedSVD) -> float:
    top = svd.values[0] if svd.rank else 0.0
    return max(1e-12 * top, np.finfo(float).tiny)


def approximate_inverse(svd: TruncatedSVD, floor: float | None = None) -> SpectralOperator:
    """Pseudo-inverse on the truncated subspace: U diag(1/max(lam, floor)) U^T."""
    if floor is None:
        floor = _default_floor(svd)
    elif floor <= 0:
        raise ValueError("inverse regularization floor must be > 0")
    return SpectralOperator(svd, "inverse", floor)


def approximate_sqrt(svd: TruncatedSVD) -> SpectralOperator:
    """Symmetric PSD square root: U diag(sqrt(lam)) U^T."""
    return SpectralOperator(svd, "sqrt")


def approximate_inverse_sqrt(svd: TruncatedSVD, floor: float | None = None) -> SpectralOperator:
    """Inverse of the symmetric square root, with the same floor safeguard."""
    if floor is None:
        floor = _default_floor(svd)
    elif floor <= 0:
        raise ValueError("inverse regularization floor must be > 0")
    return SpectralOperator(svd, "inverse-sqrt", floor)

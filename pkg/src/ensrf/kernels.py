"""Grid geometry, Matern-3/2 kernels, localization matrices and GP sampling.

Synthetic fields live on a regular N-by-N grid on the unit square, ordered
row-major with x varying fastest.  Sampling uses a dense Cholesky of the
Gram matrix with diagonal jitter; fine for grids up to 80x80.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .tiled import DEFAULT_TILE_SIZE, TiledMatrix, _block_grid, _make_tile, _pmap

SQRT3 = np.sqrt(3.0)


@dataclass(frozen=True)
class GridGeometry:
    """Regular side x side grid on the unit square; state dim = side**2."""

    side: int
    coords: np.ndarray  # (side**2, 2), row-major, x fastest

    @classmethod
    def unit_square(cls, side: int) -> "GridGeometry":
        if side < 1:
            raise ValueError("grid side must be >= 1")
        ticks = np.linspace(0.0, 1.0, side)
        xx, yy = np.meshgrid(ticks, ticks)  # row-major: y per row, x fastest
        coords = np.column_stack([xx.ravel(), yy.ravel()])
        return cls(side, coords)

    @property
    def dim(self) -> int:
        return self.side ** 2


@dataclass(frozen=True)
class KernelSpec:
    """Matern-3/2 kernel parameters: k(d) = variance*(1+sqrt3 d/l)exp(-sqrt3 d/l)."""

    variance: float = 1.0
    length: float = 0.1
    family: str = "matern32"

    def __post_init__(self):
        if self.family != "matern32":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if self.variance < 0:
            raise ValueError("kernel variance must be >= 0")
        if self.length <= 0:
            raise ValueError("kernel correlation length must be > 0")


def matern32(distance, spec: KernelSpec):
    """Evaluate the Matern-3/2 kernel at one or many distances."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    a = SQRT3 * d / spec.length
    out = spec.variance * (1.0 + a) * np.exp(-a)
    return float(out) if np.isscalar(distance) else out


def build_localization(grid: GridGeometry, spec: KernelSpec,
                       tile_size: int = DEFAULT_TILE_SIZE) -> TiledMatrix:
    """Tapering matrix rho_jk = k(|x_j - x_k|), built tile-parallel.

    Unit variance is required: localization tapers covariances but must
    never rescale them.
    """
    if spec.variance != 1.0:
        raise ValueError("localization kernel must have unit variance")
    m = grid.dim
    coords = grid.coords

    def build(block):
        bi, bj = block
        rs = slice(bi * tile_size, min((bi + 1) * tile_size, m))
        cs = slice(bj * tile_size, min((bj + 1) * tile_size, m))
        t = matern32(cdist(coords[rs], coords[cs]), spec)
        if bi == bj:
            t = (t + t.T) / 2.0
            np.fill_diagonal(t, 1.0)
        return _make_tile(t)

    blocks = _block_grid(m, tile_size)
    tiles = dict(zip(blocks, _pmap(build, blocks)))
    return TiledMatrix(m, tile_size, tiles)


class LocalizationColumns:
    """On-demand columns of the localization matrix, one O(m) row at a time.

    Sequential assimilation touches a single covariance column per
    observation, so the full m x m taper never needs to exist.
    """

    def __init__(self, grid: GridGeometry, spec: KernelSpec):
        if spec.variance != 1.0:
            raise ValueError("localization kernel must have unit variance")
        self.grid = grid
        self.spec = spec

    def column(self, j: int) -> np.ndarray:
        d = np.linalg.norm(self.grid.coords - self.grid.coords[j], axis=1)
        return matern32(d, self.spec)


def gram_matrix(grid: GridGeometry, spec: KernelSpec) -> np.ndarray:
    """Dense kernel Gram matrix over the grid points."""
    g = matern32(cdist(grid.coords, grid.coords), spec)
    g = (g + g.T) / 2.0
    return g


def sample_gp(grid: GridGeometry, spec: KernelSpec, count: int, seed) -> np.ndarray:
    """Draw ``count`` zero-mean GP realizations; returns a (count, dim) array.

    Member i is generated from its own stream derived from (seed, i), so
    ensembles are reproducible and extensible member by member.  The Gram
    factorization retries with doubling jitter from 1e-10 to 1e-6 of the
    variance.
    """
    if count < 1:
        raise ValueError("sample count must be >= 1")
    m = grid.dim
    if spec.variance == 0.0:
        return np.zeros((count, m))
    gram = gram_matrix(grid, spec)
    chol = None
    jitter = 1e-10 * spec.variance
    while jitter <= 1e-6 * spec.variance:
        try:
            chol = np.linalg.cholesky(gram + jitter * np.eye(m))
            break
        except np.linalg.LinAlgError:
            jitter *= 2.0
    if chol is None:
        raise np.linalg.LinAlgError(
            "Gram factorization failed even at maximum jitter")

    seed_key = [seed] if np.isscalar(seed) else list(seed)

    def draw(i):
        rng = np.random.default_rng(seed_key + [i])
        return chol @ rng.standard_normal(m)

    return np.stack(_pmap(draw, range(count)))

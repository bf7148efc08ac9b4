"""Tiled storage and parallel block algebra for large symmetric matrices.

A ``TiledMatrix`` keeps an m-by-m symmetric matrix as a grid of dense
tiles, storing only the upper-triangular blocks.  All algebra here is
block-wise so the full matrix never has to exist as one allocation, and
reductions follow a fixed tree order so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import threading
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TILE_SIZE = 1024

_n_threads = 1


def set_threads(k: int) -> None:
    """Set the worker-thread count used by block-parallel operations."""
    global _n_threads
    if k < 1:
        raise ValueError("thread count must be >= 1")
    _n_threads = int(k)


def get_threads() -> int:
    return _n_threads


def _pmap(fn, items):
    """Map fn over items, results in input order regardless of scheduling."""
    items = list(items)
    if _n_threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_n_threads) as pool:
        return list(pool.map(fn, items))


def _tree_sum(parts):
    """Fixed-order pairwise tree reduction; bit-reproducible."""
    parts = list(parts)
    if not parts:
        raise ValueError("empty reduction")
    while len(parts) > 1:
        parts = [
            parts[k] + parts[k + 1] if k + 1 < len(parts) else parts[k]
            for k in range(0, len(parts), 2)
        ]
    return parts[0]


class TileAllocationTracker:
    """Counts live tiles; used by tests to bound peak tile memory."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self._lock = threading.Lock()

    def _inc(self):
        with self._lock:
            self.live += 1
            if self.live > self.peak:
                self.peak = self.live

    def _dec(self):
        with self._lock:
            self.live -= 1


_tracker: TileAllocationTracker | None = None


class track_tile_allocations:
    """Context manager installing a global tile allocation tracker."""

    def __enter__(self) -> TileAllocationTracker:
        global _tracker
        self.tracker = TileAllocationTracker()
        _tracker = self.tracker
        return self.tracker

    def __exit__(self, *exc):
        global _tracker
        _tracker = None
        return False


def _make_tile(arr: np.ndarray) -> np.ndarray:
    tracker = _tracker
    if tracker is not None:
        tracker._inc()
        weakref.finalize(arr, tracker._dec)
    return arr


def _block_grid(dim: int, tile_size: int):
    nb = -(-dim // tile_size)
    return [(bi, bj) for bi in range(nb) for bj in range(bi, nb)]


@dataclass
class TiledMatrix:
    """Symmetric m-by-m matrix stored as upper-triangular dense tiles.

    The tile grid exactly covers the matrix; edge tiles are truncated.
    Reading below the diagonal goes through the transpose of the stored
    mirror tile, so read(i, j) == read(j, i) exactly.
    """

    dim: int
    tile_size: int
    tiles: dict = field(default_factory=dict)

    @property
    def n_block_rows(self) -> int:
        return -(-self.dim // self.tile_size)

    def block_slice(self, b: int) -> slice:
        return slice(b * self.tile_size, min((b + 1) * self.tile_size, self.dim))

    def _block(self, bi: int, bj: int) -> np.ndarray:
        # transpose view for the lower triangle; never a copy
        if bi <= bj:
            return self.tiles[(bi, bj)]
        return self.tiles[(bj, bi)].T

    def read(self, i: int, j: int) -> float:
        T = self.tile_size
        return float(self._block(i // T, j // T)[i % T, j % T])

    def column(self, j: int) -> np.ndarray:
        """Assemble full column j as a dense vector."""
        if not 0 <= j < self.dim:
            raise IndexError(f"column index {j} out of range for dim {self.dim}")
        T = self.tile_size
        bj, jl = j // T, j % T
        out = np.empty(self.dim)
        for bi in range(self.n_block_rows):
            out[self.block_slice(bi)] = self._block(bi, bj)[:, jl]
        return out

    def dense_block(self, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
        """Assemble the dense submatrix [r0:r1, c0:c1]."""
        T = self.tile_size
        out = np.empty((r1 - r0, c1 - c0))
        for bi in range(r0 // T, (r1 - 1) // T + 1):
            rs, re = max(r0, bi * T), min(r1, bi * T + T, self.dim)
            for bj in range(c0 // T, (c1 - 1) // T + 1):
                cs, ce = max(c0, bj * T), min(c1, bj * T + T, self.dim)
                blk = self._block(bi, bj)
                out[rs - r0:re - r0, cs - c0:ce - c0] = \
                    blk[rs - bi * T:re - bi * T, cs - bj * T:ce - bj * T]
        return out

    def to_dense(self) -> np.ndarray:
        return self.dense_block(0, self.dim, 0, self.dim)

    def retile(self, tile_size: int) -> "TiledMatrix":
        if tile_size == self.tile_size:
            return self
        tiles = {}
        for bi, bj in _block_grid(self.dim, tile_size):
            rs = slice(bi * tile_size, min((bi + 1) * tile_size, self.dim))
            cs = slice(bj * tile_size, min((bj + 1) * tile_size, self.dim))
            tiles[(bi, bj)] = _make_tile(
                self.dense_block(rs.start, rs.stop, cs.start, cs.stop))
        return TiledMatrix(self.dim, tile_size, tiles)

    @classmethod
    def from_dense(cls, a, tile_size: int = DEFAULT_TILE_SIZE) -> "TiledMatrix":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("matrix has non-finite entries")
        m = a.shape[0]
        tiles = {}
        for bi, bj in _block_grid(m, tile_size):
            rs = slice(bi * tile_size, min((bi + 1) * tile_size, m))
            cs = slice(bj * tile_size, min((bj + 1) * tile_size, m))
            t = np.array(a[rs, cs])
            if bi == bj:
                t = (t + t.T) / 2.0
            tiles[(bi, bj)] = _make_tile(t)
        return cls(m, tile_size, tiles)

    def validate_finite(self) -> None:
        for t in self.tiles.values():
            if not np.isfinite(t).all():
                raise ValueError("matrix has non-finite tiles")


@dataclass
class TallMatrix:
    """Dense m-by-k matrix (k << m), consumed row-panel by row-panel."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("TallMatrix expects a 2-D array")
        if self.values.size and not np.isfinite(self.values).all():
            raise ValueError("TallMatrix has non-finite entries")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def empirical_covariance(members, tile_size: int = DEFAULT_TILE_SIZE) -> TiledMatrix:
    """Sample covariance (divisor p-1) of a p-by-m member array, tiled.

    Deviations from the ensemble mean are formed once; each tile is an
    independent p-rank outer-product block, so construction parallelizes
    over the upper-triangular block grid.
    """
    members = np.asarray(members, dtype=float)
    if members.ndim != 2:
        raise ValueError("expected a (p, m) member array")
    p, m = members.shape
    if p < 2:
        raise ValueError("degenerate ensemble: need at least 2 members")
    if not np.isfinite(members).all():
        raise ValueError("non-finite ensemble member entry")
    dev = members - members.mean(axis=0)
    scale = 1.0 / (p - 1)

    def build(block):
        bi, bj = block
        rs = slice(bi * tile_size, min((bi + 1) * tile_size, m))
        cs = slice(bj * tile_size, min((bj + 1) * tile_size, m))
        t = scale * (dev[:, rs].T @ dev[:, cs])
        if bi == bj:
            t = (t + t.T) / 2.0
        return _make_tile(t)

    grid = _block_grid(m, tile_size)
    tiles = dict(zip(grid, _pmap(build, grid)))
    return TiledMatrix(m, tile_size, tiles)


def schur_product(a: TiledMatrix, b: TiledMatrix) -> TiledMatrix:
    """Elementwise product, tile by tile; symmetry is preserved."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if b.tile_size != a.tile_size:
        b = b.retile(a.tile_size)

    def build(key):
        return _make_tile(a.tiles[key] * b.tiles[key])

    keys = sorted(a.tiles)
    tiles = dict(zip(keys, _pmap(build, keys)))
    return TiledMatrix(a.dim, a.tile_size, tiles)


def extract_columns(a: TiledMatrix, indices) -> TallMatrix:
    """Gather the listed columns of a into a TallMatrix (duplicates allowed)."""
    indices = np.asarray(indices, dtype=int)
    if indices.ndim != 1:
        indices = indices.reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= a.dim):
        raise IndexError("column index out of range")
    out = np.empty((a.dim, indices.size))
    cols = _pmap(a.column, indices.tolist())
    for k, c in enumerate(cols):
        out[:, k] = c
    return TallMatrix(out)


def multiply_tall(a: TiledMatrix, x) -> "TallMatrix | np.ndarray":
    """Product a @ x for a tall x; fixed-tree reduction over block panels.

    Accepts a TallMatrix or a plain (m, k) array and returns the same
    kind.  Identical inputs give bitwise-identical outputs regardless of
    worker count.
    """
    wrap = isinstance(x, TallMatrix)
    xv = x.values if wrap else np.asarray(x, dtype=float)
    if xv.ndim != 2 or xv.shape[0] != a.dim:
        raise ValueError(f"dimension mismatch: matrix dim {a.dim}, x shape {xv.shape}")
    nb = a.n_block_rows
    panels = [xv[a.block_slice(b)] for b in range(nb)]

    def row_panel(bi):
        return _tree_sum(a._block(bi, bj) @ panels[bj] for bj in range(nb))

    out = np.vstack(_pmap(row_panel, range(nb)))
    return TallMatrix(out) if wrap else out

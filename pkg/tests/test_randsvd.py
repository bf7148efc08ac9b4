import numpy as np
import pytest

from ensrf.randsvd import (approximate_inverse, approximate_inverse_sqrt,
                           approximate_sqrt, randomized_svd)
from ensrf.tiled import TiledMatrix


def random_psd(m, rng, decay=None):
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    lam = np.sort(rng.uniform(0.1, 10.0, m))[::-1] if decay is None else decay
    return (q * lam) @ q.T, np.asarray(lam)


def tiled(a, tile_size=8):
    return TiledMatrix.from_dense(a, tile_size=tile_size)


class TestRandomizedSvd:
    def test_identity_spectrum(self):
        svd = randomized_svd(tiled(np.eye(10)), rank=3, seed=1)
        np.testing.assert_allclose(svd.values, [1.0, 1.0, 1.0], atol=1e-12)

    def test_rank_one_spectrum(self):
        v = np.array([0.0, 2.0, 0.0, 0.0])  # ||v||^2 = 4
        svd = randomized_svd(tiled(np.outer(v, v), 2), rank=2, seed=2)
        assert abs(svd.values[0] - 4.0) < 1e-10
        assert svd.values[1] <= 1e-10

    def test_full_rank_matches_dense_eigensolver(self):
        rng = np.random.default_rng(3)
        a, _ = random_psd(30, rng)
        svd = randomized_svd(tiled(a), rank=30, seed=3)
        w = np.sort(np.linalg.eigvalsh(a))[::-1]
        np.testing.assert_allclose(svd.values, w, rtol=1e-8)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(4)
        a, _ = random_psd(12, rng)
        s1 = randomized_svd(tiled(a), rank=5, seed=7)
        s2 = randomized_svd(tiled(a), rank=5, seed=7)
        np.testing.assert_array_equal(s1.values, s2.values)
        np.testing.assert_array_equal(s1.vectors, s2.vectors)

    def test_invariants_hold(self):
        rng = np.random.default_rng(5)
        a, _ = random_psd(15, rng)
        svd = randomized_svd(tiled(a), rank=6, seed=5)
        assert (np.diff(svd.values) <= 0).all()
        assert (svd.values >= 0).all()
        gram = svd.vectors.T @ svd.vectors
        assert np.abs(gram - np.eye(6)).max() <= 1e-10

    def test_rank_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            randomized_svd(tiled(np.eye(4)), rank=5)
        with pytest.raises(ValueError):
            randomized_svd(tiled(np.eye(4)), rank=0)

    def test_reconstruction_error_monotone_in_rank(self):
        rng = np.random.default_rng(6)
        failures = 0
        for _ in range(20):
            a, _ = random_psd(20, rng)
            at = tiled(a)
            errs = []
            for r in (4, 8, 16):
                svd = randomized_svd(at, rank=r, seed=6)
                approx = (svd.vectors * svd.values) @ svd.vectors.T
                errs.append(np.linalg.norm(a - approx))
            if not (errs[0] >= errs[1] - 1e-9 and errs[1] >= errs[2] - 1e-9):
                failures += 1
        assert failures <= 2


class TestSpectralOperators:
    def test_inverse_of_identity(self):
        svd = randomized_svd(tiled(np.eye(6)), rank=6, seed=0)
        x = np.arange(6.0)
        np.testing.assert_allclose(approximate_inverse(svd).apply(x), x,
                                   atol=1e-10)

    def test_inverse_hand_example(self):
        svd = randomized_svd(tiled(2.0 * np.eye(2), 2), rank=2, seed=0)
        out = approximate_inverse(svd).apply(np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [0.5, 0.0], atol=1e-12)

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(7)
        a, _ = random_psd(10, rng)
        svd = randomized_svd(tiled(a), rank=10, seed=7)
        inv = approximate_inverse(svd)
        np.testing.assert_allclose(inv.apply(a), np.eye(10), atol=1e-7)

    def test_nonpositive_floor_rejected(self):
        svd = randomized_svd(tiled(np.eye(3)), rank=3, seed=0)
        with pytest.raises(ValueError):
            approximate_inverse(svd, floor=0.0)
        with pytest.raises(ValueError):
            approximate_inverse_sqrt(svd, floor=-1.0)

    def test_sqrt_of_identity(self):
        svd = randomized_svd(tiled(np.eye(5)), rank=5, seed=0)
        x = np.linspace(0, 1, 5)
        np.testing.assert_allclose(approximate_sqrt(svd).apply(x), x, atol=1e-10)

    def test_sqrt_hand_example(self):
        svd = randomized_svd(tiled(np.diag([4.0, 9.0]), 2), rank=2, seed=0)
        op = approximate_sqrt(svd)
        np.testing.assert_allclose(op.apply(np.array([1.0, 0.0])), [2.0, 0.0],
                                   atol=1e-10)
        np.testing.assert_allclose(op.apply(np.array([0.0, 1.0])), [0.0, 3.0],
                                   atol=1e-10)

    def test_sqrt_squares_to_matrix_action(self):
        rng = np.random.default_rng(8)
        a, _ = random_psd(10, rng)
        svd = randomized_svd(tiled(a), rank=10, seed=8)
        op = approximate_sqrt(svd)
        x = rng.standard_normal(10)
        np.testing.assert_allclose(op.apply(op.apply(x)), a @ x, atol=1e-7)

    def test_inverse_sqrt_composes(self):
        rng = np.random.default_rng(9)
        a, _ = random_psd(8, rng)
        svd = randomized_svd(tiled(a), rank=8, seed=9)
        isq = approximate_inverse_sqrt(svd)
        sq = approximate_sqrt(svd)
        np.testing.assert_allclose(isq.apply(sq.apply(np.eye(8))), np.eye(8),
                                   atol=1e-7)

import numpy as np
import pytest

from hflsim import linalg
from oracles import jacobi_gram_singular_values, naive_matmul


def random_matrix(rng, max_dim=32):
    m = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(1, max_dim + 1))
    return rng.normal(size=(m, n))


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(3, 5))
        assert np.array_equal(linalg.matmul(np.eye(3), m), m)

    def test_hand_case(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0], [1.0]])
        assert np.array_equal(linalg.matmul(a, b), np.array([[2.0], [4.0]]))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        assert np.max(np.abs(linalg.matmul(a, b) - naive_matmul(a, b))) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(linalg.ShapeError, match="3x2 by 3x2"):
            linalg.matmul(np.ones((3, 2)), np.ones((3, 2)))

    def test_non_finite_rejected(self):
        bad = np.array([[np.nan, 1.0]])
        with pytest.raises(ValueError):
            linalg.matmul(bad, np.ones((2, 1)))


class TestSvd:
    def test_diagonal(self):
        f = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        assert np.allclose(f.sigma, [3.0, 2.0, 1.0])
        assert np.allclose(f.u, np.eye(3))
        assert np.allclose(f.vt, np.eye(3))

    def test_rank_one(self):
        x = np.array([1.0, -2.0, 2.0])
        y = np.array([3.0, 4.0])
        f = linalg.svd(np.outer(x, y))
        expect = np.linalg.norm(x) * np.linalg.norm(y)
        assert abs(f.sigma[0] - expect) < 1e-10
        assert np.all(f.sigma[1:] < 1e-10)
        f.validate()

    def test_sigma_against_jacobi_gram_oracle(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(6, 4))
        f = linalg.svd(m)
        oracle = jacobi_gram_singular_values(m.copy())
        assert np.max(np.abs(f.sigma - oracle)) < 1e-8
        recon = f.u @ np.diag(f.sigma) @ f.vt
        assert np.linalg.norm(recon - m) / np.linalg.norm(m) < 1e-8

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            linalg.svd(np.array([[1.0, np.inf]]))

    def test_deterministic_bit_for_bit(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(9, 5))
        f1 = linalg.svd(m)
        f2 = linalg.svd(m.copy())
        assert f1.u.tobytes() == f2.u.tobytes()
        assert f1.sigma.tobytes() == f2.sigma.tobytes()
        assert f1.vt.tobytes() == f2.vt.tobytes()

    def test_invariants_on_random_matrices(self):
        # Orthonormality, ordering, reconstruction and sign convention over
        # 1000 random shapes up to 32x32.
        rng = np.random.default_rng(4)
        for _ in range(1000):
            m = random_matrix(rng)
            f = linalg.svd(m)
            f.validate()
            recon = f.u @ np.diag(f.sigma) @ f.vt
            denom = max(np.linalg.norm(m), 1e-12)
            assert np.linalg.norm(recon - m) / denom < 1e-8
            pivot = np.argmax(np.abs(f.u), axis=0)
            assert np.all(f.u[pivot, np.arange(f.u.shape[1])] >= 0)


class TestTruncate:
    def test_full_rank_is_identity(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(4, 6))
        f = linalg.svd(m)
        u_k, s_k, vt_k = linalg.truncate(f, f.rank_bound)
        assert np.allclose(u_k @ np.diag(s_k) @ vt_k, m, atol=1e-10)

    def test_dominant_triplet(self):
        f = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        u_k, s_k, vt_k = linalg.truncate(f, 1)
        assert np.allclose(u_k @ np.diag(s_k) @ vt_k, np.diag([3.0, 0.0, 0.0]), atol=1e-12)

    def test_eckart_young_error(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(8, 5))
        f = linalg.svd(m)
        u_k, s_k, vt_k = linalg.truncate(f, 2)
        err = np.linalg.norm(m - u_k @ np.diag(s_k) @ vt_k)
        assert abs(err - np.sqrt(np.sum(f.sigma[2:] ** 2))) < 1e-8

    def test_error_non_increasing_in_k(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            m = random_matrix(rng, max_dim=12)
            f = linalg.svd(m)
            errs = []
            for k in range(1, f.rank_bound + 1):
                u_k, s_k, vt_k = linalg.truncate(f, k)
                errs.append(np.linalg.norm(m - u_k @ np.diag(s_k) @ vt_k))
            assert all(errs[i + 1] <= errs[i] + 1e-10 for i in range(len(errs) - 1))

    @pytest.mark.parametrize("k", [0, 4])
    def test_invalid_rank(self, k):
        f = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        with pytest.raises(ValueError):
            linalg.truncate(f, k)

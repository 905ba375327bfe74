"""Oracle tests for the dense symmetric kernels.

Every incremental path (insert, delete, block extend/shrink) is checked
against a from-scratch factorization or a direct inversion of the same
matrix, which is the whole correctness contract of the update algebra.
"""

import numpy as np
import pytest

from mixtree.errors import (
    DimensionMismatch,
    IndexAlreadyPresent,
    IndexNotPresent,
    NotPositiveDefinite,
)
from mixtree.linalg import (
    BlockPartition,
    CholFactor,
    chol_delete,
    chol_insert,
    cholesky,
    conditional_covariance,
    ivl_extend,
    ivl_shrink,
    log_det,
    solve_lower,
)


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


def rel_fro(a, b):
    denom = max(np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


class TestCholesky:
    def test_2x2(self):
        f = cholesky([[4.0, 2.0], [2.0, 5.0]])
        np.testing.assert_allclose(f.lower, [[2.0, 0.0], [1.0, 2.0]], atol=1e-14)
        np.testing.assert_allclose(f.reconstruct(), [[4.0, 2.0], [2.0, 5.0]])

    def test_scalar(self):
        f = cholesky([[1.0]])
        np.testing.assert_allclose(f.lower, [[1.0]])

    def test_not_pd(self):
        # second pivot is 1 - 9/2 < 0
        with pytest.raises(NotPositiveDefinite):
            cholesky([[2.0, 3.0], [3.0, 1.0]])

    def test_rejects_asymmetric(self):
        with pytest.raises(DimensionMismatch):
            cholesky([[1.0, 2.0], [0.0, 1.0]])

    def test_randomized_reconstruction(self):
        rng = np.random.default_rng(7)
        for n in (1, 3, 10, 25, 50):
            s = random_spd(rng, n)
            f = cholesky(s)
            assert rel_fro(f.reconstruct(), s) < 1e-12
            assert (np.diag(f.lower) > 0).all()

    def test_log_det(self):
        rng = np.random.default_rng(8)
        for n in (2, 7, 30):
            s = random_spd(rng, n)
            f = cholesky(s)
            assert abs(log_det(f) - np.linalg.slogdet(s)[1]) < 1e-10


class TestSolveLower:
    def test_hand_forward_substitution(self):
        f = cholesky([[4.0, 2.0], [2.0, 5.0]])
        w = solve_lower(f, [2.0, 3.0])
        np.testing.assert_allclose(w, [1.0, 1.0], atol=1e-14)
        assert abs(w @ w - 2.0) < 1e-14

    def test_zero_vector(self):
        f = cholesky([[1.0]])
        np.testing.assert_allclose(solve_lower(f, [0.0]), [0.0])

    def test_identity(self):
        f = cholesky(np.eye(3))
        np.testing.assert_allclose(solve_lower(f, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_quadratic_form_matches_direct_inverse(self):
        rng = np.random.default_rng(9)
        for n in (2, 5, 20):
            s = random_spd(rng, n)
            f = cholesky(s)
            z = rng.standard_normal(n)
            w = solve_lower(f, z)
            assert abs(w @ w - z @ np.linalg.inv(s) @ z) < 1e-9 * (1 + abs(w @ w))

    def test_dimension_mismatch(self):
        f = cholesky(np.eye(2))
        with pytest.raises(DimensionMismatch):
            solve_lower(f, [1.0, 2.0, 3.0])

    def test_respects_permutation(self):
        # factor built by insertions carries a non-identity perm; solve_lower
        # must still evaluate the quadratic form of the sorted-order matrix
        s = np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]])
        f = cholesky(s[np.ix_([1], [1])])
        f = CholFactor(f.lower, np.array([1]))
        f = chol_insert(f, s, 2)
        f = chol_insert(f, s, 0)
        assert list(f.perm) == [1, 2, 0]
        z = np.array([0.3, -1.2, 0.7])
        w = solve_lower(f, z)
        assert abs(w @ w - z @ np.linalg.inv(s) @ z) < 1e-12


class TestCholInsert:
    def test_append_matches_full_factorization(self):
        base = cholesky([[4.0]])
        full = np.array([[4.0, 2.0], [2.0, 5.0]])
        f = chol_insert(base, full, 1)
        np.testing.assert_allclose(f.lower, [[2.0, 0.0], [1.0, 2.0]], atol=1e-14)
        assert list(f.perm) == [0, 1]

    def test_insert_into_empty(self):
        empty = CholFactor(np.empty((0, 0)), np.empty(0, dtype=np.int64))
        f = chol_insert(empty, [[9.0]], 0)
        np.testing.assert_allclose(f.lower, [[3.0]])

    def test_duplicate_index(self):
        f = cholesky([[4.0]])
        with pytest.raises(IndexAlreadyPresent):
            chol_insert(f, [[4.0, 2.0], [2.0, 5.0]], 0)

    def test_not_pd_growth(self):
        f = cholesky([[1.0]])
        with pytest.raises(NotPositiveDefinite):
            chol_insert(f, [[1.0, 2.0], [2.0, 1.0]], 1)

    def test_randomized_vs_scratch(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            n = int(rng.integers(2, 20))
            s = random_spd(rng, n)
            subset = list(rng.permutation(n)[: n - 1])
            f = cholesky(s[np.ix_(sorted(subset), sorted(subset))])
            f = CholFactor(f.lower, np.array(sorted(subset), dtype=np.int64))
            new = [i for i in range(n) if i not in subset][0]
            g = chol_insert(f, s, new)
            target = s[np.ix_(g.perm, g.perm)]
            assert rel_fro(g.reconstruct(), target) < 1e-10


class TestCholDelete:
    def test_delete_first(self):
        f = cholesky([[4.0, 2.0], [2.0, 5.0]])
        g = chol_delete(f, 0)
        np.testing.assert_allclose(g.lower, [[np.sqrt(5.0)]])
        assert list(g.perm) == [1]

    def test_delete_last_is_truncation(self):
        rng = np.random.default_rng(12)
        s = random_spd(rng, 5)
        f = cholesky(s)
        g = chol_delete(f, 4)
        np.testing.assert_allclose(g.lower, f.lower[:4, :4])

    def test_missing_index(self):
        f = cholesky([[4.0]])
        with pytest.raises(IndexNotPresent):
            chol_delete(f, 3)

    def test_randomized_vs_scratch(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            n = 10
            s = random_spd(rng, n)
            f = cholesky(s)
            drop = int(rng.integers(n))
            g = chol_delete(f, drop)
            keep = [i for i in range(n) if i != drop]
            assert rel_fro(g.reconstruct(), s[np.ix_(keep, keep)]) < 1e-10
            assert list(g.perm) == keep
            assert (np.diag(g.lower) > 0).all()


class TestInverseVarianceLemma:
    def test_extend_2x2(self):
        out = ivl_extend([[1.0]], [[0.5]], [[1.0]])
        np.testing.assert_allclose(
            out, [[4.0 / 3.0, -2.0 / 3.0], [-2.0 / 3.0, 4.0 / 3.0]], atol=1e-12
        )

    def test_extend_block_diagonal(self):
        a = np.array([[2.0, 0.3], [0.3, 1.0]])
        b = np.array([[4.0, 1.0], [1.0, 3.0]])
        out = ivl_extend(np.linalg.inv(a), np.zeros((2, 2)), b)
        expect = np.zeros((4, 4))
        expect[:2, :2] = np.linalg.inv(a)
        expect[2:, 2:] = np.linalg.inv(b)
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_extend_randomized_vs_direct_inverse(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            lam = random_spd(rng, 8)
            out = ivl_extend(np.linalg.inv(lam[:6, :6]), lam[6:, :6], lam[6:, 6:])
            assert rel_fro(out, np.linalg.inv(lam)) < 1e-9
            assert rel_fro(out @ lam, np.eye(8)) < 1e-9

    def test_shrink_back_to_block_inverse(self):
        inv = np.array([[4.0 / 3.0, -2.0 / 3.0], [-2.0 / 3.0, 4.0 / 3.0]])
        part = BlockPartition(np.array([0]), np.array([1]))
        np.testing.assert_allclose(ivl_shrink(inv, part), [[1.0]], atol=1e-12)

    def test_shrink_diagonal(self):
        inv = np.diag([2.0, 3.0, 4.0])
        part = BlockPartition(np.array([0, 2]), np.array([1]))
        np.testing.assert_allclose(
            ivl_shrink(inv, part), np.diag([2.0, 4.0]), atol=1e-14
        )

    def test_round_trip(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            lam = random_spd(rng, 9)
            kx = np.linalg.inv(lam[:7, :7])
            full = ivl_extend(kx, lam[7:, :7], lam[7:, 7:])
            part = BlockPartition(np.arange(7), np.array([7, 8]))
            back = ivl_shrink(full, part)
            assert rel_fro(back, kx) < 1e-10

    def test_shrink_matches_direct_subblock_inverse(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            lam = random_spd(rng, 10)
            keep = np.sort(rng.permutation(10)[:6])
            drop = np.setdiff1d(np.arange(10), keep)
            part = BlockPartition(keep, drop)
            out = ivl_shrink(np.linalg.inv(lam), part)
            assert rel_fro(out, np.linalg.inv(lam[np.ix_(keep, keep)])) < 1e-9

    def test_partition_validation(self):
        with pytest.raises(DimensionMismatch):
            BlockPartition(np.array([0, 1]), np.array([1, 2]))
        part = BlockPartition(np.array([0]), np.array([2]))
        with pytest.raises(DimensionMismatch):
            ivl_shrink(np.eye(2), part)


class TestConditionalCovariance:
    def test_2x2(self):
        out = conditional_covariance([[1.0, 0.5], [0.5, 1.0]], {1})
        np.testing.assert_allclose(out, [[0.75]], atol=1e-14)

    def test_all_missing(self):
        s = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(conditional_covariance(s, {0, 1}), s)

    def test_none_missing(self):
        assert conditional_covariance(np.eye(3), set()).shape == (0, 0)

    def test_precision_subblock_identity(self):
        # Schur complement equals the inverse of the precision sub-block
        rng = np.random.default_rng(17)
        for _ in range(30):
            n = int(rng.integers(2, 15))
            s = random_spd(rng, n)
            nm = int(rng.integers(1, n + 1))
            mis = np.sort(rng.permutation(n)[:nm])
            k = conditional_covariance(s, mis)
            prec = np.linalg.inv(s)
            expect = np.linalg.inv(prec[np.ix_(mis, mis)])
            assert rel_fro(k, expect) < 1e-10


class TestChainedReconstruction:
    def test_mixed_insert_delete_chain(self):
        # any factor produced by any update path reconstructs its source
        rng = np.random.default_rng(18)
        d = 14
        s = random_spd(rng, d)
        members = list(range(6))
        f = cholesky(s[np.ix_(members, members)])
        f = CholFactor(f.lower, np.array(members, dtype=np.int64))
        for _ in range(60):
            if len(members) > 2 and rng.random() < 0.5:
                v = members[int(rng.integers(len(members)))]
                f = chol_delete(f, v)
                members.remove(v)
            elif len(members) < d:
                free = [i for i in range(d) if i not in members]
                v = free[int(rng.integers(len(free)))]
                f = chol_insert(f, s, v)
                members.append(v)
            target = s[np.ix_(f.perm, f.perm)]
            assert rel_fro(f.reconstruct(), target) < 1e-10

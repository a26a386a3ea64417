import numpy as np
import pytest

from maddc.operators import (ConvergenceError, DiscountedOperator,
                             GridMismatchError, StateGrid, TransitionKernel,
                             ValueVector, apply_T, apply_T_adjoint,
                             apply_normal, load_grid_csv, load_kernel_csv,
                             mix_kernel, save_grid_csv, save_kernel_csv,
                             stationary_distribution)
from conftest import line_grid, random_kernel, random_stochastic


def _vv(values, grid):
    return ValueVector(np.asarray(values, dtype=float), grid)


class TestTypes:
    def test_grid_rejects_duplicates(self):
        with pytest.raises(ValueError, match="unique"):
            StateGrid(np.array([[0.0], [1.0], [0.0]]))

    def test_kernel_rejects_bad_row_sum(self):
        grid = line_grid(2)
        with pytest.raises(ValueError, match="sums to"):
            TransitionKernel(np.array([[0.6, 0.5], [0.5, 0.5]]), grid)

    def test_kernel_rejects_negative_entry(self):
        grid = line_grid(2)
        with pytest.raises(ValueError, match="negative"):
            TransitionKernel(np.array([[1.1, -0.1], [0.5, 0.5]]), grid)

    def test_operator_rejects_bad_beta(self, rng):
        kern = random_kernel(3, rng)
        for beta in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                DiscountedOperator(beta, kern)

    def test_value_vector_rejects_nonfinite(self):
        grid = line_grid(3)
        with pytest.raises(ValueError, match="state 1"):
            ValueVector(np.array([0.0, np.nan, 1.0]), grid)

    def test_dimension_mismatch_names_sizes(self, rng):
        op = DiscountedOperator(0.9, random_kernel(4, rng))
        v = _vv(np.zeros(3), line_grid(3))
        with pytest.raises(GridMismatchError, match="4"):
            apply_T(op, v)


class TestApplyT:
    def test_ones_map_to_beta(self, rng):
        op = DiscountedOperator(0.9, random_kernel(6, rng))
        out = apply_T(op, _vv(np.ones(6), op.grid))
        assert np.allclose(out.values, 0.9, atol=1e-14)

    def test_zero_maps_to_zero(self, rng):
        op = DiscountedOperator(0.5, random_kernel(4, rng))
        out = apply_T(op, ValueVector.zeros(op.grid))
        assert np.all(out.values == 0.0)

    def test_matches_hand_multiplication(self, rng):
        p = random_stochastic(3, rng)
        op = DiscountedOperator(0.5, TransitionKernel(p, line_grid(3)))
        v = np.array([1.0, 2.0, 3.0])
        expected = np.array([0.5 * sum(p[i, j] * v[j] for j in range(3))
                             for i in range(3)])
        out = apply_T(op, _vv(v, op.grid))
        assert np.max(np.abs(out.values - expected)) <= 1e-14


class TestAdjoint:
    def test_adjoint_identity(self, rng):
        op = DiscountedOperator(0.95, random_kernel(20, rng))
        phi = rng.standard_normal(20)
        psi = rng.standard_normal(20)
        lhs = apply_T(op, _vv(phi, op.grid)).values @ psi
        rhs = phi @ apply_T_adjoint(op, _vv(psi, op.grid)).values
        assert abs(lhs - rhs) <= 1e-12

    def test_zero(self, rng):
        op = DiscountedOperator(0.9, random_kernel(5, rng))
        out = apply_T_adjoint(op, ValueVector.zeros(op.grid))
        assert np.all(out.values == 0.0)

    def test_symmetric_kernel_self_adjoint(self):
        p = np.array([[0.5, 0.5], [0.5, 0.5]])
        op = DiscountedOperator(0.8, TransitionKernel(p, line_grid(2)))
        v = _vv([1.0, -2.0], op.grid)
        assert np.array_equal(apply_T(op, v).values, apply_T_adjoint(op, v).values)

    def test_adjoint_identity_many_pairs(self, rng):
        # 100 random pairs on grids up to 200 states
        for _ in range(10):
            n = int(rng.integers(2, 201))
            op = DiscountedOperator(0.9, random_kernel(n, rng))
            for _ in range(10):
                phi = rng.standard_normal(n)
                psi = rng.standard_normal(n)
                lhs = op.apply(phi) @ psi
                rhs = phi @ op.apply_adjoint(psi)
                scale = max(1.0, abs(lhs))
                assert abs(lhs - rhs) <= 1e-12 * scale


class TestApplyNormal:
    def test_zero(self, rng):
        op = DiscountedOperator(0.7, random_kernel(4, rng))
        assert np.all(apply_normal(op, ValueVector.zeros(op.grid)).values == 0.0)

    def test_beta_tiny_is_identity(self, rng):
        op = DiscountedOperator(1e-300, random_kernel(4, rng))
        y = _vv(rng.standard_normal(4), op.grid)
        assert np.allclose(apply_normal(op, y).values, y.values, atol=1e-299)

    def test_matches_explicit_assembly(self, rng):
        n = 5
        p = random_stochastic(n, rng)
        beta = 0.9
        op = DiscountedOperator(beta, TransitionKernel(p, line_grid(n)))
        explicit = (np.eye(n) - beta * p) @ (np.eye(n) - beta * p.T)
        y = rng.standard_normal(n)
        out = apply_normal(op, _vv(y, op.grid))
        assert np.max(np.abs(out.values - explicit @ y)) <= 1e-13

    def test_exactly_two_matvecs(self, rng):
        calls = {"n": 0}
        kern = random_kernel(6, rng)
        orig_mat, orig_rmat = kern.matvec, kern.rmatvec

        def counting_mat(v):
            calls["n"] += 1
            return orig_mat(v)

        def counting_rmat(v):
            calls["n"] += 1
            return orig_rmat(v)

        kern.matvec, kern.rmatvec = counting_mat, counting_rmat
        op = DiscountedOperator(0.9, kern)
        apply_normal(op, _vv(np.ones(6), op.grid))
        assert calls["n"] == 2

    def test_self_adjoint_and_positive_definite(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 40))
            op = DiscountedOperator(0.95, random_kernel(n, rng))
            y = rng.standard_normal(n)
            z = rng.standard_normal(n)
            ay = apply_normal(op, _vv(y, op.grid)).values
            az = apply_normal(op, _vv(z, op.grid)).values
            assert abs(ay @ z - y @ az) <= 1e-12 * max(1.0, abs(ay @ z))
            assert ay @ y > 0.0


def test_sup_norm_contraction(rng):
    op = DiscountedOperator(0.9, random_kernel(30, rng))
    for _ in range(50):
        v = rng.standard_normal(30) * rng.uniform(0.1, 100)
        assert np.max(np.abs(op.apply(v))) <= 0.9 * np.max(np.abs(v)) + 1e-12


class TestStationary:
    def test_two_state_swap(self):
        p = np.array([[0.0, 1.0], [1.0, 0.0]])
        # period-2 chain: average out by lazy mixing to make power iteration converge
        lazy = 0.5 * (p + np.eye(2))
        mu = stationary_distribution(TransitionKernel(lazy, line_grid(2)))
        assert np.allclose(mu, [0.5, 0.5], atol=1e-12)

    def test_absorbing_state(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        mu = stationary_distribution(TransitionKernel(p, line_grid(2)))
        assert np.allclose(mu, [1.0, 0.0], atol=1e-10)

    def test_matches_dense_eigenproblem(self, rng):
        p = random_stochastic(10, rng)
        kern = TransitionKernel(p, line_grid(10))
        mu = stationary_distribution(kern, tol=1e-13)
        eigvals, eigvecs = np.linalg.eig(p.T)
        lead = np.argmin(np.abs(eigvals - 1.0))
        reference = np.real(eigvecs[:, lead])
        reference = reference / reference.sum()
        assert np.max(np.abs(mu - reference)) <= 1e-8

    def test_nonconvergence_carries_state(self):
        # periodic chain whose orbit from the uniform start never settles
        p = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        kern = TransitionKernel(p, line_grid(3))
        with pytest.raises(ConvergenceError) as info:
            stationary_distribution(kern, tol=1e-15, max_iter=50)
        assert info.value.last is not None
        assert info.value.gap is not None


class TestMixKernel:
    def test_point_mass_selects_kernel(self, rng):
        kerns = [random_kernel(4, rng), random_kernel(4, rng)]
        kerns[1] = TransitionKernel(random_stochastic(4, rng), kerns[0].grid)
        ccp = np.column_stack([np.ones(4), np.zeros(4)])
        # strictly positive rows are a Ccp-level requirement; mix_kernel allows zeros
        mixed = mix_kernel(kerns, ccp)
        assert np.array_equal(mixed.matrix, kerns[0].matrix)

    def test_identical_kernels_unchanged(self, rng):
        kern = random_kernel(3, rng)
        ccp = random_stochastic(3, rng)[:, :2]
        ccp = ccp / ccp.sum(axis=1, keepdims=True)
        mixed = mix_kernel([kern, kern], ccp)
        assert np.max(np.abs(mixed.matrix - kern.matrix)) <= 1e-15

    def test_matches_scalar_mixture(self, rng):
        grid = line_grid(3)
        k0 = TransitionKernel(random_stochastic(3, rng), grid)
        k1 = TransitionKernel(random_stochastic(3, rng), grid)
        ccp = random_stochastic(3, rng)[:, :2]
        ccp = ccp / ccp.sum(axis=1, keepdims=True)
        mixed = mix_kernel([k0, k1], ccp)
        for i in range(3):
            for j in range(3):
                expected = ccp[i, 0] * k0.matrix[i, j] + ccp[i, 1] * k1.matrix[i, j]
                assert abs(mixed.matrix[i, j] - expected) <= 1e-14

    def test_row_stochastic_preserved(self, rng):
        kerns = [random_kernel(50, rng)]
        kerns.append(TransitionKernel(random_stochastic(50, rng), kerns[0].grid))
        ccp = random_stochastic(50, rng)[:, :2]
        ccp = ccp / ccp.sum(axis=1, keepdims=True)
        mixed = mix_kernel(kerns, ccp)
        assert np.max(np.abs(mixed.matrix.sum(axis=1) - 1.0)) <= 1e-12

    def test_action_count_mismatch(self, rng):
        kern = random_kernel(3, rng)
        with pytest.raises(ValueError, match="actions"):
            mix_kernel([kern], np.full((3, 2), 0.5))


def test_csv_round_trips(tmp_path, rng):
    grid = StateGrid(rng.standard_normal((7, 2)))
    kern = TransitionKernel(random_stochastic(7, rng), grid)
    gpath, kpath = tmp_path / "grid.csv", tmp_path / "kernel.csv"
    save_grid_csv(grid, gpath)
    save_kernel_csv(kern, kpath)
    grid2 = load_grid_csv(gpath)
    assert np.array_equal(grid.points, grid2.points)
    kern2 = load_kernel_csv(kpath, grid2)
    assert np.array_equal(kern.matrix, kern2.matrix)

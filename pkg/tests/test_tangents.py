import math

import numpy as np
import pytest

from mvflow import BrownianDriver, TimeGrid, constant, geometric, mean_field_ou, simulate_decoupled, simulate_particles
from mvflow.coefficients import first_order, kernel_attraction
from mvflow.errors import SingularJacobianError
from mvflow.tangents import (
    LionsForcing,
    invert_jacobian,
    particle_lions,
    point_weights,
    propagate_inverse_jacobian,
    propagate_jacobian,
    propagate_jet,
    propagate_lions,
    propagate_malliavin_field,
    simulate_aux,
    transfer_residual,
)


def setup(model, x, grid, M=40, n_paths=50, seed=0, initial=None):
    drv = BrownianDriver(seed, dim=model.dim_noise)
    init = np.broadcast_to(np.atleast_1d(x), (M, model.dim_state)) if initial is None else initial
    law = simulate_particles(model, init, M, grid, drv.child("particles"))
    bundle = simulate_decoupled(model, np.atleast_1d(x), law, drv.child("paths"), n_paths=n_paths)
    return drv, law, bundle


def cofactor_inverse(A):
    # adjugate over determinant, entry by entry
    n = A.shape[0]
    C = np.empty_like(A)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(A, i, axis=0), j, axis=1)
            C[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return C.T / np.linalg.det(A)


class TestJacobian:
    def test_constant_is_identity(self, bm):
        _, law, b = setup(bm, [0.2], TimeGrid(1.0, 8))
        J = propagate_jacobian(b, bm, law)
        np.testing.assert_array_equal(J, np.broadcast_to(np.eye(1), J.shape))

    def test_geometric_ratio(self):
        m = geometric(0.0, 1.0)
        _, law, b = setup(m, [1.7], TimeGrid(1.0, 16))
        J = propagate_jacobian(b, m, law)
        np.testing.assert_allclose(J[..., 0, 0], b.states[..., 0] / 1.7, rtol=1e-13)

    def test_ou_product(self, ou):
        grid = TimeGrid(1.0, 50)
        _, law, b = setup(ou, [0.0], grid)
        J = propagate_jacobian(b, ou, law)[:, -1, 0, 0]
        np.testing.assert_allclose(J, (1 - grid.h) ** 50, rtol=1e-13)
        assert abs(J[0] - math.exp(-1.0)) < 2 * grid.h

    def test_inverse_sde_agrees_to_first_order(self):
        m = kernel_attraction(1.0, 0.7, kernel="tanh")
        errs = []
        for n in (16, 32, 64):
            _, law, b = setup(m, [0.4], TimeGrid(1.0, n), seed=3)
            J = propagate_jacobian(b, m, law)
            K = propagate_inverse_jacobian(b, m, law)
            errs.append(np.abs(K[:, -1] - np.linalg.inv(J[:, -1])).mean())
        assert errs[2] < errs[0] / 2.5


class TestInversion:
    def test_identity(self):
        inv, cond = invert_jacobian(np.eye(3))
        np.testing.assert_array_equal(inv, np.eye(3))
        assert cond == 1.0

    def test_diagonal(self):
        inv, _ = invert_jacobian(np.diag([2.0, 0.5]))
        np.testing.assert_allclose(inv, np.diag([0.5, 2.0]), rtol=1e-15)

    def test_cofactor_oracle(self, rng):
        A = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        inv, cond = invert_jacobian(A)
        assert cond < 10
        np.testing.assert_allclose(inv, cofactor_inverse(A), rtol=1e-12, atol=1e-12)

    def test_singular(self):
        with pytest.raises(SingularJacobianError):
            invert_jacobian(np.array([[1.0, 2.0], [2.0, 4.0]]))


class TestMalliavinField:
    def test_constant_sigma(self):
        m = constant(0.0, 0.6)
        _, law, b = setup(m, [0.0], TimeGrid(1.0, 6))
        D = propagate_malliavin_field(b, m, law)
        for r in range(6):
            np.testing.assert_array_equal(D[:, r, :r + 1], 0.0)
            np.testing.assert_array_equal(D[:, r, r + 1:], 0.6)

    def test_geometric_recursion(self):
        m = geometric(0.0, 1.0)
        _, law, b = setup(m, [1.3], TimeGrid(1.0, 10), n_paths=8)
        D = propagate_malliavin_field(b, m, law)[..., 0, 0]
        xi = b.increments[..., 0]
        for r in range(10):
            hand = b.states[:, r, 0] * np.prod(1 + xi[:, r + 1:], axis=1)
            np.testing.assert_allclose(D[:, r, -1], hand, rtol=1e-13)

    def test_jet_field_agrees(self, rng):
        m = kernel_attraction(1.0, 0.8, dim=2, kernel="tanh")
        _, law, b = setup(m, [0.1, -0.2], TimeGrid(1.0, 8), initial=rng.standard_normal((40, 2)))
        D = propagate_malliavin_field(b, m, law)[:, :, -1]
        jet = propagate_jet(m, law, b.states[:, 0], b.increments, level=1)
        np.testing.assert_allclose(jet.DX, D, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(jet.X, b.states[:, -1], rtol=1e-14)

    def test_field_is_increment_sensitivity(self, rng):
        # brute force central difference of the Euler map in one increment
        m = geometric(0.1, 0.8)
        _, law, b = setup(m, [1.0], TimeGrid(1.0, 6), n_paths=3)
        D = propagate_malliavin_field(b, m, law)[:, 2, -1, 0, 0]
        eps = 1e-6
        up, dn = b.increments.copy(), b.increments.copy()
        up[:, 2] += eps
        dn[:, 2] -= eps
        f = lambda inc: simulate_decoupled(m, [1.0], law, increments=inc).states[:, -1, 0]
        np.testing.assert_allclose(D, (f(up) - f(dn)) / (2 * eps), rtol=1e-7)


class TestTransfer:
    @pytest.mark.parametrize("model", [geometric(0.1, 0.5), mean_field_ou(1.0, 0.5)])
    def test_averaged_residual_is_first_order(self, model):
        res = []
        for n in (32, 64, 128):
            grid = TimeGrid(1.0, n)
            drv = BrownianDriver(1)
            law = simulate_particles(model, np.ones((20, 1)), 20, grid, drv.child("particles"))
            inc = drv.child("paths").increments(grid, 0, 400, refine=128 // n)
            b = simulate_decoupled(model, [1.0], law, increments=inc)
            res.append(transfer_residual(b, model, law).mean())
        ratios = np.array(res[:-1]) / np.array(res[1:])
        assert np.all((ratios >= 1.5) & (ratios <= 3.0))

    def test_node_residual_on_geometric_is_half_order(self):
        # at a single node the residual of the geometric model is a Brownian fluctuation, O(h^{1/2})
        res = []
        for n in (32, 128):
            grid = TimeGrid(1.0, n)
            drv = BrownianDriver(1)
            m = geometric(0.1, 0.5)
            law = simulate_particles(m, np.ones((20, 1)), 20, grid, drv.child("particles"))
            inc = drv.child("paths").increments(grid, 0, 400, refine=128 // n)
            b = simulate_decoupled(m, [1.0], law, increments=inc)
            res.append(transfer_residual(b, m, law, mode="node", r=n // 2).mean())
        np.testing.assert_allclose(res[0] / res[1], 2.0, rtol=0.25)


class TestLions:
    def test_constant_model_has_zero_tangent(self, bm):
        drv, law, b = setup(bm, [0.0], TimeGrid(1.0, 8))
        sys = propagate_lions(bm, law, [[0.5]], drv, bundle=b)
        np.testing.assert_array_equal(sys.particles, 0.0)
        np.testing.assert_array_equal(sys.decoupled, 0.0)

    def test_ou_tangent(self, ou, rng):
        t = math.log(2)
        grid = TimeGrid(t, 64)
        drv, law, b = setup(ou, [0.4], grid, M=300, n_paths=200, initial=rng.standard_normal((300, 1)))
        sys = propagate_lions(ou, law, [[-1.0], [1.0]], drv, bundle=b)
        expected = 1 - math.exp(-t)
        for q in range(2):
            L = sys.at(q, "decoupled")[:, -1, 0, 0]
            assert abs(L.mean() - expected) < 0.02
            np.testing.assert_allclose(L.std(), 0.0, atol=1e-12)

    def test_mean_interaction_small_time(self):
        def W(x, y):
            out = np.zeros((x.shape[0], 2, 1))
            out[:, 0] = y
            out[:, 1] = 1.0
            return out
        dx = lambda x, y: np.zeros((x.shape[0], 2, 1, 1))
        def dy(x, y):
            out = np.zeros((x.shape[0], 2, 1, 1))
            out[:, 0] = 1.0
            return out
        m = first_order(W, dx, dy, 1, 1)
        t = 0.02
        drv, law, b = setup(m, [0.0], TimeGrid(t, 4), M=30, n_paths=10)
        sys = propagate_lions(m, law, [[0.0]], drv, bundle=b)
        np.testing.assert_allclose(sys.at(0, "decoupled")[:, -1, 0, 0], t, rtol=0.05)

    def test_linearity_in_weights(self, ou, rng):
        drv, law, _ = setup(ou, [0.0], TimeGrid(1.0, 8), M=25, initial=rng.standard_normal((25, 1)))
        V, W = point_weights([[0.3]], 1)
        inc = drv.child("aux-particles").increments(law.grid, 0, 25)
        starts = np.broadcast_to(V, (25,) + V.shape)
        lam1 = particle_lions(ou, law, simulate_aux(ou, law, starts, W, inc))
        lam2 = particle_lions(ou, law, simulate_aux(ou, law, starts, 2 * W, inc))
        np.testing.assert_array_equal(lam2, 2 * lam1)

    def test_permutation_invariance(self, rng):
        m = kernel_attraction(1.0, 0.8, kernel="tanh")
        M = 12
        grid = TimeGrid(1.0, 6)
        drv = BrownianDriver(0)
        law = simulate_particles(m, rng.standard_normal((M, 1)), M, grid, drv.child("particles"))
        perm = rng.permutation(M)
        law_p = simulate_particles(m, law.states[0][perm], M, grid, drv, increments=law.increments[perm])
        inc = drv.child("aux").increments(grid, 0, M)
        V, W = point_weights([[0.2]], 1)
        starts = np.broadcast_to(V, (M,) + V.shape)
        lam = particle_lions(m, law, simulate_aux(m, law, starts, W, inc))
        lam_p = particle_lions(m, law_p, simulate_aux(m, law_p, starts, W, inc[perm]))
        np.testing.assert_allclose(lam_p, lam[:, perm], rtol=1e-12, atol=1e-14)

    def test_factorized_matches_generic(self, rng):
        ou_f = mean_field_ou(1.0, 0.5)
        ou_g = kernel_attraction(1.0, 0.5, kernel="linear")
        grid = TimeGrid(1.0, 8)
        init = rng.standard_normal((30, 1))
        out = []
        for m in (ou_f, ou_g):
            drv = BrownianDriver(2)
            law = simulate_particles(m, init, 30, grid, drv.child("particles"))
            out.append(propagate_lions(m, law, [[0.1], [-0.4]], drv).particles)
        np.testing.assert_allclose(out[0], out[1], rtol=1e-12, atol=1e-12)

    def test_jet_lions_matches_decoupled(self, ou, rng):
        drv, law, b = setup(ou, [0.4], TimeGrid(1.0, 8), M=30, n_paths=20, initial=rng.standard_normal((30, 1)))
        sys = propagate_lions(ou, law, [[0.7]], drv, bundle=b)
        forcing = LionsForcing(ou, law, sys.sample_aux, sys.particles)
        jet = propagate_jet(ou, law, b.states[:, 0], b.increments, forcing=forcing)
        np.testing.assert_allclose(jet.L, sys.decoupled[:, -1], rtol=1e-13, atol=1e-15)

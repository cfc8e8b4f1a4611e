import numpy as np
import pytest

from mvflow import EmpiricalMeasure, build_model, check_ellipticity, constant, eval_all, mean_field_ou
from mvflow.coefficients import (
    first_order,
    geometric,
    kernel_attraction,
    lions_fd_probe,
    mean_attraction,
    scalar_interaction,
    sine_diffusion,
)
from mvflow.errors import ConfigError, DimensionError, ModelEvaluationError


def product_model():
    # V_0(x, mu) = x * int y^2 dmu, V_1 = 1
    def U(x, m):
        out = np.zeros((x.shape[0], 2, 1))
        out[:, 0] = x * m[0]
        out[:, 1] = 1.0
        return out

    def dU_dx(x, m):
        out = np.zeros((x.shape[0], 2, 1, 1))
        out[:, 0] = m[0]
        return out

    def dU_dm(x, m):
        out = np.zeros((x.shape[0], 2, 1, 1))
        out[:, 0, 0, 0] = x[:, 0]
        return out

    return scalar_interaction(U, dU_dx, dU_dm, lambda y: y ** 2, lambda v: 2 * v[:, :, None], 1, 1)


def mean_model():
    # V_0(x, mu) = int y dmu through W(x, y) = y
    def W(x, y):
        out = np.zeros((x.shape[0], 2, 1))
        out[:, 0] = y
        out[:, 1] = 1.0
        return out

    def dW_dx(x, y):
        return np.zeros((x.shape[0], 2, 1, 1))

    def dW_dy(x, y):
        out = np.zeros((x.shape[0], 2, 1, 1))
        out[:, 0] = 1.0
        return out

    return first_order(W, dW_dx, dW_dy, 1, 1)


def builtin_suite():
    return [
        constant([0.3, -0.1], [[1.0, 0.2], [0.0, 0.7]]),
        mean_field_ou(2.0, 0.5),
        mean_attraction(1.5, 0.8, dim=2, feature="tanh"),
        mean_attraction(0.7, 1.1, feature="sin"),
        kernel_attraction(1.2, 0.6, dim=2, kernel="tanh"),
        geometric(0.1, 0.4),
        sine_diffusion(0.2, 1.0, 0.3),
    ]


def central_jacobian(fn, x, step):
    # independent central differences, one coordinate at a time
    cols = []
    for c in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, c] = step
        cols.append((fn(x + e) - fn(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


class TestExamples:
    def test_constant_is_inert(self, rng):
        m = constant(0.0, 1.0)
        mu = EmpiricalMeasure(rng.standard_normal((5, 1)))
        ev = eval_all(m, [0.4], mu, blocks=("drift", "diffusion", "dx", "dmu"), v=[1.0])
        np.testing.assert_allclose(ev.drift, [0.0])
        np.testing.assert_allclose(ev.diffusion, [[1.0]])
        np.testing.assert_allclose(ev.dx, np.zeros((2, 1, 1)))
        np.testing.assert_allclose(ev.dmu, np.zeros((2, 1, 1)))

    def test_mean_field_ou_values(self):
        m = mean_field_ou(2.0, 0.5)
        mu = EmpiricalMeasure([[0.0], [2.0]])
        ev = eval_all(m, [1.0], mu, blocks=("drift", "diffusion", "dx", "dmu"), v=[-3.0])
        np.testing.assert_allclose(ev.drift, [0.0])
        np.testing.assert_allclose(ev.diffusion, [[0.5]])
        np.testing.assert_allclose(ev.dx[0], [[-2.0]])
        for v in (-3.0, 0.0, 5.0):
            np.testing.assert_allclose(m.lions(np.array([[1.0]]), mu, np.array([[v]]))[0, 0], [[2.0]])

    def test_scalar_interaction_product(self):
        m = product_model()
        mu = EmpiricalMeasure([[1.0], [-1.0]])
        x = np.array([[0.8]])
        np.testing.assert_allclose(m.fields(x, mu)[0, 0], [0.8])
        for j, v in enumerate((1.0, -1.0)):
            analytic = m.lions(x, mu, np.array([[v]]))[0, 0, 0, 0]
            np.testing.assert_allclose(analytic, 0.8 * 2 * v)
            probe = lions_fd_probe(m, x[0], mu, j, 0, 1e-6)
            np.testing.assert_allclose(probe[0], analytic, rtol=1e-5)

    def test_first_order_mean(self, rng):
        m = mean_model()
        pts = rng.standard_normal((7, 1))
        mu = EmpiricalMeasure(pts)
        np.testing.assert_allclose(m.fields(np.zeros((1, 1)), mu)[0, 0], pts.mean(axis=0), rtol=1e-14)
        np.testing.assert_allclose(m.lions(np.zeros((1, 1)), mu, np.array([[3.0]]))[0, 0], [[1.0]])


class TestDerivatives:
    @pytest.mark.parametrize("k", range(7))
    def test_jacobians_match_central_differences(self, rng, k):
        m = builtin_suite()[k]
        N = m.dim_state
        mu = EmpiricalMeasure(rng.standard_normal((9, N)))
        x = rng.uniform(-2, 2, size=(100, N))
        step = 1e-4
        fd = central_jacobian(lambda y: m.fields(y, mu), x, step)
        an = m.jacobians(x, mu)
        scale = 1.0 + np.abs(m.fields(x, mu))[..., None]
        assert np.all(np.abs(an - fd) <= 1e-6 * scale)

    @pytest.mark.parametrize("make", [product_model, mean_model, lambda: mean_attraction(1.0, 1.0, feature="tanh")])
    def test_lions_probe_order(self, rng, make):
        m = make()
        mu = EmpiricalMeasure(rng.standard_normal((6, 1)))
        x = np.array([0.3])
        exact = m.lions(x[None], mu, mu.points[2:3])[0, 0, 0, 0]
        errs = np.array([abs(lions_fd_probe(m, x, mu, 2, 0, h)[0] - exact) for h in (0.1, 0.05, 0.025)])
        if errs.max() < 1e-10:
            return  # linear in the particle, the probe is exact
        order = np.log2(errs[:-1] / errs[1:])
        assert np.all(order >= 0.9)

    def test_factorized_average_matches_generic(self, rng):
        m = mean_attraction(1.3, 0.9, dim=2, feature="tanh")
        mu = EmpiricalMeasure(rng.standard_normal((40, 2)))
        x = rng.standard_normal((11, 2))
        w = rng.standard_normal((40, 2, 3))
        np.testing.assert_allclose(m.lions_average(x, mu, w), m._lions_average_pairs(x, mu, w), rtol=1e-12, atol=1e-14)

    def test_factorized_paired_matches_generic(self, rng):
        m = mean_attraction(1.3, 0.9, dim=2, feature="sin")
        mu = EmpiricalMeasure(rng.standard_normal((10, 2)))
        x, v = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        w = rng.standard_normal((5, 2, 4))
        generic = np.einsum("biac,bcp->biap", m.lions(x, mu, v), w)
        np.testing.assert_allclose(m.lions_paired(x, mu, v, w), generic, rtol=1e-12, atol=1e-14)

    def test_lions_average_dx(self, rng):
        m = kernel_attraction(0.9, 1.0, kernel="tanh")
        mu = EmpiricalMeasure(rng.standard_normal((8, 1)))
        x = rng.standard_normal((4, 1))
        w = rng.standard_normal((8, 1, 2))
        fd = central_jacobian(lambda y: m.lions_average(y, mu, w), x, 1e-5)
        np.testing.assert_allclose(m.lions_average_dx(x, mu, w), fd, rtol=1e-6, atol=1e-8)


class TestEllipticity:
    def test_scalar_unit(self):
        mu = EmpiricalMeasure([[0.0]])
        assert check_ellipticity(constant(0.0, 1.0), [(np.zeros((1, 1)), mu)]).min_eigenvalue == 1.0

    def test_identity_columns(self):
        mu = EmpiricalMeasure(np.zeros((1, 2)))
        rep = check_ellipticity(constant([0.0, 0.0], np.eye(2)), [(np.zeros((1, 2)), mu)])
        np.testing.assert_allclose(rep.min_eigenvalue, 1.0)

    def test_ou(self, rng):
        mu = EmpiricalMeasure(rng.standard_normal((4, 1)))
        rep = check_ellipticity(mean_field_ou(1.0, 0.5), [(rng.standard_normal((3, 1)), mu)])
        np.testing.assert_allclose(rep.min_eigenvalue, 0.25)
        assert not rep.violated

    def test_sine_floor(self, rng):
        m = sine_diffusion(0.0, 1.0, 0.3)
        mu = EmpiricalMeasure([[0.0]])
        rep = check_ellipticity(m, [(rng.uniform(-5, 5, size=(200, 1)), mu)])
        assert rep.min_eigenvalue >= m.ellipticity_floor


class TestValidation:
    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            build_model("nope", {})

    def test_bad_parameters(self):
        with pytest.raises(ConfigError):
            build_model("mean_field_ou", {"a": -1.0, "sigma0": 1.0})
        with pytest.raises(ConfigError):
            build_model("constant", {"b": 0.0})

    def test_shape_check(self):
        with pytest.raises(DimensionError):
            mean_field_ou(1.0, 1.0).fields(np.zeros((3, 2)), EmpiricalMeasure([[0.0]]))

    def test_non_finite_output(self):
        m = geometric(0.5, 1.0)
        with pytest.raises(ModelEvaluationError):
            m.fields(np.array([[np.inf]]), EmpiricalMeasure([[0.0]]))

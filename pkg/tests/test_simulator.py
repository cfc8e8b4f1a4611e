import io
import math

import numpy as np
import pytest

from mvflow import BrownianDriver, TimeGrid, constant, mean_field_ou, simulate_decoupled, simulate_particles
from mvflow.errors import BlowUpError, ConfigError, DimensionError
from mvflow.simulator import dump_paths_csv, euler_step, simulate_fixed_point


class TestTimeGrid:
    def test_nodes(self):
        g = TimeGrid(1.0, 8)
        assert g.h == 0.125
        assert g.index_of(0.5) == 4
        assert g.times[-1] == 1.0

    def test_off_grid(self):
        with pytest.raises(ConfigError):
            TimeGrid(1.0, 8).index_of(0.3)

    @pytest.mark.parametrize("T,n", [(-1.0, 4), (0.0, 4), (1.0, 0), (float("inf"), 4)])
    def test_invalid(self, T, n):
        with pytest.raises(ConfigError):
            TimeGrid(T, n)


class TestBrownianDriver:
    def test_batch_invariance(self):
        drv = BrownianDriver(7)
        full = drv.normals(0, 700, 5)
        np.testing.assert_array_equal(full[130:610], drv.normals(130, 480, 5))

    def test_streams_independent(self):
        a = BrownianDriver(7).child("a").normals(0, 1000, 1)
        b = BrownianDriver(7).child("b").normals(0, 1000, 1)
        assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.1

    def test_refinement_shares_path(self):
        drv = BrownianDriver(3)
        coarse = drv.increments(TimeGrid(1.0, 4), 0, 10, refine=4)
        fine = drv.increments(TimeGrid(1.0, 16), 0, 10)
        np.testing.assert_allclose(coarse, fine.reshape(10, 4, 4, 1).sum(axis=2), rtol=1e-13, atol=1e-15)

    def test_increment_variance(self):
        inc = BrownianDriver(1).increments(TimeGrid(2.0, 4), 0, 20000)
        np.testing.assert_allclose(inc.var(axis=0).ravel(), 0.5, rtol=0.05)


class TestParticles:
    def test_zero_dynamics(self, rng):
        theta = rng.standard_normal((5, 1))
        p = simulate_particles(constant(0.0, 0.0), theta, 5, TimeGrid(1.0, 6), BrownianDriver(0))
        for k in range(7):
            np.testing.assert_array_equal(p.states[k], theta)

    def test_deterministic_drift(self, rng):
        theta = rng.standard_normal((4, 1))
        p = simulate_particles(constant(1.0, 0.0), theta, 4, TimeGrid(1.0, 10), BrownianDriver(0))
        np.testing.assert_allclose(p.states[-1], theta + 1.0, rtol=1e-14, atol=1e-14)

    def test_ou_mean_is_conserved(self, ou):
        M = 4000
        p = simulate_particles(ou, lambda r, m: 1.0 + r.standard_normal((m, 1)), M, TimeGrid(2.0, 40), BrownianDriver(5))
        band = 3 * 0.5 * math.sqrt(2.0) / math.sqrt(M)
        m0 = p.states[0].mean()
        assert np.all(np.abs(p.states.mean(axis=(1, 2)) - m0) <= band)

    def test_rejects_single_particle(self, ou):
        with pytest.raises(ConfigError):
            simulate_particles(ou, np.zeros((1, 1)), 1, TimeGrid(1.0, 4), BrownianDriver(0))

    def test_rejects_bad_cloud(self, ou):
        with pytest.raises(DimensionError):
            simulate_particles(ou, np.zeros((3, 2)), 3, TimeGrid(1.0, 4), BrownianDriver(0))

    def test_determinism(self, ou):
        args = (ou, lambda r, m: r.standard_normal((m, 1)), 50, TimeGrid(1.0, 16))
        a = simulate_particles(*args, BrownianDriver(11))
        b = simulate_particles(*args, BrownianDriver(11))
        np.testing.assert_array_equal(a.states, b.states)

    def test_flow_property(self, ou):
        grid = TimeGrid(1.0, 20)
        full = simulate_particles(ou, lambda r, m: r.standard_normal((m, 1)), 30, grid, BrownianDriver(2))
        k = 7
        tail = full.tail(k)
        restart = simulate_particles(ou, full.states[k], 30, tail.grid, BrownianDriver(99), increments=tail.increments)
        np.testing.assert_array_equal(restart.states, full.states[k:])

    def test_moment_and_time_regularity(self, ou):
        grid = TimeGrid(1.0, 32)
        p = simulate_particles(ou, lambda r, m: 2.0 * r.standard_normal((m, 1)), 2000, grid, BrownianDriver(4))
        l2 = np.sqrt(np.mean(p.states ** 2, axis=(1, 2)))
        assert l2.max() <= 1.5 * (1 + l2[0])
        rng = np.random.default_rng(42)
        for _ in range(10):
            i, j = sorted(rng.choice(33, size=2, replace=False))
            incr = np.sqrt(np.mean((p.states[j] - p.states[i]) ** 2))
            assert incr / math.sqrt(grid.times[j] - grid.times[i]) < 3.0

    def test_blow_up_reported(self):
        with np.errstate(over="ignore"):
            with pytest.raises(BlowUpError) as info:
                simulate_particles(constant(1e308, 0.0), np.ones((2, 1)), 2, TimeGrid(4.0, 2), BrownianDriver(0))
        assert info.value.step == 1


class TestDecoupled:
    def test_brownian_path(self, bm):
        grid = TimeGrid(1.0, 12)
        law = simulate_particles(bm, np.zeros((2, 1)), 2, grid, BrownianDriver(0))
        drv = BrownianDriver(8)
        b = simulate_decoupled(bm, [0.0], law, drv, n_paths=5)
        np.testing.assert_allclose(b.states[:, 1:], np.cumsum(drv.increments(grid, 0, 5), axis=1), rtol=1e-14, atol=1e-15)

    def test_ou_pinned_law(self, ou):
        x, t = 0.8, 1.0
        law, b = simulate_fixed_point(ou, [x], 2000, TimeGrid(t, 64), BrownianDriver(3), n_paths=40000)
        X = b.states[:, -1, 0]
        var = 0.25 * (1 - math.exp(-2 * t)) / 2
        se = math.sqrt(var / X.size)
        assert abs(X.mean() - x) < 3 * se + 0.01
        assert abs(X.var() - var) < 3 * var * math.sqrt(2 / X.size) + 0.01 * var

    def test_constant_law(self):
        m = constant([0.5], [[2.0]])
        law = simulate_particles(m, np.zeros((2, 1)), 2, TimeGrid(1.0, 4), BrownianDriver(0))
        X = simulate_decoupled(m, [1.0], law, BrownianDriver(1), n_paths=40000).states[:, -1, 0]
        assert abs(X.mean() - 1.5) < 3 * 2 / math.sqrt(X.size)
        np.testing.assert_allclose(X.var(), 4.0, rtol=0.03)

    def test_restart_is_bit_exact(self, ou):
        grid = TimeGrid(1.0, 16)
        law = simulate_particles(ou, lambda r, m: r.standard_normal((m, 1)), 20, grid, BrownianDriver(0))
        drv = BrownianDriver(1)
        full = simulate_decoupled(ou, [0.3], law, drv, n_paths=6)
        head = simulate_decoupled(ou, [0.3], law, drv, n_paths=6, stop_step=5)
        tail = simulate_decoupled(ou, head.states[:, -1], law, start_step=5, increments=full.increments[:, 5:])
        np.testing.assert_array_equal(tail.states, full.states[:, 5:])

    def test_euler_step_matches(self, ou, rng):
        from mvflow import EmpiricalMeasure
        mu = EmpiricalMeasure(rng.standard_normal((5, 1)))
        X = rng.standard_normal((3, 1))
        xi = rng.standard_normal((3, 1)) * 0.1
        expected = X + 1.0 * (mu.mean() - X) * 0.01 + 0.5 * xi
        np.testing.assert_allclose(euler_step(ou, X, mu, 0.01, xi), expected, rtol=1e-14)


class TestWeakConvergence:
    def test_euler_bias_is_first_order(self, ou):
        # same Brownian path at every resolution, so the differences are nearly noise free
        a, s, T, x = 1.0, 0.5, 1.0, 0.0
        exact = s ** 2 * (1 - math.exp(-2 * a * T)) / (2 * a)
        drv = BrownianDriver(6)
        biases = []
        for n in (8, 16, 32):
            grid = TimeGrid(T, n)
            r = 32 // n
            law = simulate_particles(ou, np.zeros((4000, 1)), 4000, grid, drv.child("particles"),
                                     increments=drv.child("particles").increments(grid, 0, 4000, refine=r))
            inc = drv.child("paths").increments(grid, 0, 200000, refine=r)
            X = simulate_decoupled(ou, [x], law, increments=inc).states[:, -1, 0]
            biases.append(np.mean(X ** 2) - exact)
        ratios = np.abs(biases[0] / biases[1]), np.abs(biases[1] / biases[2])
        assert all(1.6 <= q <= 2.6 for q in ratios)


class TestDump:
    def test_csv_rows(self, ou):
        law = simulate_particles(ou, np.zeros((3, 1)), 3, TimeGrid(1.0, 2), BrownianDriver(0))
        buf = io.StringIO()
        dump_paths_csv(law, buf, header_comment="config_hash=abc")
        lines = buf.getvalue().splitlines()
        assert lines[0] == "# config_hash=abc"
        assert lines[1] == "step,particle,coord,value"
        assert len(lines) == 2 + 3 * 3

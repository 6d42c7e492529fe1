import numpy as np
import pytest

from assimlab import diffcore as dc
from assimlab.errors import (ConfigError, MagicMismatchError,
                             TruncatedFileError, VersionMismatchError)
from assimlab.lorenz96 import (Lorenz96Config, load_trajectory, propagate_k,
                               rk4_step, save_trajectory, simulate, tendency)

from helpers import check_grad_matches_fd

F = 8.0


class TestTendency:
    def test_equilibrium_is_fixed_point(self):
        x = F * np.ones(40)
        np.testing.assert_array_equal(tendency(x, F), np.zeros(40))

    def test_shift_equivariance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(40)
        for s in (1, 7, 13):
            np.testing.assert_allclose(tendency(np.roll(x, s), F),
                                       np.roll(tendency(x, F), s), rtol=1e-15)

    def test_hand_computed_n5(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        # d x_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + 8, cyclic
        expected = np.array([
            (2 - 4) * 5 - 1 + 8,   # -3
            (3 - 5) * 1 - 2 + 8,   # 4
            (4 - 1) * 2 - 3 + 8,   # 11
            (5 - 2) * 3 - 4 + 8,   # 13
            (1 - 3) * 4 - 5 + 8,   # -5
        ])
        np.testing.assert_array_equal(tendency(x, F), expected)

    def test_rejects_small_n(self):
        with pytest.raises(ConfigError):
            tendency(np.ones(3), F)


class TestRk4:
    def test_equilibrium_unchanged(self):
        x = F * np.ones(40)
        np.testing.assert_allclose(rk4_step(x, 0.01, F), x, atol=1e-15)

    def test_richardson_convergence_order(self):
        cfg = Lorenz96Config()
        x0 = simulate(cfg, 0, seed=5).states[0]

        def integrate(x, dt, steps):
            for _ in range(steps):
                x = rk4_step(x, dt, F)
            return x

        horizon = 1.0
        errs = []
        ref = integrate(x0, horizon / 1600, 1600)
        for m in (100, 200, 400):
            errs.append(np.linalg.norm(integrate(x0, horizon / m, m) - ref))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 3.7) and np.all(orders < 4.3)

    def test_doubling_time_near_042(self):
        # average the growth-rate fit over several attractor segments
        cfg = Lorenz96Config()
        tr = simulate(cfg, 50000, seed=42)
        t = 0.01 * np.arange(1, 401)
        sel = slice(50, 300)
        doubling = []
        for s in range(10):
            x = tr.states[5000 * s].copy()
            y = x + 1e-8 * np.random.default_rng(s).standard_normal(40)
            d = []
            for _ in range(400):
                x = rk4_step(x, 0.01, F)
                y = rk4_step(y, 0.01, F)
                d.append(np.linalg.norm(x - y))
            slope = np.polyfit(t[sel], np.log(np.array(d)[sel]), 1)[0]
            doubling.append(np.log(2.0) / slope)
        mean_doubling = float(np.mean(doubling))
        assert 0.42 * 0.8 < mean_doubling < 0.42 * 1.2


class TestSimulate:
    def test_zero_steps_single_state(self):
        tr = simulate(Lorenz96Config(), 0, seed=1)
        assert tr.states.shape == (1, 40)
        assert np.all(np.isfinite(tr.states))

    def test_same_seed_bit_identical(self):
        cfg = Lorenz96Config()
        a = simulate(cfg, 50, seed=9)
        b = simulate(cfg, 50, seed=9)
        assert np.array_equal(a.states, b.states)

    def test_equilibrium_drift(self):
        cfg = Lorenz96Config(spinup_steps=0)
        tr = simulate(cfg, 1000, x0=F * np.ones(40), seed=0)
        assert np.max(np.abs(tr.states - F)) < 1e-9

    def test_attractor_statistics(self):
        # frozen from a 1e5-step reference run of this simulator:
        # mean 2.35, variance 13.27 (n=40, F=8)
        tr = simulate(Lorenz96Config(), 100000, seed=42)
        assert abs(tr.states.mean() - 2.3) < 0.15 * 2.3
        assert abs(tr.states.var() - 13.0) < 0.15 * 13.0


class TestPropagate:
    def test_k_zero_is_identity(self):
        x = np.arange(5.0)
        np.testing.assert_array_equal(propagate_k(x, 0, 0.01, F), x)

    def test_composition(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(40)
        a = propagate_k(propagate_k(x, 3, 0.01, F), 4, 0.01, F)
        b = propagate_k(x, 7, 0.01, F)
        assert np.array_equal(a, b)

    def test_shift_equivariance_all_k(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(40) + 2.0
        for k in (1, 5, 20):
            a = propagate_k(np.roll(x, 3), k, 0.01, F)
            b = np.roll(propagate_k(x, k, 0.01, F), 3)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(40) + 2.0
        err, _, _ = check_grad_matches_fd(
            lambda xv: dc.sumsq(propagate_k(xv, 5, 0.01, F)), x, eps=1e-5)
        assert err < 1e-5

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(6)
        xb = rng.standard_normal((3, 40))
        out = propagate_k(xb, 4, 0.01, F)
        for i in range(3):
            np.testing.assert_array_equal(out[i], propagate_k(xb[i], 4, 0.01, F))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        tr = simulate(Lorenz96Config(), 25, seed=3)
        p = tmp_path / "t.l96t"
        save_trajectory(tr, p)
        back = load_trajectory(p)
        assert np.array_equal(back.states, tr.states)
        assert back.config == tr.config
        assert back.seed == tr.seed

    def test_corrupted_magic(self, tmp_path):
        tr = simulate(Lorenz96Config(), 5, seed=3)
        p = tmp_path / "t.l96t"
        save_trajectory(tr, p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"XXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(MagicMismatchError):
            load_trajectory(p)

    def test_bad_version(self, tmp_path):
        tr = simulate(Lorenz96Config(), 5, seed=3)
        p = tmp_path / "t.l96t"
        save_trajectory(tr, p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_trajectory(p)

    def test_truncated(self, tmp_path):
        tr = simulate(Lorenz96Config(), 5, seed=3)
        p = tmp_path / "t.l96t"
        save_trajectory(tr, p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(TruncatedFileError):
            load_trajectory(p)

import numpy as np
import pytest

from assimlab import codanet, diffcore as dc
from assimlab.codanet import (Checkpoint, GaussianField, NetworkConfig,
                              dropout_mask, forward, init_params,
                              load_checkpoint, param_shapes, sample,
                              save_checkpoint)
from assimlab.errors import (ContractViolation, MagicMismatchError,
                             ShapeMismatchError, TruncatedFileError,
                             VersionMismatchError)

from helpers import check_grad_matches_fd


CFG = NetworkConfig(window_half_width=3, hidden_channels=6, depth=2,
                    kernel_width=5, dropout_rate=0.2)


def random_window(seed=0, n=20, batch=None):
    rng = np.random.default_rng(seed)
    shape = (CFG.window_len, n) if batch is None else (batch, CFG.window_len, n)
    vals = rng.standard_normal(shape)
    mask = (rng.random(shape) < 0.25).astype(float)
    return vals * mask, mask


class TestForward:
    def test_shift_equivariance_all_modes(self):
        params = init_params(CFG, seed=1)
        vals, mask = random_window(2)
        for mode, seed in (("deterministic", None), ("gaussian", None),
                           ("dropout", 5)):
            f0 = forward(params, vals, mask, CFG, mode=mode, dropout_seed=seed)
            f1 = forward(params, np.roll(vals, 4, axis=1),
                         np.roll(mask, 4, axis=1), CFG, mode=mode,
                         dropout_seed=seed)
            mu0, sg0 = f0.arrays()
            mu1, sg1 = f1.arrays()
            if mode == "dropout":
                # dropout mask is drawn in unshifted coordinates; compare
                # deterministic part only by reusing rate 0
                continue
            np.testing.assert_allclose(np.roll(mu0, 4), mu1,
                                       rtol=1e-12, atol=1e-13)
            np.testing.assert_allclose(np.roll(sg0, 4), sg1,
                                       rtol=1e-12, atol=1e-13)

    def test_zero_dropout_rate_seed_independent(self):
        cfg = NetworkConfig(window_half_width=3, hidden_channels=6, depth=2,
                            kernel_width=5, dropout_rate=0.0)
        params = init_params(cfg, seed=1)
        vals, mask = random_window(3)
        a = forward(params, vals, mask, cfg, mode="dropout", dropout_seed=1)
        b = forward(params, vals, mask, cfg, mode="dropout", dropout_seed=2)
        np.testing.assert_array_equal(a.arrays()[0], b.arrays()[0])

    def test_deterministic_mode_unit_sigma(self):
        params = init_params(CFG, seed=1)
        vals, mask = random_window(4)
        fld = forward(params, vals, mask, CFG, mode="deterministic")
        np.testing.assert_array_equal(fld.arrays()[1], 1.0)

    def test_sigma_floor_holds(self):
        params = init_params(CFG, seed=2)
        for seed in range(10):
            vals, mask = random_window(seed)
            fld = forward(params, vals, mask, CFG, mode="gaussian")
            assert np.all(fld.arrays()[1] >= CFG.sigma_floor)

    def test_gradient_of_mu_sum_matches_fd(self):
        params = init_params(CFG, seed=3)
        vals, mask = random_window(5)
        for name in ("conv0.w", "conv1.b", "head.w"):
            def f(pv):
                p = dict(params)
                p[name] = pv
                return dc.vsum(forward(p, vals, mask, CFG, mode="gaussian").mu)

            err, _, _ = check_grad_matches_fd(f, params[name], eps=1e-5)
            assert err < 1e-5, name

    def test_batched_matches_single(self):
        params = init_params(CFG, seed=4)
        vals, mask = random_window(6, batch=3)
        fb = forward(params, vals, mask, CFG, mode="gaussian")
        mub, sgb = fb.arrays()
        for i in range(3):
            fi = forward(params, vals[i], mask[i], CFG, mode="gaussian")
            mui, sgi = fi.arrays()
            np.testing.assert_allclose(mub[i], mui, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(sgb[i], sgi, rtol=1e-12, atol=1e-14)

    def test_shape_mismatch_rejected(self):
        params = init_params(CFG, seed=1)
        vals, mask = random_window(7)
        with pytest.raises(ContractViolation):
            forward(params, vals[:-1], mask, CFG)
        with pytest.raises(ContractViolation):
            forward(params, vals[:-1], mask[:-1], CFG)

    def test_dropout_fraction(self):
        trials, shape = 400, (6, 20)
        zero_frac = []
        for s in range(trials):
            m = dropout_mask(shape, 0.2, seed=s)
            zero_frac.append(np.mean(m == 0.0))
        n = trials * shape[0] * shape[1]
        assert abs(np.mean(zero_frac) - 0.2) < 3.0 / np.sqrt(n)
        # survivors carry the 1/(1-p) inverse scaling
        m = dropout_mask(shape, 0.2, seed=0)
        assert np.allclose(m[m > 0], 1.0 / 0.8)


class TestSample:
    def test_tight_sigma_stays_near_mu(self):
        mu = np.array([1.0, -2.0, 0.5])
        fld = GaussianField(mu=mu, sigma=np.full(3, 1e-12))
        x = sample(fld, seed=0)
        np.testing.assert_allclose(x.value, mu, atol=1e-10)

    def test_monte_carlo_moments(self):
        mu = np.array([0.3])
        sigma = np.array([1.7])
        draws = np.array([sample(GaussianField(mu, sigma), seed=s).value[0]
                          for s in range(100000)])
        assert abs(draws.mean() - 0.3) < 0.01 * 1.7 + 0.01
        assert abs(draws.std() - 1.7) / 1.7 < 0.01

    def test_reparameterization_gradients(self):
        mu = np.array([0.5, -1.0])
        sigma = np.array([0.7, 1.2])
        seed = 9

        def f_mu(m):
            return dc.vsum(sample(GaussianField(m, dc.Var(sigma)), seed))

        def f_sg(s):
            return dc.vsum(sample(GaussianField(dc.Var(mu), s), seed))

        err, g, _ = check_grad_matches_fd(f_mu, mu)
        assert err < 1e-6
        np.testing.assert_allclose(g, 1.0)
        err, g, fd = check_grad_matches_fd(f_sg, sigma)
        assert err < 1e-6
        # d sample / d sigma equals the underlying standard normal draw
        x = sample(GaussianField(mu, sigma), seed).value
        np.testing.assert_allclose(g, (x - mu) / sigma, rtol=1e-9)


class TestCheckpoint:
    def make(self, seed=0):
        params = init_params(CFG, seed=seed)
        meta = {"lambda": "0.3", "h": "10", "seed": "7", "dataset_id": "small",
                "epoch": "3"}
        return Checkpoint(params=params, config=CFG, metadata=meta)

    def test_round_trip_bit_exact(self, tmp_path):
        ck = self.make()
        p = tmp_path / "c.coda"
        save_checkpoint(ck, p)
        back = load_checkpoint(p)
        assert back.config == ck.config
        assert back.metadata == ck.metadata
        assert set(back.params) == set(ck.params)
        for k in ck.params:
            assert np.array_equal(back.params[k], ck.params[k])

    def test_corrupted_magic(self, tmp_path):
        ck = self.make()
        p = tmp_path / "c.coda"
        save_checkpoint(ck, p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"JUNK"
        p.write_bytes(bytes(raw))
        with pytest.raises(MagicMismatchError):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        ck = self.make()
        p = tmp_path / "c.coda"
        save_checkpoint(ck, p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = (42).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        ck = self.make()
        p = tmp_path / "c.coda"
        save_checkpoint(ck, p)
        p.write_bytes(p.read_bytes()[:-9])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(p)

    def test_shape_disagreement(self, tmp_path):
        ck = self.make()
        bad = dict(ck.params)
        bad["head.b"] = np.zeros(3)  # config implies 2
        p = tmp_path / "c.coda"
        save_checkpoint(Checkpoint(params=bad, config=CFG, metadata={}), p)
        with pytest.raises(ShapeMismatchError):
            load_checkpoint(p)

    def test_param_shapes_consistent_with_init(self):
        params = init_params(CFG, seed=5)
        shapes = param_shapes(CFG)
        assert set(params) == set(shapes)
        for k, s in shapes.items():
            assert params[k].shape == s

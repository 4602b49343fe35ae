"""Measurement-model tests: mask arithmetic, forward/adjoint, RSS."""

import numpy as np
import pytest

from ttt_recon import diffcore as dc
from ttt_recon.diffcore import Tensor
from ttt_recon.errors import ConfigError, ShapeError
from ttt_recon.operators import (
    KSpaceSample,
    adjoint_zf,
    fft2c_np,
    forward,
    ifft2c_np,
    make_mask,
    rss,
    undersample,
)


def normalized_sens(rng, n_c, h, w):
    s = rng.standard_normal((n_c, h, w)) + 1j * rng.standard_normal((n_c, h, w))
    s = s + 2.0  # keep away from zero so normalization is well-behaved
    s /= np.sqrt((np.abs(s) ** 2).sum(axis=0, keepdims=True))
    return s.astype(np.complex64)


class TestMakeMask:
    def test_full_sampling(self):
        m = make_mask(64, 1, 0.0, seed=0)
        assert m.columns.all()
        assert m.n_selected == 64
        assert m.acs_columns == frozenset()

    def test_4x_with_8pct_center(self):
        m = make_mask(64, 4, 0.08, seed=3)
        assert len(m.acs_columns) == 5
        assert m.n_selected == 16
        acs = sorted(m.acs_columns)
        assert acs == list(range(acs[0], acs[0] + 5))  # contiguous
        assert 32 in m.acs_columns  # covers the DC column
        assert m.columns[acs].all()

    def test_2x_with_16pct_center(self):
        m = make_mask(64, 2, 0.16, seed=3)
        assert len(m.acs_columns) == 10
        assert m.n_selected == 32

    def test_deterministic_in_seed(self):
        a = make_mask(64, 4, 0.08, seed=9)
        b = make_mask(64, 4, 0.08, seed=9)
        c = make_mask(64, 4, 0.08, seed=10)
        assert np.array_equal(a.columns, b.columns)
        assert not np.array_equal(a.columns, c.columns)

    def test_acs_larger_than_budget_rejected(self):
        with pytest.raises(ConfigError):
            make_mask(64, 16, 0.5, seed=0)  # 4 columns total but 32 ACS

    def test_bad_width(self):
        with pytest.raises(ConfigError):
            make_mask(4, 2, 0.0, seed=0)


class TestForward:
    def test_single_coil_unit_sens_full_mask_is_fft(self):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16)).astype(np.float32)
        sens = np.ones((1, 16, 16), dtype=np.complex64)
        mask = make_mask(16, 1, 0.0, seed=0)
        out = forward(Tensor(img), Tensor(sens), mask).numpy()
        want = fft2c_np(img)
        assert np.allclose(out[0], want, atol=1e-6)

    def test_output_zero_on_unselected_columns(self):
        rng = np.random.default_rng(1)
        img = rng.random((16, 16)).astype(np.float32)
        sens = normalized_sens(rng, 3, 16, 16)
        mask = make_mask(16, 4, 0.1, seed=1)
        out = forward(Tensor(img), Tensor(sens), mask).numpy()
        assert not out[:, :, ~mask.columns].any()

    def test_adjoint_dot_identity_100_trials(self):
        # oracle adjoint: A^H y = sum_i Re(conj(S_i) * ifft2c(M y_i))
        rng = np.random.default_rng(2)
        h = w = 12
        for trial in range(100):
            sens = normalized_sens(rng, 2, h, w)
            mask = make_mask(w, rng.uniform(1, 4), 0.1, seed=trial)
            x = rng.standard_normal((h, w)).astype(np.float32)
            y = (rng.standard_normal((2, h, w)) + 1j * rng.standard_normal((2, h, w))).astype(np.complex64)
            ax = forward(Tensor(x), Tensor(sens), mask).numpy()
            aty = (np.conj(sens) * ifft2c_np(y * mask.as_row())).sum(axis=0).real
            lhs = dc.inner(ax, y)
            rhs = dc.inner(x, aty.astype(np.float32))
            bound = 1e-5 * max(np.linalg.norm(x) * np.linalg.norm(y), 1e-9)
            assert abs(lhs - rhs) <= bound

    def test_gradient_wrt_image_vs_engine_adjoint(self):
        rng = np.random.default_rng(3)
        sens = normalized_sens(rng, 2, 8, 8)
        mask = make_mask(8, 2, 0.2, seed=5)
        x = Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        out = forward(x, Tensor(sens), mask)
        y = (rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape)).astype(np.complex64)
        out.backward(seed=y)
        want = (np.conj(sens) * ifft2c_np(y * mask.as_row())).sum(axis=0).real
        assert np.allclose(x.grad.numpy(), want, atol=1e-5)

    def test_mask_mismatch(self):
        mask = make_mask(8, 2, 0.2, seed=0)
        with pytest.raises(ShapeError):
            forward(Tensor(np.zeros((8, 12), np.float32)), Tensor(np.zeros((1, 8, 12), np.complex64)), mask)

    def test_energy_nonexpansive(self):
        rng = np.random.default_rng(4)
        sens = normalized_sens(rng, 4, 16, 16)
        for trial in range(20):
            mask = make_mask(16, rng.uniform(1, 4), 0.1, seed=trial)
            x = rng.standard_normal((16, 16)).astype(np.float32)
            ax = forward(Tensor(x), Tensor(sens), mask).numpy()
            assert np.linalg.norm(ax) <= np.linalg.norm(x) * (1 + 1e-5)

    def test_mask_idempotent(self):
        rng = np.random.default_rng(5)
        mask = make_mask(16, 3, 0.1, seed=6)
        y = (rng.standard_normal((2, 16, 16)) + 1j * rng.standard_normal((2, 16, 16))).astype(np.complex64)
        once = y * mask.as_row()
        twice = once * mask.as_row()
        assert np.array_equal(once, twice)


class TestAdjointZF:
    def test_exact_inversion_full_mask(self):
        rng = np.random.default_rng(6)
        img = rng.random((16, 16)).astype(np.float32)  # nonnegative
        sens = normalized_sens(rng, 3, 16, 16)
        mask = make_mask(16, 1, 0.0, seed=0)
        ks = forward(Tensor(img), Tensor(sens), mask)
        rec = adjoint_zf(ks, mask).numpy()
        assert np.abs(rec - img).max() <= 1e-4

    def test_zero_kspace_gives_zero_image(self):
        mask = make_mask(16, 2, 0.1, seed=0)
        rec = adjoint_zf(Tensor(np.zeros((2, 16, 16), np.complex64)), mask).numpy()
        assert not rec.any()

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        ks = (rng.standard_normal((3, 16, 16)) + 1j * rng.standard_normal((3, 16, 16))).astype(np.complex64)
        mask = make_mask(16, 2.5, 0.12, seed=8)
        got = adjoint_zf(Tensor(ks), mask).numpy()
        coil = ifft2c_np(ks * mask.as_row())
        want = np.sqrt((np.abs(coil.astype(np.complex128)) ** 2).sum(axis=0))
        assert np.abs(got - want).max() <= 1e-5 * max(1.0, want.max())

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        ks = (rng.standard_normal((2, 16, 16)) + 1j * rng.standard_normal((2, 16, 16))).astype(np.complex64)
        mask = make_mask(16, 2, 0.1, seed=9)
        assert (adjoint_zf(Tensor(ks), mask).numpy() >= 0).all()


class TestRSS:
    def test_single_coil_is_magnitude(self):
        rng = np.random.default_rng(9)
        x = (rng.standard_normal((1, 8, 8)) + 1j * rng.standard_normal((1, 8, 8))).astype(np.complex64)
        assert np.allclose(rss(Tensor(x)).numpy(), np.abs(x[0]), atol=1e-6)

    def test_three_four_five(self):
        x = np.zeros((2, 1, 1), dtype=np.complex64)
        x[0] = 3.0
        x[1] = 4.0j
        assert rss(Tensor(x)).numpy()[0, 0] == pytest.approx(5.0)

    def test_matches_formula(self):
        rng = np.random.default_rng(10)
        x = (rng.standard_normal((4, 6, 6)) + 1j * rng.standard_normal((4, 6, 6))).astype(np.complex64)
        want = np.sqrt((np.abs(x) ** 2).sum(axis=0))
        assert np.allclose(rss(Tensor(x)).numpy(), want, atol=1e-5)


class TestUndersample:
    def test_noiseless_is_masking(self):
        rng = np.random.default_rng(11)
        ks = (rng.standard_normal((2, 16, 16)) + 1j * rng.standard_normal((2, 16, 16))).astype(np.complex64)
        sample = KSpaceSample(
            kspace_full=Tensor(ks),
            sens=Tensor(normalized_sens(rng, 2, 16, 16)),
            reference=Tensor(np.zeros((16, 16), np.float32)),
            id="t",
        )
        mask = make_mask(16, 2, 0.1, seed=12)
        meas = undersample(sample, mask)
        assert np.array_equal(meas.kspace.numpy(), ks * mask.as_row())

    def test_noise_knob_deterministic_and_masked(self):
        rng = np.random.default_rng(12)
        ks = (rng.standard_normal((1, 16, 16)) + 1j * rng.standard_normal((1, 16, 16))).astype(np.complex64)
        sample = KSpaceSample(
            kspace_full=Tensor(ks),
            sens=Tensor(np.ones((1, 16, 16), np.complex64)),
            reference=Tensor(np.zeros((16, 16), np.float32)),
            id="t",
        )
        mask = make_mask(16, 2, 0.1, seed=13)
        a = undersample(sample, mask, noise_std=0.1, noise_seed=1)
        b = undersample(sample, mask, noise_std=0.1, noise_seed=1)
        c = undersample(sample, mask, noise_std=0.1, noise_seed=2)
        assert np.array_equal(a.kspace.numpy(), b.kspace.numpy())
        assert not np.array_equal(a.kspace.numpy(), c.kspace.numpy())
        assert not a.kspace.numpy()[:, :, ~mask.columns].any()

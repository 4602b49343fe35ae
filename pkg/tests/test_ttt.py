"""Measurement splitting and the test-time-training loop."""

import numpy as np
import pytest

from ttt_recon.diffcore import Tensor
from ttt_recon.errors import ConfigError, ContractError
from ttt_recon.metrics import ssim
from ttt_recon.operators import Measurement, adjoint_zf, make_mask, undersample
from ttt_recon.phantoms import PhantomSpec, generate_sample
from ttt_recon.training import TrainConfig, train
from ttt_recon.ttt import (
    TTTConfig,
    reconstruct_with_ttt,
    split_measurement,
    ttt_adapt,
)
from ttt_recon.unet import UNetConfig, reconstruct_baseline, unet_forward, unet_init


def make_measurement(accel=2.0, cf=0.16, seed=0, mask_seed=5, resolution=32):
    spec = PhantomSpec(family="ellipses", resolution=resolution, n_coils=2, seed=seed)
    sample = generate_sample(spec, 0)
    mask = make_mask(resolution, accel, cf, seed=mask_seed)
    return undersample(sample, mask), sample


def small_model(seed=0):
    return unet_init(UNetConfig(n_pools=2, base_channels=8, seed=seed))


class TestSplitMeasurement:
    def test_zero_fraction_keeps_everything_in_train(self):
        mask = make_mask(64, 4, 0.08, seed=1)
        train_m, val_m = split_measurement(None, mask, 0.0, seed=2)
        assert np.array_equal(train_m.columns, mask.columns)
        assert not val_m.columns.any()

    def test_spec_arithmetic_16_selected_5_acs(self):
        mask = make_mask(64, 4, 0.08, seed=3)  # 16 selected, 5 ACS, 11 non-ACS
        train_m, val_m = split_measurement(None, mask, 0.2, seed=4)
        assert val_m.columns.sum() == 2  # floor(0.2 * 11)
        assert train_m.columns.sum() == 14

    def test_acs_always_in_train(self):
        mask = make_mask(64, 4, 0.08, seed=5)
        for seed in range(20):
            train_m, val_m = split_measurement(None, mask, 0.3, seed=seed)
            for c in mask.acs_columns:
                assert train_m.columns[c]
                assert not val_m.columns[c]

    def test_union_and_disjointness_100_masks(self):
        rng = np.random.default_rng(6)
        for trial in range(100):
            width = int(rng.choice([32, 48, 64]))
            accel = float(rng.uniform(1.5, 4))
            mask = make_mask(width, accel, 0.1, seed=trial)
            train_m, val_m = split_measurement(None, mask, 0.25, seed=trial)
            assert not (train_m.columns & val_m.columns).any()
            assert np.array_equal(train_m.columns | val_m.columns, mask.columns)

    def test_zero_val_count_is_config_error(self):
        mask = make_mask(64, 8, 0.08, seed=7)  # 8 selected, 5 ACS -> 3 non-ACS
        with pytest.raises(ConfigError, match="larger"):
            split_measurement(None, mask, 0.1, seed=8)  # floor(0.3) == 0

    def test_too_few_non_acs_rejected(self):
        mask = make_mask(64, 10, 0.08, seed=9)  # 6 selected, 5 ACS -> 1 non-ACS
        with pytest.raises(ContractError):
            split_measurement(None, mask, 0.5, seed=10)

    def test_deterministic_in_seed(self):
        mask = make_mask(64, 4, 0.08, seed=11)
        a = split_measurement(None, mask, 0.2, seed=12)
        b = split_measurement(None, mask, 0.2, seed=12)
        c = split_measurement(None, mask, 0.2, seed=13)
        assert np.array_equal(a[1].columns, b[1].columns)
        assert not np.array_equal(a[1].columns, c[1].columns)


class TestTTTAdapt:
    def test_zero_lr_is_noop_with_flat_trace(self):
        meas, _ = make_measurement()
        model = small_model()
        cfg = TTTConfig(lr=0.0, max_iters=6, val_fraction=0.2, patience=100, seed=1)
        adapted, trace = ttt_adapt(model, meas, cfg)
        for k in model.params:
            assert np.array_equal(adapted.params[k].numpy(), model.params[k].numpy())
        vals = {round(e.val_loss, 10) for e in trace.evals}
        assert len(vals) == 1

    def test_returned_model_attains_min_val(self):
        meas, _ = make_measurement(seed=1)
        model = small_model(seed=2)
        cfg = TTTConfig(lr=1e-3, max_iters=15, val_fraction=0.2, patience=50, seed=2)
        adapted, trace = ttt_adapt(model, meas, cfg)
        best = min(e.val_loss for e in trace.evals)
        assert trace.val_at(trace.chosen_iteration) == best
        # adapted params reproduce the recorded best val loss
        re_meas, _ = make_measurement(seed=1)
        _, trace2 = ttt_adapt(adapted, re_meas, TTTConfig(lr=0.0, max_iters=0, val_fraction=0.2, seed=2))
        assert trace2.evals[0].val_loss == pytest.approx(best, rel=1e-6)

    def test_idempotent_reruns(self):
        meas, _ = make_measurement(seed=3)
        model = small_model(seed=3)
        cfg = TTTConfig(lr=1e-3, max_iters=12, val_fraction=0.2, patience=4, seed=3)
        a_model, a_trace = ttt_adapt(model, meas, cfg)
        b_model, b_trace = ttt_adapt(model, meas, cfg)
        assert a_trace.chosen_iteration == b_trace.chosen_iteration
        assert [(e.iteration, e.train_loss, e.val_loss) for e in a_trace.evals] == [
            (e.iteration, e.train_loss, e.val_loss) for e in b_trace.evals
        ]
        for k in a_model.params:
            assert np.array_equal(a_model.params[k].numpy(), b_model.params[k].numpy())

    def test_val_columns_do_not_influence_gradients(self):
        meas, _ = make_measurement(seed=4)
        model = small_model(seed=4)
        cfg = TTTConfig(lr=1e-3, max_iters=8, val_fraction=0.25, patience=100, seed=4)
        _, trace_a = ttt_adapt(model, meas, cfg)
        # perturb the k-space on the validation columns only
        from ttt_recon.rng import derive_seed
        _, val_m = split_measurement(None, meas.mask, 0.25, derive_seed(4, "split", meas.id))
        perturbed = meas.kspace.numpy().copy()
        perturbed[:, :, val_m.columns] *= 3.7
        meas_b = Measurement(
            kspace=Tensor(perturbed, _keep_dtype=True),
            sens=meas.sens, mask=meas.mask, id=meas.id, reference=meas.reference,
        )
        _, trace_b = ttt_adapt(model, meas_b, cfg)
        assert np.array_equal(
            np.concatenate([v.ravel() for v in trace_a.final_params.values()]),
            np.concatenate([v.ravel() for v in trace_b.final_params.values()]),
        )
        # train losses identical, val losses not
        assert [e.train_loss for e in trace_a.evals] == [e.train_loss for e in trace_b.evals]
        assert [e.val_loss for e in trace_a.evals] != [e.val_loss for e in trace_b.evals]

    def test_patience_stops_early(self):
        meas, _ = make_measurement(seed=5)
        model = small_model(seed=5)
        cfg = TTTConfig(lr=0.0, max_iters=50, val_fraction=0.2, patience=3, seed=5)
        _, trace = ttt_adapt(model, meas, cfg)  # flat val -> stop after patience evals
        assert trace.evals[-1].iteration == 3

    def test_oracle_ssim_recorded_when_reference_present(self):
        meas, _ = make_measurement(seed=6)
        model = small_model(seed=6)
        cfg = TTTConfig(lr=1e-3, max_iters=2, val_fraction=0.2, patience=10, seed=6)
        _, trace = ttt_adapt(model, meas, cfg)
        assert all(e.oracle_ssim is not None for e in trace.evals)
        meas_blind = Measurement(
            kspace=meas.kspace, sens=meas.sens, mask=meas.mask, id=meas.id, reference=None
        )
        _, trace_blind = ttt_adapt(model, meas_blind, cfg)
        assert all(e.oracle_ssim is None for e in trace_blind.evals)

    def test_lr_unset_rejected(self):
        meas, _ = make_measurement(seed=7)
        with pytest.raises(ConfigError, match="lr"):
            ttt_adapt(small_model(), meas, TTTConfig(max_iters=1))

    def test_trace_csv(self, tmp_path):
        meas, _ = make_measurement(seed=8)
        cfg = TTTConfig(lr=1e-3, max_iters=3, val_fraction=0.2, patience=10, seed=8)
        _, trace = ttt_adapt(small_model(seed=8), meas, cfg)
        p = tmp_path / "trace.csv"
        trace.write_csv(p)
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "iter,train_loss,val_loss,oracle_ssim,chosen"
        assert sum(line.endswith(",1") for line in lines[1:]) == 1


class TestReconstructWithTTT:
    def test_max_iters_zero_equals_baseline(self):
        meas, _ = make_measurement(seed=9)
        model = small_model(seed=9)
        cfg = TTTConfig(lr=1e-3, max_iters=0, val_fraction=0.2, seed=9)
        out = reconstruct_with_ttt(model, meas, cfg)
        base = reconstruct_baseline(model, meas)
        assert np.array_equal(out.numpy(), base.numpy())

    def test_full_sampling_near_oracle_model(self):
        spec = PhantomSpec(family="ellipses", resolution=32, n_coils=2, seed=21)
        sample = generate_sample(spec, 0)
        # overfit a small net on this sample at acceleration 1 (identity-like task)
        cfg = TrainConfig(
            mode="supervised", epochs=400, lr=1e-2, batch_size=1,
            acceleration=1.0, center_fraction=0.16, seed=21,
        )
        model, _ = train(unet_init(UNetConfig(n_pools=1, base_channels=12, seed=21)), [sample], cfg)
        mask = make_mask(32, 1.0, 0.16, seed=22)
        meas = undersample(sample, mask)
        out = reconstruct_with_ttt(model, meas, TTTConfig(lr=1e-4, max_iters=10, val_fraction=0.2, seed=23))
        ref = sample.reference.numpy()
        assert ssim(out.numpy(), ref, data_range=float(ref.max())) > 0.99

    def test_final_input_flag(self):
        meas, _ = make_measurement(seed=10)
        model = small_model(seed=10)
        full = reconstruct_with_ttt(model, meas, TTTConfig(lr=0.0, max_iters=0, val_fraction=0.2, seed=1))
        trainonly = reconstruct_with_ttt(
            model, meas, TTTConfig(lr=0.0, max_iters=0, val_fraction=0.2, seed=1, final_input="train")
        )
        assert not np.array_equal(full.numpy(), trainonly.numpy())

"""Per-instance test-time training with k-space self-validation.

The measured columns are split into a train part (always containing the ACS
block) and a held-out validation part. Adaptation minimizes the normalized
l1 data-consistency loss on the train part, with the network fed A^+ y_train
so the validation columns stay hidden; the raw l1 between y_val and the
re-measured output is an honest generalization proxy used to pick the
returned parameter snapshot (best value, patience window, no
stop-at-first-rise).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Tensor, adam_step, value_and_grad
from .errors import ConfigError, ContractError
from .metrics import ssim
from .operators import Measurement, SamplingMask, adjoint_zf, fft2c_np
from .rng import derive_rng, derive_seed
from .unet import ReconModel, unet_forward

FINAL_INPUTS = ("full", "train")


@dataclass(frozen=True)
class TTTConfig:
    lr: float | None = None  # None: caller wires in the pre-training rate
    max_iters: int = 500
    val_fraction: float = 0.2
    patience: int = 20  # evaluations without a new best before stopping
    eval_every: int = 1
    seed: int = 0
    final_input: str = "full"  # which measurement feeds the adapted network

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.final_input not in FINAL_INPUTS:
            raise ConfigError(f"final_input must be one of {FINAL_INPUTS}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "max_iters": self.max_iters,
            "val_fraction": self.val_fraction,
            "patience": self.patience,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "final_input": self.final_input,
        }


@dataclass
class TTTEval:
    iteration: int
    train_loss: float
    val_loss: float
    oracle_ssim: float | None


@dataclass
class TTTTrace:
    evals: list[TTTEval] = field(default_factory=list)
    chosen_iteration: int = 0
    aborted: bool = False  # non-finite loss cut adaptation short
    seconds: float = 0.0
    final_params: dict[str, np.ndarray] = field(default_factory=dict)

    CSV_HEADER = "iter,train_loss,val_loss,oracle_ssim,chosen"

    def write_csv(self, path: str | Path) -> None:
        lines = [self.CSV_HEADER]
        for e in self.evals:
            oracle = "" if e.oracle_ssim is None else f"{e.oracle_ssim:.6f}"
            chosen = 1 if e.iteration == self.chosen_iteration else 0
            lines.append(f"{e.iteration},{e.train_loss:.8f},{e.val_loss:.8f},{oracle},{chosen}")
        Path(path).write_text("\n".join(lines) + "\n")

    def val_at(self, iteration: int) -> float:
        for e in self.evals:
            if e.iteration == iteration:
                return e.val_loss
        raise KeyError(iteration)


def split_measurement(
    kspace: Tensor | np.ndarray,
    mask: SamplingMask,
    val_fraction: float,
    seed: int,
) -> tuple[SamplingMask, SamplingMask]:
    """Split measured columns into train and validation column masks.

    floor(val_fraction * |non-ACS selected|) validation columns are drawn
    uniformly without replacement from the non-ACS selected columns; ACS
    columns always stay in the train mask. The two masks are disjoint and
    union to the input mask.
    """
    del kspace  # the split depends only on the mask structure
    selected = np.flatnonzero(mask.columns)
    non_acs = np.array([c for c in selected if c not in mask.acs_columns])
    if non_acs.size < 2:
        raise ContractError(f"mask needs at least 2 non-ACS sampled columns, has {non_acs.size}")
    if val_fraction == 0.0:
        empty = np.zeros(mask.width, dtype=bool)
        return mask, mask.replace_columns(empty, acs=frozenset())
    n_val = int(np.floor(val_fraction * non_acs.size))
    if n_val == 0:
        raise ConfigError(
            f"val_fraction {val_fraction} selects zero of {non_acs.size} non-ACS columns; "
            "use a larger mask or validation fraction"
        )
    rng = derive_rng(seed, "ttt-split")
    picks = rng.choice(non_acs, size=n_val, replace=False)
    val_cols = np.zeros(mask.width, dtype=bool)
    val_cols[picks] = True
    train_cols = mask.columns & ~val_cols
    return mask.replace_columns(train_cols), mask.replace_columns(val_cols, acs=frozenset())


def _network_input(kspace_data: np.ndarray, mask: SamplingMask) -> Tensor:
    zf = adjoint_zf(Tensor(kspace_data * mask.as_row()), mask)
    return Tensor(zf.data[None, :, :], _keep_dtype=True)


def ttt_adapt(model: ReconModel, measurement: Measurement, cfg: TTTConfig) -> tuple[ReconModel, TTTTrace]:
    """Adapt a trained model to one measurement; returns the best snapshot.

    Adam runs on L_self(y_train); every eval_every iterations the raw l1
    between y_val and the validation columns of the re-measured output is
    recorded, plus the oracle SSIM when the measurement carries a reference.
    Stops after `patience` evaluations without a new validation minimum or
    at max_iters; the returned parameters attain the minimum recorded
    validation loss.
    """
    if cfg.lr is None:
        raise ConfigError("TTTConfig.lr is unset; pass the pre-training learning rate")
    t_start = time.monotonic()
    mask_train, mask_val = split_measurement(
        measurement.kspace, measurement.mask, cfg.val_fraction, derive_seed(cfg.seed, "split", measurement.id)
    )
    ks = measurement.kspace.data
    sens = measurement.sens.data
    train_row = mask_train.as_row()
    val_row = mask_val.as_row()
    y_train = ks * train_row
    y_val = ks * val_row
    y_train_l1 = float(np.abs(y_train.view(np.float32), dtype=np.float64).sum())
    net_in = _network_input(ks, mask_train)
    val_active = bool(mask_val.columns.any())

    work = model.clone()
    names = list(work.params)
    plist = [work.params[k] for k in names]
    state = AdamState.init(work.params, lr=cfg.lr)
    trace = TTTTrace()
    ref = measurement.reference.data if measurement.reference is not None else None
    full_in = _network_input(ks, measurement.mask) if cfg.final_input == "full" else net_in

    def self_loss(_plist):
        recon = unet_forward(work, net_in)
        img = dc.reshape(recon, ks.shape[-2:])
        pred = dc.mul_const(dc.fft2c(dc.mul_const(dc.to_complex(img), sens)), train_row)
        return dc.scale(dc.l1_norm(dc.sub(pred, Tensor(y_train, _keep_dtype=True))), 1.0 / y_train_l1)

    def evaluate(iteration: int) -> TTTEval:
        with dc.no_grad():
            recon = unet_forward(work, net_in).data[0]
            pred = fft2c_np(sens * recon)
            train_loss = float(
                np.abs(((pred * train_row) - y_train).view(np.float32), dtype=np.float64).sum() / y_train_l1
            )
            val_loss = (
                float(np.abs(((pred * val_row) - y_val).view(np.float32), dtype=np.float64).sum())
                if val_active
                else train_loss
            )
            oracle = None
            if ref is not None:
                out = unet_forward(work, full_in).data[0]
                oracle = ssim(out, ref, data_range=float(ref.max()))
        return TTTEval(iteration=iteration, train_loss=train_loss, val_loss=val_loss, oracle_ssim=oracle)

    best_eval = evaluate(0)
    trace.evals.append(best_eval)
    best_params = work.param_arrays()
    trace.chosen_iteration = 0
    stale = 0
    for t in range(1, cfg.max_iters + 1):
        value, grads = value_and_grad(self_loss, plist)
        if not np.isfinite(value):
            trace.aborted = True
            break
        adam_step(work.params, dict(zip(names, grads)), state)
        if t % cfg.eval_every == 0:
            ev = evaluate(t)
            trace.evals.append(ev)
            if ev.val_loss < best_eval.val_loss:
                best_eval = ev
                best_params = work.param_arrays()
                trace.chosen_iteration = t
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    trace.final_params = work.param_arrays()
    work.load_param_arrays(best_params)
    trace.seconds = time.monotonic() - t_start
    return work, trace


def reconstruct_with_ttt_traced(
    model: ReconModel, measurement: Measurement, cfg: TTTConfig
) -> tuple[Tensor, TTTTrace]:
    adapted, trace = ttt_adapt(model, measurement, cfg)
    if cfg.final_input == "train":
        mask_train, _ = split_measurement(
            measurement.kspace, measurement.mask, cfg.val_fraction, derive_seed(cfg.seed, "split", measurement.id)
        )
        net_in = _network_input(measurement.kspace.data, mask_train)
    else:
        net_in = _network_input(measurement.kspace.data, measurement.mask)
    with dc.no_grad():
        out = unet_forward(adapted, net_in)
    return Tensor(out.data[0], _keep_dtype=True), trace


def reconstruct_with_ttt(model: ReconModel, measurement: Measurement, cfg: TTTConfig) -> Tensor:
    """Adapt on the sample's own measurement, then reconstruct from it."""
    img, _ = reconstruct_with_ttt_traced(model, measurement, cfg)
    return img

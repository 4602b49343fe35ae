"""Supervised, self-supervised, and joint training, including mixtures.

The joint objective per sample is
    ||x - f(A^+ y)||_1 / ||x||_1  +  ||y - A f(A^+ y)||_1 / ||y||_1
(an unweighted sum; the self term's weight is exposed as a config knob that
defaults to 1). Training draws per-epoch sample streams; plain training is
the m = 0 degenerate case of mixture training, so the two produce identical
streams and weights by construction.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Tensor, adam_step, value_and_grad
from .errors import ConfigError, ContractError, DegenerateError, NumericError
from .metrics import ssim
from .operators import KSpaceSample, SamplingMask, adjoint_zf, forward, make_mask
from .rng import derive_rng, derive_seed
from .unet import ReconModel, unet_forward

MODES = ("supervised", "self", "joint")
MASK_POLICIES = ("fixed_per_sample", "resampled_per_epoch")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    epochs: int = 30
    lr: float = 1e-4  # desk default; the reference-scale preset is 1e-5
    batch_size: int = 4
    acceleration: float = 4.0
    center_fraction: float = 0.08
    mask_policy: str = "fixed_per_sample"
    seed: int = 0
    epoch_size: int | None = None
    self_weight: float = 1.0
    val_fraction: float = 0.1  # held out for checkpoint selection

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mask_policy not in MASK_POLICIES:
            raise ConfigError(f"mask_policy must be one of {MASK_POLICIES}, got {self.mask_policy!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "acceleration": self.acceleration,
            "center_fraction": self.center_fraction,
            "mask_policy": self.mask_policy,
            "seed": self.seed,
            "epoch_size": self.epoch_size,
            "self_weight": self.self_weight,
            "val_fraction": self.val_fraction,
        }


@dataclass
class LoadedDataset:
    """Samples plus the undersampling parameters they are measured with."""

    samples: list[KSpaceSample]
    acceleration: float | None = None  # falls back to TrainConfig
    center_fraction: float | None = None


@dataclass
class EpochStats:
    epoch: int
    l_sup: float
    l_self: float
    val_ssim: float | None
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    final_params: dict[str, np.ndarray] = field(default_factory=dict)

    CSV_HEADER = "epoch,l_sup,l_self,val_ssim,seconds"

    def write_csv(self, path: str | Path) -> None:
        lines = [self.CSV_HEADER]
        for e in self.epochs:
            val = "" if e.val_ssim is None else f"{e.val_ssim:.6f}"
            lines.append(f"{e.epoch},{e.l_sup:.8f},{e.l_self:.8f},{val},{e.seconds:.3f}")
        Path(path).write_text("\n".join(lines) + "\n")


def joint_loss(
    model: ReconModel | Callable[[Tensor], Tensor],
    sample: KSpaceSample,
    mask: SamplingMask,
    mode: str = "joint",
    self_weight: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """Differentiable loss for one sample; returns (scalar, components).

    model may be a ReconModel or any callable mapping the (1, H, W)
    zero-filled input tensor to a (1, H, W) reconstruction (used by oracle
    tests).
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    ref = sample.reference.data
    y = sample.kspace_full.data * mask.as_row()
    ref_l1 = float(np.abs(ref, dtype=np.float64).sum())
    y_l1 = float(np.abs(y.view(np.float32), dtype=np.float64).sum())
    if ref_l1 == 0 or y_l1 == 0:
        raise DegenerateError(f"sample {sample.id!r} has a zero-norm reference or measurement")
    zf = adjoint_zf(Tensor(y), mask)
    net_in = Tensor(zf.data[None, :, :], _keep_dtype=True)
    if isinstance(model, ReconModel):
        recon = unet_forward(model, net_in)
    else:
        recon = model(net_in)
    recon_img = dc.reshape(recon, ref.shape)
    l_sup = dc.scale(dc.l1_norm(dc.sub(recon_img, Tensor(ref, _keep_dtype=True))), 1.0 / ref_l1)
    pred_k = forward(recon_img, sample.sens, mask)
    l_self = dc.scale(dc.l1_norm(dc.sub(pred_k, Tensor(y, _keep_dtype=True))), 1.0 / y_l1)
    components = {"L_sup": l_sup.item(), "L_self": l_self.item()}
    if mode == "supervised":
        total = l_sup
    elif mode == "self":
        total = l_self
    else:
        total = dc.add(l_sup, dc.scale(l_self, self_weight))
    return total, components


def _as_loaded(dataset, cfg: TrainConfig) -> LoadedDataset:
    if isinstance(dataset, LoadedDataset):
        return LoadedDataset(
            samples=list(dataset.samples),
            acceleration=cfg.acceleration if dataset.acceleration is None else dataset.acceleration,
            center_fraction=cfg.center_fraction if dataset.center_fraction is None else dataset.center_fraction,
        )
    return LoadedDataset(samples=list(dataset), acceleration=cfg.acceleration, center_fraction=cfg.center_fraction)


def sample_mask(sample: KSpaceSample, accel: float, cf: float, cfg: TrainConfig, epoch: int | None = None) -> SamplingMask:
    """Per-sample training mask; fixed across epochs unless resampling is on."""
    tokens: list[object] = ["mask", sample.id, accel]
    if cfg.mask_policy == "resampled_per_epoch" and epoch is not None:
        tokens.append(epoch)
    return make_mask(sample.shape[1], accel, cf, derive_seed(cfg.seed, *tokens))


def build_epoch_stream(
    pool_p: LoadedDataset | None,
    pool_q: LoadedDataset | None,
    m: float,
    n: int,
    cfg: TrainConfig,
    epoch: int,
) -> list[tuple[KSpaceSample, float, float, str]]:
    """Draw round(m*n) samples from Q and n - round(m*n) from P, shuffled."""
    rng = derive_rng(cfg.seed, "epoch-stream", epoch)
    n_q = int(round(m * n))
    n_p = n - n_q
    items: list[tuple[KSpaceSample, float, float, str]] = []
    if n_p > 0:
        if pool_p is None or n_p > len(pool_p.samples):
            raise ConfigError(f"epoch needs {n_p} P-samples but only {0 if pool_p is None else len(pool_p.samples)} available")
        for i in rng.permutation(len(pool_p.samples))[:n_p]:
            items.append((pool_p.samples[i], pool_p.acceleration, pool_p.center_fraction, "P"))
    if n_q > 0:
        if pool_q is None or n_q > len(pool_q.samples):
            raise ConfigError(f"epoch needs {n_q} Q-samples but only {0 if pool_q is None else len(pool_q.samples)} available")
        for i in rng.permutation(len(pool_q.samples))[:n_q]:
            items.append((pool_q.samples[i], pool_q.acceleration, pool_q.center_fraction, "Q"))
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def _split_val(ds: LoadedDataset, tag: str, cfg: TrainConfig) -> tuple[LoadedDataset, LoadedDataset]:
    n_val = int(math.floor(cfg.val_fraction * len(ds.samples)))
    rng = derive_rng(cfg.seed, "val-split", tag)
    perm = rng.permutation(len(ds.samples))
    val = [ds.samples[i] for i in perm[:n_val]]
    pool = [ds.samples[i] for i in perm[n_val:]]
    return (
        LoadedDataset(pool, ds.acceleration, ds.center_fraction),
        LoadedDataset(val, ds.acceleration, ds.center_fraction),
    )


def _val_ssim(model: ReconModel, val_sets: list[LoadedDataset], cfg: TrainConfig) -> float | None:
    scores = []
    with dc.no_grad():
        for ds in val_sets:
            for sample in ds.samples:
                mask = sample_mask(sample, ds.acceleration, ds.center_fraction, cfg)
                y = sample.kspace_full.data * mask.as_row()
                zf = adjoint_zf(Tensor(y), mask)
                rec = unet_forward(model, Tensor(zf.data[None], _keep_dtype=True)).data[0]
                ref = sample.reference.data
                scores.append(ssim(rec, ref, data_range=float(ref.max())))
    return float(np.mean(scores)) if scores else None


def train_mixture(
    model: ReconModel,
    dataset_P,
    dataset_Q,
    m: float,
    cfg: TrainConfig,
) -> tuple[ReconModel, TrainHistory]:
    """Mixture training: per epoch, a fraction m of samples comes from Q.

    m = 0 trains on P only and m = 1 on Q only (identical stream and weights
    to plain train() on that dataset with the same seed). Returns the
    best-validation-SSIM checkpoint (final weights when no validation split)
    and the history, which carries the final checkpoint in final_params.
    """
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"mixture coefficient must be in [0, 1], got {m}")
    use_p, use_q = m < 1.0, m > 0.0
    ds_p = _as_loaded(dataset_P, cfg) if use_p else None
    ds_q = _as_loaded(dataset_Q, cfg) if use_q else None
    if use_p and (ds_p is None or not ds_p.samples):
        raise ConfigError("dataset_P must be non-empty when m < 1")
    if use_q and (ds_q is None or not ds_q.samples):
        raise ConfigError("dataset_Q must be non-empty when m > 0")

    pool_p = val_p = None
    pool_q = val_q = None
    solo = not (use_p and use_q)  # degenerate mixtures must match plain train()
    if use_p:
        pool_p, val_p = _split_val(ds_p, "solo" if solo else "P", cfg)
    if use_q:
        pool_q, val_q = _split_val(ds_q, "solo" if solo else "Q", cfg)
    val_sets = [v for v in (val_p, val_q) if v is not None and v.samples]

    n = cfg.epoch_size
    if n is None:
        n = max(len(p.samples) for p in (pool_p, pool_q) if p is not None)

    work = model.clone()
    names = list(work.params)
    plist = [work.params[k] for k in names]
    state = AdamState.init(work.params, lr=cfg.lr)
    history = TrainHistory()
    best_ssim = -np.inf
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        stream = build_epoch_stream(pool_p, pool_q, m, n, cfg, epoch)
        sup_vals: list[float] = []
        self_vals: list[float] = []
        for b0 in range(0, len(stream), cfg.batch_size):
            batch = stream[b0 : b0 + cfg.batch_size]

            def batch_loss(_plist):
                total = None
                for sample, accel, cf, _tag in batch:
                    mask = sample_mask(sample, accel, cf, cfg, epoch)
                    loss, comps = joint_loss(work, sample, mask, cfg.mode, cfg.self_weight)
                    sup_vals.append(comps["L_sup"])
                    self_vals.append(comps["L_self"])
                    total = loss if total is None else dc.add(total, loss)
                return dc.scale(total, 1.0 / len(batch))

            value, grads = value_and_grad(batch_loss, plist)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
            adam_step(work.params, dict(zip(names, grads)), state)
        val = _val_ssim(work, val_sets, cfg) if val_sets else None
        if val is not None and val > best_ssim:
            best_ssim = val
            best_params = work.param_arrays()
            history.best_epoch = epoch
        history.epochs.append(
            EpochStats(
                epoch=epoch,
                l_sup=float(np.mean(sup_vals)) if sup_vals else float("nan"),
                l_self=float(np.mean(self_vals)) if self_vals else float("nan"),
                val_ssim=val,
                seconds=time.monotonic() - t0,
            )
        )
    history.final_params = work.param_arrays()
    if best_params is not None:
        work.load_param_arrays(best_params)
    return work, history


def train(model: ReconModel, dataset, cfg: TrainConfig) -> tuple[ReconModel, TrainHistory]:
    """Shuffled minibatch Adam on the configured loss; deterministic per seed.

    Returns the best-validation-SSIM checkpoint (final weights if the
    validation split is empty); the final checkpoint is in
    history.final_params.
    """
    ds = _as_loaded(dataset, cfg)
    if not ds.samples:
        raise ConfigError("dataset must be non-empty")
    return train_mixture(model, ds, None, 0.0, cfg)

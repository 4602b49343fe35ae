"""Masked multi-coil Fourier measurement model A = M F S.

forward() maps a real image to per-coil masked k-space and is differentiable
with respect to the image; adjoint_zf() is the zero-filled adjoint followed
by root-sum-of-squares, which is the conventional network input and is exact
at acceleration 1 under unit-normalized sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .diffcore.ops import _fft2c_raw, _ifft2c_raw
from .errors import ConfigError, ShapeError
from .rng import derive_rng


@dataclass(frozen=True)
class SamplingMask:
    """Per-column binary k-space mask with an identified ACS center block."""

    width: int
    columns: np.ndarray  # bool, shape (width,)
    acs_columns: frozenset[int]
    acceleration: float
    seed: int

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=bool)
        object.__setattr__(self, "columns", cols)
        if cols.shape != (self.width,):
            raise ShapeError(f"mask columns shape {cols.shape} != ({self.width},)")
        if not set(self.acs_columns) <= set(np.flatnonzero(cols).tolist()):
            raise ConfigError("ACS columns must be a subset of the selected columns")

    @property
    def n_selected(self) -> int:
        return int(self.columns.sum())

    def as_row(self) -> np.ndarray:
        """Mask as a float32 row for broadcasting over (..., H, W)."""
        return self.columns.astype(np.float32)

    def replace_columns(self, columns: np.ndarray, acs: frozenset[int] | None = None) -> "SamplingMask":
        return SamplingMask(
            width=self.width,
            columns=np.asarray(columns, dtype=bool),
            acs_columns=self.acs_columns if acs is None else acs,
            acceleration=self.acceleration,
            seed=self.seed,
        )


@dataclass
class KSpaceSample:
    """One measurement instance: full k-space, sensitivities, reference."""

    kspace_full: Tensor  # complex, (n_c, H, W)
    sens: Tensor  # complex, (n_c, H, W)
    reference: Tensor  # real, (H, W)
    id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.reference.shape  # (H, W)

    @property
    def n_coils(self) -> int:
        return self.kspace_full.shape[0]


@dataclass
class Measurement:
    """An undersampled instance as seen at inference time."""

    kspace: Tensor  # complex, (n_c, H, W), zero outside mask
    sens: Tensor
    mask: SamplingMask
    id: str
    reference: Tensor | None = None  # oracle-only, for analysis


def make_mask(width: int, acceleration: float, center_fraction: float, seed: int) -> SamplingMask:
    """1D random column mask: contiguous ACS block plus uniform random columns.

    n_acs = round(center_fraction * width) center columns are always selected;
    the remaining round(width / acceleration) - n_acs columns are drawn
    uniformly without replacement. Deterministic in seed.
    """
    if width < 8:
        raise ConfigError(f"mask width must be >= 8, got {width}")
    if acceleration < 1:
        raise ConfigError(f"acceleration must be >= 1, got {acceleration}")
    if not 0 <= center_fraction < 1:
        raise ConfigError(f"center_fraction must be in [0, 1), got {center_fraction}")
    n_total = int(round(width / acceleration))
    n_acs = int(round(center_fraction * width))
    if n_total < n_acs:
        raise ConfigError(
            f"round(width/acceleration) = {n_total} is smaller than the ACS block ({n_acs} columns)"
        )
    start = (width - n_acs) // 2
    acs = list(range(start, start + n_acs))
    columns = np.zeros(width, dtype=bool)
    columns[acs] = True
    remaining = n_total - n_acs
    if remaining > 0:
        pool = np.flatnonzero(~columns)
        rng = derive_rng(seed, "mask-columns")
        picks = rng.choice(pool, size=remaining, replace=False)
        columns[picks] = True
    return SamplingMask(
        width=width,
        columns=columns,
        acs_columns=frozenset(acs),
        acceleration=float(acceleration),
        seed=int(seed),
    )


def forward(image: Tensor, sens: Tensor, mask: SamplingMask) -> Tensor:
    """Measurement operator: per-coil sensitivity weighting, centered FFT, masking."""
    if image.ndim != 2:
        raise ShapeError(f"forward expects a (H, W) image, got {image.shape}")
    if sens.shape[-2:] != image.shape:
        raise ShapeError(f"sensitivities {sens.shape} do not match image {image.shape}")
    if mask.width != image.shape[-1]:
        raise ShapeError(f"mask width {mask.width} != image width {image.shape[-1]}")
    coil_imgs = dc.mul_const(dc.to_complex(image), sens.data)
    kspace = dc.fft2c(coil_imgs)
    return dc.mul_const(kspace, mask.as_row())


def rss(coil_images: Tensor) -> Tensor:
    """Root-sum-of-squares combination over the leading coil axis."""
    if coil_images.ndim < 1 or coil_images.shape[0] < 1:
        raise ShapeError("rss expects at least one coil")
    return dc.sqrt_elem(dc.sum_axis(dc.abs2(coil_images), 0))


def adjoint_zf(kspace: Tensor, mask: SamplingMask) -> Tensor:
    """Zero-filled adjoint reconstruction: mask, per-coil ifft2c, RSS.

    Not a true pseudo-inverse; it is the standard network input A^+ y and is
    exact at acceleration 1 for nonnegative images when sum_i |S_i|^2 = 1.
    """
    if kspace.ndim != 3:
        raise ShapeError(f"adjoint_zf expects (n_c, H, W) k-space, got {kspace.shape}")
    if mask.width != kspace.shape[-1]:
        raise ShapeError(f"mask width {mask.width} != k-space width {kspace.shape[-1]}")
    zeroed = kspace.data * mask.as_row()
    coil_imgs = _ifft2c_raw(zeroed)
    return rss(Tensor(coil_imgs))


def undersample(
    sample: KSpaceSample,
    mask: SamplingMask,
    noise_std: float = 0.0,
    noise_seed: int = 0,
    keep_reference: bool = True,
) -> Measurement:
    """Restrict a fully sampled instance to a mask, optionally adding noise.

    Noise is additive complex Gaussian on the retained columns (off by
    default; the synthetic pipeline is noiseless).
    """
    data = sample.kspace_full.data * mask.as_row()
    if noise_std > 0:
        rng = derive_rng(noise_seed, "measurement-noise", sample.id)
        noise = rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)
        data = data + (noise_std / np.sqrt(2)) * noise.astype(np.complex64) * mask.as_row()
    return Measurement(
        kspace=Tensor(data.astype(np.complex64)),
        sens=sample.sens,
        mask=mask,
        id=sample.id,
        reference=sample.reference if keep_reference else None,
    )


def fft2c_np(a: np.ndarray) -> np.ndarray:
    """Centered orthonormal FFT on plain arrays (non-differentiable path)."""
    return _fft2c_raw(np.asarray(a, dtype=np.complex64))


def ifft2c_np(a: np.ndarray) -> np.ndarray:
    return _ifft2c_raw(np.asarray(a, dtype=np.complex64))

"""Convolutional encoder-decoder mapping zero-filled reconstructions to images.

Per level the encoder applies two (conv3x3 -> instance_norm -> leaky_relu)
stages and pools; the decoder mirrors it with nearest upsampling + conv and
skip concatenations; a final 1x1 conv maps back to one channel. Nearest
upsampling (not transposed conv) avoids checkerboard artifacts; instance
norm keeps single-instance adaptation well defined.

Inputs are scaled by s = max|input| before the body and outputs multiplied
by s, so the network is exactly positive-scale equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError
from .ksp import load_checkpoint, save_checkpoint
from .operators import Measurement, adjoint_zf
from .rng import derive_rng


@dataclass(frozen=True)
class UNetConfig:
    n_pools: int = 3
    base_channels: int = 16
    negative_slope: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "n_pools": self.n_pools,
            "base_channels": self.base_channels,
            "negative_slope": self.negative_slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(
            n_pools=d["n_pools"],
            base_channels=d["base_channels"],
            negative_slope=d.get("negative_slope", 0.2),
            seed=d.get("seed", 0),
        )


# reading of the reference "8 layers / 64 channels" scale: 4 down + 4 up stages
PAPER_SCALE = UNetConfig(n_pools=4, base_channels=64)


@dataclass
class ReconModel:
    config: UNetConfig
    params: dict[str, Tensor]

    @property
    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def clone(self) -> "ReconModel":
        return ReconModel(
            config=self.config,
            params={k: Tensor(v.data.copy(), _keep_dtype=True) for k, v in self.params.items()},
        )

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = arrays[k].astype(np.float32, copy=True)

    def save(self, path) -> None:
        save_checkpoint(path, self.config.to_dict(), {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "ReconModel":
        cfg_dict, arrays = load_checkpoint(path)
        model = unet_init(UNetConfig.from_dict(cfg_dict))
        model.load_param_arrays(arrays)
        return model


def _conv_names(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, c_out, c_in, kernel) for every conv, in creation order."""
    base = config.base_channels
    chans = [base * 2**i for i in range(config.n_pools + 1)]
    names: list[tuple[str, int, int, int]] = []
    c_in = 1
    for i in range(config.n_pools):
        names.append((f"enc{i}.conv1", chans[i], c_in, 3))
        names.append((f"enc{i}.conv2", chans[i], chans[i], 3))
        c_in = chans[i]
    names.append(("bottleneck.conv1", chans[-1], c_in, 3))
    names.append(("bottleneck.conv2", chans[-1], chans[-1], 3))
    for i in reversed(range(config.n_pools)):
        names.append((f"dec{i}.up", chans[i], chans[i + 1], 3))
        names.append((f"dec{i}.conv1", chans[i], 2 * chans[i], 3))
        names.append((f"dec{i}.conv2", chans[i], chans[i], 3))
    names.append(("final", 1, chans[0], 1))
    return names


def unet_init(config: UNetConfig) -> ReconModel:
    """Kaiming-uniform weights scaled for the leaky-relu slope, zero biases."""
    rng = derive_rng(config.seed, "unet-init")
    gain = np.sqrt(2.0 / (1.0 + config.negative_slope**2))
    params: dict[str, Tensor] = {}
    for name, c_out, c_in, k in _conv_names(config):
        fan_in = c_in * k * k
        bound = gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np.float32)
        params[name + ".w"] = Tensor(w, requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
    return ReconModel(config=config, params=params)


def _stage(h: Tensor, params: dict[str, Tensor], name: str, slope: float) -> Tensor:
    h = dc.conv2d(h, params[name + ".w"], params[name + ".b"])
    h = dc.instance_norm(h)
    return dc.leaky_relu(h, slope)


def _double_conv(h: Tensor, params: dict[str, Tensor], block: str, slope: float) -> Tensor:
    h = _stage(h, params, block + ".conv1", slope)
    return _stage(h, params, block + ".conv2", slope)


def unet_forward(model: ReconModel, x: Tensor) -> Tensor:
    """Forward pass on a (1, H, W) input; output has the same shape."""
    cfg = model.config
    if x.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"unet_forward expects (1, H, W), got {x.shape}")
    h_dim, w_dim = x.shape[1:]
    div = 2**cfg.n_pools
    if h_dim % div or w_dim % div:
        raise ShapeError(
            f"spatial size {h_dim}x{w_dim} is not divisible by {div}; "
            f"pad to the next multiple of {div}"
        )
    p = model.params
    s = float(np.abs(x.data).max())
    if not s > 0:
        s = 1.0
    h = dc.scale(x, 1.0 / s)
    skips = []
    for i in range(cfg.n_pools):
        h = _double_conv(h, p, f"enc{i}", cfg.negative_slope)
        skips.append(h)
        h = dc.avgpool2x(h)
    h = _double_conv(h, p, "bottleneck", cfg.negative_slope)
    for i in reversed(range(cfg.n_pools)):
        h = dc.nearest_upsample2x(h)
        h = _stage(h, p, f"dec{i}.up", cfg.negative_slope)
        h = dc.concat([h, skips[i]], axis=0)
        h = _double_conv(h, p, f"dec{i}", cfg.negative_slope)
    out = dc.conv2d(h, p["final.w"], p["final.b"])
    return dc.scale(out, s)


def reconstruct_baseline(model: ReconModel, measurement: Measurement) -> Tensor:
    """f(A^+ y): zero-filled input through the network, (H, W) output."""
    zf = adjoint_zf(measurement.kspace, measurement.mask)
    out = unet_forward(model, Tensor(zf.data[None, :, :], _keep_dtype=True))
    return Tensor(out.data[0], _keep_dtype=True)

"""Synthetic paired samples: phantom images, coil maps, datasets on disk.

Phantom families (ellipses / rectangles) and intensity transforms give
controlled train/shift distributions: family change is the anatomy-shift
analog, intensity transform the modality analog, load-time acceleration the
acceleration shift, and resolution the dataset analog.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Tensor
from .errors import ConfigError
from .ksp import write_ksp
from .operators import KSpaceSample, fft2c_np
from .rng import derive_rng, derive_seed

FEATHER_PX = 2.0  # edge transition width, keeps Gibbs ringing off the gap measurements

FAMILIES = ("ellipses", "rectangles")
TRANSFORMS = ("identity", "inverted", "gamma")


@dataclass(frozen=True)
class PhantomSpec:
    family: str
    count_range: tuple[int, int] = (4, 9)
    intensity_transform: str = "identity"
    gamma: float = 1.0
    resolution: int = 64
    n_coils: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown phantom family {self.family!r}")
        if self.intensity_transform not in TRANSFORMS:
            raise ConfigError(f"unknown intensity transform {self.intensity_transform!r}")
        lo, hi = self.count_range
        if not (0 <= lo <= hi):
            raise ConfigError(f"bad count_range {self.count_range}")
        if not 32 <= self.resolution <= 128:
            raise ConfigError(f"resolution must be in [32, 128], got {self.resolution}")
        if self.n_coils < 1:
            raise ConfigError(f"n_coils must be >= 1, got {self.n_coils}")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "count_range": list(self.count_range),
            "intensity_transform": self.intensity_transform,
            "gamma": self.gamma,
            "resolution": self.resolution,
            "n_coils": self.n_coils,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(
            family=d["family"],
            count_range=tuple(d.get("count_range", (4, 9))),
            intensity_transform=d.get("intensity_transform", "identity"),
            gamma=d.get("gamma", 1.0),
            resolution=d.get("resolution", 64),
            n_coils=d.get("n_coils", 4),
            seed=d.get("seed", 0),
        )


def _soft_shape(spec_family: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """One random shape as a soft coverage mask in [0, 1] (2 px feathered edge)."""
    size = min(h, w)
    cy = rng.uniform(0.2, 0.8) * h
    cx = rng.uniform(0.2, 0.8) * w
    a = rng.uniform(0.09, 0.3) * size  # half-extents in pixels
    b = rng.uniform(0.09, 0.3) * size
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    if spec_family == "ellipses":
        rho = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
        dist_in = (1.0 - rho) * min(a, b)  # approx. signed distance, + inside
    else:
        dist_in = np.minimum(a - np.abs(xr), b - np.abs(yr))
    return np.clip(dist_in / FEATHER_PX + 0.5, 0.0, 1.0)


def sample_phantom(spec: PhantomSpec, index: int) -> Tensor:
    """Deterministic phantom image in [0, 1] for (spec, index)."""
    h = w = spec.resolution
    rng = derive_rng(spec.seed, "phantom", spec.family, index)
    lo, hi = spec.count_range
    count = int(rng.integers(lo, hi + 1))
    img = np.zeros((h, w), dtype=np.float64)
    for _ in range(count):
        intensity = rng.uniform(0.25, 1.0)
        img += intensity * _soft_shape(spec.family, h, w, rng)
    img = np.clip(img, 0.0, 1.0)
    if spec.intensity_transform == "inverted":
        img = 1.0 - img
    elif spec.intensity_transform == "gamma":
        img = img**spec.gamma
    return Tensor(img.astype(np.float32))


def synth_sens(n_coils: int, h: int, w: int, seed: int) -> Tensor:
    """Smooth complex coil maps, normalized so sum_i |S_i|^2 = 1 pixelwise.

    Each coil is a wide Gaussian bump centered on the image border with a
    gentle linear phase; one coil degenerates to a unit-magnitude map.
    """
    if n_coils < 1:
        raise ConfigError(f"n_coils must be >= 1, got {n_coils}")
    rng = derive_rng(seed, "sens")
    yy, xx = np.mgrid[0:h, 0:w]
    width = 0.6 * max(h, w)
    radius = 0.55 * max(h, w)
    maps = np.empty((n_coils, h, w), dtype=np.complex128)
    for i in range(n_coils):
        angle = 2 * np.pi * i / n_coils + rng.uniform(-0.2, 0.2)
        cy = h / 2 + radius * np.sin(angle)
        cx = w / 2 + radius * np.cos(angle)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        psi = rng.uniform(0, 2 * np.pi)
        grad = rng.uniform(0.01, 0.05)
        phase = grad * ((xx - w / 2) * np.cos(psi) + (yy - h / 2) * np.sin(psi))
        maps[i] = mag * np.exp(1j * phase)
    norm = np.sqrt((np.abs(maps) ** 2).sum(axis=0, keepdims=True))
    return Tensor((maps / norm).astype(np.complex64))


def generate_sample(spec: PhantomSpec, index: int) -> KSpaceSample:
    """Reference image + coil maps + consistent fully sampled k-space."""
    image = sample_phantom(spec, index)
    sens = synth_sens(spec.n_coils, spec.resolution, spec.resolution, derive_seed(spec.seed, "sens", index))
    kspace = fft2c_np(sens.numpy() * image.numpy())
    return KSpaceSample(
        kspace_full=Tensor(kspace),
        sens=sens,
        reference=image,
        id=f"{spec.family}-{index:04d}",
    )


MANIFEST_NAME = "manifest.json"


def make_dataset(spec: PhantomSpec, n_samples: int, out_dir: str | Path, start_index: int = 0) -> Path:
    """Write n_samples container files plus a manifest; byte-deterministic.

    start_index offsets the generator indices so disjoint train/test sets can
    be cut from one spec.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(start_index, start_index + n_samples):
        sample = generate_sample(spec, index)
        fname = f"{sample.id}.ksp"
        write_ksp(
            out / fname,
            sections={
                "kspace_full": sample.kspace_full.numpy(),
                "sens": sample.sens.numpy(),
                "reference": sample.reference.numpy(),
                "meta": json.dumps({"id": sample.id}, sort_keys=True).encode(),
            },
        )
        entries.append({"id": sample.id, "file": fname})
    manifest = {"version": 1, "spec": spec.to_dict(), "samples": entries}
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(dir_path: str | Path) -> tuple[PhantomSpec, list[KSpaceSample]]:
    """Read a dataset directory written by make_dataset."""
    from .ksp import read_ksp  # local import keeps module load light

    dir_path = Path(dir_path)
    manifest = json.loads((dir_path / MANIFEST_NAME).read_text())
    spec = PhantomSpec.from_dict(manifest["spec"])
    samples = []
    for entry in manifest["samples"]:
        sections = read_ksp(dir_path / entry["file"])
        meta = json.loads(bytes(sections["meta"]).decode())
        samples.append(
            KSpaceSample(
                kspace_full=Tensor(sections["kspace_full"], _keep_dtype=True),
                sens=Tensor(sections["sens"], _keep_dtype=True),
                reference=Tensor(sections["reference"], _keep_dtype=True),
                id=meta["id"],
            )
        )
    return spec, samples

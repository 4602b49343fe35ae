"""Experiment configuration: JSON schema, defaults, and derived objects.

A config plus its global seed fully determines an experiment byte-for-byte:
dataset generator seeds, model init seeds, per-sample mask seeds, and the
TTT split seeds are all derived from the global seed with purpose tokens.
Unknown keys are rejected; validation errors carry a JSON pointer.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .phantoms import PhantomSpec
from .rng import derive_seed
from .training import TrainConfig
from .ttt import TTTConfig
from .unet import UNetConfig

SHIFTS = ("anatomy_analog", "modality_analog", "acceleration", "resolution_analog")

_DIST_SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family"],
    "properties": {
        "family": {"enum": ["ellipses", "rectangles"]},
        "count_range": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 2,
            "maxItems": 2,
        },
        "intensity_transform": {"enum": ["identity", "inverted", "gamma"]},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "resolution": {"type": "integer", "minimum": 32, "maximum": 128},
        "n_coils": {"type": "integer", "minimum": 1},
        "acceleration": {"type": ["number", "null"], "minimum": 1},
        "center_fraction": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "output_dir", "data"],
    "properties": {
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "shift": {"enum": list(SHIFTS)},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["P", "Q"],
            "properties": {
                "P": _DIST_SPEC_SCHEMA,
                "Q": _DIST_SPEC_SCHEMA,
                "n_train": {"type": "integer", "minimum": 0},
                "n_test": {"type": "integer", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_pools": {"type": "integer", "minimum": 1},
                "base_channels": {"type": "integer", "minimum": 1},
                "negative_slope": {"type": "number"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["supervised", "self", "joint"]},
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "acceleration": {"type": "number", "minimum": 1},
                "center_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "mask_policy": {"enum": ["fixed_per_sample", "resampled_per_epoch"]},
                "epoch_size": {"type": ["integer", "null"], "minimum": 1},
                "self_weight": {"type": "number", "minimum": 0},
                "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "ttt": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": ["number", "null"], "minimum": 0},
                "max_iters": {"type": "integer", "minimum": 0},
                "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
                "final_input": {"enum": ["full", "train"]},
            },
        },
    },
}

DEFAULTS = {
    "shift": "anatomy_analog",
    "data": {
        "P": {
            "family": "ellipses",
            "count_range": [4, 9],
            "intensity_transform": "identity",
            "gamma": 1.0,
            "resolution": 64,
            "n_coils": 4,
            "acceleration": None,
            "center_fraction": None,
        },
        "Q": {
            "family": "rectangles",
            "count_range": [4, 9],
            "intensity_transform": "identity",
            "gamma": 1.0,
            "resolution": 64,
            "n_coils": 4,
            "acceleration": None,
            "center_fraction": None,
        },
        "n_train": 128,
        "n_test": 20,
    },
    "model": {"n_pools": 3, "base_channels": 16, "negative_slope": 0.2},
    "train": {
        "mode": "joint",
        "epochs": 30,
        "lr": 1e-4,
        "batch_size": 4,
        "acceleration": 4.0,
        "center_fraction": 0.08,
        "mask_policy": "fixed_per_sample",
        "epoch_size": None,
        "self_weight": 1.0,
        "val_fraction": 0.1,
    },
    "ttt": {
        "lr": None,
        "max_iters": 500,
        "val_fraction": 0.2,
        "patience": 20,
        "eval_every": 1,
        "final_input": "full",
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(raw: dict) -> dict:
    """Merge over defaults and schema-validate; errors carry a JSON pointer."""
    merged = _merge(DEFAULTS, raw)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(merged), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(f"config schema violation at {pointer}: {err.message}")
    return merged


def load_config(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    return validate_config(raw)


class Experiment:
    """Derived, typed view of a validated config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.output_dir = Path(cfg["output_dir"])
        self.shift = cfg["shift"]

    # -- data ---------------------------------------------------------------
    def phantom_spec(self, dist: str) -> PhantomSpec:
        d = self.cfg["data"][dist]
        return PhantomSpec(
            family=d["family"],
            count_range=tuple(d["count_range"]),
            intensity_transform=d["intensity_transform"],
            gamma=d["gamma"],
            resolution=d["resolution"],
            n_coils=d["n_coils"],
            seed=derive_seed(self.seed, "data", dist),
        )

    def undersampling(self, dist: str) -> tuple[float, float]:
        d = self.cfg["data"][dist]
        accel = d["acceleration"] if d["acceleration"] is not None else self.cfg["train"]["acceleration"]
        cf = d["center_fraction"] if d["center_fraction"] is not None else self.cfg["train"]["center_fraction"]
        return float(accel), float(cf)

    def data_dir(self, dist: str, split: str) -> Path:
        return self.output_dir / "data" / dist / split

    @property
    def n_train(self) -> int:
        return self.cfg["data"]["n_train"]

    @property
    def n_test(self) -> int:
        return self.cfg["data"]["n_test"]

    # -- model / training -----------------------------------------------------
    def unet_config(self, mode: str, dist: str) -> UNetConfig:
        m = self.cfg["model"]
        return UNetConfig(
            n_pools=m["n_pools"],
            base_channels=m["base_channels"],
            negative_slope=m["negative_slope"],
            seed=derive_seed(self.seed, "model", mode, dist),
        )

    def train_config(self, mode: str | None = None) -> TrainConfig:
        t = self.cfg["train"]
        return TrainConfig(
            mode=t["mode"] if mode is None else mode,
            epochs=t["epochs"],
            lr=t["lr"],
            batch_size=t["batch_size"],
            acceleration=t["acceleration"],
            center_fraction=t["center_fraction"],
            mask_policy=t["mask_policy"],
            seed=derive_seed(self.seed, "train"),
            epoch_size=t["epoch_size"],
            self_weight=t["self_weight"],
            val_fraction=t["val_fraction"],
        )

    def ttt_config(self, default_lr: float | None = None) -> TTTConfig:
        t = self.cfg["ttt"]
        lr = t["lr"] if t["lr"] is not None else default_lr
        return TTTConfig(
            lr=lr,
            max_iters=t["max_iters"],
            val_fraction=t["val_fraction"],
            patience=t["patience"],
            eval_every=t["eval_every"],
            seed=derive_seed(self.seed, "ttt"),
            final_input=t["final_input"],
        )

    def model_path(self, mode: str, dist: str) -> Path:
        return self.output_dir / "models" / f"{mode}_{dist}.ksp"

    def eval_mask_seed(self, sample_id: str) -> int:
        return derive_seed(self.seed, "eval-mask", sample_id)

"""Run configuration.

A run is fully determined by one flat key=value text file (plus the seed
inside it); CLI flags override file values and use exactly the same key
names. Mode-dependent defaults (dense vs hash) are resolved lazily so that
a config file only needs to state what it changes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


class ValidationError(ValueError):
    """Bad config / bad input data; maps to CLI exit code 2."""


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "runs/out"
    mode: str = "dense"              # dense | hash
    illumination: str = "sg"         # sg | sh3 | sh4 | envmap_tex | envmap_sg128
    seed: int = 0

    bounds_min: float = -1.0
    bounds_max: float = 1.0

    coarse_res: int = 96
    fine_res: int = 160
    coarse_iters: int = 10000
    fine_iters: int = 10000
    batch: int = 8192

    lr_mlp: float = 1e-3
    lr_grid: float = 0.1
    lr_sdf_fine: float = 0.005
    lr_sharpness: float = 1e-3
    lr_hash: float = 0.01            # hash mode: every group
    weight_decay_hash: float = 0.01

    k_lobes: int = 16
    n_quad: int = 128
    sem_channels: int = 6
    mlp_hidden: int = 192
    mlp_depth: int = 3

    hash_levels: int = 16
    hash_coarsest: int = 32
    hash_finest: int = 2048
    hash_table_log2: int = 19
    hash_features: int = 2
    hash_step_res: int = 160         # nominal lattice for step size / normals
    hash_mlp_hidden: int = 64
    hash_sdf_depth: int = 1
    hash_mlp_depth: int = 2

    varying_illumination: bool = False
    view_embed_dim: int = 6

    background: str = "white"        # white | black
    precision: str = "float32"       # float32 | float64
    decode_threshold: float = 1e-5   # min compositing weight for decoding
    decode_topk: int = 64            # max decoded sections per ray (0 = all)
    surface_w_min: float = 0.05      # foreground / surface-point threshold
    smooth_eps_frac: float = 0.01    # smoothness offset scale x max extent
    sharpness_init: float = 20.0
    # the learnable sharpness is projected onto [floor, inf) after each step;
    # a set target anneals the floor geometrically across the fine stage
    # (joint optimization alone collapses into all-transparent blur on
    # background-dominated scenes)
    sharpness_floor: float = 20.0
    sharpness_anneal_to: float | None = None
    relight_roughness_power: float = 1.5

    n_shards: int = 1
    checkpoint_every: int = 1000
    log_every: int = 100

    # loss weights; None resolves to the per-mode default set
    lambda_pbr: float | None = None
    lambda_rad: float | None = None
    lambda_n: float | None = None
    lambda_kappa: float | None = None
    lambda_zeta: float | None = None
    lambda_sg: float | None = None
    lambda_white: float | None = None
    lambda_eik: float | None = None

    def validate(self) -> "TrainConfig":
        if self.mode not in ("dense", "hash"):
            raise ValidationError(f"mode must be dense|hash, got {self.mode!r}")
        if self.illumination not in ("sg", "sh3", "sh4", "envmap_tex", "envmap_sg128"):
            raise ValidationError(f"unknown illumination {self.illumination!r}")
        if self.coarse_iters <= 0 or self.fine_iters <= 0:
            raise ValidationError("iteration counts must be positive")
        if self.batch <= 0:
            raise ValidationError("batch must be positive")
        if self.mode == "dense" and not self.coarse_res < self.fine_res:
            raise ValidationError("dense mode needs coarse_res < fine_res")
        if self.bounds_max <= self.bounds_min:
            raise ValidationError("bounds_max must exceed bounds_min")
        if self.background not in ("white", "black"):
            raise ValidationError(f"background must be white|black, got {self.background!r}")
        if self.n_shards <= 0:
            raise ValidationError("n_shards must be positive")
        return self

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def background_value(self) -> float:
        return 1.0 if self.background == "white" else 0.0

    def loss_weights(self):
        from .losses import LossWeights
        base = LossWeights.hash_defaults() if self.mode == "hash" else LossWeights.dense_defaults()
        over = {
            "pbr": self.lambda_pbr, "rad": self.lambda_rad, "n": self.lambda_n,
            "kappa": self.lambda_kappa, "zeta": self.lambda_zeta,
            "sg": self.lambda_sg, "white": self.lambda_white, "eik": self.lambda_eik,
        }
        for key, val in over.items():
            if val is not None:
                setattr(base, key, val)
        return base

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS.get(name)
    if f is None:
        raise ValidationError(f"unknown config key {name!r}")
    raw = raw.strip()
    ftype = f.type
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"{name}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype in ("float", "float | None"):
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    with open(path) as f:
        cfg = parse_config_text(f.read())
    for key, raw in (overrides or {}).items():
        setattr(cfg, key, _parse_value(key, raw))
    return cfg.validate()

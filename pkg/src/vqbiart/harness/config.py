"""Flat run configuration shared by every command.

A config file is a flat JSON object whose keys are the field names below;
each key is also exposed as a ``--key-name`` command-line override.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from ..errors import require

STAGES = ("augvae_ml", "augvae_sl", "biart")

# optimizer settings per stage (AdamW); lr is multiplied by the batch size
_STAGE_OPTIM = {
    "augvae_ml": dict(base_lr=4.5e-6, beta1=0.9, beta2=0.999, adam_eps=1e-7, weight_decay=1e-5),
    "augvae_sl": dict(base_lr=4.5e-6, beta1=0.9, beta2=0.999, adam_eps=1e-7, weight_decay=1e-5),
    "biart": dict(base_lr=4.5e-7, beta1=0.9, beta2=0.95, adam_eps=1e-8, weight_decay=1e-2),
}

_DESK = dict(
    image_side=64,
    channels=16,
    codebook_size=128,
    resblocks=1,
    n_layer=2,
    n_head=4,
    n_embd=128,
    text_vocab=512,
)


@dataclass
class TrainConfig:
    stage: str = "augvae_ml"
    seed: int = 0
    max_steps: int = 1000
    batch_size: int = 8
    base_lr: float = 4.5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    weight_decay: float = 1e-5
    grad_clip: float = 0.0
    lr_decay: str = "none"
    log_every: int = 50

    # data
    image_side: int = 256
    crop_ratio: float = 0.75
    resample: str = "lanczos"
    lowercase: bool = True

    # plateau halving
    plateau_window: int = 5
    plateau_eps: float = 1e-4
    plateau_factor: float = 0.5
    plateau_every: int = 100

    # autoencoder
    channels: int = 256
    codebook_size: int = 8192
    resblocks: int = 2
    bottleneck_ratio: int = 4
    commitment_beta: float = 0.25
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    restart_after: int = 0
    perceptual_weight: float = 0.1
    target_mse: float = 0.0
    source_checkpoint: str = ""

    # transformer
    n_layer: int = 32
    n_head: int = 16
    n_embd: int = 1024
    embd_pdrop: float = 0.1
    resid_pdrop: float = 0.1
    attn_pdrop: float = 0.1
    bpe_dropout: float = 0.1
    text_vocab: int = 49408
    w_ref: float = 1.0
    w_gen: float = 1.0
    direction_mode: str = "iteration"
    mixed_precision: bool = False
    augvae_checkpoint: str = ""
    vocab_path: str = ""

    # sampling
    sample_n: int = 64
    sample_k: int = 1
    temperature: float = 1.0
    top_k: int = 64
    caption_tokens: int = 32

    def __post_init__(self):
        require(self.stage in STAGES, f"stage must be one of {STAGES}")
        require(self.base_lr * self.batch_size > 0, "effective learning rate must be positive")
        require(0 < self.plateau_factor < 1, "plateau_factor must lie in (0, 1)")
        require(0 < self.crop_ratio <= 1, "crop_ratio must lie in (0, 1]")
        require(self.lr_decay in ("none", "cosine"), "lr_decay is 'none' or 'cosine'")
        require(self.direction_mode in ("iteration", "sample"), "direction_mode is 'iteration' or 'sample'")

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def make_config(stage: str = "augvae_ml", profile: str = "full", **overrides) -> TrainConfig:
    """Stage defaults, then the optional desk profile, then explicit overrides."""
    require(profile in ("full", "desk"), "profile is 'full' or 'desk'")
    values = dict(stage=stage, **_STAGE_OPTIM[stage])
    if profile == "desk":
        values.update(_DESK)
        if stage == "biart":
            values["image_side"] = 256
    values.update(overrides)
    return TrainConfig(**values)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    raw = json.loads(Path(path).read_text())
    require(isinstance(raw, dict), "config file must be a flat JSON object")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    require(not unknown, f"unknown config keys: {sorted(unknown)}")
    nested = [k for k, v in raw.items() if isinstance(v, (dict, list))]
    require(not nested, f"config must be flat; nested values under {nested}")
    stage = raw.get("stage", overrides.get("stage", "augvae_ml"))
    values = dict(_STAGE_OPTIM[stage])
    values.update(raw)
    values.update(overrides)
    return TrainConfig(**values)


def derive_seed(root: int, name: str) -> int:
    """Independent 63-bit seed for a named subsystem of one run."""
    ss = np.random.SeedSequence([root, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(root: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, name))

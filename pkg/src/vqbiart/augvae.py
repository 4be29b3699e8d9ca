"""Feature-augmented VQ autoencoders.

``AugVaeML`` encodes an image into four latent maps (strides 4, 8, 16, 32)
that are all quantized against one shared :class:`Codebook`; the decoder
walks back from the coarsest map, concatenating each finer quantized map on
the way up. ``surgery_to_sl`` turns a trained ML model into ``AugVaeSL``,
which keeps only the stride-8 map and replaces the concatenations with 1x1
channel-doubling convolutions.

Tensors are channels-first (``[B, C, H, W]``), pixels in ``[-1, 1]``.
"""

from __future__ import annotations

import copy
import functools
import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .errors import require
from .quantizer import Codebook, QuantizeResult, ema_update, quantize


@dataclass(frozen=True)
class StageSpec:
    factor: int
    out_channels: int
    resblocks: int = 2

    def __post_init__(self):
        require(self.factor in (2, 4), f"stage factor must be 2 or 4, got {self.factor}")
        require(self.out_channels >= 1, "out_channels must be positive")


@dataclass
class ReconLossConfig:
    perceptual_weight: float = 0.1
    perceptual_scorer: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None

    def __post_init__(self):
        require(self.perceptual_weight >= 0, "perceptual_weight must be >= 0")


def _groups(ch: int) -> int:
    # at least two channels per group, so a 1x1 map of one image still normalises
    for g in (32, 16, 8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class BottleneckBlock(nn.Module):
    def __init__(self, ch: int, ratio: int = 4):
        super().__init__()
        mid = max(1, ch // ratio)
        self.body = nn.Sequential(
            nn.GroupNorm(_groups(ch), ch),
            nn.SiLU(),
            nn.Conv2d(ch, mid, 1),
            nn.GroupNorm(_groups(mid), mid),
            nn.SiLU(),
            nn.Conv2d(mid, mid, 3, padding=1),
            nn.GroupNorm(_groups(mid), mid),
            nn.SiLU(),
            nn.Conv2d(mid, ch, 1),
        )

    def forward(self, x):
        return x + self.body(x)


class EncoderStage(nn.Module):
    """E(f, d_out): ``[B, in, n, n] -> [B, d_out, n/f, n/f]``."""

    def __init__(self, in_ch: int, spec: StageSpec, ratio: int = 4):
        super().__init__()
        self.spec = spec
        c = spec.out_channels
        layers: list[nn.Module] = []
        ch = in_ch
        for i in range(int(math.log2(spec.factor))):
            if i:
                layers.append(nn.SiLU())
            layers.append(nn.Conv2d(ch, c, 3, stride=2, padding=1))
            ch = c
        layers += [BottleneckBlock(c, ratio) for _ in range(spec.resblocks)]
        layers += [nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, c, 1)]
        self.net = nn.Sequential(*layers)
        self.in_channels = in_ch

    def forward(self, x):
        return self.net(x)


class DecoderStage(nn.Module):
    """G(f, d_out): ``[B, in, n, n] -> [B, d_out, n*f, n*f]``."""

    def __init__(self, in_ch: int, width: int, spec: StageSpec, ratio: int = 4):
        super().__init__()
        self.spec = spec
        self.in_channels = in_ch
        layers: list[nn.Module] = [nn.Conv2d(in_ch, width, 3, padding=1)]
        layers += [BottleneckBlock(width, ratio) for _ in range(spec.resblocks)]
        for _ in range(int(math.log2(spec.factor))):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width, width, 3, padding=1),
                nn.SiLU(),
            ]
        layers += [
            nn.GroupNorm(_groups(width), width),
            nn.SiLU(),
            nn.Conv2d(width, spec.out_channels, 3, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass
class VaeOutput:
    x_hat: torch.Tensor
    commitment_loss: torch.Tensor
    indices: list[torch.Tensor]
    latents: list[torch.Tensor]


def _to_channels_last(z: torch.Tensor) -> torch.Tensor:
    return z.permute(0, 2, 3, 1)


def _to_channels_first(z: torch.Tensor) -> torch.Tensor:
    return z.permute(0, 3, 1, 2)


def quantize_levels(
    latents: list[torch.Tensor], codebook: Codebook, beta: float = 0.25
) -> tuple[list[torch.Tensor], list[torch.Tensor], torch.Tensor]:
    """Quantize every ``[B, C, h, w]`` latent against the one shared codebook.

    Returns (quantized maps, index grids ``[B, h, w]``, summed commitment loss).
    """
    results: list[QuantizeResult] = []
    for z in latents:
        require(z.shape[1] == codebook.dim, f"latent has {z.shape[1]} channels, codebook dim {codebook.dim}")
        results.append(quantize(_to_channels_last(z), codebook, beta))
    quantized = [_to_channels_first(r.quantized) for r in results]
    indices = [r.indices for r in results]
    commit = sum((r.commitment_loss for r in results), torch.zeros((), dtype=latents[0].dtype))
    return quantized, indices, commit


def _pooled_ema_update(
    codebook: Codebook, latents: list[torch.Tensor], indices: list[torch.Tensor], generator=None
) -> None:
    flat = torch.cat([_to_channels_last(z).reshape(-1, codebook.dim) for z in latents])
    idx = torch.cat([i.reshape(-1) for i in indices])
    ema_update(codebook, flat, idx, generator=generator)


def _seeded_init(init):
    """Build all layers from ``seed`` alone, leaving the global RNG untouched."""

    @functools.wraps(init)
    def wrapper(self, *args, seed: int = 0, **kwargs):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            init(self, *args, seed=seed, **kwargs)

    return wrapper


class _VaeBase(nn.Module):
    codebook: Codebook
    beta: float
    num_levels: int
    min_divisor: int

    def _check_input(self, x: torch.Tensor) -> None:
        require(x.dim() == 4 and x.shape[1] == 3, f"expected [B, 3, H, W] images, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        require(
            h % self.min_divisor == 0 and w % self.min_divisor == 0,
            f"image side {h}x{w} must be divisible by {self.min_divisor}",
        )

    def forward(self, x: torch.Tensor, update_codebook: bool | None = None, generator=None) -> VaeOutput:
        latents = self.encode(x)
        quantized, indices, commit = quantize_levels(latents, self.codebook, self.beta)
        if update_codebook is None:
            update_codebook = self.training
        if update_codebook:
            _pooled_ema_update(self.codebook, latents, indices, generator)
        return VaeOutput(self.decode(quantized), commit, indices, latents)

    @torch.no_grad()
    def encode_indices(self, x: torch.Tensor) -> list[torch.Tensor]:
        _, indices, _ = quantize_levels(self.encode(x), self.codebook, self.beta)
        return indices

    @torch.no_grad()
    def decode_indices(self, grids: list[torch.Tensor]) -> torch.Tensor:
        require(len(grids) == self.num_levels, f"expected {self.num_levels} index grids")
        maps = []
        for g in grids:
            require(
                int(g.min()) >= 0 and int(g.max()) < self.codebook.num_codes,
                "index grid holds out-of-range codes",
            )
            maps.append(_to_channels_first(self.codebook.entries[g.long()]))
        return self.decode(maps)


class AugVaeML(_VaeBase):
    """Four-level autoencoder with one codebook shared by every level."""

    num_levels = 4
    min_divisor = 32

    @_seeded_init
    def __init__(
        self,
        channels: int = 256,
        codebook_size: int = 8192,
        resblocks: int = 2,
        beta: float = 0.25,
        decay: float = 0.99,
        eps: float = 1e-5,
        restart_after: int | None = None,
        bottleneck_ratio: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c = channels
        self.channels = c
        self.beta = beta
        self.config = dict(
            channels=channels,
            codebook_size=codebook_size,
            resblocks=resblocks,
            beta=beta,
            decay=decay,
            eps=eps,
            restart_after=restart_after,
            bottleneck_ratio=bottleneck_ratio,
        )
        enc_specs = [StageSpec(4, c, resblocks)] + [StageSpec(2, c, resblocks)] * 3
        dec_specs = [StageSpec(2, c, resblocks)] * 3 + [StageSpec(4, 3, resblocks)]
        self.enc_stages = nn.ModuleList(
            EncoderStage(3 if i == 0 else c, s, bottleneck_ratio) for i, s in enumerate(enc_specs)
        )
        # dec_stages[0] consumes the coarsest map alone; the others see [previous, quantized]
        self.dec_stages = nn.ModuleList(
            DecoderStage(c if i == 0 else 2 * c, c, s, bottleneck_ratio) for i, s in enumerate(dec_specs)
        )
        self.codebook = Codebook(codebook_size, c, decay, eps, restart_after, generator=gen)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Latents ordered fine to coarse (strides 4, 8, 16, 32)."""
        self._check_input(x)
        latents = []
        h = x
        for stage in self.enc_stages:
            h = stage(h)
            latents.append(h)
        return latents

    def decode(self, quantized: list[torch.Tensor]) -> torch.Tensor:
        """Reconstruct from quantized maps ordered fine to coarse."""
        require(len(quantized) == 4, "AugVaeML.decode needs four quantized maps")
        coarse_first = quantized[::-1]
        for a, b in zip(coarse_first, coarse_first[1:]):
            require(
                b.shape[-1] == 2 * a.shape[-1] and b.shape[-2] == 2 * a.shape[-2],
                "quantized maps must halve in size from fine to coarse",
            )
        h = self.dec_stages[0](coarse_first[0])
        for stage, q in zip(self.dec_stages[1:], coarse_first[1:]):
            require(h.shape[-2:] == q.shape[-2:], f"decoder map {tuple(h.shape)} vs quantized {tuple(q.shape)}")
            h = stage(torch.cat([h, q], dim=1))
        return torch.tanh(h)


class AugVaeSL(_VaeBase):
    """Single-level (stride 8) autoencoder obtained from :class:`AugVaeML` by surgery."""

    num_levels = 1
    min_divisor = 8

    @_seeded_init
    def __init__(
        self,
        channels: int = 256,
        codebook_size: int = 8192,
        resblocks: int = 2,
        beta: float = 0.25,
        decay: float = 0.99,
        eps: float = 1e-5,
        restart_after: int | None = None,
        bottleneck_ratio: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c = channels
        self.channels = c
        self.beta = beta
        self.config = dict(
            channels=channels,
            codebook_size=codebook_size,
            resblocks=resblocks,
            beta=beta,
            decay=decay,
            eps=eps,
            restart_after=restart_after,
            bottleneck_ratio=bottleneck_ratio,
        )
        self.enc_stages = nn.ModuleList(
            [
                EncoderStage(3, StageSpec(4, c, resblocks), bottleneck_ratio),
                EncoderStage(c, StageSpec(2, c, resblocks), bottleneck_ratio),
            ]
        )
        self.channel_expanders = nn.ModuleList([nn.Conv2d(c, 2 * c, 1), nn.Conv2d(c, 2 * c, 1)])
        self.dec_stages = nn.ModuleList(
            [
                DecoderStage(2 * c, c, StageSpec(2, c, resblocks), bottleneck_ratio),
                DecoderStage(2 * c, c, StageSpec(4, 3, resblocks), bottleneck_ratio),
            ]
        )
        self.codebook = Codebook(codebook_size, c, decay, eps, restart_after, generator=gen)
        self._init_expanders(gen)

    @torch.no_grad()
    def _init_expanders(self, gen: torch.Generator, noise: float = 1e-3) -> None:
        c = self.channels
        eye = torch.eye(c)
        for conv in self.channel_expanders:
            w = 0.5 * torch.cat([eye, eye], dim=0)
            w = w + noise * torch.randn(w.shape, generator=gen)
            conv.weight.copy_(w[:, :, None, None])
            conv.bias.zero_()

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check_input(x)
        return [self.enc_stages[1](self.enc_stages[0](x))]

    def decode(self, quantized: list[torch.Tensor]) -> torch.Tensor:
        require(len(quantized) == 1, "AugVaeSL.decode takes one quantized map")
        h = self.dec_stages[0](self.channel_expanders[0](quantized[0]))
        return torch.tanh(self.dec_stages[1](self.channel_expanders[1](h)))


def surgery_to_sl(ml: AugVaeML, seed: int = 0, share_codebook: bool = True) -> AugVaeSL:
    """Derive a single-level model from a multi-level one.

    The stride-4 and stride-8 encoders and the two finest decoder stages are
    deep-copied; the two coarse encoders/decoders are dropped and fresh 1x1
    expanders take the place of the concatenations. The codebook object is
    shared with ``ml`` unless ``share_codebook`` is False.
    """
    cfg = dict(ml.config)
    sl = AugVaeSL(**cfg, seed=seed)
    sl.enc_stages[0] = copy.deepcopy(ml.enc_stages[0])
    sl.enc_stages[1] = copy.deepcopy(ml.enc_stages[1])
    sl.dec_stages[0] = copy.deepcopy(ml.dec_stages[2])
    sl.dec_stages[1] = copy.deepcopy(ml.dec_stages[3])
    sl.codebook = ml.codebook if share_codebook else copy.deepcopy(ml.codebook)
    sl.train(ml.training)
    return sl


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor, cfg: ReconLossConfig | None = None) -> torch.Tensor:
    """MSE plus an optional weighted perceptual term."""
    require(x.shape == x_hat.shape, f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    cfg = cfg or ReconLossConfig()
    loss = F.mse_loss(x_hat, x)
    if cfg.perceptual_scorer is not None and cfg.perceptual_weight:
        loss = loss + cfg.perceptual_weight * cfg.perceptual_scorer(x, x_hat)
    return loss

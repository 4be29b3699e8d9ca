"""Shared EMA vector quantizer.

One :class:`Codebook` instance is meant to be referenced by every
quantization site of a model, so that an EMA update issued on behalf of one
latent level is immediately visible to all the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import require


class Codebook(nn.Module):
    """Table of ``num_codes`` embedding vectors updated by exponential moving averages.

    All state lives in buffers; nothing here is trained by gradient descent.
    ``ema_cluster_size`` starts at one and ``ema_embed_sum`` at the initial
    entries, so a code that is never selected keeps its initial position
    instead of being divided by a vanishing count.

    If ``restart_after`` is set, a code unused for that many consecutive
    updates is moved onto a random vector of the current batch.
    """

    def __init__(
        self,
        num_codes: int,
        dim: int,
        decay: float = 0.99,
        eps: float = 1e-5,
        restart_after: int | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        require(num_codes >= 1 and dim >= 1, "codebook needs at least one code of dim >= 1")
        require(0.0 <= decay < 1.0, f"decay must lie in [0, 1), got {decay}")
        require(eps > 0, "smoothing eps must be positive")
        self.num_codes = num_codes
        self.dim = dim
        self.decay = decay
        self.eps = eps
        self.restart_after = restart_after
        entries = torch.randn(num_codes, dim, generator=generator) / math.sqrt(dim)
        self.register_buffer("entries", entries)
        self.register_buffer("ema_cluster_size", torch.ones(num_codes))
        self.register_buffer("ema_embed_sum", entries.clone())
        self.register_buffer("unused_updates", torch.zeros(num_codes, dtype=torch.long))

    def smoothed_counts(self) -> torch.Tensor:
        n = self.ema_cluster_size.sum()
        return n * (self.ema_cluster_size + self.eps) / (n + self.num_codes * self.eps)

    def extra_repr(self) -> str:
        return f"num_codes={self.num_codes}, dim={self.dim}, decay={self.decay}, eps={self.eps}"


@dataclass
class QuantizeResult:
    quantized: torch.Tensor
    indices: torch.Tensor
    commitment_loss: torch.Tensor


@dataclass
class CodebookStats:
    usage: int
    perplexity: float


class _StraightThrough(torch.autograd.Function):
    # forward emits the code rows bit-for-bit; backward hands the gradient to z unchanged
    @staticmethod
    def forward(ctx, z, q):
        return q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def nearest_codes(z: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Index of the closest codebook entry (squared Euclidean) for each row of ``z``.

    Distances are evaluated in float64; ties go to the lowest index.
    """
    require(z.dim() == 2, f"expected a [M, d] matrix, got shape {tuple(z.shape)}")
    require(
        z.shape[1] == cb.dim,
        f"latent dim {z.shape[1]} does not match codebook dim {cb.dim}",
    )
    zz = z.detach().to(torch.float64)
    ee = cb.entries.to(torch.float64)
    dist = (zz * zz).sum(1, keepdim=True) - 2.0 * zz @ ee.t() + (ee * ee).sum(1)[None, :]
    # torch.argmin returns the first minimal index
    return dist.argmin(dim=1)


def quantize(z: torch.Tensor, cb: Codebook, beta: float = 0.25) -> QuantizeResult:
    """Snap each trailing ``d``-vector of ``z`` to its nearest code.

    The returned ``quantized`` equals the selected codebook rows exactly; in
    the backward pass it behaves as the identity with respect to ``z``.
    ``commitment_loss`` is ``beta * mean((z - sg[quantized])**2)``.
    """
    require(z.shape[-1] == cb.dim, f"latent dim {z.shape[-1]} != codebook dim {cb.dim}")
    with torch.autocast(device_type=z.device.type, enabled=False):
        if z.dtype in (torch.float16, torch.bfloat16):
            z = z.float()
        flat = z.reshape(-1, cb.dim)
        idx = nearest_codes(flat, cb)
        q = cb.entries.to(z.dtype)[idx].reshape(z.shape)
        commitment = beta * torch.mean((z - q.detach()) ** 2)
        quantized = _StraightThrough.apply(z, q)
    return QuantizeResult(quantized, idx.reshape(z.shape[:-1]), commitment)


@torch.no_grad()
def ema_update(
    cb: Codebook,
    z_flat: torch.Tensor,
    indices: torch.Tensor,
    generator: torch.Generator | None = None,
) -> None:
    """Fold a batch of assigned vectors into the codebook's moving averages in place."""
    require(z_flat.dim() == 2 and z_flat.shape[1] == cb.dim, "z_flat must be [M, d]")
    indices = indices.reshape(-1)
    require(z_flat.shape[0] == indices.shape[0] and indices.numel() >= 1, "need M >= 1 rows")
    require(
        int(indices.min()) >= 0 and int(indices.max()) < cb.num_codes,
        "code index out of range",
    )
    dtype = cb.entries.dtype
    z_flat = z_flat.detach().to(dtype)
    counts = torch.bincount(indices, minlength=cb.num_codes).to(dtype)
    sums = torch.zeros_like(cb.ema_embed_sum).index_add_(0, indices, z_flat)
    d = cb.decay
    cb.ema_cluster_size.mul_(d).add_(counts, alpha=1 - d)
    cb.ema_embed_sum.mul_(d).add_(sums, alpha=1 - d)

    if cb.restart_after is not None:
        used = counts > 0
        cb.unused_updates.add_(1).masked_fill_(used, 0)
        dead = (cb.unused_updates >= cb.restart_after).nonzero().flatten()
        if dead.numel():
            pick = torch.randint(0, z_flat.shape[0], (dead.numel(),), generator=generator)
            cb.ema_cluster_size[dead] = 1.0
            cb.ema_embed_sum[dead] = z_flat[pick] * cb.smoothed_counts()[dead, None]
            cb.unused_updates[dead] = 0

    cb.entries.copy_(cb.ema_embed_sum / cb.smoothed_counts()[:, None])


def codebook_stats(indices: torch.Tensor) -> CodebookStats:
    """Distinct-code count and perplexity (exp of entropy) of an index tensor."""
    require(indices.numel() > 0, "codebook_stats needs at least one index")
    _, counts = torch.unique(indices.reshape(-1), return_counts=True)
    p = counts.to(torch.float64) / counts.sum()
    entropy = -(p * p.log()).sum()
    return CodebookStats(usage=int(counts.numel()), perplexity=float(entropy.exp()))

"""Bidirectional autoregressive transformer over a joint image/text vocabulary.

Global token ids::

    [0, 8191]        image codes
    [8192, 57599]    text tokens (tokenizer id + 8192)
    57600, 57601, 57602   PAD, SOC, SOI

A sequence is either ``SOC text*64 SOI image*1024`` (text to image) or
``SOI image*1024 SOC text*64`` (image to text). Every position also carries a
segment id: REF for the conditioning block, GEN for the target block, each
block including its leading special token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from .errors import require

IMAGE_VOCAB = 8192
TEXT_OFFSET = 8192
TEXT_VOCAB = 49408
PAD = 57600
SOC = 57601
SOI = 57602
VOCAB_SIZE = 57603

TEXT_LEN = 64
IMAGE_LEN = 1024
SEQ_LEN = 1 + TEXT_LEN + 1 + IMAGE_LEN

REF = 0
GEN = 1


class Direction(str, Enum):
    TEXT_TO_IMAGE = "text_to_image"
    IMAGE_TO_TEXT = "image_to_text"


def text_to_global(ids: torch.Tensor) -> torch.Tensor:
    return ids + TEXT_OFFSET


def global_to_text(ids: torch.Tensor) -> torch.Tensor:
    return ids - TEXT_OFFSET


@dataclass
class SequencePack:
    """One packed (text, image) pair.

    ``ref_loss_mask``/``gen_loss_mask`` have length ``L - 1`` and are aligned
    with the targets ``ids[1:]``.
    """

    ids: torch.Tensor
    segments: torch.Tensor
    direction: Direction
    ref_loss_mask: torch.Tensor
    gen_loss_mask: torch.Tensor

    def __len__(self) -> int:
        return int(self.ids.shape[-1])


def pack_sequence(text_ids, image_ids, direction: Direction | str) -> SequencePack:
    """Lay out one pair in the requested order.

    ``text_ids`` are tokenizer ids (at most 64, padded here with PAD);
    ``image_ids`` are exactly 1024 codebook indices in raster order.
    """
    direction = Direction(direction)
    text = torch.as_tensor(text_ids, dtype=torch.long).reshape(-1)
    image = torch.as_tensor(image_ids, dtype=torch.long).reshape(-1)
    require(text.numel() <= TEXT_LEN, f"at most {TEXT_LEN} text tokens, got {text.numel()}")
    require(image.numel() == IMAGE_LEN, f"exactly {IMAGE_LEN} image tokens, got {image.numel()}")
    require(
        text.numel() == 0 or (int(text.min()) >= 0 and int(text.max()) < TEXT_VOCAB),
        "text id outside tokenizer range",
    )
    require(int(image.min()) >= 0 and int(image.max()) < IMAGE_VOCAB, "image id outside [0, 8191]")

    text_block = torch.full((TEXT_LEN,), PAD, dtype=torch.long)
    text_block[: text.numel()] = text_to_global(text)
    text_block = torch.cat([torch.tensor([SOC]), text_block])
    image_block = torch.cat([torch.tensor([SOI]), image])
    if direction is Direction.TEXT_TO_IMAGE:
        ref, gen = text_block, image_block
    else:
        ref, gen = image_block, text_block
    ids = torch.cat([ref, gen])
    segments = torch.cat([torch.full_like(ref, REF), torch.full_like(gen, GEN)])
    targets = ids[1:]
    live = targets != PAD
    ref_mask = (segments[1:] == REF) & live
    gen_mask = (segments[1:] == GEN) & live
    return SequencePack(ids, segments, direction, ref_mask, gen_mask)


def unpack_sequence(pack: SequencePack) -> tuple[torch.Tensor, torch.Tensor, Direction]:
    """Inverse of :func:`pack_sequence`: (tokenizer text ids, image ids, direction)."""
    ids = pack.ids
    if pack.direction is Direction.TEXT_TO_IMAGE:
        text_block, image_block = ids[1 : 1 + TEXT_LEN], ids[TEXT_LEN + 2 :]
    else:
        image_block, text_block = ids[1 : 1 + IMAGE_LEN], ids[IMAGE_LEN + 2 :]
    text = global_to_text(text_block[text_block != PAD])
    return text, image_block.clone(), pack.direction


def collate(packs: list[SequencePack]) -> dict[str, torch.Tensor]:
    return {
        "ids": torch.stack([p.ids for p in packs]),
        "segments": torch.stack([p.segments for p in packs]),
        "ref_loss_mask": torch.stack([p.ref_loss_mask for p in packs]),
        "gen_loss_mask": torch.stack([p.gen_loss_mask for p in packs]),
    }


@dataclass
class BiartConfig:
    n_layer: int = 32
    n_head: int = 16
    n_embd: int = 1024
    block_size: int = SEQ_LEN
    vocab_size: int = VOCAB_SIZE
    embd_pdrop: float = 0.1
    resid_pdrop: float = 0.1
    attn_pdrop: float = 0.1

    @classmethod
    def desk(cls, **overrides) -> "BiartConfig":
        base = dict(n_layer=2, n_head=4, n_embd=128)
        base.update(overrides)
        return cls(**base)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: BiartConfig):
        super().__init__()
        require(cfg.n_embd % cfg.n_head == 0, "n_embd must be divisible by n_head")
        self.n_head = cfg.n_head
        self.qkv = nn.Linear(cfg.n_embd, 3 * cfg.n_embd)
        self.proj = nn.Linear(cfg.n_embd, cfg.n_embd)
        self.attn_pdrop = cfg.attn_pdrop
        self.resid_drop = nn.Dropout(cfg.resid_pdrop)

    def forward(self, x, past=None):
        b, t, c = x.shape
        q, k, v = self.qkv(x).split(c, dim=2)
        q, k, v = (y.view(b, t, self.n_head, c // self.n_head).transpose(1, 2) for y in (q, k, v))
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        drop = self.attn_pdrop if self.training else 0.0
        if past is None or t == 1:
            y = F.scaled_dot_product_attention(q, k, v, dropout_p=drop, is_causal=past is None)
        else:
            s = k.shape[2]
            mask = torch.ones(t, s, dtype=torch.bool).tril(diagonal=s - t)
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, dropout_p=drop)
        y = y.transpose(1, 2).contiguous().view(b, t, c)
        return self.resid_drop(self.proj(y)), (k, v)


class Block(nn.Module):
    def __init__(self, cfg: BiartConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.n_embd)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.n_embd)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.n_embd, 4 * cfg.n_embd),
            nn.GELU(),
            nn.Linear(4 * cfg.n_embd, cfg.n_embd),
            nn.Dropout(cfg.resid_pdrop),
        )

    def forward(self, x, past=None):
        a, present = self.attn(self.ln1(x), past)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, present


class BiartModel(nn.Module):
    """GPT-style decoder with token, learned positional and segment embeddings."""

    def __init__(self, cfg: BiartConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.n_embd)
        self.pos_emb = nn.Embedding(cfg.block_size, cfg.n_embd)
        self.seg_emb = nn.Embedding(2, cfg.n_embd)
        self.drop = nn.Dropout(cfg.embd_pdrop)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layer))
        self.ln_f = nn.LayerNorm(cfg.n_embd)
        self.head = nn.Linear(cfg.n_embd, cfg.vocab_size, bias=False)
        self._init_weights(seed)

    @torch.no_grad()
    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "ln" in name:
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)

    def hidden(self, ids: torch.Tensor, segments: torch.Tensor, past=None, start: int = 0):
        require(ids.shape == segments.shape, "ids and segments must align")
        t = ids.shape[-1]
        require(start + t <= self.cfg.block_size, f"sequence length {start + t} exceeds {self.cfg.block_size}")
        pos = torch.arange(start, start + t, device=ids.device)
        x = self.drop(self.tok_emb(ids) + self.pos_emb(pos)[None] + self.seg_emb(segments))
        presents = []
        for i, blk in enumerate(self.blocks):
            x, present = blk(x, None if past is None else past[i])
            presents.append(present)
        return self.ln_f(x), presents

    def forward(self, ids: torch.Tensor, segments: torch.Tensor) -> torch.Tensor:
        """Logits ``[B, L, vocab]`` for ``[B, L]`` ids and segment ids."""
        h, _ = self.hidden(ids, segments)
        return self.head(h)

    def param_groups(self, weight_decay: float) -> list[dict]:
        """Decay linear weights only; embeddings, LayerNorms and biases are exempt."""
        decay, no_decay = [], []
        for name, p in self.named_parameters():
            if name.endswith("weight") and ("blocks" in name or name.startswith("head")) and p.dim() == 2:
                decay.append(p)
            else:
                no_decay.append(p)
        return [
            {"params": decay, "weight_decay": weight_decay, "name": "decay"},
            {"params": no_decay, "weight_decay": 0.0, "name": "no_decay"},
        ]


_EXP_FLOOR = -80.0


class _ChunkedNll(torch.autograd.Function):
    """Per-row ``logsumexp(h W^T) - (h W^T)[target]`` without holding all logits.

    Logits are produced ``chunk`` rows at a time into one reused buffer and
    recomputed in backward. With a 57603-way vocabulary this keeps memory
    flat and avoids the allocation cost of a fully materialised softmax.

    With ``low_precision`` the three large matmuls, the softmax and its row
    sums run in bfloat16 (the log-normaliser is then good to about 0.004);
    the target logit and the gradient accumulators stay float32.

    Exponents are floored at ``_EXP_FLOOR`` so no softmax entry is subnormal.
    Subnormal operands make CPU matmuls two orders of magnitude slower, and
    with ~57k mostly improbable classes almost every entry would be one. The
    floor changes each entry by less than 2e-35.
    """

    @staticmethod
    @torch.amp.custom_fwd(device_type="cpu", cast_inputs=torch.float32)
    def forward(ctx, h, weight, targets, chunk, low_precision):
        mm_dtype = torch.bfloat16 if low_precision else h.dtype
        # a contiguous [dim, vocab] copy is several times faster for bfloat16 matmuls
        hm, wt = h.to(mm_dtype), weight.t().to(mm_dtype).contiguous()
        n = h.shape[0]
        buf = torch.empty(min(chunk, n), weight.shape[0], dtype=mm_dtype)
        lse = h.new_empty(n)
        # the target logit is always exact
        target_logit = (h * weight[targets]).sum(dim=1)
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            b = buf[: e - s]
            torch.mm(hm[s:e], wt, out=b)
            top = b.amax(dim=1).to(h.dtype)
            b.sub_(top[:, None].to(mm_dtype)).clamp_min_(_EXP_FLOOR).exp_()
            # summing in the buffer dtype avoids a full-size float32 copy
            lse[s:e] = b.sum(dim=1).to(h.dtype).log_().add_(top)
        ctx.save_for_backward(h, weight, targets, lse, target_logit)
        ctx.chunk, ctx.mm_dtype = chunk, mm_dtype
        return lse - target_logit

    @staticmethod
    @torch.amp.custom_bwd(device_type="cpu")
    def backward(ctx, grad):
        h, weight, targets, lse, target_logit = ctx.saved_tensors
        mm_dtype = ctx.mm_dtype
        hm, wm = h.to(mm_dtype), weight.to(mm_dtype)
        wt = wm.t().contiguous()
        n = h.shape[0]
        buf = torch.empty(min(ctx.chunk, n), weight.shape[0], dtype=mm_dtype)
        grad_h = torch.empty(n, h.shape[1], dtype=mm_dtype)
        grad_w = torch.zeros_like(weight)
        # d nll / d logit = softmax - onehot; the target entry is formed in float32
        target_grad = (torch.exp(target_logit - lse) - 1.0) * grad
        # softmax * grad as exp(logit - lse + log|grad|) * sign(grad), floored like forward
        shift = (lse - grad.abs().log()).to(mm_dtype)
        sign = None if bool((grad > 0).all()) else grad.sign().to(mm_dtype)
        for s in range(0, n, ctx.chunk):
            e = min(n, s + ctx.chunk)
            b = buf[: e - s]
            torch.mm(hm[s:e], wt, out=b)
            b.sub_(shift[s:e, None]).clamp_min_(_EXP_FLOOR).exp_()
            if sign is not None:
                b.mul_(sign[s:e, None])
            b[torch.arange(e - s), targets[s:e]] = target_grad[s:e].to(mm_dtype)
            torch.mm(b, wm, out=grad_h[s:e])
            if mm_dtype == grad_w.dtype:
                grad_w.addmm_(b.t(), hm[s:e])
            else:
                grad_w += b.t() @ hm[s:e]
        return grad_h.to(h.dtype), grad_w, None, None, None


def token_nll(h: torch.Tensor, head: nn.Linear, targets: torch.Tensor, chunk: int | None = None) -> torch.Tensor:
    """Next-token NLL per row of ``h`` ``[N, dim]`` under the bias-free output projection.

    Inside a CPU autocast region the projection matmuls run in bfloat16.
    """
    low = torch.is_autocast_enabled("cpu")
    if chunk is None:
        chunk = 256 if low else 64
    return _ChunkedNll.apply(h, head.weight, targets, chunk, low)


def _masked_ce(nll: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        return nll.new_zeros(())
    return nll[mask].mean()


def loss(
    model: BiartModel,
    batch: SequencePack | dict[str, torch.Tensor],
    w_ref: float = 1.0,
    w_gen: float = 1.0,
) -> dict[str, torch.Tensor]:
    """Mean next-token NLL over REF targets and over GEN targets.

    Logits are only materialised at positions that carry a loss.
    """
    if isinstance(batch, SequencePack):
        batch = collate([batch])
    ids, segs = batch["ids"], batch["segments"]
    h, _ = model.hidden(ids[:, :-1], segs[:, :-1])
    targets = ids[:, 1:]
    ref, gen = batch["ref_loss_mask"], batch["gen_loss_mask"]
    live = ref | gen
    nll = token_nll(h[live], model.head, targets[live])
    nll_ref = _masked_ce(nll, ref[live])
    nll_gen = _masked_ce(nll, gen[live])
    return {"nll_ref": nll_ref, "nll_gen": nll_gen, "total": w_ref * nll_ref + w_gen * nll_gen}


@dataclass
class AllowedTokens:
    """Half-open id range a sampler may emit, with optional PAD-after-full-stop gating."""

    lo: int
    hi: int
    pad_after: int | None = None
    name: str = field(default="custom")

    def __post_init__(self):
        require(self.hi > self.lo, f"empty allowed range [{self.lo}, {self.hi})")


def image_tokens(num_codes: int = IMAGE_VOCAB) -> AllowedTokens:
    require(1 <= num_codes <= IMAGE_VOCAB, "image code count must lie in [1, 8192]")
    return AllowedTokens(0, num_codes, name="image")


def text_tokens(text_vocab: int = TEXT_VOCAB, fullstop_id: int | None = None) -> AllowedTokens:
    """Text range; PAD becomes legal once the (tokenizer-level) full stop was sampled."""
    require(1 <= text_vocab <= TEXT_VOCAB, "text vocab must lie in [1, 49408]")
    pad_after = None if fullstop_id is None else fullstop_id + TEXT_OFFSET
    return AllowedTokens(TEXT_OFFSET, TEXT_OFFSET + text_vocab, pad_after=pad_after, name="text")


@torch.no_grad()
def generate(
    model: BiartModel,
    prefix_ids: torch.Tensor,
    prefix_segments: torch.Tensor,
    n_tokens: int,
    allowed: AllowedTokens,
    temperature: float = 1.0,
    top_k: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Sample ``n_tokens`` continuations for each row of a ``[B, P]`` prefix.

    Logits outside ``allowed`` are masked before temperature and top-k;
    ``top_k=1`` is greedy argmax and ignores the generator. Generated
    tokens carry the GEN segment.
    """
    if prefix_ids.dim() == 1:
        prefix_ids, prefix_segments = prefix_ids[None], prefix_segments[None]
    b, p = prefix_ids.shape
    require(p + n_tokens <= model.cfg.block_size, "prefix plus generated tokens exceed block size")
    require(temperature > 0, "temperature must be positive")
    was_training = model.training
    model.eval()
    h, past = model.hidden(prefix_ids, prefix_segments)
    logits = model.head(h[:, -1])
    base = torch.full((model.cfg.vocab_size,), float("-inf"))
    base[allowed.lo : allowed.hi] = 0.0
    pad_ok = torch.zeros(b, dtype=torch.bool)
    out = torch.empty(b, n_tokens, dtype=torch.long)
    gen_seg = torch.full((b, 1), GEN, dtype=torch.long)
    for i in range(n_tokens):
        mask = base.expand(b, -1).clone()
        if allowed.pad_after is not None:
            mask[pad_ok, PAD] = 0.0
        scores = logits.float() + mask
        if top_k == 1:
            nxt = scores.argmax(dim=-1)
        else:
            scores = scores / temperature
            if top_k is not None and top_k < scores.shape[-1]:
                kth = torch.topk(scores, top_k, dim=-1).values[:, -1:]
                scores = scores.masked_fill(scores < kth, float("-inf"))
            probs = torch.softmax(scores, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=generator).squeeze(1)
        out[:, i] = nxt
        if allowed.pad_after is not None:
            pad_ok |= nxt == allowed.pad_after
        if i + 1 < n_tokens:
            h, past = model.hidden(nxt[:, None], gen_seg, past=past, start=p + i)
            logits = model.head(h[:, -1])
    model.train(was_training)
    return out


def generation_prefix(direction: Direction | str, text_ids=None, image_ids=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Prefix ids/segments up to and including the target block's start token."""
    direction = Direction(direction)
    if direction is Direction.TEXT_TO_IMAGE:
        pack = pack_sequence(text_ids, torch.zeros(IMAGE_LEN, dtype=torch.long), direction)
        n = TEXT_LEN + 2
    else:
        pack = pack_sequence([], image_ids, direction)
        n = IMAGE_LEN + 2
    return pack.ids[:n], pack.segments[:n]


def uniform_nll() -> float:
    return math.log(VOCAB_SIZE)

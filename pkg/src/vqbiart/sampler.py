"""Rerank sampling: draw n candidates, keep the scorer's top-1.

Scorers are any object with ``score(image, text) -> float`` where
``image`` is a ``[3, H, W]`` tensor in ``[-1, 1]``. Ties between equal
scores go to the lowest candidate index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import torch

from . import biart as B
from .errors import require
from .tokenizer import BpeVocab, decode, encode

log = logging.getLogger(__name__)


class Scorer(Protocol):
    def score(self, image: torch.Tensor, text: str) -> float: ...


class ScorerError(RuntimeError):
    pass


class ConstantScorer:
    def __init__(self, value: float = 0.0):
        self.value = value

    def score(self, image, text):
        return self.value


class ReconstructionScorer:
    """Negative MSE between the candidate image and a fixed target; ignores the text."""

    def __init__(self, target: torch.Tensor):
        self.target = target

    def score(self, image, text):
        return -float(torch.mean((image - self.target) ** 2))


class TokenOverlapScorer:
    """Jaccard overlap between the words of the text and a reference caption."""

    def __init__(self, reference: str):
        self.reference = set(reference.lower().replace(".", " ").split())

    def score(self, image, text):
        words = set(text.lower().replace(".", " ").split())
        if not words and not self.reference:
            return 1.0
        return len(words & self.reference) / len(words | self.reference)


def rerank(scores: Sequence[float]) -> int:
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def _score_all(scorer: Scorer, images, texts) -> list[float]:
    out = []
    for i, (img, txt) in enumerate(zip(images, texts)):
        try:
            out.append(float(scorer.score(img, txt)))
        except Exception as exc:
            raise ScorerError(f"scorer failed on candidate {i}") from exc
    return out


def truncate_caption(ids: Sequence[int], fullstop_id: int, pad_id: int = B.PAD) -> list[int]:
    """Drop PADs, then keep everything up to and including the first full stop."""
    kept = [int(i) for i in ids if int(i) != pad_id]
    if fullstop_id in kept:
        return kept[: kept.index(fullstop_id) + 1]
    return kept


@dataclass
class ImageSample:
    image: torch.Tensor
    index: int
    seed: int
    scores: list[float]
    tokens: torch.Tensor


@dataclass
class CaptionSample:
    text: str
    index: int
    warning: str | None
    candidates: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield s, min(size, n - s)


@torch.no_grad()
def sample_images(
    text: str,
    biart: B.BiartModel,
    augvae_sl,
    vocab: BpeVocab,
    scorer: Scorer,
    n: int = 64,
    k: int = 1,
    seeds: Sequence[int] | None = None,
    temperature: float = 1.0,
    top_k: int | None = 64,
    chunk: int = 16,
) -> list[ImageSample]:
    """k rounds of: draw ``n`` image-token grids for ``text``, decode, keep the best-scoring one."""
    require(k >= 1 and n >= 1, "k and n must be positive")
    seeds = list(range(k)) if seeds is None else list(seeds)
    require(len(seeds) == k and len(set(seeds)) == k, "need k distinct seeds")
    ids, _ = encode(text, vocab)
    prefix, segs = B.generation_prefix(B.Direction.TEXT_TO_IMAGE, text_ids=ids[ids >= 0])
    allowed = B.image_tokens(augvae_sl.codebook.num_codes)
    side = int(round(B.IMAGE_LEN**0.5))
    picks = []
    for seed in seeds:
        gen = torch.Generator().manual_seed(seed)
        grids = []
        for _, m in _chunks(n, chunk):
            grids.append(
                B.generate(
                    biart, prefix.expand(m, -1), segs.expand(m, -1), B.IMAGE_LEN, allowed,
                    temperature=temperature, top_k=top_k, generator=gen,
                )
            )
        grids = torch.cat(grids).reshape(n, side, side)
        images = torch.cat([augvae_sl.decode_indices([grids[s : s + m]]) for s, m in _chunks(n, chunk)])
        scores = _score_all(scorer, images, [text] * n)
        best = rerank(scores)
        picks.append(ImageSample(images[best], best, seed, scores, grids[best]))
    return picks


@torch.no_grad()
def sample_caption(
    image: torch.Tensor,
    biart: B.BiartModel,
    augvae_sl,
    vocab: BpeVocab,
    scorer: Scorer,
    n: int = 64,
    seed: int = 0,
    n_tokens: int = 32,
    temperature: float = 1.0,
    top_k: int | None = 64,
) -> CaptionSample:
    """Caption an image: ``n`` candidates of ``n_tokens`` tokens, each cut at the first full stop."""
    require(image.dim() == 3, "image must be [3, H, W]")
    grid = augvae_sl.encode_indices(image[None])[0].reshape(-1)
    prefix, segs = B.generation_prefix(B.Direction.IMAGE_TO_TEXT, image_ids=grid)
    allowed = B.text_tokens(vocab.size, vocab.fullstop_id)
    gen = torch.Generator().manual_seed(seed)
    toks = B.generate(
        biart, prefix.expand(n, -1), segs.expand(n, -1), n_tokens, allowed,
        temperature=temperature, top_k=top_k, generator=gen,
    )
    raw, cut = [], []
    for row in toks.tolist():
        text_ids = [t - B.TEXT_OFFSET for t in row if t != B.PAD]
        raw.append(decode(text_ids, vocab))
        cut.append(decode(truncate_caption(text_ids, vocab.fullstop_id, pad_id=-1), vocab))
    if not any(c for c in cut):
        longest = max(range(n), key=lambda i: (len(raw[i]), -i))
        log.warning("every caption candidate was empty after truncation")
        return CaptionSample(raw[longest], longest, "all candidates empty after truncation", cut, [])
    scores = _score_all(scorer, [image] * n, cut)
    best = rerank(scores)
    return CaptionSample(cut[best], best, None, cut, scores)

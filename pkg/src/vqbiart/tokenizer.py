"""Byte-level BPE with BPE-dropout.

The base alphabet is the set of bytes seen in the training corpus (plus
``.``); anything else maps to ``<unk>`` (id 0). Pre-tokenization keeps a
leading space attached to words and splits every punctuation character into
its own piece, so a full stop is always exactly one token.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import require

UNK = "<unk>"
PAD_SLOT = -1
_PRETOKEN = re.compile(r" ?\w+|[^\w\s]|\s+")


@lru_cache(maxsize=1)
def _byte_to_char() -> dict[int, str]:
    # printable stand-in for every byte, same construction as GPT-2's vocab files
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    chars = keep[:]
    n = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            chars.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(keep, chars)}


@lru_cache(maxsize=1)
def _char_to_byte() -> dict[str, int]:
    return {c: b for b, c in _byte_to_char().items()}


def _show(tok: bytes) -> str:
    m = _byte_to_char()
    return "".join(m[b] for b in tok)


def _unshow(s: str) -> bytes:
    m = _char_to_byte()
    return bytes(m[c] for c in s)


@dataclass
class BpeVocab:
    base_alphabet: list[bytes]
    merges: list[tuple[bytes, bytes]]
    tokens: list[bytes | None] = field(default_factory=list)  # index == id; None is <unk>
    token_to_id: dict[bytes, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.tokens:
            self.tokens = [None] + list(self.base_alphabet) + [a + b for a, b in self.merges]
        self.token_to_id = {t: i for i, t in enumerate(self.tokens) if t is not None}
        self.merge_rank = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[bytes, list[int]] = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return 0

    @property
    def fullstop_id(self) -> int:
        return self.token_to_id[b"."]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        lines = ["#vqbiart-bpe v1", "#tokens"]
        for i, t in enumerate(self.tokens):
            lines.append(f"{i}\t{UNK if t is None else _show(t)}")
        lines.append("#merges")
        lines += [f"{_show(a)} {_show(b)}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "BpeVocab":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def loads(cls, text: str) -> "BpeVocab":
        lines = text.splitlines()
        require(lines and lines[0].startswith("#vqbiart-bpe"), "not a BPE vocabulary file")
        sec = None
        tokens: list[bytes | None] = []
        merges: list[tuple[bytes, bytes]] = []
        for line in lines[1:]:
            if line in ("#tokens", "#merges"):
                sec = line
                continue
            if not line:
                continue
            if sec == "#tokens":
                idx, tok = line.split("\t")
                require(int(idx) == len(tokens), "token table ids must be contiguous")
                tokens.append(None if tok == UNK else _unshow(tok))
            else:
                a, b = line.split(" ")
                merges.append((_unshow(a), _unshow(b)))
        base = tokens[1 : len(tokens) - len(merges)]
        return cls(base_alphabet=base, merges=merges, tokens=tokens)


def pretokenize(text: str) -> list[bytes]:
    return [m.group().encode("utf-8") for m in _PRETOKEN.finditer(text)]


def train_bpe(corpus: Iterable[str], target_size: int) -> BpeVocab:
    """Greedy pair-merge training; ties go to the lexicographically smallest pair."""
    words = Counter()
    for line in corpus:
        words.update(pretokenize(line))
    require(len(words) > 0, "cannot train BPE on an empty corpus")
    alphabet = sorted({bytes([b]) for w in words for b in w} | {b"."})
    require(target_size >= 1 + len(alphabet), f"target_size {target_size} smaller than base alphabet")

    segs = {w: [bytes([b]) for b in w] for w in words}
    merges: list[tuple[bytes, bytes]] = []
    while 1 + len(alphabet) + len(merges) < target_size:
        pairs: Counter = Counter()
        for w, n in words.items():
            s = segs[w]
            for a, b in zip(s, s[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        best_n = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == best_n)
        merges.append(best)
        for w, s in segs.items():
            segs[w] = _merge_pair(s, best)
    return BpeVocab(base_alphabet=alphabet, merges=merges)


def _merge_pair(s: list[bytes], pair: tuple[bytes, bytes]) -> list[bytes]:
    out: list[bytes] = []
    i = 0
    while i < len(s):
        if i + 1 < len(s) and s[i] == pair[0] and s[i + 1] == pair[1]:
            out.append(s[i] + s[i + 1])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return out


def _segment(word: bytes, vocab: BpeVocab, dropout: float, rng: np.random.Generator | None) -> list[bytes]:
    s = [bytes([b]) for b in word]
    ranks = vocab.merge_rank
    while len(s) > 1:
        cands = [(ranks[p], i) for i, p in enumerate(zip(s, s[1:])) if p in ranks]
        if dropout > 0:
            keep = rng.random(len(cands)) >= dropout
            cands = [c for c, k in zip(cands, keep) if k]
        if not cands:
            break
        rank, _ = min(cands)
        s = _merge_pair(s, vocab.merges[rank])
    return s


def encode(
    text: str,
    vocab: BpeVocab,
    dropout_rate: float = 0.0,
    max_len: int = 64,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Token ids padded (or truncated) to ``max_len``.

    Pad slots hold ``PAD_SLOT`` (-1); the returned mask is True on real
    tokens. With ``dropout_rate > 0`` every applicable merge is skipped with
    that probability at each step, drawing from ``rng``.
    """
    require(0.0 <= dropout_rate <= 1.0, f"dropout_rate must be in [0, 1], got {dropout_rate}")
    if dropout_rate > 0 and rng is None:
        rng = np.random.default_rng()
    ids: list[int] = []
    for piece in pretokenize(text):
        if dropout_rate == 0:
            cached = vocab._cache.get(piece)
            if cached is None:
                cached = [vocab.token_to_id.get(t, vocab.unk_id) for t in _segment(piece, vocab, 0.0, None)]
                vocab._cache[piece] = cached
            ids.extend(cached)
        else:
            ids.extend(vocab.token_to_id.get(t, vocab.unk_id) for t in _segment(piece, vocab, dropout_rate, rng))
    ids = ids[:max_len]
    out = np.full(max_len, PAD_SLOT, dtype=np.int64)
    out[: len(ids)] = ids
    return out, out != PAD_SLOT


def decode(ids: Iterable[int], vocab: BpeVocab) -> str:
    parts: list[bytes] = []
    for i in ids:
        i = int(i)
        if i == PAD_SLOT:
            continue
        require(0 <= i < vocab.size, f"token id {i} outside vocabulary of size {vocab.size}")
        t = vocab.tokens[i]
        parts.append("�".encode() if t is None else t)
    return b"".join(parts).decode("utf-8", errors="replace")

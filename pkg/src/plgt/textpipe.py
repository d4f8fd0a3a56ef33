"""Byte-level BPE vocabularies, parallel corpora and padded batches."""

from __future__ import annotations

import functools
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ndgrad as nd
from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

PAD, START, END, UNK = 0, 1, 2, 3
# Angle brackets outside the byte alphabet, so specials never collide with merged tokens.
SPECIALS = ("⟨pad⟩", "⟨s⟩", "⟨/s⟩", "⟨unk⟩")
_CHUNK = re.compile(r"\S+|\s+")


@functools.lru_cache(maxsize=1)
def byte_alphabet() -> tuple[dict[int, str], dict[str, int]]:
    """Reversible byte -> printable character table (GPT-2 style)."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) \
        + list(range(ord("®"), ord("ÿ") + 1))
    chars = keep[:]
    n = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            chars.append(256 + n)
            n += 1
    enc = {b: chr(c) for b, c in zip(keep, chars)}
    return enc, {c: b for b, c in enc.items()}


def normalize_text(text: str, lowercase: bool = False) -> str:
    text = unicodedata.normalize("NFC", text).strip()
    return text.lower() if lowercase else text


def _symbols(chunk: str) -> list[str]:
    enc = byte_alphabet()[0]
    return [enc[b] for b in chunk.encode("utf-8")]


class Vocabulary:
    """Bijection between subword tokens and ids; ids 0-3 are the specials.

    Tokens are strings over the printable byte alphabet, so every token is a
    single line in the vocabulary file.
    """

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(SPECIALS) + list(tokens)
        self.token_to_id: dict[str, int] = {}
        for i, tok in enumerate(self.id_to_token):
            if tok in self.token_to_id:
                raise DataError(f"duplicate token {tok!r} at id {i}")
            self.token_to_id[tok] = i
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def _encode_chunk(self, chunk: str) -> list[int]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        # None marks a byte outside the vocabulary; it never merges.
        parts: list[str | None] = [s if s in self.token_to_id else None for s in _symbols(chunk)]
        while len(parts) > 1:
            best, best_id = None, None
            for i in range(len(parts) - 1):
                a, b = parts[i], parts[i + 1]
                if a is None or b is None:
                    continue
                tid = self.token_to_id.get(a + b)
                if tid is not None and (best_id is None or tid < best_id):
                    best, best_id = (a, b), tid
            if best is None:
                break
            merged: list[str | None] = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == best[0] and parts[i + 1] == best[1]:
                    merged.append(best[0] + best[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        ids = [UNK if p is None else self.token_to_id[p] for p in parts]
        self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in _CHUNK.findall(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        dec = byte_alphabet()[1]
        data = bytearray()
        for i in ids:
            i = int(i)
            if i < len(SPECIALS) or i >= len(self.id_to_token):
                continue
            data.extend(dec[c] for c in self.id_to_token[i])
        return data.decode("utf-8", errors="replace")

    def tokens(self, ids: Iterable[int]) -> list[str]:
        """Human-readable label per id, for plot axes."""
        out = []
        for i in ids:
            i = int(i)
            if i < len(SPECIALS):
                out.append(SPECIALS[i])
            else:
                raw = bytes(byte_alphabet()[1][c] for c in self.id_to_token[i])
                out.append(raw.decode("utf-8", errors="replace"))
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls.from_list(lines)

    @classmethod
    def from_list(cls, id_to_token: Sequence[str]) -> "Vocabulary":
        if tuple(id_to_token[:len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the four special tokens")
        return cls(id_to_token[len(SPECIALS):])


def train_vocab(texts: Iterable[str], cap: int, min_freq: int = 2) -> Vocabulary:
    """Greedy byte-pair merges over whitespace chunks until ``cap`` tokens.

    Base symbols are the bytes seen in ``texts`` (most frequent first if the
    cap cannot hold them all). Ties between equally frequent pairs go to the
    lexicographically smallest pair, so the result depends only on the corpus.
    """
    if cap < len(SPECIALS) + 1:
        raise ConfigError(f"vocabulary cap must be >= {len(SPECIALS) + 1}, got {cap}")
    chunks: Counter[str] = Counter()
    for text in texts:
        chunks.update(_CHUNK.findall(text))
    if not chunks:
        raise DataError("cannot build a vocabulary from an empty corpus")

    words = [(_symbols(c), n) for c, n in sorted(chunks.items())]
    byte_freq: Counter[str] = Counter()
    for syms, n in words:
        for s in syms:
            byte_freq[s] += n
    room = cap - len(SPECIALS)
    alphabet = sorted(byte_freq, key=lambda s: (-byte_freq[s], s))[:room]
    tokens = sorted(alphabet)
    known = set(tokens)
    words = [([s if s in known else None for s in syms], n) for syms, n in words]

    while len(tokens) < room:
        pairs: Counter[tuple[str, str]] = Counter()
        for syms, n in words:
            for a, b in zip(syms, syms[1:]):
                if a is not None and b is not None:
                    pairs[(a, b)] += n
        if not pairs:
            break
        top = max(pairs.values())
        if top < min_freq:
            break
        best = min(p for p, n in pairs.items() if n == top)
        new = best[0] + best[1]
        if new not in known:
            tokens.append(new)
            known.add(new)
        for idx, (syms, n) in enumerate(words):
            if len(syms) < 2:
                continue
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == best[0] and syms[i + 1] == best[1]:
                    out.append(new)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[idx] = (out, n)
    return Vocabulary(tokens)


# ---------------------------------------------------------------------------
# corpora and batches
# ---------------------------------------------------------------------------

@dataclass
class ParallelCorpus:
    pairs: list[tuple[str, str]]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[str]:
        return [s for s, _ in self.pairs]

    def targets(self) -> list[str]:
        return [t for _, t in self.pairs]


def parse_corpus(lines: Iterable[str], split: str = "train", lowercase: bool = False) -> ParallelCorpus:
    """Tab-separated ``source<TAB>target`` lines; ``#`` lines and blank lines are skipped."""
    pairs = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if line.count("\t") != 1:
            raise DataError(f"line {lineno}: expected exactly one tab separating source and target")
        src, tgt = (normalize_text(x, lowercase) for x in line.split("\t"))
        if not src or not tgt:
            raise DataError(f"line {lineno}: empty source or target")
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, split)


def read_corpus(path: str | Path, split: str = "train", lowercase: bool = False) -> ParallelCorpus:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh, split, lowercase)


@dataclass
class Batch:
    src_ids: np.ndarray   # [B, S]
    tgt_in: np.ndarray    # [B, T] START + tokens
    tgt_out: np.ndarray   # [B, T] tokens + END
    loss_mask: np.ndarray  # [B, T] 1.0 on real positions

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.loss_mask.sum())


class Batches(list):
    """List of batches that also remembers how many pairs were dropped for length."""

    dropped: int = 0


def _pad(rows: list[list[int]]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def encode_pairs(pairs, vocab_src: Vocabulary, vocab_tgt: Vocabulary):
    return [(vocab_src.encode(s), vocab_tgt.encode(t)) for s, t in pairs]


def make_batches(corpus, vocab_src: Vocabulary, vocab_tgt: Vocabulary, batch_size: int,
                 max_len: int, shuffle_seed: int | None = None) -> Batches:
    """Encode, length-filter, optionally shuffle and pad ``corpus`` into batches.

    Pairs whose source or shifted target exceeds ``max_len`` are dropped, not
    truncated.
    """
    pairs = corpus.pairs if isinstance(corpus, ParallelCorpus) else list(corpus)
    if not pairs:
        raise DataError("corpus is empty")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    encoded = []
    for src, tgt in encode_pairs(pairs, vocab_src, vocab_tgt):
        if not src or not tgt or len(src) > max_len or len(tgt) + 1 > max_len:
            continue
        encoded.append((src, tgt))
    dropped = len(pairs) - len(encoded)
    if dropped:
        logger.info("dropped %d of %d pairs longer than %d tokens", dropped, len(pairs), max_len)
    if not encoded:
        raise DataError(f"all {len(pairs)} pairs exceed max_len={max_len}")
    if shuffle_seed is not None:
        order = nd.Rng(shuffle_seed, "shuffle").permutation(len(encoded))
        encoded = [encoded[i] for i in order]
    out = Batches()
    out.dropped = dropped
    for start in range(0, len(encoded), batch_size):
        chunk = encoded[start:start + batch_size]
        tgt_in = _pad([[START] + t for _, t in chunk])
        tgt_out = _pad([t + [END] for _, t in chunk])
        out.append(Batch(_pad([s for s, _ in chunk]), tgt_in, tgt_out, (tgt_out != PAD).astype(np.float64)))
    return out

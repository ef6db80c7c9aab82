"""Byte-pair-encoding tokenizer trained on the working corpus.

Text is first split into chunks of "leading whitespace + non-space run" (or a
trailing whitespace run), so merges never cross word boundaries and chunk
concatenation reproduces the input exactly.  Base symbols are single
characters seen during training; anything else encodes to ``<unk>``.
"""
from __future__ import annotations

import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
HEADER = "bpe-vocab v1"
MERGES_SENTINEL = "#merges"

_CHUNK_RE = re.compile(r"\s*\S+|\s+")
_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


class VocabFormatError(ValueError):
    pass


@dataclass
class Vocabulary:
    id_to_token: list
    merges: list
    token_to_id: dict = field(init=False, repr=False)
    ranks: dict = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy ids 0..3")
        self.merges = [tuple(m) for m in self.merges]
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def _segment(self, chunk: str) -> list:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        symbols = list(chunk)
        ranks = self.ranks
        while len(symbols) > 1:
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _merge_symbols(symbols, best)
        ids = [self.token_to_id.get(s, UNK) for s in symbols]
        self._cache[chunk] = ids
        return ids

    def tokenize(self, text: str) -> list:
        ids = []
        for chunk in _CHUNK_RE.findall(text):
            ids.extend(self._segment(chunk))
        return ids

    def encode(self, text: str, max_len: int) -> "EncodedSequence":
        if max_len < 3:
            raise ValueError("max_len must be at least 3")
        body = self.tokenize(text)[: max_len - 2]
        ids = [BOS, *body, EOS]
        n = len(ids)
        ids.extend([PAD] * (max_len - n))
        return EncodedSequence(np.array(ids, dtype=np.int64), n)

    def encode_batch(self, texts: Iterable[str], max_len: int) -> np.ndarray:
        rows = [self.encode(t, max_len).ids for t in texts]
        if not rows:
            return np.zeros((0, max_len), dtype=np.int64)
        return np.stack(rows)

    def decode(self, ids) -> str:
        return "".join(self.id_to_token[int(i)] for i in ids if int(i) > UNK)


@dataclass
class EncodedSequence:
    ids: np.ndarray
    true_length: int

    def __len__(self) -> int:
        return len(self.ids)


def _merge_symbols(symbols: list, pair: tuple) -> list:
    left, right = pair
    out = []
    i, n = 0, len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_bpe(corpus: Iterable[str], vocab_size: int) -> Vocabulary:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Stops at ``vocab_size`` tokens or when no pair occurs at least twice.
    Equal counts are broken toward the lexicographically smaller pair.
    """
    chunk_counts = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        chunk_counts.update(_CHUNK_RE.findall(text))
    if n_texts == 0 or not chunk_counts:
        raise ValueError("cannot train BPE on an empty corpus")

    alphabet = sorted({ch for chunk in chunk_counts for ch in chunk})
    id_to_token = list(SPECIAL_TOKENS) + [ch for ch in alphabet if ch not in SPECIAL_TOKENS]
    if vocab_size < len(id_to_token):
        raise ValueError(
            f"vocab_size {vocab_size} is below the base vocabulary of {len(id_to_token)} "
            "(4 specials + corpus alphabet)")
    known = set(id_to_token)
    specials = set(SPECIAL_TOKENS)

    words = [list(chunk) for chunk in chunk_counts]
    freqs = list(chunk_counts.values())
    pair_counts = Counter()
    where = defaultdict(set)
    for wi, (sym, f) in enumerate(zip(words, freqs)):
        for pair in zip(sym, sym[1:]):
            pair_counts[pair] += f
            where[pair].add(wi)

    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    merges = []
    banned = set()
    while len(id_to_token) < vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count != -neg or pair in banned:
            continue  # stale heap entry
        if count < 2:
            break
        merged = pair[0] + pair[1]
        if merged in specials:
            banned.add(pair)
            continue
        merges.append(pair)
        if merged not in known:
            known.add(merged)
            id_to_token.append(merged)

        changed = set()
        for wi in sorted(where.pop(pair, ())):
            sym = words[wi]
            if len(sym) < 2:
                continue
            new = _merge_symbols(sym, pair)
            if len(new) == len(sym):
                continue
            f = freqs[wi]
            for p in zip(sym, sym[1:]):
                pair_counts[p] -= f
                changed.add(p)
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where[p].add(wi)
                changed.add(p)
            words[wi] = new
        pair_counts.pop(pair, None)
        for p in changed:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
            elif p != pair:
                heapq.heappush(heap, (-c, p))
    return Vocabulary(id_to_token, merges)


def _escape(s: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in s)


def _unescape(s: str, lineno: int) -> str:
    out = []
    it = iter(s)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, None)
        if nxt not in _UNESCAPES:
            raise VocabFormatError(f"line {lineno}: bad escape sequence")
        out.append(_UNESCAPES[nxt])
    return "".join(out)


def save_vocab(vocab: Vocabulary, path) -> None:
    lines = [HEADER]
    lines += [f"{i}\t{_escape(tok)}" for i, tok in enumerate(vocab.id_to_token)]
    lines.append(MERGES_SENTINEL)
    lines += [f"{_escape(a)}\t{_escape(b)}" for a, b in vocab.merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_vocab(path) -> Vocabulary:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != HEADER:
        raise VocabFormatError(f"line 1: expected header {HEADER!r}")
    tokens: list = []
    merges: list = []
    in_merges = False
    for lineno, line in enumerate(lines[1:], start=2):
        if not in_merges and line == MERGES_SENTINEL:
            in_merges = True
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise VocabFormatError(f"line {lineno}: expected two tab-separated fields")
        if in_merges:
            merges.append((_unescape(parts[0], lineno), _unescape(parts[1], lineno)))
            continue
        try:
            idx = int(parts[0])
        except ValueError:
            raise VocabFormatError(f"line {lineno}: token id {parts[0]!r} is not an integer") from None
        if idx != len(tokens):
            raise VocabFormatError(f"line {lineno}: expected id {len(tokens)}, got {idx}")
        tokens.append(_unescape(parts[1], lineno))
    if not in_merges:
        raise VocabFormatError(f"line {len(lines) + 1}: missing {MERGES_SENTINEL} section")
    try:
        return Vocabulary(tokens, merges)
    except ValueError as exc:
        raise VocabFormatError(f"line 2: {exc}") from None


"""Subword vocabulary induction and encoder input construction.

The vocabulary is induced by greedy byte-pair merging over whitespace- and
punctuation-split words. Every subword unit exists in two forms: a
word-initial form and a continuation form carrying the `##` prefix, so the
greedy longest-match tokenizer can mark word-internal pieces.

Encoder inputs follow a fixed layout. Mention inputs interleave the document
title, left context, the marked mention span, and right context; entity
inputs are a truncated description. Both are padded to a fixed length with
per-block segment labels.
"""
from __future__ import annotations

import heapq
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus import MentionRecord
from .kb import DescriptionCandidate

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[E]", "[/E]")
PAD, UNK, CLS, SEP, E_OPEN, E_CLOSE = range(6)

CONT = "##"

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass
class SubwordVocab:
    tokens: list[str]
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self._max_piece = max(
            (len(t) - (len(CONT) if t.startswith(CONT) else 0)
             for t in self.tokens[len(SPECIALS):]),
            default=1,
        )
        self._word_cache: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SubwordVocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line != "\n" and line != ""]
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocab file {path} does not start with the special tokens")
        return cls(tokens=tokens)


@dataclass
class TokenSequence:
    ids: list[int]
    segments: list[int]
    true_len: int

    def __post_init__(self) -> None:
        assert len(self.ids) == len(self.segments)


def pretokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text)


def train_vocab(corpus_text: Iterable[str], target_size: int) -> SubwordVocab:
    """Induce a subword vocabulary of at most target_size entries.

    Greedy pair merging over word-internal character sequences: the most
    frequent adjacent pair is merged at each step, ties broken by the
    lexicographically smaller pair. Each merge product is added in both its
    word-initial and continuation form.
    """
    word_freq: Counter = Counter()
    for text in corpus_text:
        word_freq.update(pretokenize(text))

    alphabet = sorted({ch for w in word_freq for ch in w})
    base = len(SPECIALS) + 2 * len(alphabet)
    if target_size < base:
        raise ValueError(
            f"target_size {target_size} below minimum {base} "
            f"({len(SPECIALS)} specials + {2 * len(alphabet)} character forms)"
        )

    tokens = list(SPECIALS)
    for ch in alphabet:
        tokens.append(ch)
        tokens.append(CONT + ch)
    known = set(tokens)

    words: list[list[str]] = [list(w) for w in word_freq]
    freqs: list[int] = list(word_freq.values())

    pair_counts: Counter = Counter()
    pair_words: dict[tuple[str, str], set[int]] = {}
    for wi, sym in enumerate(words):
        f = freqs[wi]
        for a, b in zip(sym, sym[1:]):
            pair_counts[(a, b)] += f
            pair_words.setdefault((a, b), set()).add(wi)

    # Lazy max-heap keyed by (-count, pair); stale entries are skipped.
    heap: list[tuple[int, tuple[str, str]]] = [
        (-c, p) for p, c in pair_counts.items()
    ]
    heapq.heapify(heap)

    def push(pair: tuple[str, str]) -> None:
        heapq.heappush(heap, (-pair_counts[pair], pair))

    while len(tokens) + 2 <= target_size and heap:
        neg, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count == 0 or -neg != count:
            continue
        merged = pair[0] + pair[1]
        for wi in sorted(pair_words.get(pair, ())):
            sym = words[wi]
            f = freqs[wi]
            for a, b in zip(sym, sym[1:]):
                pair_counts[(a, b)] -= f
                if pair_counts[(a, b)] <= 0:
                    del pair_counts[(a, b)]
                pw = pair_words.get((a, b))
                if pw is not None:
                    pw.discard(wi)
            new_sym: list[str] = []
            i = 0
            while i < len(sym):
                if i + 1 < len(sym) and (sym[i], sym[i + 1]) == pair:
                    new_sym.append(merged)
                    i += 2
                else:
                    new_sym.append(sym[i])
                    i += 1
            words[wi] = new_sym
            touched = set()
            for a, b in zip(new_sym, new_sym[1:]):
                pair_counts[(a, b)] = pair_counts.get((a, b), 0) + f
                pair_words.setdefault((a, b), set()).add(wi)
                touched.add((a, b))
            for p in touched:
                push(p)
        pair_words.pop(pair, None)
        pair_counts.pop(pair, None)
        if merged not in known:
            tokens.append(merged)
            tokens.append(CONT + merged)
            known.add(merged)
            known.add(CONT + merged)

    return SubwordVocab(tokens=tokens)


def _encode_word(vocab: SubwordVocab, word: str) -> tuple[int, ...]:
    cached = vocab._word_cache.get(word)
    if cached is not None:
        return cached
    ids: list[int] = []
    i = 0
    n = len(word)
    while i < n:
        matched = False
        for j in range(min(n, i + vocab._max_piece), i, -1):
            piece = word[i:j] if i == 0 else CONT + word[i:j]
            tid = vocab.token_to_id.get(piece)
            if tid is not None:
                ids.append(tid)
                i = j
                matched = True
                break
        if not matched:
            ids.append(UNK)
            i += 1
    result = tuple(ids)
    vocab._word_cache[word] = result
    return result


def tokenize(vocab: SubwordVocab, text: str) -> list[int]:
    """Greedy longest-match tokenization; unmatchable characters become [UNK]."""
    ids: list[int] = []
    for word in pretokenize(text):
        ids.extend(_encode_word(vocab, word))
    return ids


def _pad(ids: list[int], segments: list[int], max_len: int) -> TokenSequence:
    true_len = len(ids)
    ids = ids + [PAD] * (max_len - true_len)
    segments = segments + [0] * (max_len - true_len)
    return TokenSequence(ids=ids, segments=segments, true_len=true_len)


def build_mention_input(vocab: SubwordVocab, m: MentionRecord, max_len: int = 64) -> TokenSequence:
    """Build the mention-encoder input: [CLS] title [SEP] left [E] span [/E] right.

    The title may occupy up to a quarter of the sequence; the remaining
    budget (after the four fixed tokens) goes to the mention span first and
    is then split equally between left and right context, with the odd
    leftover going to the left. Left context keeps its rightmost tokens,
    right context its leftmost.
    """
    if max_len < 8:
        raise ValueError("max_len must be at least 8")
    title = tokenize(vocab, m.title)
    left = tokenize(vocab, m.left)
    span = tokenize(vocab, m.span)
    right = tokenize(vocab, m.right)

    title_take = min(len(title), max_len // 4)
    budget = max_len - 4 - title_take
    span_take = min(len(span), budget)
    ctx = budget - span_take
    left_budget = ctx - ctx // 2
    right_budget = ctx // 2
    left_take = min(len(left), left_budget)
    right_take = min(len(right), right_budget)

    ids = [CLS] + title[:title_take] + [SEP]
    segments = [0] * len(ids)
    ids += left[len(left) - left_take :] if left_take else []
    segments += [1] * left_take
    ids += [E_OPEN] + span[:span_take] + [E_CLOSE]
    segments += [2] * (2 + span_take)
    ids += right[:right_take]
    segments += [3] * right_take
    return _pad(ids, segments, max_len)


def build_entity_input(vocab: SubwordVocab, d: DescriptionCandidate, max_len: int = 64) -> TokenSequence:
    """Build the entity-encoder input: [CLS] plus the truncated description."""
    ids = [CLS] + tokenize(vocab, d.text)[: max_len - 1]
    return _pad(ids, [0] * len(ids), max_len)

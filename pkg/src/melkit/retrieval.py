"""Exact top-k entity retrieval and the alias-table baseline.

The dense index holds one unit-normalized row per entity; search is a full
scan with deterministic tie-breaking by QID. The alias table maps NFC-
normalized mention surfaces to entities with empirical prior probabilities.
"""
from __future__ import annotations

import json
import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kb import KnowledgeBase, LangUsageStats, select_description
from .model import (
    EntityEmbeddingTable,
    Params,
    TransformerConfig,
    encode_batch,
)
from .tokenizer import SubwordVocab, build_entity_input

INDEX_MAGIC = b"EIDX1\n"

CandidateList = list[tuple[str, float]]


@dataclass
class EntityIndex:
    qids: list[str]
    matrix: np.ndarray  # [n_entities, d_enc], unit rows
    model_tag: str

    def __post_init__(self) -> None:
        if len(self.qids) != self.matrix.shape[0]:
            raise ValueError("qid count does not match matrix rows")
        self.row_of = {q: i for i, q in enumerate(self.qids)}

    @property
    def d_enc(self) -> int:
        return self.matrix.shape[1]


def build_index(
    entity_side,
    kb: KnowledgeBase,
    stats: LangUsageStats,
    *,
    vocab: SubwordVocab | None = None,
    cfg: TransformerConfig | None = None,
    model_tag: str = "",
    allowed_langs: set[str] | None = None,
    batch_size: int = 256,
) -> EntityIndex:
    """Encode every KB entity and L2-normalize the rows.

    `entity_side` is either an entity-encoder Params dict (description
    encoder; requires vocab and cfg) or an EntityEmbeddingTable.
    """
    qids = kb.sorted_qids()
    if isinstance(entity_side, EntityEmbeddingTable):
        missing = [q for q in qids if q not in entity_side.index]
        if missing:
            raise ValueError(f"entities without embedding rows: {', '.join(missing)}")
        matrix = np.stack([entity_side.vectors[entity_side.index[q]] for q in qids])
    else:
        if vocab is None or cfg is None:
            raise ValueError("description encoding requires vocab and cfg")
        inputs = []
        missing = []
        for q in qids:
            try:
                desc = select_description(kb.entities[q], stats, allowed_langs)
            except ValueError:
                missing.append(q)
                continue
            inputs.append(build_entity_input(vocab, desc, cfg.max_len))
        if missing:
            raise ValueError(f"entities without usable descriptions: {', '.join(missing)}")
        matrix = encode_batch(entity_side, cfg, inputs, batch_size=batch_size)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    zero = [qids[i] for i in np.nonzero(norms[:, 0] == 0.0)[0]]
    if zero:
        raise ValueError(f"entities encoded to the zero vector: {', '.join(zero)}")
    return EntityIndex(qids=qids, matrix=matrix / norms, model_tag=model_tag)


def search(index: EntityIndex, query: np.ndarray, k: int) -> CandidateList:
    """Exact top-k by cosine: full scan, ties broken by ascending QID."""
    if k < 1:
        raise ValueError("k must be at least 1")
    q = np.asarray(query, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("cannot search with a zero query")
    scores = index.matrix.astype(np.float64) @ (q / norm)
    n = scores.shape[0]
    k_eff = min(k, n)
    if k_eff < n:
        boundary = np.partition(scores, n - k_eff)[n - k_eff]
        cand = np.nonzero(scores >= boundary)[0]
    else:
        cand = np.arange(n)
    order = sorted(cand, key=lambda i: (-scores[i], index.qids[i]))[:k_eff]
    return [(index.qids[i], float(scores[i])) for i in order]


def search_batch(index: EntityIndex, queries: np.ndarray, k: int) -> list[CandidateList]:
    return [search(index, queries[i], k) for i in range(queries.shape[0])]


def save_index(index: EntityIndex, path: str | Path) -> None:
    """Binary index file: magic, JSON header, float32 rows, QID list."""
    matrix32 = np.ascontiguousarray(index.matrix, dtype=np.float32)
    header = json.dumps(
        {"d_enc": index.d_enc, "count": len(index.qids), "model_tag": index.model_tag},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(matrix32.tobytes(order="C"))
        fh.write("\n".join(index.qids).encode("utf-8"))


def load_index(path: str | Path) -> EntityIndex:
    with open(path, "rb") as fh:
        if fh.read(len(INDEX_MAGIC)) != INDEX_MAGIC:
            raise ValueError(f"not an index file: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        count, d_enc = header["count"], header["d_enc"]
        raw = fh.read(count * d_enc * 4)
        matrix = np.frombuffer(raw, dtype=np.float32).reshape(count, d_enc).copy()
        qids = fh.read().decode("utf-8").split("\n") if count else []
    if len(qids) != count:
        raise ValueError(f"index file corrupt: expected {count} qids, found {len(qids)}")
    return EntityIndex(qids=qids, matrix=matrix, model_tag=header["model_tag"])


# --- alias table ---------------------------------------------------------------

def _normalize_surface(surface: str) -> str:
    return unicodedata.normalize("NFC", surface)


@dataclass
class AliasTable:
    # surface -> [(qid, prior, count)] sorted by descending prior, ties by qid
    table: dict[str, list[tuple[str, float, int]]]


def build_alias_table(train) -> AliasTable:
    """Empirical entity priors given the observed mention surface string."""
    counts: Counter = Counter()
    totals: Counter = Counter()
    for m in train.mentions:
        surface = _normalize_surface(m.span)
        counts[(surface, m.gold_qid)] += 1
        totals[surface] += 1
    table: dict[str, list[tuple[str, float, int]]] = {}
    for (surface, qid), c in counts.items():
        table.setdefault(surface, []).append((qid, c / totals[surface], c))
    for surface in table:
        table[surface].sort(key=lambda t: (-t[1], t[0]))
    return AliasTable(table=table)


def alias_lookup(table: AliasTable, surface: str, k: int) -> CandidateList:
    if k < 1:
        raise ValueError("k must be at least 1")
    entries = table.table.get(_normalize_surface(surface), [])
    return [(qid, prior) for qid, prior, _ in entries[:k]]


def save_alias_table(table: AliasTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for surface in sorted(table.table):
            for qid, prior, count in table.table[surface]:
                fh.write(f"{surface}\t{qid}\t{count}\t{prior!r}\n")


def load_alias_table(path: str | Path) -> AliasTable:
    counts: dict[str, list[tuple[str, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            surface, qid, count, _prior = line.split("\t")
            counts.setdefault(surface, []).append((qid, int(count)))
    table: dict[str, list[tuple[str, float, int]]] = {}
    for surface, rows in counts.items():
        total = sum(c for _, c in rows)
        entries = [(qid, c / total, c) for qid, c in rows]
        entries.sort(key=lambda t: (-t[1], t[0]))
        table[surface] = entries
    return AliasTable(table=table)

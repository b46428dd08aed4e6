"""Supervision corpus: anchor extraction, holdout splitting, and counting.

Documents use a simplified markup: headings delimited `== Heading ==` and
anchors `[[target|anchor]]` or `[[target]]`. Anchor targets are resolved
through a redirect map and a per-language title-to-QID map; anchors that
cannot be resolved are dropped and tallied.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .seeding import derive_rng

# Characters of context stored on each side of a mention span. Token-level
# truncation happens later, at featurization.
CONTEXT_CHARS = 500

MAX_REDIRECT_HOPS = 10

_ANCHOR_RE = re.compile(r"\[\[([^\[\]|]+?)(?:\|([^\[\]|]*))?\]\]")


@dataclass
class Document:
    doc_id: str
    lang: str
    title: str
    body: str
    page_entity: str | None = None


@dataclass(frozen=True)
class MentionRecord:
    doc_id: str
    lang: str
    title: str
    left: str
    span: str
    right: str
    gold_qid: str


@dataclass
class MentionCorpus:
    mentions: list[MentionRecord] = field(default_factory=list)
    provenance: dict[str, str | None] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.mentions)

    def languages(self) -> list[str]:
        return sorted({m.lang for m in self.mentions})


@dataclass
class FrequencyTable:
    counts: dict[str, int] = field(default_factory=dict)

    def count(self, qid: str) -> int:
        return self.counts.get(qid, 0)


def strip_trailing_sections(doc: Document, patterns: Mapping[str, Sequence[str]]) -> Document:
    """Truncate the body at the first heading matching a pattern for doc.lang."""
    headings = patterns.get(doc.lang, [])
    if not headings:
        return doc
    alternatives = "|".join(re.escape(h) for h in headings)
    match = re.search(rf"==\s*(?:{alternatives})\s*==", doc.body)
    if match is None:
        return doc
    return Document(
        doc_id=doc.doc_id,
        lang=doc.lang,
        title=doc.title,
        body=doc.body[: match.start()].rstrip(),
        page_entity=doc.page_entity,
    )


def _resolve_redirects(title: str, redirects: Mapping[str, str]) -> str | None:
    """Follow redirects up to MAX_REDIRECT_HOPS; None on a cycle or overflow."""
    seen = {title}
    for _ in range(MAX_REDIRECT_HOPS):
        if title not in redirects:
            return title
        title = redirects[title]
        if title in seen:
            return None
        seen.add(title)
    return title if title not in redirects else None


def extract_anchors(
    doc: Document,
    redirects: Mapping[str, str],
    title_to_qid: Mapping[tuple[str, str], str],
) -> tuple[list[MentionRecord], Counter]:
    """Extract one MentionRecord per resolvable anchor, in document order.

    Returns the records plus a tally of dropped anchors, keyed by reason
    ("unresolved_title", "redirect_overflow").
    """
    tally: Counter = Counter()
    pieces: list[str] = []
    spans: list[tuple[int, int, str]] = []  # (start, end, target) in cleaned text
    clean_len = 0
    pos = 0
    for match in _ANCHOR_RE.finditer(doc.body):
        prefix = doc.body[pos : match.start()]
        pieces.append(prefix)
        clean_len += len(prefix)
        target = match.group(1)
        anchor = match.group(2) if match.group(2) is not None else target
        pieces.append(anchor)
        spans.append((clean_len, clean_len + len(anchor), target))
        clean_len += len(anchor)
        pos = match.end()
    pieces.append(doc.body[pos:])
    clean = "".join(pieces)

    records: list[MentionRecord] = []
    for start, end, target in spans:
        resolved = _resolve_redirects(target, redirects)
        if resolved is None:
            tally["redirect_overflow"] += 1
            continue
        qid = title_to_qid.get((doc.lang, resolved))
        if qid is None:
            tally["unresolved_title"] += 1
            continue
        records.append(
            MentionRecord(
                doc_id=doc.doc_id,
                lang=doc.lang,
                title=doc.title,
                left=clean[max(0, start - CONTEXT_CHARS) : start],
                span=clean[start:end],
                right=clean[end : end + CONTEXT_CHARS],
                gold_qid=qid,
            )
        )
    return records, tally


def split_holdout(
    corpus: MentionCorpus, held_out_page_entities: set[str]
) -> tuple[MentionCorpus, MentionCorpus]:
    """Partition mentions by whether their document's page entity is held out."""
    train = MentionCorpus()
    heldout = MentionCorpus()
    for m in corpus.mentions:
        page = corpus.provenance.get(m.doc_id)
        side = heldout if page is not None and page in held_out_page_entities else train
        side.mentions.append(m)
        side.provenance[m.doc_id] = page
    return train, heldout


def count_entity_frequencies(train: MentionCorpus) -> FrequencyTable:
    counts: Counter = Counter(m.gold_qid for m in train.mentions)
    return FrequencyTable(counts=dict(counts))


def drop_unlinked(corpus: MentionCorpus, kb) -> tuple[MentionCorpus, int]:
    """Remove mentions whose gold entity is absent from the (filtered) KB."""
    kept = MentionCorpus(provenance=dict(corpus.provenance))
    dropped = 0
    for m in corpus.mentions:
        if m.gold_qid in kb:
            kept.mentions.append(m)
        else:
            dropped += 1
    return kept, dropped


def sample_balanced_eval(heldout: MentionCorpus, per_lang: int, seed: int) -> MentionCorpus:
    """Uniformly sample up to per_lang mentions per language, without replacement."""
    if per_lang <= 0:
        raise ValueError("per_lang must be positive")
    by_lang: dict[str, list[int]] = {}
    for i, m in enumerate(heldout.mentions):
        by_lang.setdefault(m.lang, []).append(i)
    rng = derive_rng(seed, "sample_balanced_eval")
    selected: list[int] = []
    for lang in sorted(by_lang):
        pool = by_lang[lang]
        if len(pool) <= per_lang:
            selected.extend(pool)
        else:
            picks = rng.choice(len(pool), size=per_lang, replace=False)
            selected.extend(pool[i] for i in picks)
    selected.sort()
    sample = MentionCorpus()
    for i in selected:
        m = heldout.mentions[i]
        sample.mentions.append(m)
        sample.provenance[m.doc_id] = heldout.provenance.get(m.doc_id)
    return sample


# --- file formats -----------------------------------------------------------

def save_mentions(corpus: MentionCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in corpus.mentions:
            fh.write(json.dumps({
                "doc_id": m.doc_id, "lang": m.lang, "title": m.title,
                "left": m.left, "span": m.span, "right": m.right,
                "gold_qid": m.gold_qid,
            }, ensure_ascii=False, sort_keys=True) + "\n")


def load_mentions(path: str | Path, provenance: Mapping[str, str | None] | None = None) -> MentionCorpus:
    corpus = MentionCorpus()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            corpus.mentions.append(MentionRecord(
                doc_id=obj["doc_id"], lang=obj["lang"], title=obj["title"],
                left=obj["left"], span=obj["span"], right=obj["right"],
                gold_qid=obj["gold_qid"],
            ))
    if provenance is not None:
        for m in corpus.mentions:
            corpus.provenance[m.doc_id] = provenance.get(m.doc_id)
    return corpus


def save_documents(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({
                "doc_id": d.doc_id, "lang": d.lang, "title": d.title,
                "page_entity": d.page_entity, "body": d.body,
            }, ensure_ascii=False, sort_keys=True) + "\n")


def load_documents(path: str | Path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            docs.append(Document(
                doc_id=obj["doc_id"], lang=obj["lang"], title=obj["title"],
                body=obj["body"], page_entity=obj.get("page_entity"),
            ))
    return docs


def load_tsv_map(path: str | Path) -> dict[str, str]:
    """Read a two-column TSV into a dict (redirect maps)."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            old, new = line.split("\t")
            out[old] = new
    return out


def load_title_map(path: str | Path) -> dict[tuple[str, str], str]:
    """Read a three-column TSV (lang, title, qid) into a lookup map."""
    out: dict[tuple[str, str], str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            lang, title, qid = line.split("\t")
            out[(lang, title)] = qid
    return out

"""Knowledge-base ingestion, filtering, and description selection.

The KB is a flat inventory of entities keyed by an opaque QID. Each entity
carries per-language names, candidate text descriptions (from an encyclopedia
page lead or from the structured KB itself), the set of languages in which it
has a page, and pre-resolved type memberships used for admin filtering.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

VALID_SOURCES = ("wikipedia", "wikidata")

# Wikimedia-internal maintenance types (categories, templates, redirects,
# project pages, portals, modules, ...) excluded from the entity inventory
# by default.
DEFAULT_ADMIN_TYPES = frozenset({
    "Q4167836",   # category
    "Q24046192",  # category stub
    "Q20010800",  # user category
    "Q11266439",  # template
    "Q11753321",  # navigational template
    "Q19842659",  # user template
    "Q21528878",  # redirect page
    "Q17362920",  # duplicated page
    "Q14204246",  # project page
    "Q21025364",  # project page
    "Q17442446",  # internal item
    "Q26267864",  # KML file
    "Q4663903",   # portal
    "Q15184295",  # module
})


class KBLoadError(ValueError):
    """Raised for malformed KB input files."""


@dataclass(frozen=True)
class DescriptionCandidate:
    """One candidate description text for an entity."""

    language: str
    source: str  # "wikipedia" | "wikidata"
    text: str


@dataclass
class Entity:
    qid: str
    names: dict[str, str] = field(default_factory=dict)
    descriptions: list[DescriptionCandidate] = field(default_factory=list)
    wiki_langs: frozenset[str] = frozenset()
    type_ids: frozenset[str] = frozenset()

    def description_languages(self) -> set[str]:
        return {d.language for d in self.descriptions}


@dataclass
class KnowledgeBase:
    entities: dict[str, Entity] = field(default_factory=dict)

    @property
    def kb_langs(self) -> set[str]:
        langs: set[str] = set()
        for e in self.entities.values():
            langs.update(e.names)
            langs.update(d.language for d in e.descriptions)
        return langs

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, qid: str) -> bool:
        return qid in self.entities

    def sorted_qids(self) -> list[str]:
        return sorted(self.entities)


@dataclass
class LangUsageStats:
    """Observed mention counts: per entity and language, and globally per language."""

    per_entity: dict[str, dict[str, int]] = field(default_factory=dict)
    global_counts: dict[str, int] = field(default_factory=dict)

    def n_entity(self, qid: str, lang: str) -> int:
        return self.per_entity.get(qid, {}).get(lang, 0)

    def n_global(self, lang: str) -> int:
        return self.global_counts.get(lang, 0)


def _require(cond: bool, lineno: int, msg: str) -> None:
    if not cond:
        raise KBLoadError(f"line {lineno}: {msg}")


def _parse_entity(obj: dict, lineno: int) -> Entity:
    _require(isinstance(obj, dict), lineno, "record is not a JSON object")
    qid = obj.get("qid")
    _require(isinstance(qid, str) and qid != "", lineno, "missing or empty qid")
    names = obj.get("names", {})
    _require(isinstance(names, dict), lineno, "names must be an object")
    for lang, name in names.items():
        _require(bool(lang) and not lang.isspace(), lineno, "empty language code in names")
        _require(isinstance(name, str), lineno, f"name for {lang!r} must be a string")
    descriptions = []
    for d in obj.get("descriptions", []):
        _require(isinstance(d, dict), lineno, "description entry must be an object")
        lang, source, text = d.get("lang"), d.get("source"), d.get("text")
        _require(isinstance(lang, str) and bool(lang) and not any(c.isspace() for c in lang),
                 lineno, "invalid description language code")
        _require(source in VALID_SOURCES, lineno, f"invalid description source {source!r}")
        _require(isinstance(text, str) and text.strip() != "", lineno,
                 "description text empty after trimming")
        descriptions.append(DescriptionCandidate(language=lang, source=source, text=text))
    wiki_langs = obj.get("wiki_langs", [])
    _require(isinstance(wiki_langs, list), lineno, "wiki_langs must be an array")
    type_ids = obj.get("type_ids", [])
    _require(isinstance(type_ids, list), lineno, "type_ids must be an array")
    return Entity(
        qid=qid,
        names=dict(names),
        descriptions=descriptions,
        wiki_langs=frozenset(wiki_langs),
        type_ids=frozenset(type_ids),
    )


def load_kb(path: str | Path) -> KnowledgeBase:
    """Load a KB from a JSONL file, one entity record per line.

    Raises KBLoadError with the offending line number on malformed records
    and on duplicate QIDs.
    """
    kb = KnowledgeBase()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KBLoadError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            entity = _parse_entity(obj, lineno)
            if entity.qid in kb.entities:
                raise KBLoadError(f"line {lineno}: duplicate qid {entity.qid}")
            kb.entities[entity.qid] = entity
    return kb


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in kb.sorted_qids():
            e = kb.entities[qid]
            obj = {
                "qid": e.qid,
                "names": dict(sorted(e.names.items())),
                "descriptions": [
                    {"lang": d.language, "source": d.source, "text": d.text}
                    for d in e.descriptions
                ],
                "wiki_langs": sorted(e.wiki_langs),
                "type_ids": sorted(e.type_ids),
            }
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def filter_admin_entities(
    kb: KnowledgeBase, blocklist: frozenset[str] | set[str] = DEFAULT_ADMIN_TYPES
) -> KnowledgeBase:
    """Drop entities whose type memberships intersect the blocklist."""
    blocked = frozenset(blocklist)
    kept = {q: e for q, e in kb.entities.items() if not (e.type_ids & blocked)}
    return KnowledgeBase(entities=kept)


def require_wikipedia_page(kb: KnowledgeBase) -> KnowledgeBase:
    """Keep only entities with a page in at least one language."""
    kept = {q: e for q, e in kb.entities.items() if e.wiki_langs}
    return KnowledgeBase(entities=kept)


def select_description(
    entity: Entity,
    stats: LangUsageStats,
    allowed_langs: set[str] | None = None,
) -> DescriptionCandidate:
    """Pick the entity's primary description.

    Candidates are considered source-first (all wikipedia candidates before
    any wikidata candidate); within a source they are ordered by descending
    per-entity usage of the candidate language, then descending global usage,
    then ascending language code. `allowed_langs`, when given, restricts
    candidates to the model's vocabulary languages.
    """
    candidates = entity.descriptions
    if allowed_langs is not None:
        candidates = [c for c in candidates if c.language in allowed_langs]
    if not candidates:
        raise ValueError(f"entity has no description: {entity.qid}")

    def key(c: DescriptionCandidate):
        return (
            VALID_SOURCES.index(c.source),
            -stats.n_entity(entity.qid, c.language),
            -stats.n_global(c.language),
            c.language,
            c.text,
        )

    return min(candidates, key=key)


def compute_lang_usage(train) -> LangUsageStats:
    """Count training mentions per (entity, language) and per language."""
    per_entity: dict[str, Counter] = defaultdict(Counter)
    global_counts: Counter = Counter()
    for m in train.mentions:
        per_entity[m.gold_qid][m.lang] += 1
        global_counts[m.lang] += 1
    return LangUsageStats(
        per_entity={q: dict(c) for q, c in per_entity.items()},
        global_counts=dict(global_counts),
    )

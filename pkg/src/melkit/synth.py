"""Seeded synthetic KB and corpus generator.

Builds a small closed world of entities, pseudo-languages, and documents so
the full pipeline can run without external data. Each entity carries a
distinctive set of topic words; its per-language descriptions and the
contexts around its mentions share those topics, with deterministic
word-level transformations standing in for different languages (related but
not identical texts). Mention frequencies follow a Zipf law, a configurable
fraction of surfaces is shared between entities, and a fraction of entities
is withheld from training mentions entirely so the zero-shot bin is
populated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .corpus import Document, save_documents
from .seeding import derive_rng

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
LANG_CODES = ("aa", "bb", "cc", "dd", "ee", "ff", "gg", "hh")
LANG_SUFFIXES = ("an", "or", "il", "um", "et", "ys", "ak", "op")

N_TOPICS = 60
SIGNATURE_SIZE = 3
N_FILLERS = 24


@dataclass(frozen=True)
class SyntheticSpec:
    n_entities: int = 500
    n_languages: int = 2
    zipf_exponent: float = 1.1
    mentions_per_language: int = 10000
    ambiguity_rate: float = 0.3
    zero_shot_frac: float = 0.1
    seed: int = 0
    heldout_frac: float = 0.12
    admin_frac: float = 0.02
    redirect_rate: float = 0.05
    variant_surface_rate: float = 0.1
    zero_shot_eval_mentions: int = 4

    def __post_init__(self) -> None:
        if self.n_entities <= 0 or self.n_languages <= 0 or self.mentions_per_language <= 0:
            raise ValueError("counts must be positive")
        if self.n_languages > len(LANG_CODES):
            raise ValueError(f"at most {len(LANG_CODES)} pseudo-languages supported")
        for name in ("ambiguity_rate", "zero_shot_frac", "heldout_frac",
                     "admin_frac", "redirect_rate", "variant_surface_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be a fraction in [0, 1]")


@dataclass
class SynthPaths:
    kb: Path
    documents: Path
    redirects: Path
    titles: Path
    heldout_pages: Path
    section_patterns: Path
    spec: Path


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]
        for _ in range(syllables)
    )


def _unique_words(rng: np.random.Generator, count: int, syllables: int) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < count:
        w = _word(rng, syllables)
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def translate(word: str, lang_index: int) -> str:
    """Deterministic per-language word form."""
    return word + LANG_SUFFIXES[lang_index]


def zipf_weights(n_items: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n_items + 1, dtype=np.float64)
    w = ranks ** (-exponent)
    return w / w.sum()


def zipf_draws(n_items: int, exponent: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Sample item ranks (0-based) under the Zipf law used by the generator."""
    return rng.choice(n_items, size=size, p=zipf_weights(n_items, exponent))


@dataclass
class _World:
    spec: SyntheticSpec
    langs: list[str]
    topics: list[str]
    fillers: list[str]
    qids: list[str]              # regular entities only
    stems: dict[str, str]        # qid -> surface stem (shared for ambiguity)
    title_tag: dict[str, str]    # qid -> page-title disambiguator ("" or "_2", ...)
    signatures: dict[str, list[str]]
    wiki_langs: dict[str, list[str]]
    zero_shot: set[str]
    heldout_pages: set[str]
    popularity: list[str]        # non-zero-shot qids in Zipf rank order

    def title(self, qid: str, lang: str) -> str:
        """Page titles are unique per language even when names are shared."""
        return translate(self.stems[qid], self.langs.index(lang)) + self.title_tag[qid]


def _build_world(spec: SyntheticSpec) -> _World:
    langs = list(LANG_CODES[: spec.n_languages])
    rng_words = derive_rng(spec.seed, "synth:words")
    topics = _unique_words(rng_words, N_TOPICS, 3)
    fillers = _unique_words(rng_words, N_FILLERS, 2)

    n = spec.n_entities
    qids = [f"Q{100000 + i}" for i in range(n)]

    # Shared surface stems: a fraction of surfaces is used by two entities.
    rng_surface = derive_rng(spec.seed, "synth:surfaces")
    shared = int(round(spec.ambiguity_rate * n / (1.0 + spec.ambiguity_rate)))
    n_surfaces = n - shared
    stems_pool = _unique_words(rng_surface, n_surfaces, 3)
    assignment = list(range(shared)) * 2 + list(range(shared, n_surfaces))
    order = rng_surface.permutation(n)
    stems = {qids[i]: stems_pool[assignment[order[i]]] for i in range(n)}
    seen_stem: dict[str, int] = {}
    title_tag: dict[str, str] = {}
    for q in qids:
        count = seen_stem.get(stems[q], 0)
        title_tag[q] = "" if count == 0 else f"_{count + 1}"
        seen_stem[stems[q]] = count + 1

    rng_sig = derive_rng(spec.seed, "synth:signatures")
    signatures: dict[str, list[str]] = {}
    used: set[tuple[str, ...]] = set()
    for q in qids:
        for _ in range(200):
            sig = tuple(sorted(rng_sig.choice(N_TOPICS, size=SIGNATURE_SIZE, replace=False)))
            if sig not in used:
                used.add(sig)
                break
        signatures[q] = [topics[i] for i in sig]

    rng_langs = derive_rng(spec.seed, "synth:wiki_langs")
    wiki_langs: dict[str, list[str]] = {}
    for q in qids:
        if len(langs) == 1 or rng_langs.random() < 0.7:
            wiki_langs[q] = list(langs)
        else:
            wiki_langs[q] = [langs[rng_langs.integers(len(langs))]]

    rng_split = derive_rng(spec.seed, "synth:split")
    n_zero = int(round(spec.zero_shot_frac * n))
    zero_shot = set(np.array(qids)[rng_split.choice(n, size=n_zero, replace=False)])
    regular = [q for q in qids if q not in zero_shot]
    n_held = int(round(spec.heldout_frac * n))
    held_regular = set(np.array(regular)[rng_split.choice(len(regular), size=min(n_held, len(regular)), replace=False)])
    heldout_pages = zero_shot | held_regular

    popularity = [regular[i] for i in rng_split.permutation(len(regular))]

    return _World(
        spec=spec, langs=langs, topics=topics, fillers=fillers, qids=qids,
        stems=stems, title_tag=title_tag, signatures=signatures,
        wiki_langs=wiki_langs, zero_shot=zero_shot, heldout_pages=heldout_pages,
        popularity=popularity,
    )


def _description_text(world: _World, qid: str, lang: str, rng: np.random.Generator) -> str:
    li = world.langs.index(lang)
    sig = [translate(w, li) for w in world.signatures[qid]]
    sig = [sig[i] for i in rng.permutation(len(sig))]
    extras = [translate(world.fillers[rng.integers(N_FILLERS)], li) for _ in range(2)]
    name = translate(world.stems[qid], li)
    return " ".join([name] + sig + extras)


def _intro_text(world: _World, qid: str, lang: str, rng: np.random.Generator) -> str:
    """Page lead sentence, filler-padded so neighbors' context windows stay clean."""
    li = world.langs.index(lang)
    pad = [translate(world.fillers[rng.integers(N_FILLERS)], li) for _ in range(3)]
    return _description_text(world, qid, lang, rng) + " " + " ".join(pad)


def _kb_records(world: _World, rng: np.random.Generator) -> list[dict]:
    from .kb import DEFAULT_ADMIN_TYPES

    spec = world.spec
    records = []
    for q in world.qids:
        descriptions = []
        for lang in world.langs:
            if lang in world.wiki_langs[q]:
                descriptions.append({
                    "lang": lang, "source": "wikipedia",
                    "text": _description_text(world, q, lang, rng),
                })
        if rng.random() < 0.3:
            lang = world.langs[rng.integers(len(world.langs))]
            li = world.langs.index(lang)
            short = " ".join([
                translate(world.signatures[q][0], li),
                translate(world.fillers[rng.integers(N_FILLERS)], li),
            ])
            descriptions.append({"lang": lang, "source": "wikidata", "text": short})
        records.append({
            "qid": q,
            "names": {lang: translate(world.stems[q], world.langs.index(lang))
                      for lang in world.wiki_langs[q]},
            "descriptions": descriptions,
            "wiki_langs": world.wiki_langs[q],
            "type_ids": [],
        })

    admin_types = sorted(DEFAULT_ADMIN_TYPES)
    n_admin = int(round(spec.admin_frac * spec.n_entities))
    for i in range(n_admin):
        lang = world.langs[i % len(world.langs)]
        records.append({
            "qid": f"Q{900000 + i}",
            "names": {lang: f"admin{i}"},
            "descriptions": [{"lang": lang, "source": "wikidata", "text": f"admin item {i}"}],
            "wiki_langs": [lang],
            "type_ids": [admin_types[i % len(admin_types)]],
        })
    # entities without any page: dropped by the page filter
    for i in range(2):
        lang = world.langs[i % len(world.langs)]
        records.append({
            "qid": f"Q{910000 + i}",
            "names": {lang: f"pageless{i}"},
            "descriptions": [{"lang": lang, "source": "wikidata", "text": f"unpaged item {i}"}],
            "wiki_langs": [],
            "type_ids": [],
        })
    records.sort(key=lambda r: r["qid"])
    return records


@dataclass
class _Placement:
    target: str
    host_doc: str   # doc_id
    lang: str
    variant: bool
    redirect: bool


def _plan_mentions(world: _World, rng: np.random.Generator) -> list[_Placement]:
    spec = world.spec
    docs_by_lang_train: dict[str, list[str]] = {l: [] for l in world.langs}
    docs_by_lang_held: dict[str, list[str]] = {l: [] for l in world.langs}
    for q in world.qids:
        for lang in world.wiki_langs[q]:
            doc_id = f"{lang}:{q}"
            side = docs_by_lang_held if q in world.heldout_pages else docs_by_lang_train
            side[lang].append(doc_id)

    def host(lang: str, held: bool, exclude_qid: str) -> str:
        pool = docs_by_lang_held[lang] if held else docs_by_lang_train[lang]
        for _ in range(20):
            doc_id = pool[rng.integers(len(pool))]
            if not doc_id.endswith(exclude_qid):
                return doc_id
        return pool[rng.integers(len(pool))]

    placements: list[_Placement] = []

    def place(target: str, held: bool) -> None:
        langs = world.wiki_langs[target]
        lang = langs[rng.integers(len(langs))]
        placements.append(_Placement(
            target=target,
            host_doc=host(lang, held, target),
            lang=lang,
            variant=rng.random() < spec.variant_surface_rate,
            redirect=rng.random() < spec.redirect_rate,
        ))

    # every trainable entity appears at least once in training
    for q in world.popularity:
        place(q, held=False)
    # zero-shot entities appear only on held-out pages
    for q in sorted(world.zero_shot):
        for _ in range(spec.zero_shot_eval_mentions):
            place(q, held=True)

    total = spec.mentions_per_language * spec.n_languages
    remaining = max(0, total - len(placements))
    ranks = zipf_draws(len(world.popularity), spec.zipf_exponent, remaining, rng)
    for r in ranks:
        target = world.popularity[int(r)]
        held = rng.random() < spec.heldout_frac
        langs = world.wiki_langs[target]
        lang = langs[rng.integers(len(langs))]
        pool = docs_by_lang_held[lang] if held else docs_by_lang_train[lang]
        if not pool:
            continue
        placements.append(_Placement(
            target=target,
            host_doc=host(lang, held, target),
            lang=lang,
            variant=rng.random() < spec.variant_surface_rate,
            redirect=rng.random() < spec.redirect_rate,
        ))
    return placements


def _snippet(world: _World, p: _Placement, rng: np.random.Generator,
             redirects: dict[str, str]) -> str:
    li = world.langs.index(p.lang)
    sig = [translate(w, li) for w in world.signatures[p.target]]
    sig = [sig[i] for i in rng.permutation(len(sig))]

    def filler() -> str:
        return translate(world.fillers[rng.integers(N_FILLERS)], li)

    # pad the snippet edges with function-word filler so a context window
    # centered on the anchor mostly sees this snippet's own topic words
    before = [filler(), filler(), filler(), sig[0], sig[1], filler()]
    after = [filler(), sig[2], filler(), filler(), filler()]
    title = world.title(p.target, p.lang)
    name = translate(world.stems[p.target], li)
    surface = world.stems[p.target] if p.variant else name
    target = title
    if p.redirect:
        alias = "Old_" + title
        redirects[alias] = title
        target = alias
    anchor = f"[[{target}]]" if surface == target else f"[[{target}|{surface}]]"
    return " ".join(before) + " " + anchor + " " + " ".join(after) + " ."


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> SynthPaths:
    """Write the synthetic KB, documents, maps, and holdout list; deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = _build_world(spec)

    rng_kb = derive_rng(spec.seed, "synth:kb")
    records = _kb_records(world, rng_kb)
    kb_path = out / "kb.jsonl"
    with open(kb_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    rng_mentions = derive_rng(spec.seed, "synth:mentions")
    placements = _plan_mentions(world, rng_mentions)

    redirects: dict[str, str] = {}
    rng_text = derive_rng(spec.seed, "synth:text")
    snippets: dict[str, list[str]] = {}
    for p in placements:
        snippets.setdefault(p.host_doc, []).append(_snippet(world, p, rng_text, redirects))

    # trailing sections that extraction must strip, one junk anchor included
    patterns = {
        lang: [translate("sources", world.langs.index(lang)),
               translate("links", world.langs.index(lang))]
        for lang in world.langs
    }

    docs: list[Document] = []
    titles: list[tuple[str, str, str]] = []
    for q in world.qids:
        for lang in world.wiki_langs[q]:
            doc_id = f"{lang}:{q}"
            title = world.title(q, lang)
            titles.append((lang, title, q))
            intro = _intro_text(world, q, lang, rng_text)
            body_parts = [intro + " ."] + snippets.get(doc_id, [])
            body = (
                "\n".join(body_parts)
                + f"\n== {patterns[lang][0]} ==\n"
                + f"junk [[{title}]] junk\n"
            )
            docs.append(Document(doc_id=doc_id, lang=lang, title=title,
                                 body=body, page_entity=q))
    docs.sort(key=lambda d: d.doc_id)

    documents_path = out / "documents.jsonl"
    save_documents(docs, documents_path)

    redirects_path = out / "redirects.tsv"
    with open(redirects_path, "w", encoding="utf-8") as fh:
        for old in sorted(redirects):
            fh.write(f"{old}\t{redirects[old]}\n")

    titles_path = out / "titles.tsv"
    with open(titles_path, "w", encoding="utf-8") as fh:
        for lang, title, qid in sorted(titles):
            fh.write(f"{lang}\t{title}\t{qid}\n")

    heldout_path = out / "heldout_pages.txt"
    heldout_path.write_text(
        "".join(q + "\n" for q in sorted(world.heldout_pages)), encoding="utf-8"
    )

    patterns_path = out / "section_patterns.json"
    patterns_path.write_text(
        json.dumps(patterns, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    spec_path = out / "synth_spec.json"
    spec_path.write_text(json.dumps(asdict(spec), sort_keys=True, indent=2) + "\n",
                         encoding="utf-8")

    return SynthPaths(
        kb=kb_path, documents=documents_path, redirects=redirects_path,
        titles=titles_path, heldout_pages=heldout_path,
        section_patterns=patterns_path, spec=spec_path,
    )

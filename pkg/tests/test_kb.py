import json

import pytest
from hypothesis import given, strategies as st

from melkit.corpus import MentionCorpus, MentionRecord
from melkit.kb import (
    DEFAULT_ADMIN_TYPES,
    DescriptionCandidate,
    Entity,
    KBLoadError,
    KnowledgeBase,
    LangUsageStats,
    compute_lang_usage,
    filter_admin_entities,
    load_kb,
    require_wikipedia_page,
    save_kb,
    select_description,
)


def make_entity(qid, langs=("aa",), wiki=("aa",), types=(), sources=None):
    sources = sources or ["wikipedia"] * len(langs)
    return Entity(
        qid=qid,
        names={l: f"name-{l}" for l in langs},
        descriptions=[
            DescriptionCandidate(language=l, source=s, text=f"text {l} {qid}")
            for l, s in zip(langs, sources)
        ],
        wiki_langs=frozenset(wiki),
        type_ids=frozenset(types),
    )


def kb_of(*entities):
    return KnowledgeBase(entities={e.qid: e for e in entities})


def write_kb_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


VALID_RECORD = {
    "qid": "Q1",
    "names": {"aa": "Foo"},
    "descriptions": [{"lang": "aa", "source": "wikipedia", "text": "foo bar"}],
    "wiki_langs": ["aa"],
    "type_ids": [],
}


class TestLoadKB:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "kb.jsonl"
        path.write_text("")
        assert len(load_kb(path)) == 0

    def test_two_entities_langs_union(self, tmp_path):
        rec2 = dict(VALID_RECORD, qid="Q2",
                    descriptions=[{"lang": "bb", "source": "wikidata", "text": "x"}],
                    names={"bb": "Bar"})
        path = tmp_path / "kb.jsonl"
        write_kb_jsonl(path, [VALID_RECORD, rec2])
        kb = load_kb(path)
        assert len(kb) == 2
        assert kb.kb_langs == {"aa", "bb"}

    def test_duplicate_qid(self, tmp_path):
        path = tmp_path / "kb.jsonl"
        write_kb_jsonl(path, [VALID_RECORD, VALID_RECORD])
        with pytest.raises(KBLoadError, match="Q1"):
            load_kb(path)

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "kb.jsonl"
        path.write_text(json.dumps(VALID_RECORD) + "\n{not json\n")
        with pytest.raises(KBLoadError, match="line 2"):
            load_kb(path)

    def test_empty_description_rejected(self, tmp_path):
        rec = dict(VALID_RECORD,
                   descriptions=[{"lang": "aa", "source": "wikipedia", "text": "   "}])
        path = tmp_path / "kb.jsonl"
        write_kb_jsonl(path, [rec])
        with pytest.raises(KBLoadError, match="line 1"):
            load_kb(path)

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "kb.jsonl"
        write_kb_jsonl(path, [VALID_RECORD])
        kb = load_kb(path)
        out = tmp_path / "kb2.jsonl"
        save_kb(kb, out)
        assert len(load_kb(out)) == 1


class TestFilters:
    def test_category_removed(self):
        kb = kb_of(make_entity("Q1", types=("Q4167836",)), make_entity("Q2"))
        out = filter_admin_entities(kb)
        assert set(out.entities) == {"Q2"}

    def test_empty_types_retained(self):
        kb = kb_of(make_entity("Q1"))
        assert set(filter_admin_entities(kb).entities) == {"Q1"}

    def test_empty_blocklist_identity(self):
        kb = kb_of(make_entity("Q1", types=("Q4167836",)))
        assert set(filter_admin_entities(kb, set()).entities) == {"Q1"}

    def test_blocklist_has_14_ids(self):
        assert len(DEFAULT_ADMIN_TYPES) == 14

    def test_page_filter(self):
        kept = make_entity("Q1", wiki=("ca", "es", "fr"))
        dropped = make_entity("Q2", wiki=())
        out = require_wikipedia_page(kb_of(kept, dropped))
        assert set(out.entities) == {"Q1"}

    def test_page_filter_identity(self):
        kb = kb_of(make_entity("Q1"), make_entity("Q2"))
        assert set(require_wikipedia_page(kb).entities) == {"Q1", "Q2"}

    @given(st.lists(st.sampled_from(sorted(DEFAULT_ADMIN_TYPES) + ["Q5", "Q42"]),
                    max_size=3),
           st.booleans())
    def test_filters_idempotent(self, types, has_page):
        kb = kb_of(make_entity("Q1", wiki=("aa",) if has_page else (), types=tuple(types)),
                   make_entity("Q2"))
        once = filter_admin_entities(kb)
        twice = filter_admin_entities(once)
        assert set(once.entities) == set(twice.entities)
        once_p = require_wikipedia_page(kb)
        twice_p = require_wikipedia_page(once_p)
        assert set(once_p.entities) == set(twice_p.entities)
        for e in filter_admin_entities(require_wikipedia_page(kb)).entities.values():
            assert e.wiki_langs
            assert not (e.type_ids & DEFAULT_ADMIN_TYPES)


class TestSelectDescription:
    def test_catalan_scenario(self):
        # 9 of 16 training mentions in Catalan picks the Catalan page text
        entity = make_entity("Q3511500", langs=("ca", "es", "fr"),
                             wiki=("ca", "es", "fr"))
        stats = LangUsageStats(
            per_entity={"Q3511500": {"ca": 9, "es": 4, "fr": 3}},
            global_counts={"ca": 100, "es": 5000, "fr": 4000},
        )
        assert select_description(entity, stats).language == "ca"

    def test_single_candidate(self):
        entity = make_entity("Q1", langs=("zz",))
        assert select_description(entity, LangUsageStats()).language == "zz"

    def test_global_tiebreak(self):
        entity = make_entity("Q1", langs=("de", "fr"), wiki=("de", "fr"))
        stats = LangUsageStats(
            per_entity={"Q1": {"de": 2, "fr": 2}},
            global_counts={"de": 50, "fr": 100},
        )
        assert select_description(entity, stats).language == "fr"

    def test_language_code_tiebreak(self):
        entity = make_entity("Q1", langs=("bb", "aa"), wiki=("aa", "bb"))
        assert select_description(entity, LangUsageStats()).language == "aa"

    def test_wikipedia_before_wikidata(self):
        entity = Entity(
            qid="Q1",
            descriptions=[
                DescriptionCandidate("aa", "wikidata", "short"),
                DescriptionCandidate("zz", "wikipedia", "long"),
            ],
            wiki_langs=frozenset({"zz"}),
        )
        stats = LangUsageStats(per_entity={"Q1": {"aa": 99}}, global_counts={"aa": 99})
        assert select_description(entity, stats).source == "wikipedia"

    def test_no_description_error(self):
        entity = Entity(qid="Q1")
        with pytest.raises(ValueError, match="no description"):
            select_description(entity, LangUsageStats())

    def test_allowed_langs_restriction(self):
        entity = make_entity("Q1", langs=("aa", "bb"), wiki=("aa", "bb"))
        picked = select_description(entity, LangUsageStats(), allowed_langs={"bb"})
        assert picked.language == "bb"

    @given(st.permutations(range(4)))
    def test_order_invariant(self, perm):
        descs = [
            DescriptionCandidate("aa", "wikipedia", "t1"),
            DescriptionCandidate("bb", "wikipedia", "t2"),
            DescriptionCandidate("cc", "wikidata", "t3"),
            DescriptionCandidate("aa", "wikidata", "t4"),
        ]
        stats = LangUsageStats(per_entity={"Q1": {"bb": 3}}, global_counts={"bb": 3})
        base = Entity(qid="Q1", descriptions=descs, wiki_langs=frozenset({"aa", "bb"}))
        shuffled = Entity(qid="Q1", descriptions=[descs[i] for i in perm],
                          wiki_langs=frozenset({"aa", "bb"}))
        assert select_description(base, stats) == select_description(shuffled, stats)


def corpus_from(pairs):
    corpus = MentionCorpus()
    for i, (qid, lang) in enumerate(pairs):
        corpus.mentions.append(MentionRecord(
            doc_id=f"d{i}", lang=lang, title="t", left="", span="x", right="",
            gold_qid=qid,
        ))
    return corpus


class TestComputeLangUsage:
    def test_empty(self):
        stats = compute_lang_usage(MentionCorpus())
        assert stats.per_entity == {} and stats.global_counts == {}

    def test_counting(self):
        stats = compute_lang_usage(corpus_from(
            [("Q1", "xx")] * 3 + [("Q1", "yy")]
        ))
        assert stats.per_entity["Q1"] == {"xx": 3, "yy": 1}
        assert stats.n_entity("Q1", "xx") == 3
        assert stats.n_entity("Q9", "xx") == 0

    @given(st.lists(st.tuples(st.sampled_from(["Q1", "Q2", "Q3"]),
                              st.sampled_from(["xx", "yy", "zz"])), max_size=50))
    def test_global_equals_sum(self, pairs):
        stats = compute_lang_usage(corpus_from(pairs))
        langs = {l for _, l in pairs}
        for lang in langs:
            total = sum(stats.n_entity(q, lang) for q in stats.per_entity)
            assert stats.n_global(lang) == total

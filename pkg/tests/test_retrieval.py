import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from melkit.corpus import MentionCorpus, MentionRecord
from melkit.kb import (
    DescriptionCandidate,
    Entity,
    KnowledgeBase,
    LangUsageStats,
)
from melkit.model import (
    EntityEmbeddingTable,
    TransformerConfig,
    encode,
    init_encoder_params,
)
from melkit.retrieval import (
    AliasTable,
    EntityIndex,
    alias_lookup,
    build_alias_table,
    build_index,
    load_alias_table,
    load_index,
    save_alias_table,
    save_index,
    search,
)
from melkit.tokenizer import build_entity_input, train_vocab


def oracle_topk(qids, matrix, query, k):
    """Independent reference: plain python sort of every cosine score."""
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scored = []
    for i, qid in enumerate(qids):
        scored.append((qid, float(np.dot(matrix[i].astype(np.float64), q))))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def assert_same_ranking(result, expected):
    """Ranking must match the oracle exactly; scores up to summation-order ulps."""
    assert [q for q, _ in result] == [q for q, _ in expected]
    got = np.array([s for _, s in result])
    want = np.array([s for _, s in expected])
    assert np.allclose(got, want, atol=1e-9)


def random_index(n, d, seed):
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((n, d))
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    qids = [f"Q{i:05d}" for i in range(n)]
    return EntityIndex(qids=qids, matrix=matrix, model_tag="rand")


def mention_of(span, qid, lang="xx"):
    return MentionRecord(doc_id="d", lang=lang, title="t", left="", span=span,
                        right="", gold_qid=qid)


class TestSearch:
    def test_self_similarity_rank1(self):
        index = random_index(50, 8, seed=0)
        result = search(index, index.matrix[7], k=3)
        assert result[0][0] == index.qids[7]
        assert result[0][1] == pytest.approx(1.0)

    def test_k_exceeds_size(self):
        index = random_index(5, 4, seed=1)
        result = search(index, np.ones(4), k=100)
        assert len(result) == 5

    def test_matches_oracle(self):
        index = random_index(1000, 16, seed=2)
        rng = np.random.default_rng(3)
        for _ in range(5):
            q = rng.standard_normal(16)
            for k in (1, 10, 100):
                assert_same_ranking(search(index, q, k),
                                    oracle_topk(index.qids, index.matrix, q, k))

    def test_tie_break_by_qid(self):
        matrix = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        index = EntityIndex(qids=["Q3", "Q1", "Q2"], matrix=matrix, model_tag="")
        result = search(index, np.array([1.0, 0.0]), k=2)
        assert [q for q, _ in result] == ["Q1", "Q3"]

    def test_scores_nonincreasing_no_duplicates(self):
        index = random_index(200, 8, seed=4)
        result = search(index, np.full(8, 0.3), k=50)
        scores = [s for _, s in result]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        qids = [q for q, _ in result]
        assert len(qids) == len(set(qids))

    def test_zero_query_raises(self):
        index = random_index(5, 4, seed=5)
        with pytest.raises(ValueError):
            search(index, np.zeros(4), k=1)

    @settings(max_examples=100)
    @given(st.integers(0, 10_000))
    def test_oracle_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        d = int(rng.integers(2, 12))
        matrix = rng.standard_normal((n, d))
        matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
        index = EntityIndex(qids=[f"Q{i:03d}" for i in range(n)], matrix=matrix,
                            model_tag="")
        q = rng.standard_normal(d)
        k = int(rng.integers(1, n + 2))
        assert_same_ranking(search(index, q, k), oracle_topk(index.qids, matrix, q, k))


def tiny_kb():
    entities = {}
    for i, lang in enumerate(["aa", "bb", "aa"]):
        qid = f"Q{i}"
        entities[qid] = Entity(
            qid=qid,
            names={lang: f"name{i}"},
            descriptions=[DescriptionCandidate(lang, "wikipedia", f"word{i} tail{i}")],
            wiki_langs=frozenset({lang}),
        )
    return KnowledgeBase(entities=entities)


@pytest.fixture(scope="module")
def setup():
    kb = tiny_kb()
    vocab = train_vocab(
        (d.text for e in kb.entities.values() for d in e.descriptions), 60)
    cfg = TransformerConfig(vocab_size=len(vocab), layers=1, heads=2, d_model=8,
                            d_ffn=16, max_len=12, d_enc=6, seed=0, dtype="float64")
    params = init_encoder_params(cfg, "entity")
    stats = LangUsageStats()
    return kb, vocab, cfg, params, stats


class TestBuildIndex:
    def test_rows_unit_norm(self, setup):
        kb, vocab, cfg, params, stats = setup
        index = build_index(params, kb, stats, vocab=vocab, cfg=cfg)
        norms = np.linalg.norm(index.matrix, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)
        assert len(index.qids) == 3

    def test_deterministic_rebuild(self, setup):
        kb, vocab, cfg, params, stats = setup
        a = build_index(params, kb, stats, vocab=vocab, cfg=cfg)
        b = build_index(params, kb, stats, vocab=vocab, cfg=cfg)
        assert np.array_equal(a.matrix, b.matrix)

    def test_row_recomputed_in_test(self, setup):
        kb, vocab, cfg, params, stats = setup
        index = build_index(params, kb, stats, vocab=vocab, cfg=cfg)
        qid = "Q1"
        desc = kb.entities[qid].descriptions[0]
        vec = encode(params, cfg, build_entity_input(vocab, desc, cfg.max_len))
        vec = vec / np.linalg.norm(vec)
        assert np.allclose(index.matrix[index.row_of[qid]], vec, atol=1e-12)

    def test_insertion_order_invariant(self, setup):
        kb, vocab, cfg, params, stats = setup
        reversed_kb = KnowledgeBase(
            entities={q: kb.entities[q] for q in reversed(list(kb.entities))})
        a = build_index(params, kb, stats, vocab=vocab, cfg=cfg)
        b = build_index(params, reversed_kb, stats, vocab=vocab, cfg=cfg)
        assert a.qids == b.qids
        assert np.array_equal(a.matrix, b.matrix)

    def test_missing_description_lists_qids(self, setup):
        kb, vocab, cfg, params, stats = setup
        broken = KnowledgeBase(entities=dict(kb.entities))
        broken.entities["Q9"] = Entity(qid="Q9", wiki_langs=frozenset({"aa"}))
        with pytest.raises(ValueError, match="Q9"):
            build_index(params, broken, stats, vocab=vocab, cfg=cfg)

    def test_table_index(self, setup):
        kb, _, _, _, stats = setup
        table = EntityEmbeddingTable.initialize(sorted(kb.entities), 6, seed=2)
        index = build_index(table, kb, stats)
        assert np.allclose(np.linalg.norm(index.matrix, axis=1), 1.0)

    def test_index_file_roundtrip_bit_exact(self, setup, tmp_path):
        kb, vocab, cfg, params, stats = setup
        index = build_index(params, kb, stats, vocab=vocab, cfg=cfg, model_tag="t1")
        path = tmp_path / "index.bin"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.qids == index.qids
        assert loaded.model_tag == "t1"
        assert np.array_equal(loaded.matrix,
                              index.matrix.astype(np.float32))
        # second save of the loaded index is byte-identical
        path2 = tmp_path / "index2.bin"
        save_index(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()


def train_corpus(pairs):
    corpus = MentionCorpus()
    for span, qid in pairs:
        corpus.mentions.append(mention_of(span, qid))
    return corpus


class TestAliasTable:
    def test_priors(self):
        table = build_alias_table(train_corpus(
            [("X", "Q1")] * 3 + [("X", "Q2")]))
        entries = table.table["X"]
        assert entries[0][:2] == ("Q1", 0.75)
        assert entries[1][:2] == ("Q2", 0.25)

    def test_singleton_prior_one(self):
        table = build_alias_table(train_corpus([("Y", "Q5")]))
        assert table.table["Y"][0][1] == 1.0

    def test_unseen_surface_empty(self):
        table = build_alias_table(train_corpus([("X", "Q1")]))
        assert alias_lookup(table, "Z", 5) == []

    def test_lookup_top1(self):
        table = build_alias_table(train_corpus([("X", "Q1")] * 3 + [("X", "Q2")]))
        assert alias_lookup(table, "X", 1) == [("Q1", 0.75)]

    def test_lookup_k_exceeds(self):
        table = build_alias_table(train_corpus([("X", "Q1"), ("X", "Q2")]))
        assert len(alias_lookup(table, "X", 10)) == 2

    def test_nfc_normalization(self):
        composed = "café"
        decomposed = "café"
        table = build_alias_table(train_corpus([(composed, "Q1"), (decomposed, "Q1")]))
        assert len(table.table) == 1
        assert alias_lookup(table, decomposed, 1) == [("Q1", 1.0)]

    def test_tie_order_by_qid(self):
        table = build_alias_table(train_corpus([("X", "Q2"), ("X", "Q1")]))
        assert [q for q, _ in alias_lookup(table, "X", 2)] == ["Q1", "Q2"]

    def test_tsv_roundtrip(self, tmp_path):
        table = build_alias_table(train_corpus(
            [("X", "Q1")] * 3 + [("X", "Q2"), ("Y", "Q3")]))
        path = tmp_path / "alias.tsv"
        save_alias_table(table, path)
        loaded = load_alias_table(path)
        assert loaded.table == table.table

    @given(st.lists(st.tuples(st.sampled_from(["a", "b", "c"]),
                              st.sampled_from(["Q1", "Q2", "Q3", "Q4"])),
                    min_size=1, max_size=40))
    def test_priors_sum_to_one(self, pairs):
        table = build_alias_table(train_corpus(pairs))
        for surface, entries in table.table.items():
            assert sum(p for _, p, _ in entries) == pytest.approx(1.0, abs=1e-9)
            priors = [p for _, p, _ in entries]
            assert all(0 < p <= 1 for p in priors)
            assert all(a >= b for a, b in zip(priors, priors[1:]))

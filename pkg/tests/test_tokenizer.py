import pytest
from hypothesis import given, strategies as st

from melkit.corpus import MentionRecord
from melkit.kb import DescriptionCandidate
from melkit.tokenizer import (
    CLS,
    CONT,
    E_CLOSE,
    E_OPEN,
    PAD,
    SEP,
    SPECIALS,
    SubwordVocab,
    UNK,
    build_entity_input,
    build_mention_input,
    tokenize,
    train_vocab,
)


def mention(left="", span="x", right="", title=""):
    return MentionRecord(doc_id="d", lang="xx", title=title, left=left,
                         span=span, right=right, gold_qid="Q1")


@pytest.fixture(scope="module")
def vocab():
    corpus = ["kamu rota kamu", "rota bani kamu suli", "x y xy bani suli rota"]
    return train_vocab(corpus, 80)


class TestTrainVocab:
    def test_merge_appears(self):
        vocab = train_vocab(["aaab aaab"], 16)
        assert "aa" in vocab.token_to_id

    def test_character_level_when_no_budget(self):
        vocab = train_vocab(["ab ba"], len(SPECIALS) + 4)
        assert set(vocab.tokens) == set(SPECIALS) | {"a", "b", "##a", "##b"}

    def test_too_small_raises(self):
        with pytest.raises(ValueError, match="target_size"):
            train_vocab(["abc"], len(SPECIALS) + 1)

    def test_deterministic(self):
        corpus = ["foo bar baz foo", "bar foo qux"]
        a = train_vocab(corpus, 60)
        b = train_vocab(corpus, 60)
        assert a.tokens == b.tokens

    def test_specials_first(self, vocab):
        assert tuple(vocab.tokens[:6]) == SPECIALS

    def test_continuation_forms_paired(self, vocab):
        for tok in vocab.tokens[len(SPECIALS):]:
            if not tok.startswith(CONT):
                assert CONT + tok in vocab.token_to_id

    def test_save_load_bytes_stable(self, tmp_path, vocab):
        p1 = tmp_path / "v1.txt"
        p2 = tmp_path / "v2.txt"
        vocab.save(p1)
        SubwordVocab.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestTokenize:
    def test_empty(self, vocab):
        assert tokenize(vocab, "") == []

    def test_whole_word_single_id(self, vocab):
        ids = tokenize(vocab, "kamu")
        assert ids == [vocab.token_to_id["kamu"]]

    def test_longest_match_continuation(self):
        vocab = train_vocab(["x y"], len(SPECIALS) + 4)
        ids = tokenize(vocab, "xy")
        assert ids == [vocab.token_to_id["x"], vocab.token_to_id["##y"]]

    def test_unknown_char_to_unk(self, vocab):
        ids = tokenize(vocab, "Ω")
        assert ids == [UNK]

    def test_ids_in_range(self, vocab):
        ids = tokenize(vocab, "kamu rota suli unseenword")
        assert all(0 <= i < len(vocab) for i in ids)

    @given(st.text(alphabet="abkmrstu ", max_size=30))
    def test_prefix_stable_at_word_boundary(self, extra):
        corpus = ["kamu rota bani suli"]
        vocab = train_vocab(corpus, 60)
        a = "kamu rota"
        combined = tokenize(vocab, a + " " + extra)
        prefix = tokenize(vocab, a)
        assert combined[: len(prefix)] == prefix


class TestBuildMentionInput:
    def test_title_budget_quarter(self, vocab):
        m = mention(title=" ".join(["kamu"] * 40), span="rota")
        seq = build_mention_input(vocab, m, max_len=64)
        assert seq.segments.count(0) >= 2
        title_positions = [i for i, s in enumerate(seq.segments[:seq.true_len]) if s == 0]
        # CLS + title tokens + SEP all carry segment 0
        assert len(title_positions) - 2 == 16

    def test_minimal_layout(self, vocab):
        seq = build_mention_input(vocab, mention(span="kamu"), max_len=16)
        ids = seq.ids
        assert ids[0] == CLS and ids[1] == SEP
        assert ids[2] == E_OPEN
        assert ids[3] == vocab.token_to_id["kamu"]
        assert ids[4] == E_CLOSE
        assert seq.true_len == 5
        assert all(i == PAD for i in ids[5:])

    def test_left_truncation_keeps_rightmost(self, vocab):
        m = mention(left=" ".join(["kamu"] * 50) + " rota", span="bani", right="")
        seq = build_mention_input(vocab, m, max_len=16)
        left_ids = [i for i, s in zip(seq.ids, seq.segments) if s == 1]
        assert left_ids[-1] == vocab.token_to_id["rota"]

    def test_right_truncation_keeps_leftmost(self, vocab):
        m = mention(left="", span="bani", right="rota " + " ".join(["kamu"] * 50))
        seq = build_mention_input(vocab, m, max_len=16)
        right_ids = [i for i, s in zip(seq.ids, seq.segments) if s == 3]
        assert right_ids[0] == vocab.token_to_id["rota"]

    def test_odd_leftover_goes_left(self, vocab):
        m = mention(left="kamu kamu kamu kamu", span="bani",
                    right="rota rota rota rota")
        seq = build_mention_input(vocab, m, max_len=12)
        # budget: 12 - 4 - 0(title) = 8; span 1 -> ctx 7 -> left 4, right 3
        left = sum(1 for s in seq.segments[:seq.true_len] if s == 1)
        right = sum(1 for s in seq.segments[:seq.true_len] if s == 3)
        assert (left, right) == (4, 3)

    def test_long_mention_truncated_tail(self, vocab):
        m = mention(span=" ".join(["kamu"] * 100))
        seq = build_mention_input(vocab, m, max_len=16)
        assert seq.true_len == 16
        assert seq.ids[2] == E_OPEN and seq.ids[seq.true_len - 1] == E_CLOSE

    def test_max_len_too_small(self, vocab):
        with pytest.raises(ValueError):
            build_mention_input(vocab, mention(), max_len=7)

    @given(st.text(alphabet="kamurots ", max_size=40),
           st.text(alphabet="kamurots", min_size=1, max_size=10),
           st.text(alphabet="kamurots ", max_size=40),
           st.text(alphabet="kamurots ", max_size=20))
    def test_invariants(self, left, span, right, title):
        corpus = ["kamu rota suli bani"]
        vocab = train_vocab(corpus, 70)
        seq = build_mention_input(vocab, mention(left, span, right, title), max_len=24)
        assert len(seq.ids) == len(seq.segments) == 24
        assert seq.true_len <= 24
        assert all(0 <= i < len(vocab) for i in seq.ids)
        assert all(i == PAD for i in seq.ids[seq.true_len:])
        # markers present with at least one token between them
        body = seq.ids[: seq.true_len]
        open_at = body.index(E_OPEN)
        close_at = body.index(E_CLOSE)
        assert close_at > open_at + 1 or not tokenize(vocab, span)
        # segments monotone nondecreasing over the true length
        segs = seq.segments[: seq.true_len]
        assert all(a <= b for a, b in zip(segs, segs[1:]))


class TestBuildEntityInput:
    def test_long_description_exact_fill(self, vocab):
        d = DescriptionCandidate("aa", "wikipedia", " ".join(["kamu"] * 200))
        seq = build_entity_input(vocab, d, max_len=64)
        assert seq.true_len == 64
        assert len(seq.ids) == 64

    def test_one_token_description(self, vocab):
        d = DescriptionCandidate("aa", "wikipedia", "kamu")
        seq = build_entity_input(vocab, d, max_len=64)
        assert seq.true_len == 2
        assert seq.ids[0] == CLS

    def test_deterministic(self, vocab):
        d = DescriptionCandidate("aa", "wikipedia", "kamu rota suli")
        assert build_entity_input(vocab, d) == build_entity_input(vocab, d)

    def test_segments_all_zero(self, vocab):
        d = DescriptionCandidate("aa", "wikipedia", "kamu rota")
        seq = build_entity_input(vocab, d, max_len=32)
        assert set(seq.segments) == {0}

"""Cross-attention scoring of joint mention-description inputs.

A single tower reads the concatenated mention text and entity description
and classifies their coherence through a logistic head on the projected CLS
encoding. The trained scorer reorders the top candidates of a dual-encoder
retrieval; candidates beyond the reranked block keep their original order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import FrequencyTable, MentionCorpus, MentionRecord
from .kb import DescriptionCandidate, KnowledgeBase, LangUsageStats, select_description
from .model import (
    Params,
    TransformerConfig,
    encoder_backward,
    encoder_forward,
    init_encoder_params,
    sequences_to_arrays,
)
from .retrieval import CandidateList, EntityIndex, search
from .seeding import derive_rng, single_threaded_blas
from .tokenizer import CLS, SEP, SubwordVocab, TokenSequence, build_mention_input, tokenize
from .training import OptState, TrainConfig, adam_schedule_step

logger = logging.getLogger(__name__)

RERANK_TOP_N = 5
RETRIEVED_NEGATIVES = 4
RANDOM_NEGATIVES = 4
NEGATIVE_BALANCE_CAP = 10  # retrieved negatives per entity <= cap * its positives


@dataclass(frozen=True)
class PairExample:
    input: TokenSequence
    label: int


def init_ca_params(cfg: TransformerConfig, warm_start: Params | None = None) -> Params:
    """Cross-attention tower plus the logistic classifier head.

    `warm_start` copies compatible tensors from an already-trained encoder
    (the desk-scale stand-in for initializing from the same pretrained
    checkpoint as the retrieval towers); the classifier head always starts
    fresh, and positional rows beyond the source length stay at their random
    initialization.
    """
    params = init_encoder_params(cfg, "ca")
    if warm_start is not None:
        for name, arr in warm_start.items():
            if name not in params:
                continue
            target = params[name]
            if name == "pos_emb" and target.shape[1:] == arr.shape[1:]:
                rows = min(target.shape[0], arr.shape[0])
                target[:rows] = arr[:rows].astype(target.dtype)
            elif target.shape == arr.shape:
                params[name] = arr.astype(target.dtype).copy()
    rng = derive_rng(cfg.seed, "init:ca_head")
    params["head_w"] = (rng.standard_normal(cfg.d_enc) * 0.02).astype(cfg.np_dtype)
    params["head_b"] = np.zeros(1, dtype=cfg.np_dtype)
    return params


def build_pair_input(
    vocab: SubwordVocab,
    m: MentionRecord,
    d: DescriptionCandidate,
    max_len: int = 128,
) -> TokenSequence:
    """[CLS] mention-layout tokens [SEP] description tokens, two segment IDs.

    The mention side reuses the mention-encoder layout within half the
    budget; the description fills the remainder.
    """
    if max_len < 16:
        raise ValueError("max_len must be at least 16")
    mention_seq = build_mention_input(vocab, m, max_len // 2)
    mention_tokens = mention_seq.ids[1 : mention_seq.true_len]  # drop its leading [CLS]
    ids = [CLS] + mention_tokens + [SEP]
    segments = [0] * len(ids)
    budget = max_len - len(ids)
    desc_tokens = tokenize(vocab, d.text)[:budget]
    ids += desc_tokens
    segments += [1] * len(desc_tokens)
    true_len = len(ids)
    ids += [0] * (max_len - true_len)
    segments += [0] * (max_len - true_len)
    return TokenSequence(ids=ids, segments=segments, true_len=true_len)


def _head_forward(params: Params, enc: np.ndarray):
    logits = enc @ params["head_w"] + params["head_b"][0]
    probs = 1.0 / (1.0 + np.exp(-logits))
    return logits, probs


def score_pair(ca_params: Params, cfg: TransformerConfig, pair: TokenSequence) -> float:
    """Coherence probability in (0, 1) for one mention-description pair."""
    ids, segs, lengths = sequences_to_arrays([pair])
    enc, _ = encoder_forward(ca_params, cfg, ids, segs, lengths)
    _, probs = _head_forward(ca_params, enc)
    return float(probs[0])


def score_pairs_batch(ca_params: Params, cfg: TransformerConfig,
                      pairs: list[TokenSequence], batch_size: int = 256) -> np.ndarray:
    out = np.empty(len(pairs), dtype=np.float64)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        ids, segs, lengths = sequences_to_arrays(chunk)
        enc, _ = encoder_forward(ca_params, cfg, ids, segs, lengths)
        _, probs = _head_forward(ca_params, enc)
        out[start : start + len(chunk)] = probs
    return out


def bce_loss_and_grads(ca_params: Params, cfg: TransformerConfig, batch, labels: np.ndarray):
    """Binary cross-entropy over a pair batch; returns (loss, grads)."""
    ids, segs, lengths = batch
    enc, cache = encoder_forward(ca_params, cfg, ids, segs, lengths)
    logits, probs = _head_forward(ca_params, enc)
    y = labels.astype(logits.dtype)
    # stable BCE from logits
    loss = float(np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))))
    dlogits = (probs - y) / labels.shape[0]
    grads: Params = {
        "head_w": enc.T @ dlogits,
        "head_b": np.array([dlogits.sum()], dtype=cfg.np_dtype),
    }
    denc = dlogits[:, None] * ca_params["head_w"][None, :]
    grads.update(encoder_backward(ca_params, cfg, cache, denc))
    return loss, grads


def build_reranker_training_set(
    de_mention,
    index: EntityIndex,
    train_corpus: MentionCorpus,
    seed: int,
    *,
    vocab: SubwordVocab,
    kb: KnowledgeBase,
    stats: LangUsageStats,
    freq: FrequencyTable | None = None,
    max_len: int = 128,
    allowed_langs: set[str] | None = None,
    mention_limit: int | None = None,
) -> list[PairExample]:
    """One positive per mention plus retrieved and random negatives.

    `de_mention` is a callable mapping a MentionRecord to its query encoding.
    Per mention: the gold description labeled 1, the top retrieved non-gold
    candidates, and random non-gold entities, all labeled 0, with no
    duplicates and capped by KB size. Random negatives are sampled
    proportional to the entities' training-positive counts; otherwise entity
    frequency alone would predict the label and the scorer would learn to
    demote every rare entity instead of reading the description.
    """
    rng = derive_rng(seed, "reranker_set")
    mentions = train_corpus.mentions
    if mention_limit is not None and mention_limit < len(mentions):
        picks = sorted(rng.choice(len(mentions), size=mention_limit, replace=False))
        mentions = [mentions[i] for i in picks]

    desc_cache: dict[str, DescriptionCandidate] = {}

    def desc_of(qid: str) -> DescriptionCandidate:
        if qid not in desc_cache:
            desc_cache[qid] = select_description(kb.entities[qid], stats, allowed_langs)
        return desc_cache[qid]

    all_qids = index.qids
    weights = None
    if freq is not None:
        weights = np.array([freq.count(q) for q in all_qids], dtype=np.float64)
        if weights.sum() == 0:
            weights = None

    # first pass: retrieved negatives per mention, then balance them per
    # entity exactly like hard-negative mining; without the cap a rare entity
    # sitting near a popular one is negative in almost all its occurrences
    # and the scorer learns to reject its description unread
    positives_in_sample: dict[str, int] = {}
    for m in mentions:
        positives_in_sample[m.gold_qid] = positives_in_sample.get(m.gold_qid, 0) + 1
    retrieved_per_mention: list[list[tuple[str, float]]] = []
    occurrences: dict[str, list[tuple[float, int, int]]] = {}
    for i, m in enumerate(mentions):
        retrieved = search(index, de_mention(m), RETRIEVED_NEGATIVES + 1)
        negs = [(q, s) for q, s in retrieved if q != m.gold_qid][:RETRIEVED_NEGATIVES]
        retrieved_per_mention.append(negs)
        for rank, (q, s) in enumerate(negs):
            occurrences.setdefault(q, []).append((s, i, rank))
    dropped: set[tuple[int, int]] = set()
    for q, occ in occurrences.items():
        cap = NEGATIVE_BALANCE_CAP * positives_in_sample.get(q, 0)
        if len(occ) <= cap:
            continue
        occ_sorted = sorted(occ, key=lambda t: (-t[0], t[1], t[2]))
        for _, i, rank in occ_sorted[cap:]:
            dropped.add((i, rank))

    examples: list[PairExample] = []
    for i, m in enumerate(mentions):
        negatives = [q for rank, (q, _) in enumerate(retrieved_per_mention[i])
                     if (i, rank) not in dropped]
        excluded = set(negatives) | {m.gold_qid}
        keep = [j for j, q in enumerate(all_qids) if q not in excluded]
        if weights is not None:
            w = weights[keep]
            total = w.sum()
            pool = [j for jj, j in enumerate(keep) if w[jj] > 0]
            w = w[w > 0] / total if total > 0 else None
        else:
            pool, w = keep, None
        n_random = min(RANDOM_NEGATIVES, len(pool))
        if n_random:
            picks = rng.choice(len(pool), size=n_random, replace=False, p=w)
            negatives.extend(all_qids[pool[j]] for j in sorted(picks))
        examples.append(PairExample(build_pair_input(vocab, m, desc_of(m.gold_qid), max_len), 1))
        for q in negatives:
            examples.append(PairExample(build_pair_input(vocab, m, desc_of(q), max_len), 0))
    return examples


def train_reranker(
    examples: list[PairExample],
    cfg: TransformerConfig,
    tcfg: TrainConfig,
    log_path: str | Path | None = None,
    warm_start: Params | None = None,
) -> Params:
    """Train the cross-attention scorer with binary cross-entropy."""
    if not examples:
        raise ValueError("empty reranker training set")
    ids, segs, lengths = sequences_to_arrays([e.input for e in examples])
    labels = np.array([e.label for e in examples], dtype=np.int64)

    params = init_ca_params(cfg, warm_start=warm_start)
    state = OptState.create(params)
    rng = derive_rng(tcfg.seed, "reranker_batches")
    n = len(examples)
    b = min(tcfg.batch_size, n)
    perm = rng.permutation(n)
    cursor = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write("step\tlr\tloss_bce\n")
    with single_threaded_blas():
        for step in range(tcfg.steps):
            if cursor + b > n:
                perm = rng.permutation(n)
                cursor = 0
            idx = perm[cursor : cursor + b]
            cursor += b
            loss, grads = bce_loss_and_grads(
                params, cfg, (ids[idx], segs[idx], lengths[idx]), labels[idx])
            lr = adam_schedule_step(state, grads, step, tcfg)
            if log_fh and (step % 50 == 0 or step == tcfg.steps - 1):
                log_fh.write(f"{step}\t{lr!r}\t{loss!r}\n")
    if log_fh:
        log_fh.close()
    return params


def rerank(
    ca_params: Params,
    cfg: TransformerConfig,
    de_candidates: CandidateList,
    m: MentionRecord,
    kb: KnowledgeBase,
    *,
    vocab: SubwordVocab,
    stats: LangUsageStats,
    n: int = RERANK_TOP_N,
    allowed_langs: set[str] | None = None,
) -> CandidateList:
    """Rescore the top-n candidates; the tail keeps its original order.

    Reranked entries carry the coherence probability as their score; the
    sort is stable, so equal probabilities preserve the original order.
    """
    if not de_candidates:
        raise ValueError("empty candidate list")
    head = de_candidates[:n]
    tail = de_candidates[n:]
    if len(head) <= 1:
        return list(de_candidates)
    pairs = [
        build_pair_input(vocab, m, select_description(kb.entities[q], stats, allowed_langs), cfg.max_len)
        for q, _ in head
    ]
    probs = score_pairs_batch(ca_params, cfg, pairs)
    order = sorted(range(len(head)), key=lambda i: -probs[i])
    reranked = [(head[i][0], float(probs[i])) for i in order]
    return reranked + list(tail)

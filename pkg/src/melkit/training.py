"""Dual-encoder optimization.

Phase 1 trains with in-batch sampled softmax over a batch of mention-entity
pairs, optionally averaged with a cross-lingual description-pairing task that
reuses the entity tower on both sides. Phase 2 continues from the prior
checkpoint with per-mention mined hard negatives appended to each row of the
score matrix. Negative mining enforces a per-entity cap of
`cap * training positives` so rare entities are not over-represented.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import FrequencyTable, MentionCorpus, count_entity_frequencies
from .kb import DescriptionCandidate, KnowledgeBase, LangUsageStats, select_description
from .model import (
    EntityEmbeddingTable,
    Params,
    TransformerConfig,
    encode_batch,
    encoder_backward,
    encoder_forward,
    init_encoder_params,
    l2_normalize_backward,
    l2_normalize_rows,
    save_checkpoint,
    sequences_to_arrays,
)
from .retrieval import EntityIndex, build_index
from .seeding import derive_rng, single_threaded_blas
from .tokenizer import SubwordVocab, build_entity_input, build_mention_input

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Finite sentinel for score-matrix slots that hold no candidate; softmax
# assigns them exactly zero probability and zero gradient.
SCORE_PAD = -1e30


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 1500
    peak_lr: float = 1e-3
    warmup_frac: float = 0.1
    temperature: float = 20.0
    negatives_per_positive_cap: int = 10
    aux_pairs_per_entity_cap: int = 5
    seed: int = 0
    steps_phase2: int | None = None
    aux_batch_size: int | None = None  # defaults to batch_size

    def __post_init__(self) -> None:
        if not (0.0 <= self.warmup_frac <= 1.0):
            raise ValueError("warmup_frac must be in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.negatives_per_positive_cap < 0 or self.aux_pairs_per_entity_cap < 0:
            raise ValueError("caps must be nonnegative")


@dataclass(frozen=True)
class EntityPair:
    qid: str
    primary_desc: DescriptionCandidate
    alt_desc: DescriptionCandidate


@dataclass
class HardNegativeSet:
    per_mention: list[list[str]]
    tally: dict[str, int] = field(default_factory=dict)


# --- loss ----------------------------------------------------------------------

def inbatch_softmax_loss(scores: np.ndarray, temperature: float):
    """Mean cross-entropy where row i's positive is column i.

    Columns beyond the batch size hold per-row appended hard negatives.
    Returns (loss, gradient with respect to scores).
    """
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores in softmax loss")
    b, cols = scores.shape
    if cols < b:
        raise ValueError("score matrix needs at least one column per row")
    z = temperature * scores
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    idx = np.arange(b)
    log_p = z[idx, idx] - m[:, 0] - np.log(denom[:, 0])
    loss = float(-log_p.mean())
    dscores = probs.copy()
    dscores[idx, idx] -= 1.0
    dscores *= temperature / b
    return loss, dscores.astype(scores.dtype)


# --- auxiliary task --------------------------------------------------------------

def build_entity_entity_pairs(
    kb: KnowledgeBase,
    stats: LangUsageStats,
    cap: int,
    seed: int,
    allowed_langs: set[str] | None = None,
) -> list[EntityPair]:
    """Pair each multi-language entity's primary description with up to `cap`
    sampled descriptions in other languages."""
    rng = derive_rng(seed, "entity_pairs")
    pairs: list[EntityPair] = []
    for qid in kb.sorted_qids():
        entity = kb.entities[qid]
        if len(entity.description_languages()) < 2:
            continue
        primary = select_description(entity, stats, allowed_langs)
        others = sorted(
            (c for c in entity.descriptions if c.language != primary.language),
            key=lambda c: (c.language, c.source, c.text),
        )
        if not others:
            continue
        take = min(cap, len(others))
        if take == 0:
            continue
        picks = rng.choice(len(others), size=take, replace=False)
        for i in sorted(picks):
            pairs.append(EntityPair(qid=qid, primary_desc=primary, alt_desc=others[i]))
    return pairs


# --- optimizer -------------------------------------------------------------------

@dataclass
class OptState:
    params: Params
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def create(cls, params: Params) -> "OptState":
        return cls(
            params=params,
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def lr_at(step_index: int, total_steps: int, peak_lr: float, warmup_frac: float) -> float:
    """Linear warm-up to peak_lr, then linear decay toward zero."""
    if total_steps <= 0:
        return 0.0
    warmup = int(round(warmup_frac * total_steps))
    if step_index < warmup:
        return peak_lr * step_index / warmup
    return peak_lr * (total_steps - step_index) / max(1, total_steps - warmup)


def adam_schedule_step(
    state: OptState,
    grads: Params,
    step_index: int,
    config: TrainConfig,
    total_steps: int | None = None,
) -> float:
    """One Adam update under the warm-up/decay schedule; returns the lr used."""
    total = config.steps if total_steps is None else total_steps
    lr = lr_at(step_index, total, config.peak_lr, config.warmup_frac)
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        state.params[key] -= lr * update.astype(state.params[key].dtype)
    return lr


def accumulate(grads: Params, new: Params, scale: float = 1.0) -> None:
    for key, g in new.items():
        if key in grads:
            grads[key] += scale * g
        else:
            grads[key] = scale * g if scale != 1.0 else g.copy()


# --- hard-negative mining ---------------------------------------------------------

def mine_hard_negatives(
    mention_params: Params,
    mention_cfg: TransformerConfig,
    vocab: SubwordVocab,
    train: MentionCorpus,
    index: EntityIndex,
    cap_per_positive: int,
    top_k_scan: int = 50,
    balanced: bool = True,
    mention_max_len: int | None = None,
) -> HardNegativeSet:
    """Retrieve top-ranked incorrect entities for every training mention.

    With `balanced`, each entity may appear as a negative at most
    `cap_per_positive * (its training positives)` times; overflow occurrences
    are dropped lowest-retrieval-score first. Every mention keeps at most
    `cap_per_positive` negatives, in rank order.
    """
    max_len = mention_max_len or mention_cfg.max_len
    seqs = [build_mention_input(vocab, m, max_len) for m in train.mentions]
    queries = encode_batch(mention_params, mention_cfg, seqs)
    queries, _ = l2_normalize_rows(queries.astype(np.float64))
    scores = queries @ index.matrix.astype(np.float64).T

    freq = count_entity_frequencies(train)
    n_scan = min(top_k_scan + 1, scores.shape[1])
    # (mention, rank-ordered candidate rows) with gold removed
    per_mention_rows: list[list[int]] = []
    occurrences: dict[int, list[tuple[float, int, int]]] = {}
    for i, mention in enumerate(train.mentions):
        row_scores = scores[i]
        top = np.argpartition(row_scores, scores.shape[1] - n_scan)[-n_scan:]
        top = sorted(top, key=lambda j: (-row_scores[j], index.qids[j]))
        rows = [j for j in top if index.qids[j] != mention.gold_qid][:top_k_scan]
        per_mention_rows.append(rows)
        for rank, j in enumerate(rows):
            occurrences.setdefault(j, []).append((row_scores[j], i, rank))

    dropped: set[tuple[int, int]] = set()
    if balanced:
        for j, occ in occurrences.items():
            cap = cap_per_positive * freq.count(index.qids[j])
            if len(occ) <= cap:
                continue
            # keep highest-scoring occurrences; deterministic tie order
            occ_sorted = sorted(occ, key=lambda t: (-t[0], t[1], t[2]))
            for _, i, rank in occ_sorted[cap:]:
                dropped.add((i, rank))

    per_mention: list[list[str]] = []
    tally: dict[str, int] = {}
    for i, rows in enumerate(per_mention_rows):
        kept = [index.qids[j] for rank, j in enumerate(rows) if (i, rank) not in dropped]
        kept = kept[:cap_per_positive]
        per_mention.append(kept)
        for q in kept:
            tally[q] = tally.get(q, 0) + 1
    return HardNegativeSet(per_mention=per_mention, tally=tally)


# --- featurization ----------------------------------------------------------------

@dataclass
class EntityFeatures:
    """Tokenized descriptions for all KB entities, row-addressable by QID."""

    qids: list[str]
    ids: np.ndarray
    segs: np.ndarray
    lengths: np.ndarray
    row_of: dict[str, int]

    @classmethod
    def build(cls, kb: KnowledgeBase, stats: LangUsageStats, vocab: SubwordVocab,
              max_len: int, allowed_langs: set[str] | None = None) -> "EntityFeatures":
        qids = kb.sorted_qids()
        seqs = [
            build_entity_input(vocab, select_description(kb.entities[q], stats, allowed_langs), max_len)
            for q in qids
        ]
        ids, segs, lengths = sequences_to_arrays(seqs)
        return cls(qids=qids, ids=ids, segs=segs, lengths=lengths,
                   row_of={q: i for i, q in enumerate(qids)})


# --- training loop -----------------------------------------------------------------

@dataclass
class TrainArtifacts:
    mention_params: Params
    entity_params: Params | None
    table: EntityEmbeddingTable | None
    losses: list[tuple[int, float, float, float]]  # (step, lr, loss_me, loss_ee)


def _encode_rows_with_cache(params, cfg, feats: EntityFeatures, rows: np.ndarray):
    enc, cache = encoder_forward(
        params, cfg, feats.ids[rows], feats.segs[rows], feats.lengths[rows]
    )
    return enc, cache


def _mention_entity_grads(
    mention_params: Params,
    entity_side,
    mention_cfg: TransformerConfig,
    entity_cfg: TransformerConfig | None,
    feats: EntityFeatures | None,
    m_ids, m_segs, m_lens,
    gold_rows: np.ndarray,
    neg_rows: list[list[int]] | None,
    temperature: float,
    loss_scale: float,
    grads_m: Params,
    grads_e: Params,
    d_table: np.ndarray | None,
):
    """Forward + backward for one mention-entity batch; returns the loss."""
    enc_m_raw, cache_m = encoder_forward(mention_params, mention_cfg, m_ids, m_segs, m_lens)
    enc_m, norm_m_cache = l2_normalize_rows(enc_m_raw)

    model_f = feats is not None
    if model_f:
        uniq_rows, inverse = np.unique(gold_rows, return_inverse=True)
        enc_e_raw, cache_e = _encode_rows_with_cache(entity_side, entity_cfg, feats, uniq_rows)
    else:
        uniq_rows, inverse = np.unique(gold_rows, return_inverse=True)
        enc_e_raw = entity_side.vectors[uniq_rows]
        cache_e = None
    enc_e_u, norm_e_cache = l2_normalize_rows(enc_e_raw)
    enc_e = enc_e_u[inverse]

    b = enc_m.shape[0]
    scores = enc_m @ enc_e.T

    # per-row hard negatives, padded to the widest row
    if neg_rows is not None and any(neg_rows):
        k_max = max(len(r) for r in neg_rows)
        flat = sorted({j for rows in neg_rows for j in rows})
        neg_pos = {j: i for i, j in enumerate(flat)}
        flat_arr = np.array(flat, dtype=np.int64)
        if model_f:
            enc_n_raw, cache_n = _encode_rows_with_cache(entity_side, entity_cfg, feats, flat_arr)
        else:
            enc_n_raw = entity_side.vectors[flat_arr]
            cache_n = None
        enc_n_u, norm_n_cache = l2_normalize_rows(enc_n_raw)
        neg_scores = np.full((b, k_max), SCORE_PAD, dtype=scores.dtype)
        neg_index = np.zeros((b, k_max), dtype=np.int64)
        neg_mask = np.zeros((b, k_max), dtype=bool)
        for i, rows in enumerate(neg_rows):
            for kk, j in enumerate(rows):
                neg_scores[i, kk] = enc_m[i] @ enc_n_u[neg_pos[j]]
                neg_index[i, kk] = neg_pos[j]
                neg_mask[i, kk] = True
        scores = np.concatenate([scores, neg_scores], axis=1)
    else:
        k_max = 0

    loss, dscores = inbatch_softmax_loss(scores, temperature)
    dscores = dscores * loss_scale
    d_pos = dscores[:, :b]
    d_enc_m = d_pos @ enc_e
    d_enc_e = d_pos.T @ enc_m

    if k_max:
        d_neg = dscores[:, b:] * neg_mask
        d_enc_m += np.einsum("bk,bkd->bd", d_neg, enc_n_u[neg_index])
        d_enc_n = np.zeros_like(enc_n_u)
        np.add.at(d_enc_n, neg_index[neg_mask], d_neg[neg_mask][:, None] * enc_m[np.nonzero(neg_mask)[0]])

    d_enc_m_raw = l2_normalize_backward(d_enc_m, norm_m_cache)
    accumulate(grads_m, encoder_backward(mention_params, mention_cfg, cache_m, d_enc_m_raw))

    d_enc_e_u = np.zeros_like(enc_e_u)
    np.add.at(d_enc_e_u, inverse, d_enc_e)
    d_enc_e_raw = l2_normalize_backward(d_enc_e_u, norm_e_cache)
    if model_f:
        accumulate(grads_e, encoder_backward(entity_side, entity_cfg, cache_e, d_enc_e_raw))
        if k_max:
            d_enc_n_raw = l2_normalize_backward(d_enc_n, norm_n_cache)
            accumulate(grads_e, encoder_backward(entity_side, entity_cfg, cache_n, d_enc_n_raw))
    else:
        np.add.at(d_table, uniq_rows, d_enc_e_raw)
        if k_max:
            d_enc_n_raw = l2_normalize_backward(d_enc_n, norm_n_cache)
            np.add.at(d_table, flat_arr, d_enc_n_raw)
    return loss


def _entity_entity_grads(
    entity_params: Params,
    entity_cfg: TransformerConfig,
    alt_ids, alt_segs, alt_lens,
    pri_ids, pri_segs, pri_lens,
    temperature: float,
    loss_scale: float,
    grads_e: Params,
):
    """Aux task: in-batch softmax over (alternate, primary) description pairs."""
    enc_a_raw, cache_a = encoder_forward(entity_params, entity_cfg, alt_ids, alt_segs, alt_lens)
    enc_p_raw, cache_p = encoder_forward(entity_params, entity_cfg, pri_ids, pri_segs, pri_lens)
    enc_a, norm_a = l2_normalize_rows(enc_a_raw)
    enc_p, norm_p = l2_normalize_rows(enc_p_raw)
    scores = enc_a @ enc_p.T
    loss, dscores = inbatch_softmax_loss(scores, temperature)
    dscores = dscores * loss_scale
    d_a = l2_normalize_backward(dscores @ enc_p, norm_a)
    d_p = l2_normalize_backward(dscores.T @ enc_a, norm_p)
    accumulate(grads_e, encoder_backward(entity_params, entity_cfg, cache_a, d_a))
    accumulate(grads_e, encoder_backward(entity_params, entity_cfg, cache_p, d_p))
    return loss


def multitask_loss_and_grads(
    mention_params: Params,
    entity_side,
    mention_batch,
    gold_rows: np.ndarray,
    neg_rows: list[list[int]] | None,
    pair_batch,
    feats: EntityFeatures | None,
    mention_cfg: TransformerConfig,
    entity_cfg: TransformerConfig | None,
    temperature: float,
):
    """Losses and gradients for one step, without touching any parameters.

    `entity_side` is the entity tower's Params (description encoder) or an
    EntityEmbeddingTable. The total loss is the mention-entity loss, averaged
    with the entity-entity loss when a pair batch is given.
    """
    m_ids, m_segs, m_lens = mention_batch
    grads_m: Params = {}
    grads_e: Params = {}
    is_table = isinstance(entity_side, EntityEmbeddingTable)
    d_table = np.zeros_like(entity_side.vectors) if is_table else None
    loss_scale = 0.5 if pair_batch is not None else 1.0

    loss_me = _mention_entity_grads(
        mention_params, entity_side, mention_cfg, entity_cfg, feats,
        m_ids, m_segs, m_lens, gold_rows, neg_rows,
        temperature, loss_scale, grads_m, grads_e, d_table,
    )
    loss_ee = 0.0
    if pair_batch is not None:
        alt, pri = pair_batch
        loss_ee = _entity_entity_grads(
            entity_side, entity_cfg, *alt, *pri, temperature, loss_scale, grads_e,
        )
    total = loss_me if pair_batch is None else 0.5 * (loss_me + loss_ee)
    return total, loss_me, loss_ee, grads_m, grads_e, d_table


def multitask_step(
    state_m: OptState,
    state_e: OptState | None,
    state_table: OptState | None,
    mention_batch,
    gold_rows: np.ndarray,
    neg_rows: list[list[int]] | None,
    pair_batch,
    feats: EntityFeatures | None,
    mention_cfg: TransformerConfig,
    entity_cfg: TransformerConfig | None,
    table: EntityEmbeddingTable | None,
    tcfg: TrainConfig,
    step_index: int,
    total_steps: int,
):
    """One optimizer update over a mention batch and an optional pair batch."""
    entity_side = state_e.params if state_e is not None else table
    total, loss_me, loss_ee, grads_m, grads_e, d_table = multitask_loss_and_grads(
        state_m.params, entity_side, mention_batch, gold_rows, neg_rows, pair_batch,
        feats, mention_cfg, entity_cfg, tcfg.temperature,
    )
    lr = adam_schedule_step(state_m, grads_m, step_index, tcfg, total_steps)
    if state_e is not None and grads_e:
        adam_schedule_step(state_e, grads_e, step_index, tcfg, total_steps)
    if state_table is not None:
        adam_schedule_step(state_table, {"vectors": d_table}, step_index, tcfg, total_steps)
    return total, loss_me, loss_ee, lr


def train(
    tcfg: TrainConfig,
    kb: KnowledgeBase,
    corpus: MentionCorpus,
    *,
    mention_cfg: TransformerConfig,
    entity_cfg: TransformerConfig | None,
    vocab: SubwordVocab,
    stats: LangUsageStats,
    entity_arch: str = "f",
    use_aux: bool = False,
    negatives: HardNegativeSet | None = None,
    init: TrainArtifacts | None = None,
    steps: int | None = None,
    allowed_langs: set[str] | None = None,
    log_path: str | Path | None = None,
    log_every: int = 50,
) -> TrainArtifacts:
    """Run one training phase and return the resulting parameters.

    Phase 1 passes `negatives=None`; phase 2 passes the mined negative set
    together with `init` holding the phase-1 artifacts.
    """
    if entity_arch not in ("e", "f"):
        raise ValueError("entity_arch must be 'e' or 'f'")
    if use_aux and entity_arch == "e":
        raise ValueError("the description-pairing task requires the description encoder")
    total_steps = tcfg.steps if steps is None else steps

    mentions = corpus.mentions
    if not mentions:
        raise ValueError("empty training corpus")
    mention_seqs = [build_mention_input(vocab, m, mention_cfg.max_len) for m in mentions]
    m_ids, m_segs, m_lens = sequences_to_arrays(mention_seqs)

    feats = None
    table = None
    if entity_arch == "f":
        feats = EntityFeatures.build(kb, stats, vocab, entity_cfg.max_len, allowed_langs)
        gold_rows_all = np.array([feats.row_of[m.gold_qid] for m in mentions], dtype=np.int64)
    else:
        if init is not None and init.table is not None:
            table = EntityEmbeddingTable(list(init.table.qids), init.table.vectors.copy())
        else:
            table = EntityEmbeddingTable.initialize(
                kb.sorted_qids(), mention_cfg.d_enc, tcfg.seed, mention_cfg.dtype
            )
        gold_rows_all = np.array([table.index[m.gold_qid] for m in mentions], dtype=np.int64)

    if init is not None:
        mention_params = {k: a.copy() for k, a in init.mention_params.items()}
        entity_params = (
            {k: a.copy() for k, a in init.entity_params.items()}
            if init.entity_params is not None else None
        )
    else:
        mention_params = init_encoder_params(mention_cfg, "mention")
        entity_params = init_encoder_params(entity_cfg, "entity") if entity_arch == "f" else None

    state_m = OptState.create(mention_params)
    state_e = OptState.create(entity_params) if entity_params is not None else None
    state_table = OptState.create({"vectors": table.vectors}) if table is not None else None

    neg_rows_all: list[list[int]] | None = None
    if negatives is not None:
        lookup = feats.row_of if feats is not None else table.index
        neg_rows_all = [[lookup[q] for q in qs] for qs in negatives.per_mention]

    pair_arrays = None
    if use_aux:
        pairs = build_entity_entity_pairs(kb, stats, tcfg.aux_pairs_per_entity_cap,
                                          tcfg.seed, allowed_langs)
        if not pairs:
            raise ValueError("auxiliary task enabled but no cross-lingual pairs exist")
        alt_seqs = [build_entity_input(vocab, p.alt_desc, entity_cfg.max_len) for p in pairs]
        pri_seqs = [build_entity_input(vocab, p.primary_desc, entity_cfg.max_len) for p in pairs]
        pair_arrays = (sequences_to_arrays(alt_seqs), sequences_to_arrays(pri_seqs))

    batch_rng = derive_rng(tcfg.seed, "batch_order")
    pair_rng = derive_rng(tcfg.seed, "pair_order")
    n = len(mentions)
    b = min(tcfg.batch_size, n)
    perm = batch_rng.permutation(n)
    cursor = 0

    losses: list[tuple[int, float, float, float]] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write("step\tlr\tloss_mention_entity\tloss_entity_entity\n")

    with single_threaded_blas():
        for step in range(total_steps):
            if cursor + b > n:
                perm = batch_rng.permutation(n)
                cursor = 0
            idx = perm[cursor : cursor + b]
            cursor += b

            batch = (m_ids[idx], m_segs[idx], m_lens[idx])
            gold_rows = gold_rows_all[idx]
            neg_rows = [neg_rows_all[i] for i in idx] if neg_rows_all is not None else None

            pair_batch = None
            if pair_arrays is not None:
                (a_ids, a_segs, a_lens), (p_ids, p_segs, p_lens) = pair_arrays
                k = min(tcfg.aux_batch_size or b, a_ids.shape[0])
                pick = pair_rng.choice(a_ids.shape[0], size=k, replace=False)
                pair_batch = (
                    (a_ids[pick], a_segs[pick], a_lens[pick]),
                    (p_ids[pick], p_segs[pick], p_lens[pick]),
                )

            _, loss_me, loss_ee, lr = multitask_step(
                state_m, state_e, state_table, batch, gold_rows, neg_rows, pair_batch,
                feats, mention_cfg, entity_cfg, table, tcfg, step, total_steps,
            )
            if step % log_every == 0 or step == total_steps - 1:
                losses.append((step, lr, loss_me, loss_ee))
                if log_fh:
                    log_fh.write(f"{step}\t{lr!r}\t{loss_me!r}\t{loss_ee!r}\n")

    if log_fh:
        log_fh.close()
    return TrainArtifacts(
        mention_params=state_m.params,
        entity_params=state_e.params if state_e is not None else None,
        table=table,
        losses=losses,
    )


def train_full(
    tcfg: TrainConfig,
    kb: KnowledgeBase,
    corpus: MentionCorpus,
    *,
    mention_cfg: TransformerConfig,
    entity_cfg: TransformerConfig | None,
    vocab: SubwordVocab,
    stats: LangUsageStats,
    entity_arch: str = "f",
    use_aux: bool = False,
    hard_negatives: bool = False,
    top_k_scan: int = 50,
    allowed_langs: set[str] | None = None,
    log_path: str | Path | None = None,
) -> tuple[TrainArtifacts, HardNegativeSet | None]:
    """Phase 1, then optionally mining plus phase 2 from the phase-1 checkpoint."""
    phase1 = train(
        tcfg, kb, corpus,
        mention_cfg=mention_cfg, entity_cfg=entity_cfg, vocab=vocab, stats=stats,
        entity_arch=entity_arch, use_aux=use_aux, allowed_langs=allowed_langs,
        log_path=log_path,
    )
    if not hard_negatives:
        return phase1, None

    entity_side = phase1.table if entity_arch == "e" else phase1.entity_params
    index = build_index(
        entity_side, kb, stats,
        vocab=vocab, cfg=entity_cfg, model_tag="phase1", allowed_langs=allowed_langs,
    )
    mined = mine_hard_negatives(
        phase1.mention_params, mention_cfg, vocab, corpus, index,
        cap_per_positive=tcfg.negatives_per_positive_cap, top_k_scan=top_k_scan,
    )
    phase2_steps = tcfg.steps_phase2 if tcfg.steps_phase2 is not None else max(1, tcfg.steps // 2)
    phase2 = train(
        tcfg, kb, corpus,
        mention_cfg=mention_cfg, entity_cfg=entity_cfg, vocab=vocab, stats=stats,
        entity_arch=entity_arch, use_aux=use_aux, negatives=mined, init=phase1,
        steps=phase2_steps, allowed_langs=allowed_langs,
        log_path=str(log_path) + ".phase2" if log_path else None,
    )
    return phase2, mined

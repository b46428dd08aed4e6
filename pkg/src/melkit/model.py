"""Mini-transformer encoder towers with exact analytic gradients.

Two independent towers (mention side and entity side) map fixed-length token
sequences to encoding vectors via the CLS position of the final layer; a
plain embedding table is the alternative entity representation. Scoring is
cosine similarity. Forward and backward passes are implemented directly in
numpy so gradients can be verified against finite differences and training
is bit-reproducible in 64-bit mode.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import erf

from .seeding import derive_rng, single_threaded_blas
from .tokenizer import TokenSequence

LN_EPS = 1e-6
MASK_NEG = -1e9
INIT_STD = 0.02

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ffn: int = 64
    max_len: int = 32
    d_enc: int = 32
    n_segments: int = 4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        for name in ("vocab_size", "layers", "heads", "d_model", "d_ffn", "max_len",
                     "d_enc", "n_segments"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def init_encoder_params(cfg: TransformerConfig, tower: str) -> Params:
    """Seeded scaled-normal initialization for one encoder tower."""
    rng = derive_rng(cfg.seed, f"init:{tower}")
    dt = cfg.np_dtype

    def normal(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(dt)

    d, f = cfg.d_model, cfg.d_ffn
    params: Params = {
        "tok_emb": normal(cfg.vocab_size, d),
        "pos_emb": normal(cfg.max_len, d),
        "seg_emb": normal(cfg.n_segments, d),
        "emb_ln_g": np.ones(d, dtype=dt),
        "emb_ln_b": np.zeros(d, dtype=dt),
        "proj": normal(d, cfg.d_enc),
    }
    for i in range(cfg.layers):
        p = f"l{i}."
        params[p + "wq"] = normal(d, d)
        params[p + "bq"] = np.zeros(d, dtype=dt)
        # no key bias: softmax is invariant to a constant shift of every key,
        # so its gradient is identically zero
        params[p + "wk"] = normal(d, d)
        params[p + "wv"] = normal(d, d)
        params[p + "bv"] = np.zeros(d, dtype=dt)
        params[p + "wo"] = normal(d, d)
        params[p + "bo"] = np.zeros(d, dtype=dt)
        params[p + "ln1_g"] = np.ones(d, dtype=dt)
        params[p + "ln1_b"] = np.zeros(d, dtype=dt)
        params[p + "w1"] = normal(d, f)
        params[p + "b1"] = np.zeros(f, dtype=dt)
        params[p + "w2"] = normal(f, d)
        params[p + "b2"] = np.zeros(d, dtype=dt)
        params[p + "ln2_g"] = np.ones(d, dtype=dt)
        params[p + "ln2_b"] = np.zeros(d, dtype=dt)
    return params


# --- primitive ops -----------------------------------------------------------

def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x: np.ndarray):
    """erf-based GELU; returns (value, erf term) so backward can reuse it."""
    erf_term = erf(x / _SQRT_2)
    return 0.5 * x * (1.0 + erf_term), erf_term


def _gelu_grad(x: np.ndarray, erf_term: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf_term) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _index_add(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """out[idx[i]] += rows[i] with duplicate indices (bincount is far faster
    than np.add.at for this access pattern)."""
    idx = idx.reshape(-1)
    rows = rows.reshape(-1, rows.shape[-1])
    n = out.shape[0]
    for j in range(out.shape[1]):
        out[:, j] += np.bincount(idx, weights=rows[:, j], minlength=n)


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


# --- encoder forward / backward ----------------------------------------------

def encoder_forward(
    params: Params,
    cfg: TransformerConfig,
    ids: np.ndarray,
    segs: np.ndarray,
    lengths: np.ndarray,
):
    """Batched forward pass; returns (encodings [B, d_enc], cache for backward).

    Padding positions are masked out of attention, so outputs are invariant
    to the token IDs stored there.
    """
    ids = np.asarray(ids, dtype=np.int64)
    segs = np.asarray(segs, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or ids.shape != segs.shape:
        raise ValueError("ids and segs must be matching 2-D arrays")
    b, n = ids.shape
    if n != cfg.max_len:
        raise ValueError(f"sequence length {n} does not match config max_len {cfg.max_len}")
    if ids.max(initial=0) >= cfg.vocab_size:
        raise ValueError("token id out of range for vocab_size")

    key_mask = np.arange(n)[None, :] < lengths[:, None]  # [B, n]
    bias = np.where(key_mask, 0.0, MASK_NEG).astype(cfg.np_dtype)[:, None, None, :]

    x0 = params["tok_emb"][ids] + params["pos_emb"][None, :n] + params["seg_emb"][segs]
    x, emb_ln_cache = _layer_norm(x0, params["emb_ln_g"], params["emb_ln_b"])

    scale = 1.0 / np.sqrt(cfg.d_model // cfg.heads)
    layer_caches = []
    for i in range(cfg.layers):
        p = f"l{i}."
        x_in = x
        q = _split_heads(x_in @ params[p + "wq"] + params[p + "bq"], cfg.heads)
        k = _split_heads(x_in @ params[p + "wk"], cfg.heads)
        v = _split_heads(x_in @ params[p + "wv"] + params[p + "bv"], cfg.heads)
        scores = q @ k.swapaxes(-1, -2) * scale + bias
        probs = _softmax(scores)
        ctx = _merge_heads(probs @ v)
        attn_out = ctx @ params[p + "wo"] + params[p + "bo"]
        x_mid, ln1_cache = _layer_norm(x_in + attn_out, params[p + "ln1_g"], params[p + "ln1_b"])
        z1 = x_mid @ params[p + "w1"] + params[p + "b1"]
        a1, erf_term = _gelu(z1)
        ffn_out = a1 @ params[p + "w2"] + params[p + "b2"]
        x, ln2_cache = _layer_norm(x_mid + ffn_out, params[p + "ln2_g"], params[p + "ln2_b"])
        layer_caches.append((x_in, q, k, v, probs, ctx, ln1_cache, x_mid,
                             z1, a1, erf_term, ln2_cache))

    enc = x[:, 0, :] @ params["proj"]
    cache = (ids, segs, emb_ln_cache, layer_caches, x, scale)
    return enc, cache


def encoder_backward(params: Params, cfg: TransformerConfig, cache, denc: np.ndarray) -> Params:
    """Exact gradients of all tower parameters for upstream gradient denc."""
    ids, segs, emb_ln_cache, layer_caches, x_final, scale = cache
    b, n = ids.shape
    grads: Params = {}

    grads["proj"] = x_final[:, 0, :].T @ np.asarray(denc, dtype=cfg.np_dtype)
    dx = np.zeros_like(x_final)
    dx[:, 0, :] = denc @ params["proj"].T

    for i in reversed(range(cfg.layers)):
        p = f"l{i}."
        (x_in, q, k, v, probs, ctx, ln1_cache, x_mid,
         z1, a1, erf_term, ln2_cache) = layer_caches[i]

        d_res2, dg2, db2 = _layer_norm_backward(dx, ln2_cache, params[p + "ln2_g"])
        grads[p + "ln2_g"] = dg2
        grads[p + "ln2_b"] = db2
        d_ffn = d_res2
        da1 = d_ffn @ params[p + "w2"].T
        grads[p + "w2"] = a1.reshape(-1, a1.shape[-1]).T @ d_ffn.reshape(-1, d_ffn.shape[-1])
        grads[p + "b2"] = d_ffn.sum(axis=(0, 1))
        dz1 = da1 * _gelu_grad(z1, erf_term)
        grads[p + "w1"] = x_mid.reshape(-1, x_mid.shape[-1]).T @ dz1.reshape(-1, dz1.shape[-1])
        grads[p + "b1"] = dz1.sum(axis=(0, 1))
        d_xmid = d_res2 + dz1 @ params[p + "w1"].T

        d_res1, dg1, db1 = _layer_norm_backward(d_xmid, ln1_cache, params[p + "ln1_g"])
        grads[p + "ln1_g"] = dg1
        grads[p + "ln1_b"] = db1
        d_attn_out = d_res1
        d_ctx = d_attn_out @ params[p + "wo"].T
        grads[p + "wo"] = ctx.reshape(-1, ctx.shape[-1]).T @ d_attn_out.reshape(-1, d_attn_out.shape[-1])
        grads[p + "bo"] = d_attn_out.sum(axis=(0, 1))

        d_ctx_h = _split_heads(d_ctx, cfg.heads)
        d_probs = d_ctx_h @ v.swapaxes(-1, -2)
        dv = probs.swapaxes(-1, -2) @ d_ctx_h
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        dq = d_scores @ k * scale
        dk = d_scores.swapaxes(-1, -2) @ q * scale

        dq_f = _merge_heads(dq)
        dk_f = _merge_heads(dk)
        dv_f = _merge_heads(dv)
        x_in_f = x_in.reshape(-1, x_in.shape[-1])
        grads[p + "wq"] = x_in_f.T @ dq_f.reshape(-1, dq_f.shape[-1])
        grads[p + "bq"] = dq_f.sum(axis=(0, 1))
        grads[p + "wk"] = x_in_f.T @ dk_f.reshape(-1, dk_f.shape[-1])
        grads[p + "wv"] = x_in_f.T @ dv_f.reshape(-1, dv_f.shape[-1])
        grads[p + "bv"] = dv_f.sum(axis=(0, 1))

        dx = d_res1 + dq_f @ params[p + "wq"].T + dk_f @ params[p + "wk"].T + dv_f @ params[p + "wv"].T

    dx0, dg_emb, db_emb = _layer_norm_backward(dx, emb_ln_cache, params["emb_ln_g"])
    grads["emb_ln_g"] = dg_emb
    grads["emb_ln_b"] = db_emb
    grads["tok_emb"] = np.zeros_like(params["tok_emb"])
    _index_add(grads["tok_emb"], ids, dx0)
    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:n] = dx0.sum(axis=0)
    grads["seg_emb"] = np.zeros_like(params["seg_emb"])
    _index_add(grads["seg_emb"], segs, dx0)
    return grads


def sequences_to_arrays(seqs: list[TokenSequence]):
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    segs = np.array([s.segments for s in seqs], dtype=np.int64)
    lengths = np.array([s.true_len for s in seqs], dtype=np.int64)
    return ids, segs, lengths


def encode(params: Params, cfg: TransformerConfig, seq: TokenSequence) -> np.ndarray:
    """Encode a single input sequence to a d_enc vector."""
    ids, segs, lengths = sequences_to_arrays([seq])
    enc, _ = encoder_forward(params, cfg, ids, segs, lengths)
    return enc[0].copy()


def encode_batch(params: Params, cfg: TransformerConfig, seqs: list[TokenSequence],
                 batch_size: int = 256) -> np.ndarray:
    """Encode many sequences in fixed-size chunks (inference only)."""
    out = np.empty((len(seqs), cfg.d_enc), dtype=cfg.np_dtype)
    with single_threaded_blas():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            ids, segs, lengths = sequences_to_arrays(chunk)
            enc, _ = encoder_forward(params, cfg, ids, segs, lengths)
            out[start : start + len(chunk)] = enc
    return out


# --- scoring and normalization ------------------------------------------------

def score(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two encoding vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("encoding dimensions differ")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cannot score a zero vector")
    return float(u @ v / (nu * nv))


def l2_normalize_rows(x: np.ndarray):
    """Row-normalize; returns (normalized, cache) for the backward pass."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize zero rows")
    y = x / norms
    return y, (y, norms)


def l2_normalize_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, norms = cache
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norms


# --- entity embedding table ----------------------------------------------------

class EntityEmbeddingTable:
    """Trainable per-entity vectors addressed by QID."""

    def __init__(self, qids: list[str], vectors: np.ndarray):
        if len(qids) != vectors.shape[0]:
            raise ValueError("qid count does not match vector rows")
        self.qids = list(qids)
        self.vectors = vectors
        self.index = {q: i for i, q in enumerate(self.qids)}

    @classmethod
    def initialize(cls, qids: list[str], d_enc: int, seed: int,
                   dtype: str = "float32") -> "EntityEmbeddingTable":
        rng = derive_rng(seed, "entity_table")
        vectors = rng.standard_normal((len(qids), d_enc)).astype(np.dtype(dtype))
        return cls(list(qids), vectors)

    def lookup(self, qid: str) -> np.ndarray:
        row = self.index.get(qid)
        if row is None:
            raise KeyError(f"unknown entity: {qid}")
        return self.vectors[row].copy()

    @property
    def d_enc(self) -> int:
        return self.vectors.shape[1]


# --- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def params_tag(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        h.update(key.encode())
        h.update(str(arrays[key].shape).encode())
        h.update(np.ascontiguousarray(arrays[key]).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    kind: str,
    towers: Mapping[str, Params],
    configs: Mapping[str, TransformerConfig],
    table: EntityEmbeddingTable | None = None,
    extra: Mapping | None = None,
) -> str:
    """Write a versioned checkpoint; returns its content tag."""
    arrays: dict[str, np.ndarray] = {}
    for tower, params in towers.items():
        for name, arr in params.items():
            arrays[f"{tower}.{name}"] = arr
    if table is not None:
        arrays["table.vectors"] = table.vectors
        arrays["table.__qids__"] = np.array(table.qids, dtype="U32")
    tag = params_tag(arrays)
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "tag": tag,
        "configs": {t: asdict(c) for t, c in configs.items()},
        "extra": dict(extra or {}),
    }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True), dtype="U")
    with open(path, "wb") as fh:
        np.savez(fh, **{k: arrays[k] for k in sorted(arrays)})
    return tag


def load_checkpoint(path: str | Path):
    """Bit-exact checkpoint reload: (kind, towers, configs, table, meta)."""
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        towers: dict[str, Params] = {}
        table_vectors = None
        table_qids = None
        for key in npz.files:
            if key == "__meta__":
                continue
            if key == "table.vectors":
                table_vectors = npz[key]
                continue
            if key == "table.__qids__":
                table_qids = [str(q) for q in npz[key]]
                continue
            tower, name = key.split(".", 1)
            towers.setdefault(tower, {})[name] = npz[key]
    configs = {t: TransformerConfig(**c) for t, c in meta["configs"].items()}
    table = None
    if table_vectors is not None:
        table = EntityEmbeddingTable(table_qids, table_vectors)
    return meta["kind"], towers, configs, table, meta

"""Staged pipeline orchestration with a provenance manifest.

Each stage reads and writes only its declared files and is individually
re-runnable; a manifest records SHA-256 hashes of every stage's inputs and
outputs. All stage randomness derives from the run seed, so a rerun with
unchanged inputs reproduces its outputs byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation as eval_mod
from . import kb as kb_mod
from . import rerank as rerank_mod
from . import retrieval as retrieval_mod
from . import training as training_mod
from .model import (
    EntityEmbeddingTable,
    TransformerConfig,
    encode_batch,
    load_checkpoint,
    params_tag,
    save_checkpoint,
)
from .tokenizer import SubwordVocab, build_mention_input, train_vocab

logger = logging.getLogger(__name__)

STAGE_ORDER = (
    "kb-ingest", "extract", "split", "vocab", "train", "mine",
    "index", "eval", "rerank-train", "rerank-eval",
)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class StageInputError(PipelineError):
    pass


def load_profile(name_or_path: str) -> dict:
    """Parse a key-value profile; built-in names are 'desk' and 'paper'."""
    if name_or_path in ("desk", "paper"):
        text = resources.files("melkit.profiles").joinpath(f"{name_or_path}.cfg").read_text()
    else:
        text = Path(name_or_path).read_text(encoding="utf-8")
    profile: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ValueError(f"malformed profile line: {raw!r}")
        for cast in (int, float):
            try:
                profile[key] = cast(value)
                break
            except ValueError:
                continue
        else:
            profile[key] = value
    return profile


@dataclass
class PipelineConfig:
    workdir: Path
    profile: dict
    profile_name: str = "desk"
    entity_arch: str = "f"   # "f" description encoder | "e" embedding table
    use_aux: bool = False
    mining: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.workdir = Path(self.workdir)
        if self.entity_arch not in ("e", "f"):
            raise ValueError("entity_arch must be 'e' or 'f'")
        if self.use_aux and self.entity_arch == "e":
            raise ValueError("auxiliary task requires the description encoder")

    def path(self, name: str) -> Path:
        return self.workdir / name

    @property
    def manifest_path(self) -> Path:
        return self.workdir / "manifest.json"

    def train_config(self) -> training_mod.TrainConfig:
        p = self.profile
        return training_mod.TrainConfig(
            batch_size=int(p["batch_size"]),
            steps=int(p["steps"]),
            steps_phase2=int(p["steps_phase2"]),
            peak_lr=float(p["peak_lr"]),
            warmup_frac=float(p["warmup_frac"]),
            temperature=float(p["temperature"]),
            negatives_per_positive_cap=int(p["negatives_per_positive_cap"]),
            aux_pairs_per_entity_cap=int(p["aux_pairs_per_entity_cap"]),
            aux_batch_size=int(p["aux_batch_size"]),
            seed=self.seed,
        )

    def mention_config(self, vocab_size: int) -> TransformerConfig:
        p = self.profile
        return TransformerConfig(
            vocab_size=vocab_size, layers=int(p["layers"]), heads=int(p["heads"]),
            d_model=int(p["d_model"]), d_ffn=int(p["d_ffn"]),
            max_len=int(p["mention_max_len"]), d_enc=int(p["d_enc"]),
            seed=self.seed, dtype=str(p["dtype"]),
        )

    def entity_config(self, vocab_size: int) -> TransformerConfig:
        p = self.profile
        return TransformerConfig(
            vocab_size=vocab_size, layers=int(p["layers"]), heads=int(p["heads"]),
            d_model=int(p["d_model"]), d_ffn=int(p["d_ffn"]),
            max_len=int(p["entity_max_len"]), d_enc=int(p["d_enc"]),
            seed=self.seed, dtype=str(p["dtype"]),
        )

    def ca_config(self, vocab_size: int) -> TransformerConfig:
        p = self.profile
        return TransformerConfig(
            vocab_size=vocab_size, layers=int(p["ca_layers"]), heads=int(p["ca_heads"]),
            d_model=int(p["ca_d_model"]), d_ffn=int(p["ca_d_ffn"]),
            max_len=int(p["ca_max_len"]), d_enc=int(p["ca_d_enc"]),
            seed=self.seed, dtype=str(p["dtype"]),
        )

    def ca_train_config(self) -> training_mod.TrainConfig:
        p = self.profile
        return training_mod.TrainConfig(
            batch_size=int(p["ca_batch_size"]), steps=int(p["ca_steps"]),
            peak_lr=float(p["ca_peak_lr"]), warmup_frac=float(p["ca_warmup_frac"]),
            temperature=float(p["temperature"]), seed=self.seed,
        )


# --- manifest -----------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_manifest(cfg: PipelineConfig) -> dict:
    if cfg.manifest_path.exists():
        return json.loads(cfg.manifest_path.read_text(encoding="utf-8"))
    return {"stages": {}}


def _save_manifest(cfg: PipelineConfig, manifest: dict) -> None:
    cfg.manifest_path.write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


# --- serialized helpers ----------------------------------------------------------

def _save_stats(stats: kb_mod.LangUsageStats, path: Path) -> None:
    path.write_text(json.dumps({
        "per_entity": {q: dict(sorted(v.items())) for q, v in sorted(stats.per_entity.items())},
        "global": dict(sorted(stats.global_counts.items())),
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_stats(path: Path) -> kb_mod.LangUsageStats:
    obj = json.loads(path.read_text(encoding="utf-8"))
    return kb_mod.LangUsageStats(per_entity=obj["per_entity"], global_counts=obj["global"])


def _save_freq(freq: corpus_mod.FrequencyTable, path: Path) -> None:
    path.write_text(json.dumps(dict(sorted(freq.counts.items())), sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _load_freq(path: Path) -> corpus_mod.FrequencyTable:
    return corpus_mod.FrequencyTable(counts=json.loads(path.read_text(encoding="utf-8")))


def _save_negatives(mined: training_mod.HardNegativeSet, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for negs in mined.per_mention:
            fh.write(json.dumps(negs) + "\n")


def _load_negatives(path: Path) -> training_mod.HardNegativeSet:
    per_mention = []
    tally: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            negs = json.loads(line)
            per_mention.append(negs)
            for q in negs:
                tally[q] = tally.get(q, 0) + 1
    return training_mod.HardNegativeSet(per_mention=per_mention, tally=tally)


# --- stage bodies -----------------------------------------------------------------

def _stage_kb_ingest(cfg: PipelineConfig) -> None:
    kb = kb_mod.load_kb(cfg.path("kb.jsonl"))
    kb = kb_mod.filter_admin_entities(kb)
    kb = kb_mod.require_wikipedia_page(kb)
    kb_mod.save_kb(kb, cfg.path("kb.filtered.jsonl"))


def _stage_extract(cfg: PipelineConfig) -> None:
    docs = corpus_mod.load_documents(cfg.path("documents.jsonl"))
    redirects = corpus_mod.load_tsv_map(cfg.path("redirects.tsv"))
    title_map = corpus_mod.load_title_map(cfg.path("titles.tsv"))
    patterns = json.loads(cfg.path("section_patterns.json").read_text(encoding="utf-8"))
    all_mentions = corpus_mod.MentionCorpus()
    tally: dict[str, int] = {}
    for doc in docs:
        stripped = corpus_mod.strip_trailing_sections(doc, patterns)
        records, doc_tally = corpus_mod.extract_anchors(stripped, redirects, title_map)
        all_mentions.mentions.extend(records)
        all_mentions.provenance[doc.doc_id] = doc.page_entity
        for key, v in doc_tally.items():
            tally[key] = tally.get(key, 0) + v
    corpus_mod.save_mentions(all_mentions, cfg.path("mentions.jsonl"))
    cfg.path("extract_diagnostics.json").write_text(
        json.dumps({"dropped_anchors": tally, "mentions": len(all_mentions.mentions)},
                   sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _stage_split(cfg: PipelineConfig) -> None:
    docs = corpus_mod.load_documents(cfg.path("documents.jsonl"))
    provenance = {d.doc_id: d.page_entity for d in docs}
    mentions = corpus_mod.load_mentions(cfg.path("mentions.jsonl"), provenance)
    kb = kb_mod.load_kb(cfg.path("kb.filtered.jsonl"))
    held = {
        line.strip() for line in cfg.path("heldout_pages.txt").read_text(encoding="utf-8").splitlines()
        if line.strip()
    }
    linked, dropped = corpus_mod.drop_unlinked(mentions, kb)
    train, heldout = corpus_mod.split_holdout(linked, held)
    eval_sample = corpus_mod.sample_balanced_eval(
        heldout, int(cfg.profile["eval_per_lang"]), cfg.seed
    )
    corpus_mod.save_mentions(train, cfg.path("train.jsonl"))
    corpus_mod.save_mentions(heldout, cfg.path("heldout.jsonl"))
    corpus_mod.save_mentions(eval_sample, cfg.path("eval.jsonl"))
    _save_freq(corpus_mod.count_entity_frequencies(train), cfg.path("freq.json"))
    _save_stats(kb_mod.compute_lang_usage(train), cfg.path("lang_stats.json"))
    cfg.path("split_diagnostics.json").write_text(json.dumps({
        "dropped_unlinked": dropped,
        "train": len(train.mentions),
        "heldout": len(heldout.mentions),
        "eval": len(eval_sample.mentions),
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _stage_vocab(cfg: PipelineConfig) -> None:
    train = corpus_mod.load_mentions(cfg.path("train.jsonl"))
    kb = kb_mod.load_kb(cfg.path("kb.filtered.jsonl"))

    def texts():
        for m in train.mentions:
            yield m.title
            yield m.left
            yield m.span
            yield m.right
        for qid in kb.sorted_qids():
            for d in kb.entities[qid].descriptions:
                yield d.text

    vocab = train_vocab(texts(), int(cfg.profile["vocab_size"]))
    vocab.save(cfg.path("vocab.txt"))


def _load_common(cfg: PipelineConfig):
    kb = kb_mod.load_kb(cfg.path("kb.filtered.jsonl"))
    vocab = SubwordVocab.load(cfg.path("vocab.txt"))
    stats = _load_stats(cfg.path("lang_stats.json"))
    return kb, vocab, stats


def _stage_train(cfg: PipelineConfig) -> None:
    kb, vocab, stats = _load_common(cfg)
    train_corpus = corpus_mod.load_mentions(cfg.path("train.jsonl"))
    tcfg = cfg.train_config()
    mention_cfg = cfg.mention_config(len(vocab))
    entity_cfg = cfg.entity_config(len(vocab)) if cfg.entity_arch == "f" else None

    negatives_path = cfg.path("negatives.jsonl")
    phase1_path = cfg.path("de_phase1.npz")
    kind = f"dual_{cfg.entity_arch}"

    if cfg.mining and negatives_path.exists():
        if not phase1_path.exists():
            raise StageInputError("train", f"missing input: {phase1_path}")
        _, towers, configs, table, _ = load_checkpoint(phase1_path)
        init = training_mod.TrainArtifacts(
            mention_params=towers["mention"],
            entity_params=towers.get("entity"),
            table=table,
            losses=[],
        )
        mined = _load_negatives(negatives_path)
        artifacts = training_mod.train(
            tcfg, kb, train_corpus,
            mention_cfg=mention_cfg, entity_cfg=entity_cfg, vocab=vocab, stats=stats,
            entity_arch=cfg.entity_arch, use_aux=cfg.use_aux,
            negatives=mined, init=init, steps=tcfg.steps_phase2,
            log_path=cfg.path("train_log_phase2.tsv"),
        )
        _write_dual_checkpoint(cfg, kind, mention_cfg, entity_cfg, artifacts,
                               cfg.path("de_final.npz"))
        return

    artifacts = training_mod.train(
        tcfg, kb, train_corpus,
        mention_cfg=mention_cfg, entity_cfg=entity_cfg, vocab=vocab, stats=stats,
        entity_arch=cfg.entity_arch, use_aux=cfg.use_aux,
        log_path=cfg.path("train_log.tsv"),
    )
    _write_dual_checkpoint(cfg, kind, mention_cfg, entity_cfg, artifacts, phase1_path)
    if not cfg.mining:
        _write_dual_checkpoint(cfg, kind, mention_cfg, entity_cfg, artifacts,
                               cfg.path("de_final.npz"))


def _write_dual_checkpoint(cfg, kind, mention_cfg, entity_cfg, artifacts, path: Path) -> None:
    towers = {"mention": artifacts.mention_params}
    configs = {"mention": mention_cfg}
    if artifacts.entity_params is not None:
        towers["entity"] = artifacts.entity_params
        configs["entity"] = entity_cfg
    save_checkpoint(path, kind, towers, configs, table=artifacts.table,
                    extra={"seed": cfg.seed, "entity_arch": cfg.entity_arch})


def _entity_side_from_checkpoint(towers, table):
    return table if table is not None else towers["entity"]


def _stage_mine(cfg: PipelineConfig) -> None:
    kb, vocab, stats = _load_common(cfg)
    train_corpus = corpus_mod.load_mentions(cfg.path("train.jsonl"))
    _, towers, configs, table, _ = load_checkpoint(cfg.path("de_phase1.npz"))
    entity_side = _entity_side_from_checkpoint(towers, table)
    index = retrieval_mod.build_index(
        entity_side, kb, stats,
        vocab=vocab, cfg=configs.get("entity"), model_tag="phase1",
    )
    tcfg = cfg.train_config()
    mined = training_mod.mine_hard_negatives(
        towers["mention"], configs["mention"], vocab, train_corpus, index,
        cap_per_positive=tcfg.negatives_per_positive_cap,
        top_k_scan=int(cfg.profile["top_k_scan"]),
    )
    _save_negatives(mined, cfg.path("negatives.jsonl"))
    cfg.path("mining_tally.json").write_text(
        json.dumps(dict(sorted(mined.tally.items())), sort_keys=True, indent=2) + "\n",
        encoding="utf-8")


def _stage_index(cfg: PipelineConfig) -> None:
    kb, vocab, stats = _load_common(cfg)
    _, towers, configs, table, meta = load_checkpoint(cfg.path("de_final.npz"))
    entity_side = _entity_side_from_checkpoint(towers, table)
    index = retrieval_mod.build_index(
        entity_side, kb, stats,
        vocab=vocab, cfg=configs.get("entity"), model_tag=meta["tag"],
    )
    retrieval_mod.save_index(index, cfg.path("index.bin"))


def _encode_eval_queries(cfg, towers, configs, vocab, eval_corpus):
    mention_cfg = configs["mention"]
    seqs = [build_mention_input(vocab, m, mention_cfg.max_len) for m in eval_corpus.mentions]
    return encode_batch(towers["mention"], mention_cfg, seqs)


def _stage_eval(cfg: PipelineConfig) -> None:
    vocab = SubwordVocab.load(cfg.path("vocab.txt"))
    eval_corpus = corpus_mod.load_mentions(cfg.path("eval.jsonl"))
    freq = _load_freq(cfg.path("freq.json"))
    _, towers, configs, _, meta = load_checkpoint(cfg.path("de_final.npz"))
    index = retrieval_mod.load_index(cfg.path("index.bin"))
    queries = _encode_eval_queries(cfg, towers, configs, vocab, eval_corpus)
    k = int(cfg.profile["eval_k"])

    rows = []
    results = []
    for i, m in enumerate(eval_corpus.mentions):
        mention_id = f"m{i:06d}"
        candidates = retrieval_mod.search(index, queries[i], k)
        rank = eval_mod.rank_of_gold(candidates, m.gold_qid)
        results.append(eval_mod.EvalResult(
            mention_id=mention_id, lang=m.lang, gold_qid=m.gold_qid,
            bin_index=eval_mod.assign_bin(freq.count(m.gold_qid)), rank=rank,
        ))
        rows.append({
            "mention_id": mention_id, "lang": m.lang, "gold_qid": m.gold_qid,
            "rank": None if math.isinf(rank) else int(rank),
            "candidates": [[q, s] for q, s in candidates],
        })
    report = eval_mod.aggregate(results, freq=freq, model_tag=meta["tag"])
    eval_mod.emit_report(report, cfg.path("report"))
    with open(cfg.path("results.jsonl"), "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _stage_rerank_train(cfg: PipelineConfig) -> None:
    kb, vocab, stats = _load_common(cfg)
    train_corpus = corpus_mod.load_mentions(cfg.path("train.jsonl"))
    freq = _load_freq(cfg.path("freq.json"))
    _, towers, configs, _, _ = load_checkpoint(cfg.path("de_final.npz"))
    index = retrieval_mod.load_index(cfg.path("index.bin"))
    mention_cfg = configs["mention"]

    mention_limit = int(cfg.profile["ca_mention_limit"]) or None
    all_seqs = [build_mention_input(vocab, m, mention_cfg.max_len)
                for m in train_corpus.mentions]
    all_enc = encode_batch(towers["mention"], mention_cfg, all_seqs)
    enc_of = {id(m): all_enc[i] for i, m in enumerate(train_corpus.mentions)}

    def de_mention(m):
        return enc_of[id(m)]

    ca_cfg = cfg.ca_config(len(vocab))
    examples = rerank_mod.build_reranker_training_set(
        de_mention, index, train_corpus, cfg.seed,
        vocab=vocab, kb=kb, stats=stats, freq=freq, max_len=ca_cfg.max_len,
        mention_limit=mention_limit,
    )
    ca_params = rerank_mod.train_reranker(examples, ca_cfg, cfg.ca_train_config(),
                                          log_path=cfg.path("ca_log.tsv"),
                                          warm_start=towers["mention"])
    save_checkpoint(cfg.path("ca.npz"), "ca", {"ca": ca_params}, {"ca": ca_cfg},
                    extra={"seed": cfg.seed})


def _stage_rerank_eval(cfg: PipelineConfig) -> None:
    kb, vocab, stats = _load_common(cfg)
    eval_corpus = corpus_mod.load_mentions(cfg.path("eval.jsonl"))
    freq = _load_freq(cfg.path("freq.json"))
    _, towers, configs, _, meta = load_checkpoint(cfg.path("ca.npz"))
    ca_params = towers["ca"]
    ca_cfg = configs["ca"]

    results = []
    tsv_lines = ["mention_id\trank\tqid\tde_score\tca_prob\n"]
    with open(cfg.path("results.jsonl"), encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if len(rows) != len(eval_corpus.mentions):
        raise PipelineError("rerank-eval", "results.jsonl does not match eval.jsonl")
    for m, row in zip(eval_corpus.mentions, rows):
        candidates = [(q, float(s)) for q, s in row["candidates"]]
        de_scores = dict(candidates)
        if candidates:
            reranked = rerank_mod.rerank(
                ca_params, ca_cfg, candidates, m, kb, vocab=vocab, stats=stats,
            )
        else:
            reranked = []
        rank = eval_mod.rank_of_gold(reranked, m.gold_qid)
        results.append(eval_mod.EvalResult(
            mention_id=row["mention_id"], lang=m.lang, gold_qid=m.gold_qid,
            bin_index=eval_mod.assign_bin(freq.count(m.gold_qid)), rank=rank,
        ))
        for pos, (qid, score) in enumerate(reranked, start=1):
            ca_prob = f"{score!r}" if pos <= rerank_mod.RERANK_TOP_N else "NA"
            tsv_lines.append(
                f"{row['mention_id']}\t{pos}\t{qid}\t{de_scores[qid]!r}\t{ca_prob}\n"
            )
    report = eval_mod.aggregate(results, freq=freq, model_tag=meta["tag"])
    eval_mod.emit_report(report, cfg.path("report_ca"))
    cfg.path("reranked.tsv").write_text("".join(tsv_lines), encoding="utf-8")


# --- stage registry and runner ------------------------------------------------------

def _stage_io(cfg: PipelineConfig, stage: str) -> tuple[list[Path], list[Path]]:
    p = cfg.path
    base_train_inputs = [p("train.jsonl"), p("kb.filtered.jsonl"), p("vocab.txt"),
                         p("lang_stats.json")]
    table = {
        "kb-ingest": ([p("kb.jsonl")], [p("kb.filtered.jsonl")]),
        "extract": (
            [p("documents.jsonl"), p("redirects.tsv"), p("titles.tsv"),
             p("section_patterns.json")],
            [p("mentions.jsonl"), p("extract_diagnostics.json")],
        ),
        "split": (
            [p("mentions.jsonl"), p("documents.jsonl"), p("heldout_pages.txt"),
             p("kb.filtered.jsonl")],
            [p("train.jsonl"), p("heldout.jsonl"), p("eval.jsonl"), p("freq.json"),
             p("lang_stats.json"), p("split_diagnostics.json")],
        ),
        "vocab": ([p("train.jsonl"), p("kb.filtered.jsonl")], [p("vocab.txt")]),
        "mine": (
            base_train_inputs + [p("de_phase1.npz")],
            [p("negatives.jsonl"), p("mining_tally.json")],
        ),
        "index": (
            [p("de_final.npz"), p("kb.filtered.jsonl"), p("vocab.txt"), p("lang_stats.json")],
            [p("index.bin")],
        ),
        "eval": (
            [p("de_final.npz"), p("index.bin"), p("eval.jsonl"), p("freq.json"),
             p("vocab.txt")],
            [p("report.json"), p("report.txt"), p("results.jsonl")],
        ),
        "rerank-train": (
            base_train_inputs + [p("de_final.npz"), p("index.bin"), p("freq.json")],
            [p("ca.npz"), p("ca_log.tsv")],
        ),
        "rerank-eval": (
            [p("ca.npz"), p("results.jsonl"), p("eval.jsonl"), p("kb.filtered.jsonl"),
             p("vocab.txt"), p("freq.json"), p("lang_stats.json")],
            [p("report_ca.json"), p("report_ca.txt"), p("reranked.tsv")],
        ),
    }
    if stage == "train":
        inputs = list(base_train_inputs) + [p("freq.json")]
        if cfg.mining and p("negatives.jsonl").exists():
            inputs += [p("negatives.jsonl"), p("de_phase1.npz")]
            outputs = [p("de_final.npz"), p("train_log_phase2.tsv")]
        elif cfg.mining:
            outputs = [p("de_phase1.npz"), p("train_log.tsv")]
        else:
            outputs = [p("de_phase1.npz"), p("de_final.npz"), p("train_log.tsv")]
        return inputs, outputs
    if stage not in table:
        raise PipelineError(stage, f"unknown stage: {stage}")
    return table[stage]


_STAGE_BODIES = {
    "kb-ingest": _stage_kb_ingest,
    "extract": _stage_extract,
    "split": _stage_split,
    "vocab": _stage_vocab,
    "train": _stage_train,
    "mine": _stage_mine,
    "index": _stage_index,
    "eval": _stage_eval,
    "rerank-train": _stage_rerank_train,
    "rerank-eval": _stage_rerank_eval,
}


def run_stage(cfg: PipelineConfig, stage: str) -> dict:
    """Run one stage: check inputs, execute, record hashes in the manifest."""
    inputs, outputs = _stage_io(cfg, stage)
    for path in inputs:
        if not path.exists():
            raise StageInputError(stage, f"missing input: {path}")
    manifest = _load_manifest(cfg)
    recorded = manifest["stages"].get(stage)
    input_hashes = {str(path): _sha256(path) for path in inputs}
    if recorded is not None and recorded.get("inputs") != input_hashes:
        logger.warning("stale manifest for stage %s: inputs changed since last run", stage)

    logger.info("running stage %s", stage)
    _STAGE_BODIES[stage](cfg)

    output_hashes = {}
    for path in outputs:
        if not path.exists():
            raise PipelineError(stage, f"stage did not produce declared output: {path}")
        output_hashes[str(path)] = _sha256(path)
    manifest["stages"][stage] = {"inputs": input_hashes, "outputs": output_hashes}
    _save_manifest(cfg, manifest)
    return manifest["stages"][stage]


def pipeline_stages(cfg: PipelineConfig, include_rerank: bool = False) -> list[str]:
    stages = ["kb-ingest", "extract", "split", "vocab", "train"]
    if cfg.mining:
        stages += ["mine", "train"]
    stages += ["index", "eval"]
    if include_rerank:
        stages += ["rerank-train", "rerank-eval"]
    return stages


def run_pipeline(cfg: PipelineConfig, include_rerank: bool = False) -> dict:
    for stage in pipeline_stages(cfg, include_rerank):
        run_stage(cfg, stage)
    return json.loads(cfg.path("report.json").read_text(encoding="utf-8"))


# --- experiment helper ------------------------------------------------------------

# files a model variant can inherit from another run over the same world
DATA_ARTIFACTS = (
    "kb.jsonl", "documents.jsonl", "redirects.tsv", "titles.tsv",
    "heldout_pages.txt", "section_patterns.json", "synth_spec.json",
    "kb.filtered.jsonl", "mentions.jsonl", "extract_diagnostics.json",
    "train.jsonl", "heldout.jsonl", "eval.jsonl", "freq.json",
    "lang_stats.json", "split_diagnostics.json", "vocab.txt",
)


def run_experiment(
    workdir: str | Path,
    spec,
    *,
    profile_name: str = "desk",
    overrides: dict | None = None,
    entity_arch: str = "f",
    use_aux: bool = False,
    mining: bool = False,
    include_rerank: bool = False,
    seed: int = 0,
    reuse_data_from: str | Path | None = None,
) -> tuple[PipelineConfig, dict]:
    """Generate the synthetic corpus and run the full pipeline in `workdir`.

    `reuse_data_from` copies another run's data artifacts (same spec and
    seed) so only the model stages re-run; preprocessing is deterministic,
    so the copied files equal what a fresh run would produce.
    """
    import shutil

    from .synth import gen_synthetic

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    profile = load_profile(profile_name)
    if overrides:
        profile.update(overrides)
    cfg = PipelineConfig(workdir=workdir, profile=profile, profile_name=profile_name,
                         entity_arch=entity_arch, use_aux=use_aux, mining=mining,
                         seed=seed)
    if reuse_data_from is not None:
        source = Path(reuse_data_from)
        for name in DATA_ARTIFACTS:
            shutil.copyfile(source / name, workdir / name)
        stages = ["train"]
        if mining:
            stages += ["mine", "train"]
        stages += ["index", "eval"]
        if include_rerank:
            stages += ["rerank-train", "rerank-eval"]
        for stage in stages:
            run_stage(cfg, stage)
        report = json.loads(cfg.path("report.json").read_text(encoding="utf-8"))
        return cfg, report
    gen_synthetic(spec, workdir)
    report = run_pipeline(cfg, include_rerank=include_rerank)
    return cfg, report


# --- run comparison -------------------------------------------------------------

def compare_runs(report_a: dict, report_b: dict) -> dict:
    """Per-bin and aggregate metric differences (b minus a)."""
    if report_a["bin_edges"] != report_b["bin_edges"]:
        raise ValueError("reports use different bin edges")
    if report_a["query_set_id"] != report_b["query_set_id"]:
        raise ValueError("reports evaluate different query sets")
    ks = [k for k in report_a["ks"] if k in report_b["ks"]]
    rows = []
    for row_a, row_b in zip(report_a["bins"], report_b["bins"]):
        rows.append({
            "label": row_a["label"],
            **{f"r{k}": row_b[f"r{k}"] - row_a[f"r{k}"] for k in ks},
        })
    return {
        "bins": rows,
        "micro": {f"r{k}": report_b["micro"][f"r{k}"] - report_a["micro"][f"r{k}"] for k in ks},
        "macro": {f"r{k}": report_b["macro"][f"r{k}"] - report_a["macro"][f"r{k}"] for k in ks},
        "ks": ks,
    }


def format_delta_table(delta: dict) -> str:
    ks = delta["ks"]
    headers = ["bin"] + [f"dR@{k}" for k in ks]
    rows = [[row["label"]] + [f"{row[f'r{k}']:+.3f}" for k in ks] for row in delta["bins"]]
    rows.append(["micro-avg"] + [f"{delta['micro'][f'r{k}']:+.3f}" for k in ks])
    rows.append(["macro-avg"] + [f"{delta['macro'][f'r{k}']:+.3f}" for k in ks])
    widths = [max(len(headers[c]), *(len(r[c]) for r in rows)) for c in range(len(headers))]
    lines = ["  ".join(h.rjust(widths[c]) for c, h in enumerate(headers))]
    for r in rows:
        lines.append("  ".join(v.rjust(widths[c]) for c, v in enumerate(r)))
    return "\n".join(lines) + "\n"

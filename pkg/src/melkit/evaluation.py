"""Frequency-binned recall metrics and report emission.

Eval queries are partitioned by the training-set frequency of their gold
entity into half-open bins [0,1), [1,10), [10,100), [100,1k), [1k,10k),
[10k,+). Reports carry per-bin and per-language R@k, the micro average over
all queries, and the macro average over nonempty bins (empty bins are
excluded and flagged). A language-level macro is included alongside.
"""
from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .corpus import FrequencyTable

DEFAULT_KS = (1, 10, 100)


@dataclass(frozen=True)
class FrequencyBins:
    edges: tuple[int, ...] = (0, 1, 10, 100, 1000, 10000)

    def __post_init__(self) -> None:
        if not self.edges or self.edges[0] != 0:
            raise ValueError("first bin edge must be 0")
        if any(a >= b for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bin edges must be strictly increasing")

    def __len__(self) -> int:
        return len(self.edges)

    def label(self, index: int) -> str:
        lo = self.edges[index]
        if index + 1 < len(self.edges):
            return f"[{lo}, {self.edges[index + 1]})"
        return f"[{lo}, +)"


DEFAULT_BINS = FrequencyBins()


def assign_bin(count: int, bins: FrequencyBins = DEFAULT_BINS) -> int:
    """Index of the half-open frequency interval containing `count`."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    return bisect_right(bins.edges, count) - 1


class EvalResult(NamedTuple):
    mention_id: str
    lang: str
    gold_qid: str
    bin_index: int
    rank: float  # 1-based rank of the gold entity, or math.inf


def rank_of_gold(candidates: Sequence[tuple[str, float]], gold_qid: str) -> float:
    for i, (qid, _) in enumerate(candidates, start=1):
        if qid == gold_qid:
            return i
    return math.inf


def recall_at_k(results: Sequence[EvalResult], k: int) -> tuple[list[int], float]:
    """Per-query 0/1 hits at cutoff k and their mean."""
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = [1 if r.rank <= k else 0 for r in results]
    mean = sum(hits) / len(hits) if hits else 0.0
    return hits, mean


def query_set_id(results: Iterable[EvalResult]) -> str:
    joined = "\x00".join(sorted(r.mention_id for r in results))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    bins: list[dict]
    languages: list[dict]
    micro: dict
    macro: dict
    macro_by_language: dict
    empty_bins: list[str]
    query_set_id: str
    model_tag: str = ""
    ks: tuple[int, ...] = DEFAULT_KS
    bin_edges: tuple[int, ...] = DEFAULT_BINS.edges

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "languages": self.languages,
            "micro": self.micro,
            "macro": self.macro,
            "macro_by_language": self.macro_by_language,
            "empty_bins": self.empty_bins,
            "query_set_id": self.query_set_id,
            "model_tag": self.model_tag,
            "ks": list(self.ks),
            "bin_edges": list(self.bin_edges),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            bins=obj["bins"],
            languages=obj["languages"],
            micro=obj["micro"],
            macro=obj["macro"],
            macro_by_language=obj["macro_by_language"],
            empty_bins=obj["empty_bins"],
            query_set_id=obj["query_set_id"],
            model_tag=obj.get("model_tag", ""),
            ks=tuple(obj["ks"]),
            bin_edges=tuple(obj["bin_edges"]),
        )


def _rates_from_mask(hits_by_k: dict, mask, ks: Sequence[int]) -> dict:
    n = int(mask.sum())
    out = {"queries": n}
    for k in ks:
        out[f"r{k}"] = float(hits_by_k[k][mask].mean()) if n else 0.0
    return out


def aggregate(
    results: Sequence[EvalResult],
    bins: FrequencyBins = DEFAULT_BINS,
    freq: FrequencyTable | None = None,
    ks: Sequence[int] = DEFAULT_KS,
    model_tag: str = "",
) -> EvalReport:
    """Aggregate per-query results into the binned report.

    When `freq` is given, bin membership is recomputed from it; otherwise the
    bin indices stored on the results are used.
    """
    if not results:
        raise ValueError("cannot aggregate an empty result set")
    ranks = np.fromiter((r.rank for r in results), dtype=np.float64, count=len(results))
    if freq is not None:
        bin_cache: dict[str, int] = {}
        bin_idx = np.fromiter(
            (bin_cache.setdefault(r.gold_qid, assign_bin(freq.count(r.gold_qid), bins))
             for r in results),
            dtype=np.int64, count=len(results))
    else:
        bin_idx = np.fromiter((r.bin_index for r in results), dtype=np.int64,
                              count=len(results))
    lang_codes: dict[str, int] = {}
    lang_idx = np.fromiter((lang_codes.setdefault(r.lang, len(lang_codes))
                            for r in results), dtype=np.int64, count=len(results))
    hits_by_k = {k: ranks <= k for k in ks}
    everything = np.ones(len(results), dtype=bool)

    bin_rows = []
    empty = []
    for i in range(len(bins)):
        lo = bins.edges[i]
        hi = bins.edges[i + 1] if i + 1 < len(bins) else None
        row = {"lo": lo, "hi": hi, "label": bins.label(i)}
        row.update(_rates_from_mask(hits_by_k, bin_idx == i, ks))
        bin_rows.append(row)
        if row["queries"] == 0:
            empty.append(bins.label(i))

    lang_rows = []
    for lang in sorted(lang_codes):
        row = {"lang": lang}
        row.update(_rates_from_mask(hits_by_k, lang_idx == lang_codes[lang], ks))
        lang_rows.append(row)

    micro = _rates_from_mask(hits_by_k, everything, ks)
    nonempty = [row for row in bin_rows if row["queries"] > 0]
    macro = {f"r{k}": sum(row[f"r{k}"] for row in nonempty) / len(nonempty) for k in ks}
    macro_lang = {
        f"r{k}": sum(row[f"r{k}"] for row in lang_rows) / len(lang_rows) for k in ks
    }
    return EvalReport(
        bins=bin_rows,
        languages=lang_rows,
        micro=micro,
        macro=macro,
        macro_by_language=macro_lang,
        empty_bins=empty,
        query_set_id=query_set_id(results),
        model_tag=model_tag,
        ks=tuple(ks),
        bin_edges=bins.edges,
    )


def macro_micro_from_bins(values: Sequence[float], counts: Sequence[int]) -> tuple[float, float]:
    """Macro (unweighted) and micro (count-weighted) means of per-bin values."""
    if len(values) != len(counts) or not values:
        raise ValueError("values and counts must be nonempty and aligned")
    macro = sum(values) / len(values)
    total = sum(counts)
    micro = sum(v * c for v, c in zip(values, counts)) / total
    return macro, micro


def report_table(report: EvalReport) -> str:
    """Human-readable aligned table: one row per nonempty bin plus aggregates."""
    ks = report.ks[:2] if len(report.ks) >= 2 else report.ks
    headers = ["bin", "queries"] + [f"R@{k}" for k in ks]
    rows = []
    for row in report.bins:
        if row["queries"] == 0:
            continue
        rows.append([row["label"], str(row["queries"])] + [f"{row[f'r{k}']:.2f}" for k in ks])
    rows.append(["micro-avg", str(report.micro["queries"])]
                + [f"{report.micro[f'r{k}']:.2f}" for k in ks])
    rows.append(["macro-avg", ""] + [f"{report.macro[f'r{k}']:.2f}" for k in ks])
    widths = [max(len(headers[c]), *(len(r[c]) for r in rows)) for c in range(len(headers))]
    lines = ["  ".join(h.rjust(widths[c]) for c, h in enumerate(headers))]
    for r in rows:
        lines.append("  ".join(v.rjust(widths[c]) for c, v in enumerate(r)))
    if report.empty_bins:
        lines.append(f"empty bins excluded from macro-avg: {', '.join(report.empty_bins)}")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, base_path: str | Path) -> tuple[Path, Path]:
    """Write canonical JSON and the aligned table; byte-stable for equal input."""
    base = Path(base_path)
    json_path = base.with_suffix(".json")
    txt_path = base.with_suffix(".txt")
    json_path.write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    txt_path.write_text(report_table(report), encoding="utf-8")
    return json_path, txt_path


def results_from_ranks(
    ranked: Iterable[tuple[str, str, str, float]],
    freq: FrequencyTable,
    bins: FrequencyBins = DEFAULT_BINS,
) -> list[EvalResult]:
    """Build EvalResults from (mention_id, lang, gold_qid, rank) tuples."""
    return [
        EvalResult(
            mention_id=mid, lang=lang, gold_qid=gold,
            bin_index=assign_bin(freq.count(gold), bins), rank=rank,
        )
        for mid, lang, gold, rank in ranked
    ]

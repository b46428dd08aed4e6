import json
import math

import pytest
from hypothesis import given, strategies as st

from melkit.corpus import FrequencyTable
from melkit.evaluation import (
    DEFAULT_BINS,
    EvalReport,
    EvalResult,
    FrequencyBins,
    aggregate,
    assign_bin,
    emit_report,
    macro_micro_from_bins,
    rank_of_gold,
    recall_at_k,
    report_table,
    results_from_ranks,
)
from melkit.pipeline import compare_runs, format_delta_table

TABLE5_R1 = (0.08, 0.58, 0.80, 0.90, 0.93, 0.94)
TABLE5_COUNTS = (3198, 6564, 32371, 66232, 78519, 102203)


def result(mention_id="m0", lang="xx", gold="Q1", count=0, rank=1.0):
    return EvalResult(mention_id=mention_id, lang=lang, gold_qid=gold,
                      bin_index=assign_bin(count), rank=rank)


class TestAssignBin:
    @pytest.mark.parametrize("count,expected", [
        (0, 0), (1, 1), (9, 1), (10, 2), (99, 2), (100, 3),
        (999, 3), (1000, 4), (9999, 4), (10000, 5), (10 ** 7, 5),
    ])
    def test_boundaries(self, count, expected):
        assert assign_bin(count) == expected

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            assign_bin(-1)

    def test_custom_edges_validated(self):
        with pytest.raises(ValueError):
            FrequencyBins(edges=(1, 10))
        with pytest.raises(ValueError):
            FrequencyBins(edges=(0, 10, 10))

    def test_labels(self):
        assert DEFAULT_BINS.label(0) == "[0, 1)"
        assert DEFAULT_BINS.label(5) == "[10000, +)"


class TestRecallAtK:
    def test_rank1_k1(self):
        _, mean = recall_at_k([result(rank=1)], 1)
        assert mean == 1.0

    def test_inf_rank_always_miss(self):
        hits, mean = recall_at_k([result(rank=math.inf)], 100)
        assert hits == [0] and mean == 0.0

    def test_mean_counting(self):
        results = [result(mention_id=f"m{i}", rank=r)
                   for i, r in enumerate([1, 3, 200])]
        _, mean = recall_at_k(results, 100)
        assert mean == pytest.approx(2 / 3)

    def test_rank_of_gold(self):
        candidates = [("Q2", 0.9), ("Q1", 0.8), ("Q3", 0.7)]
        assert rank_of_gold(candidates, "Q1") == 2
        assert rank_of_gold(candidates, "QX") == math.inf

    @given(st.lists(st.one_of(st.integers(1, 300).map(float), st.just(math.inf)),
                    min_size=1, max_size=30))
    def test_monotone_in_k(self, ranks):
        results = [result(mention_id=f"m{i}", rank=r) for i, r in enumerate(ranks)]
        means = [recall_at_k(results, k)[1] for k in (1, 10, 100)]
        assert means[0] <= means[1] <= means[2]


def synth_results(bin_values, bin_counts, ks_hit_rank=1):
    """Construct per-query results realizing the given per-bin R@1 rates."""
    rep_counts = [0, 1, 10, 100, 1000, 10000]
    freq_counts = {}
    results = []
    mid = 0
    for b, (value, count) in enumerate(zip(bin_values, bin_counts)):
        hits = round(value * count)
        gold = f"B{b}"
        freq_counts[gold] = rep_counts[b]
        for j in range(count):
            rank = ks_hit_rank if j < hits else math.inf
            results.append(EvalResult(
                mention_id=f"m{mid:07d}", lang="xx", gold_qid=gold,
                bin_index=b, rank=rank))
            mid += 1
    freq = FrequencyTable(counts={q: c for q, c in freq_counts.items() if c > 0})
    return results, freq


class TestAggregate:
    def test_published_bin_values_reproduce_aggregates(self):
        results, freq = synth_results(TABLE5_R1, TABLE5_COUNTS)
        report = aggregate(results, freq=freq)
        assert report.macro["r1"] == pytest.approx(0.70, abs=0.01)
        assert report.micro["r1"] == pytest.approx(0.89, abs=0.01)

    def test_macro_micro_helper(self):
        macro, micro = macro_micro_from_bins(TABLE5_R1, TABLE5_COUNTS)
        assert macro == pytest.approx(0.705, abs=1e-9)
        assert micro == pytest.approx(0.8947, abs=1e-3)

    def test_constant_field(self):
        results, freq = synth_results([0.5] * 6, [10] * 6)
        report = aggregate(results, freq=freq)
        assert report.macro["r1"] == pytest.approx(0.5)
        assert report.micro["r1"] == pytest.approx(0.5)

    def test_micro_is_count_weighted_mean_of_bins(self):
        results, freq = synth_results([0.2, 0.4, 0.6, 0.8, 1.0, 0.0],
                                      [5, 10, 20, 40, 5, 3])
        report = aggregate(results, freq=freq)
        total = sum(row["queries"] for row in report.bins)
        weighted = sum(row["r1"] * row["queries"] for row in report.bins) / total
        assert report.micro["r1"] == pytest.approx(weighted, abs=1e-12)

    def test_empty_bins_excluded_and_flagged(self):
        results, freq = synth_results([0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
                                      [10, 0, 0, 0, 0, 0])
        report = aggregate(results, freq=freq)
        assert report.macro["r1"] == pytest.approx(0.5)
        assert len(report.empty_bins) == 5

    def test_duplication_changes_micro_not_macro(self):
        base, freq = synth_results([0.5, 1.0, 0.0, 0.0, 0.0, 0.0], [4, 4, 0, 0, 0, 0])
        dup = base + [EvalResult(f"x{i}", "xx", "B0", 0, 1.0) for i in range(8)]
        report_base = aggregate(base, freq=freq)
        report_dup = aggregate(dup, freq=freq)
        assert report_dup.micro["r1"] != pytest.approx(report_base.micro["r1"])
        # bin 0's value moved, so macro moves only through that bin's value
        expected_macro = (report_dup.bins[0]["r1"] + report_dup.bins[1]["r1"]) / 2
        assert report_dup.macro["r1"] == pytest.approx(expected_macro)

    def test_per_language_rows(self):
        results = [result(mention_id="a", lang="aa", rank=1),
                   result(mention_id="b", lang="bb", rank=math.inf)]
        report = aggregate(results, freq=FrequencyTable())
        assert [row["lang"] for row in report.languages] == ["aa", "bb"]
        assert report.macro_by_language["r1"] == pytest.approx(0.5)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            aggregate([], freq=FrequencyTable())


class TestEmitReport:
    def make_report(self):
        results, freq = synth_results([0.5, 1.0, 0.25, 0.0, 0.0, 0.0],
                                      [4, 4, 4, 0, 0, 0])
        return aggregate(results, freq=freq, model_tag="tag1")

    def test_json_roundtrip(self, tmp_path):
        report = self.make_report()
        json_path, _ = emit_report(report, tmp_path / "report")
        loaded = EvalReport.from_dict(json.loads(json_path.read_text()))
        assert loaded.to_dict() == report.to_dict()

    def test_table_row_count(self):
        report = self.make_report()
        table = report_table(report)
        lines = [l for l in table.splitlines() if l and not l.startswith("empty")]
        nonempty_bins = sum(1 for row in report.bins if row["queries"] > 0)
        assert len(lines) == 1 + nonempty_bins + 2  # header + bins + micro + macro

    def test_byte_identical_emissions(self, tmp_path):
        report = self.make_report()
        j1, t1 = emit_report(report, tmp_path / "a")
        j2, t2 = emit_report(report, tmp_path / "b")
        assert j1.read_bytes() == j2.read_bytes()
        assert t1.read_bytes() == t2.read_bytes()

    def test_results_from_ranks(self):
        freq = FrequencyTable(counts={"Q1": 50})
        results = results_from_ranks([("m0", "xx", "Q1", 3.0)], freq)
        assert results[0].bin_index == 2


class TestCompareRuns:
    def reports(self):
        results, freq = synth_results([0.5, 1.0, 0.25, 0.0, 0.0, 0.0],
                                      [4, 4, 4, 1, 1, 1])
        report_a = aggregate(results, freq=freq).to_dict()
        better = [EvalResult(r.mention_id, r.lang, r.gold_qid, r.bin_index, 1.0)
                  for r in results]
        report_b = aggregate(better, freq=freq).to_dict()
        return report_a, report_b

    def test_self_comparison_zero(self):
        report_a, _ = self.reports()
        delta = compare_runs(report_a, report_a)
        for row in delta["bins"]:
            assert row["r1"] == 0.0
        assert delta["micro"]["r1"] == 0.0 and delta["macro"]["r1"] == 0.0

    def test_delta_matches_independent_subtraction(self):
        report_a, report_b = self.reports()
        delta = compare_runs(report_a, report_b)
        for row, row_a, row_b in zip(delta["bins"], report_a["bins"], report_b["bins"]):
            assert row["r1"] == pytest.approx(row_b["r1"] - row_a["r1"], abs=1e-12)
        assert delta["micro"]["r1"] == pytest.approx(
            report_b["micro"]["r1"] - report_a["micro"]["r1"], abs=1e-12)

    def test_mismatched_query_sets_rejected(self):
        report_a, _ = self.reports()
        other = dict(report_a, query_set_id="deadbeef")
        with pytest.raises(ValueError, match="query sets"):
            compare_runs(report_a, other)

    def test_mismatched_edges_rejected(self):
        report_a, _ = self.reports()
        other = dict(report_a, bin_edges=[0, 1, 2])
        with pytest.raises(ValueError, match="bin edges"):
            compare_runs(report_a, other)

    def test_format_table(self):
        report_a, report_b = self.reports()
        text = format_delta_table(compare_runs(report_a, report_b))
        assert "micro-avg" in text and "macro-avg" in text

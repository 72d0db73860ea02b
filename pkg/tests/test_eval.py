import csv
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from lcflow.evaluation import (PAPER_TEST_SIZES, PairedOutcomes, binomial_upper_tail, chance_band, exact_match,
                               gen_full_lookup, gen_lookup_task, gen_shared_mcq_task, load_tasks, lookup_eval,
                               mcnemar_exact_p, mcq_eval, orf_accuracy, save_tasks, significance_marker, token_f1,
                               weighted_average, write_metrics_csv)
from lcflow.evaluation.harness import strip_answer
from lcflow.evaluation.latency import measure_ttft_tteoa
from lcflow.lcf import LcfAdapter, LcfConfig
from lcflow.toy_lm import LOOKUP_GEOMETRY, VOCAB, build_lookup_model


@pytest.fixture(scope="module")
def lookup_model():
    return build_lookup_model(0)


# ---------------------------------------------------------------- metrics


def test_exact_match_examples():
    assert exact_match("v3", "v3") == 1
    assert exact_match("V3", "v3") == 1
    assert exact_match("  v3 \t v4", "v3 v4") == 1
    assert exact_match(["v3", "v4"], ["v3", "v5"]) == 0
    assert exact_match([], []) == 1


def test_token_f1_examples():
    assert token_f1("a b", "b") == pytest.approx(2 / 3)
    assert token_f1("a b", "a b") == 1.0
    assert token_f1("a", "b") == 0.0
    assert token_f1("", "b") == 0.0
    assert token_f1("a a b", "a b b") == pytest.approx(2 / 3)


@given(st.lists(st.sampled_from("abcd"), max_size=6), st.lists(st.sampled_from("abcd"), max_size=6))
def test_token_f1_bounds(p, g):
    f = token_f1(p, g)
    assert 0.0 <= f <= 1.0
    assert (f == 1.0) == (bool(p) and sorted(p) == sorted(g))
    assert (f == 0.0) == (not set(p) & set(g))
    assert f == pytest.approx(token_f1(g, p))


def test_orf_examples():
    assert orf_accuracy(PairedOutcomes((1, 2, 3), (1, 0, 1), (0, 0, 1))) == pytest.approx(2 / 3)
    assert orf_accuracy(PairedOutcomes((1, 2), (0, 0), (0, 0))) == 0.0
    assert orf_accuracy(PairedOutcomes((1, 2), (0, 1), (1, 1))) == 1.0


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_orf_dominates_both_methods(pairs):
    o = PairedOutcomes(tuple(range(len(pairs))), tuple(a for a, _ in pairs), tuple(b for _, b in pairs))
    assert orf_accuracy(o) >= max(o.accuracy()) - 1e-12


def test_paired_outcomes_join_and_validation():
    o = PairedOutcomes.join({3: 1, 1: 0, 7: 1}, {1: 1, 3: 1, 9: 0})
    assert o.ids == (1, 3) and o.a == (0, 1) and o.b == (1, 1)
    assert o.discordant() == (0, 1)
    with pytest.raises(ValueError):
        PairedOutcomes((1, 1), (0, 1), (1, 1))
    with pytest.raises(ValueError):
        PairedOutcomes((1,), (0, 1), (1,))
    with pytest.raises(ValueError):
        PairedOutcomes((1,), (2,), (1,))


def test_weighted_average_examples():
    assert weighted_average([42.54, 54.00, 50.80, 19.57], PAPER_TEST_SIZES) == pytest.approx(29.13, abs=0.01)
    assert weighted_average([1, 2, 3], [5, 5, 5]) == pytest.approx(2.0)
    assert weighted_average([7.5], [3]) == 7.5
    with pytest.raises(ValueError):
        weighted_average([1, 2], [1, 0])
    with pytest.raises(ValueError):
        weighted_average([1, 2], [1])


@pytest.mark.parametrize("row, avg", [((34.91, 39.91, 39.20, 16.17), 23.64), ((45.17, 56.09, 52.60, 22.57), 31.94),
                                      ((47.53, 57.65, 51.80, 22.87), 32.88), ((48.90, 54.43, 55.40, 20.95), 31.99)])
def test_weighted_average_other_published_rows(row, avg):
    assert weighted_average(row, PAPER_TEST_SIZES) == pytest.approx(avg, abs=0.01)


# ------------------------------------------------------------------ stats


def test_mcnemar_examples():
    assert mcnemar_exact_p((5, 1)) == 0.109375
    assert mcnemar_exact_p((0, 0)) == 1.0
    assert mcnemar_exact_p((10, 0)) == pytest.approx(1 / 1024)
    o = PairedOutcomes(tuple(range(8)), (1, 1, 1, 1, 1, 0, 1, 0), (0, 0, 0, 0, 0, 1, 1, 0))
    assert mcnemar_exact_p(o) == 0.109375


def enumerated_tails(n):
    """Pr[#(A wins) >= b] over every 2^n assignment of the n discordant pairs."""
    wins = np.zeros(2 ** n, dtype=np.int64)
    codes = np.arange(2 ** n, dtype=np.int64)
    for bit in range(n):
        wins += (codes >> bit) & 1
    hist = np.bincount(wins, minlength=n + 1)
    tail = np.cumsum(hist[::-1])[::-1]
    return [Fraction(int(tail[b]), 2 ** n) for b in range(n + 1)]


def test_mcnemar_equals_exhaustive_enumeration():
    for n in range(0, 21):
        tails = enumerated_tails(n) if n else [Fraction(1)]
        for b in range(n + 1):
            assert binomial_upper_tail(n, b) == tails[b], (b, n - b)
            assert mcnemar_exact_p((b, n - b)) == float(tails[b])


@given(st.integers(0, 60), st.integers(0, 60))
def test_mcnemar_agrees_with_scipy(b, c):
    if b + c == 0:
        return
    ref = scipy.stats.binomtest(b, b + c, 0.5, alternative="greater").pvalue
    assert mcnemar_exact_p((b, c)) == pytest.approx(ref, rel=1e-9)


def test_significance_markers():
    assert [significance_marker(p) for p in (0.0005, 0.005, 0.03, 0.05, 0.2)] == ["***", "**", "*", "", ""]


def test_metrics_csv(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [{"method": "lcfx", "metric": "em", "value": 0.9, "n": 10}])
    with open(tmp_path / "m.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows == [{"method": "lcfx", "metric": "em", "value": "0.9", "n": "10", "p_value": ""}]


# ------------------------------------------------------------- generators


def test_lookup_generator_is_deterministic_and_round_trips(tmp_path):
    a, b = gen_lookup_task(50, seed=4), gen_lookup_task(50, seed=4)
    assert [x.to_record() for x in a] == [y.to_record() for y in b]
    assert [x.to_record() for x in a] != [y.to_record() for y in gen_lookup_task(50, seed=5)]
    save_tasks(tmp_path / "d.jsonl", a)
    assert [x.to_record() for x in load_tasks(tmp_path / "d.jsonl")] == [x.to_record() for x in a]
    first = (tmp_path / "d.jsonl").read_text()
    save_tasks(tmp_path / "d.jsonl", load_tasks(tmp_path / "d.jsonl"))
    assert (tmp_path / "d.jsonl").read_text() == first


def test_lookup_target_key_never_in_receiver_context():
    items = gen_lookup_task(2000, seed=0)
    for it in items:
        key = VOCAB.key(it.meta["target_key"])
        assert key not in it.receiver_context and key in it.sharer_context
        assert not set(it.receiver_context[1::3]) & set(it.sharer_context[1::3])
        s = it.sharer_context.index(key)
        assert [it.sharer_context[s + 1]] == it.gold
        assert it.question == [VOCAB["?"], key, VOCAB["="]]


def test_lookup_spans_are_one_per_pair_and_cover_the_prompt():
    it = gen_lookup_task(1, n_pairs=5, seed=0)[0]
    assert len(it.spans) == 5
    assert it.spans[0][0] == 0 and it.spans[-1][1] == len(it.sharer_prompt)
    assert all(b == a2 for (_, b), (a2, _) in zip(it.spans, it.spans[1:]))
    with pytest.raises(ValueError):
        gen_lookup_task(1, n_pairs=11, n_keys=20)
    with pytest.raises(ValueError):
        gen_lookup_task(1, n_values=17)


def test_mcq_generator():
    items = gen_shared_mcq_task(300, seed=2)
    assert [i.to_record() for i in items] == [i.to_record() for i in gen_shared_mcq_task(300, seed=2)]
    for it in items:
        assert it.sharer_context == it.receiver_context and len(it.choices) == 4
        d = int(VOCAB.tokens[it.sharer_context[it.sharer_context.index(VOCAB["#"]) + 1]])
        assert it.answer_index == d % 4 and it.gold == [it.choices[d % 4]]


def test_receiver_only_lookup_is_at_chance(lookup_model):
    items = gen_lookup_task(1000, seed=21)
    res = lookup_eval(lookup_model, lookup_model, None, items, "receiver", max_answer=2)
    lo, hi = chance_band(1 / 16, 1000)
    assert lo <= res.value <= hi and res.n == 1000


def test_receiver_only_mcq_is_at_chance(lookup_model):
    items = gen_shared_mcq_task(1000, seed=22)
    res = mcq_eval(lookup_model, lookup_model, None, items, "receiver")
    lo, hi = chance_band(0.25, 1000)
    assert lo <= res.value <= hi
    marked = build_lookup_model(0, mcq_head=True)
    assert mcq_eval(marked, marked, None, items[:200], "sharer").value == 1.0


def test_sharer_alone_answers_lookup(lookup_model):
    items = gen_lookup_task(200, seed=23)
    res = lookup_eval(lookup_model, lookup_model, None, items, "sharer", max_answer=2)
    assert res.value == 1.0 and res.f1 == 1.0
    assert all(p == items[q].gold for q, p in res.predictions.items())


def test_strip_answer_and_chance_band():
    assert strip_answer([5, 7, VOCAB.eos, 9]) == [5, 7]
    assert strip_answer([5]) == [5]
    lo, hi = chance_band(0.25, 100)
    assert (lo, hi) == pytest.approx((0.25 - 3 * np.sqrt(0.25 * 0.75 / 100), 0.25 + 3 * np.sqrt(0.25 * 0.75 / 100)))


# ---------------------------------------------------------------- latency


def test_latency_reports_and_degenerate_budget(lookup_model):
    items = gen_lookup_task(12, seed=3)
    adapter = LcfAdapter.init(LcfConfig.for_models(LOOKUP_GEOMETRY, LOOKUP_GEOMETRY, 16, pool=True), 0)
    t2t = measure_ttft_tteoa("t2t", items, lookup_model, lookup_model, budget=0, warmup=2)
    lcfx = measure_ttft_tteoa("lcfx", items, lookup_model, lookup_model, adapter, warmup=2)
    for r in (t2t, lcfx):
        assert r.n == 12 and len(r.ttft_samples) == 12
        assert 0 < r.ttft_ms <= r.tteoa_ms
    assert lcfx.budget is None and t2t.budget == 0
    with pytest.raises(ValueError):
        measure_ttft_tteoa("lcfx", items, lookup_model, lookup_model)
    with pytest.raises(ValueError):
        measure_ttft_tteoa("t2x", items, lookup_model, lookup_model)

import csv
import io
import json
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmevent.core import LABELS, EventLabel
from mmevent.errors import ContractError
from mmevent.evaluation import (Aggregate, MetricsReport, emit_report, merge, score,
                                write_predictions)
from oracles import brute_force_metrics

A, B = EventLabel.Flood, EventLabel.Fires
pairs_st = st.lists(st.tuples(st.one_of(st.none(), st.sampled_from(LABELS)), st.sampled_from(LABELS)),
                    min_size=1, max_size=80)


def _idx(pairs):
    return [(None if p is None else p.index, g.index) for p, g in pairs]


def test_perfect_predictions():
    rep = score([(lab, lab) for lab in LABELS for _ in range(3)])
    for avg in ("macro", "weighted"):
        a = rep.aggregate[avg]
        assert (a.precision, a.recall, a.f1) == (1.0, 1.0, 1.0)


def test_two_class_hand_example():
    rep = score([(A, A), (A, B), (B, A), (B, B)], averaging="macro")
    for lab in (A, B):
        m = rep.per_class[lab]
        assert (m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5)
    assert (rep.precision, rep.recall, rep.f1) == (0.5, 0.5, 0.5)


def test_empty_is_contract_error():
    with pytest.raises(ContractError):
        score([])


def test_abstention_counts_against_recall_only():
    rep = score([(None, A), (A, A)])
    assert rep.per_class[A].recall == 0.5
    assert rep.per_class[A].precision == 1.0
    assert rep.confusion.sum() == 1 and rep.abstained[A.index] == 1


def test_zero_division_is_zero():
    rep = score([(B, A)])
    assert rep.per_class[A].precision == 0.0 and rep.per_class[B].recall == 0.0
    assert rep.per_class[A].f1 == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_oracle(seed):
    rng = random.Random(seed)
    pairs = [(rng.choice(LABELS + (None,)), rng.choice(LABELS)) for _ in range(300)]
    per, macro, weighted, acc = brute_force_metrics(_idx(pairs))
    for avg, ref in (("macro", macro), ("weighted", weighted)):
        rep = score(pairs, averaging=avg)
        assert np.allclose([rep.precision, rep.recall, rep.f1], ref, atol=1e-9, rtol=0)
    for lab in LABELS:
        m = rep.per_class[lab]
        assert np.allclose([m.precision, m.recall, m.f1], per[lab.index][:3], atol=1e-9, rtol=0)
        assert m.support == per[lab.index][3]
    assert rep.accuracy == pytest.approx(acc, abs=1e-12)


@given(pairs_st)
def test_invariants(pairs):
    rep = score(pairs)
    assert np.array_equal(rep.confusion.sum(1) + rep.abstained,
                          [sum(1 for _, g in pairs if g is lab) for lab in LABELS])
    assert abs(rep.aggregate["weighted"].recall - rep.accuracy) <= 1e-12
    for m in rep.per_class.values():
        assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.f1 <= 1


@given(pairs_st, st.randoms(use_true_random=False))
def test_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert score(pairs).to_dict() == score(shuffled).to_dict()


@given(pairs_st, pairs_st)
def test_merge_equals_concatenation(a, b):
    assert merge(score(a), score(b)).to_dict() == score(a + b).to_dict()


def _fixed_report(p, r, f):
    agg = Aggregate(p, r, f)
    return MetricsReport({}, {"weighted": agg, "macro": agg}, np.zeros((6, 6), int))


def test_emit_markdown_reference_row():
    text = emit_report([("ModernBERT + ConvNeXt V2", _fixed_report(0.9452, 0.9467, 0.9459))])
    assert "| ModernBERT + ConvNeXt V2 | 0.9452 | 0.9467 | 0.9459 |" in text.splitlines()
    assert "| **Supervised Approaches** | | | |" in text


def test_emit_sections_and_order():
    reps = [("b", _fixed_report(0.1, 0.2, 0.3), "generative"),
            ("a", _fixed_report(0.4, 0.5, 0.6), "supervised"),
            ("", _fixed_report(0.7, 0.8, 0.9), "supervised")]
    lines = emit_report(reps).splitlines()
    names = [ln.split("|")[1].strip() for ln in lines[2:]]
    assert names == ["**Supervised Approaches**", "a", "(unnamed)", "**Generative Approaches**", "b"]


def test_emit_csv_round_trip():
    reps = {"m1": _fixed_report(0.12345, 0.5, 1.0), "m,2": _fixed_report(0.0, 0.25, 0.33335)}
    rows = list(csv.reader(io.StringIO(emit_report(reps, "csv"))))
    assert rows[0] == ["section", "model", "precision", "recall", "f1"]
    assert rows[1][1:] == ["m1", "0.1235", "0.5000", "1.0000"]
    assert rows[2][1] == "m,2" and float(rows[2][3]) == 0.25


def test_emit_errors():
    with pytest.raises(ContractError):
        emit_report([])
    with pytest.raises(ContractError):
        emit_report({"a": _fixed_report(0, 0, 0)}, "html")


def test_write_predictions(tmp_path):
    recs = [{"id": "a", "gold": "Flood", "predicted": None}, {"id": "b", "gold": "Fires"}]
    write_predictions(tmp_path / "p.jsonl", recs)
    lines = (tmp_path / "p.jsonl").read_text().splitlines()
    assert [json.loads(ln) for ln in lines] == recs

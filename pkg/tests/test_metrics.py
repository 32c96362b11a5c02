import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from padbench.metrics import (AggregateReport, Confusion, MetricsReport, acer_from_rates, aggregate_folds,
                              attack_mask, ccr_from_rates, confusion, evaluate, report, round_half_up,
                              threshold_at_fdr)


def brute_force(scores, is_attack, tau):
    tp = fn = tn = fp = 0
    for s, a in zip(scores, is_attack):
        if a:
            if s >= tau:
                tp += 1
            else:
                fn += 1
        else:
            if s >= tau:
                fp += 1
            else:
                tn += 1
    return tp, fn, tn, fp


def scan_threshold(scores, is_attack, target):
    """Exhaustive oracle: try every candidate in ascending order."""
    bona = [s for s, a in zip(scores, is_attack) if not a]
    candidates = sorted(set(scores)) + [math.nextafter(max(1.0, max(scores)), math.inf)]
    for tau in candidates:
        if sum(b >= tau for b in bona) / len(bona) <= target:
            return tau
    raise AssertionError("sentinel always qualifies")


def test_two_sample_example():
    c = confusion([0.9, 0.1], ["attack", "bona_fide"], 0.5)
    assert c == Confusion(tp_attack=1, fn_attack=0, tn_bona=1, fp_bona=0)


def test_score_at_threshold_is_attack():
    assert confusion([0.4], [True], 0.4).tp_attack == 1
    assert confusion([0.4], [False], 0.4).fp_bona == 1


def test_length_mismatch_and_bad_threshold():
    with pytest.raises(ValueError):
        confusion([0.1, 0.2], [True], 0.5)
    with pytest.raises(ValueError):
        confusion([0.1], [True], 1.5)


def test_label_forms():
    assert attack_mask(["bona_fide", "printout", "attack"]).tolist() == [False, True, True]
    assert attack_mask([0, 1]).tolist() == [False, True]
    assert attack_mask(np.array([], dtype=object)).tolist() == []


def test_report_fields_and_empty():
    r = report(Confusion(3, 1, 5, 1), threshold=0.5)
    assert (r.apcer, r.bpcer, r.acer) == (0.25, 1 / 6, (0.25 + 1 / 6) / 2)
    assert r.ccr == pytest.approx(0.8)
    with pytest.raises(ValueError):
        report(Confusion())


def test_absent_class_gives_none():
    r = report(Confusion(2, 0, 0, 0))
    assert r.bpcer is None and r.acer is None and r.ccr == 1.0
    assert r.percent("bpcer") == "--"


def test_all_correct():
    r = evaluate([1, 1, 0, 0], [1, 1, 0, 0], 0.5)
    assert (r.ccr, r.apcer, r.bpcer) == (1.0, 0.0, 0.0)


def test_published_acer_rows():
    # (APCER, BPCER) -> ACER, rounded to 2 dp
    assert str(round_half_up(acer_from_rates(12.08, 0.90))) == "6.49"
    from decimal import Decimal
    assert str(round_half_up(acer_from_rates(Decimal("5.82"), Decimal("8.25")))) == "7.04"


def test_report_dict_round_trip():
    r = evaluate([0.2, 0.7, 0.9], ["bona_fide", "printout", "bona_fide"], 0.5)
    assert MetricsReport.from_dict(r.to_dict()) == r


def test_aggregate_identical_folds_have_zero_std():
    r = evaluate([0.2, 0.7, 0.9], [0, 1, 0], 0.5)
    agg = aggregate_folds([r] * 5)
    assert all(agg.std[k] == 0 for k in agg.std)
    assert agg.n_folds == 5


def test_aggregate_two_folds_hand_arithmetic():
    a = report(Confusion(9, 1, 10, 0))  # APCER 10%
    b = report(Confusion(8, 2, 10, 0))  # APCER 20%
    agg = aggregate_folds([a, b])
    assert agg.mean["apcer"] == pytest.approx(0.15)
    assert agg.std["apcer"] == pytest.approx(0.0707106781, rel=1e-9)
    assert agg.cell("apcer") == "15.00% ± 7.07%"
    assert AggregateReport.from_dict(agg.to_dict()) == agg


def test_aggregate_single_fold_and_empty():
    agg = aggregate_folds([report(Confusion(1, 1, 1, 1))])
    assert agg.std["ccr"] == 0.0
    with pytest.raises(ValueError):
        aggregate_folds([])


def test_sentinel_when_target_zero():
    scores = [0.1, 0.2, 0.3, 0.9]
    tau = threshold_at_fdr(scores, ["bona_fide"] * 4, 0.0)
    assert tau > 1.0 and tau == math.nextafter(1.0, math.inf)
    assert all(s < tau for s in scores)
    # an attack score above every bona fide one is the smaller valid choice
    assert threshold_at_fdr(scores + [0.95], [0, 0, 0, 0, 1], 0.0) == 0.95


def test_all_zero_bona_fide_scores():
    scores = [0.0] * 10 + [0.7, 0.8]
    labels = [0] * 10 + [1, 1]
    tau = threshold_at_fdr(scores, labels, 0.002)
    assert tau == 0.7
    assert confusion(scores, labels, tau).fp_bona == 0


def test_threshold_requires_bona_fide():
    with pytest.raises(ValueError):
        threshold_at_fdr([0.5, 0.6], [1, 1], 0.01)


def test_threshold_on_10000_scores_is_minimal():
    rng = np.random.default_rng(0)
    labels = rng.random(10_000) < 0.5
    scores = np.round(np.clip(rng.normal(0.3 + 0.4 * labels, 0.15), 0, 1), 4)
    tau = threshold_at_fdr(scores, labels, 0.002)
    bona = scores[~labels]
    assert np.mean(bona >= tau) <= 0.002
    below = np.unique(scores)[np.unique(scores) < tau]
    assert below.size and np.mean(bona >= below[-1]) > 0.002


score_arrays = arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 1))


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_confusion_properties(data):
    scores = data.draw(score_arrays)
    labels = data.draw(arrays(np.bool_, scores.shape))
    tau = data.draw(st.floats(0, 1))
    c = confusion(scores, labels, tau)
    assert (c.tp_attack, c.fn_attack, c.tn_bona, c.fp_bona) == brute_force(scores, labels, tau)
    r = report(c, tau)
    if r.apcer is not None and r.bpcer is not None:
        exact = ccr_from_rates(Fraction(c.fn_attack, r.n_attack), Fraction(c.fp_bona, r.n_bona), r.n_attack,
                               r.n_bona)
        assert exact == Fraction(c.tp_attack + c.tn_bona, len(scores))
        assert r.ccr == float(exact)
        assert r.ccr == pytest.approx(ccr_from_rates(r.apcer, r.bpcer, r.n_attack, r.n_bona), abs=1e-15)
    tau2 = data.draw(st.floats(tau, 1))
    c2 = confusion(scores, labels, tau2)
    assert c2.fp_bona <= c.fp_bona
    assert c2.fn_attack >= c.fn_attack


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_threshold_matches_scan_oracle(data):
    scores = data.draw(arrays(np.float64, st.integers(2, 80),
                              elements=st.sampled_from(np.linspace(0, 1, 21).tolist())))
    labels = data.draw(arrays(np.bool_, scores.shape))
    if labels.all():
        labels[0] = False
    target = data.draw(st.sampled_from([0.0, 0.002, 0.05, 0.2, 0.5]))
    tau = threshold_at_fdr(scores, labels, target)
    assert tau == scan_threshold(scores.tolist(), labels.tolist(), target)

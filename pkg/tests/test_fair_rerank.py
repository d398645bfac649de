"""Tests for the statistical re-ranking core.

Oracles used here are independent of the implementation: a direct-summation
binomial CDF built on exact integer coefficients, brute-force enumeration of
all protected/non-protected sequences for failure probabilities, and Monte
Carlo sampling.
"""

import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairsearch.fair_rerank import (
    Candidate,
    FairnessParams,
    MTable,
    adjust_alpha,
    binomial_cdf,
    compute_fail_probability,
    construct_mtable,
    fair_rerank,
    is_fair,
    mtable_from_record,
    mtable_key,
    mtable_to_record,
    required_protected,
)

# -- oracles -------------------------------------------------------------


def cdf_oracle(tau, k, p):
    """Direct summation with exact binomial coefficients."""
    return sum(math.comb(k, j) * p**j * (1 - p) ** (k - j) for j in range(tau + 1))


def fail_oracle(entries, p):
    """Enumerate every length-k membership sequence."""
    total = 0.0
    k = len(entries)
    for seq in product((0, 1), repeat=k):
        prob = 1.0
        for x in seq:
            prob *= p if x else 1 - p
        count = 0
        for i, x in enumerate(seq):
            count += x
            if count < entries[i]:
                total += prob
                break
    return total


# -- binomial_cdf ---------------------------------------------------------


def test_cdf_full_support_is_one():
    assert binomial_cdf(12, 12, 0.5) == 1.0


def test_cdf_zero_successes():
    assert binomial_cdf(0, 12, 0.1) == pytest.approx(0.9**12, abs=1e-9)


def test_cdf_matches_enumeration():
    # 16 equally likely coin-flip outcomes, 5 of them have <= 1 success
    outcomes = [sum(seq) for seq in product((0, 1), repeat=4)]
    expected = sum(1 for t in outcomes if t <= 1) / 16
    assert binomial_cdf(1, 4, 0.5) == pytest.approx(expected, abs=1e-12)


def test_cdf_matches_direct_summation_oracle():
    for k in (1, 5, 17, 40):
        for p in (0.1, 0.5, 0.9):
            for tau in range(k + 1):
                assert binomial_cdf(tau, k, p) == pytest.approx(
                    cdf_oracle(tau, k, p), rel=1e-10, abs=1e-12
                )


def test_cdf_large_k_does_not_underflow():
    # (1-p)**k underflows here; the log-space path must still be sane
    value = binomial_cdf(5000, 10_000, 0.7)
    assert 0.0 < value < 1e-300 or value == 0.0 or 0.0 <= value <= 1.0
    mid = binomial_cdf(7000, 10_000, 0.7)
    assert 0.4 < mid < 0.6


def test_cdf_domain_errors():
    with pytest.raises(ValueError):
        binomial_cdf(5, 4, 0.5)
    with pytest.raises(ValueError):
        binomial_cdf(-1, 4, 0.5)
    with pytest.raises(ValueError):
        binomial_cdf(1, 4, 0.0)
    with pytest.raises(ValueError):
        binomial_cdf(1, 4, 1.0)
    with pytest.raises(ValueError):
        binomial_cdf(0, 0, 0.5)


# -- required_protected ----------------------------------------------------


@pytest.mark.parametrize(
    "i,p,alpha_c,expected",
    [
        (12, 0.1, 0.1, 0),
        (9, 0.5, 0.1, 3),
        (2, 0.7, 0.1, 1),
        (1, 0.7, 0.1, 0),
    ],
)
def test_required_protected_reference_values(i, p, alpha_c, expected):
    assert required_protected(i, p, alpha_c) == expected


def test_required_protected_matches_bruteforce_scan():
    for i in range(1, 26):
        for p in [x / 10 for x in range(1, 10)]:
            for alpha_c in (0.01, 0.05, 0.1, 0.15):
                tau = 0
                while cdf_oracle(tau, i, p) <= alpha_c:
                    tau += 1
                assert required_protected(i, p, alpha_c) == tau, (i, p, alpha_c)


def test_required_protected_bounds():
    assert required_protected(1, 0.9, 0.5) in (0, 1)
    with pytest.raises(ValueError):
        required_protected(0, 0.5, 0.1)
    with pytest.raises(ValueError):
        required_protected(3, 0.5, 1.0)


# -- compute_fail_probability -----------------------------------------------


def _mtable(entries, p, alpha=0.3, alpha_c=None):
    params = FairnessParams(len(entries), p, alpha)
    return MTable(params, alpha_c if alpha_c is not None else alpha, tuple(entries))


def test_fail_probability_all_zero_entries():
    assert compute_fail_probability(_mtable([0, 0, 0, 0], 0.5)) == 0.0


def test_fail_probability_single_binding_entry():
    assert compute_fail_probability(_mtable([1], 0.5)) == 0.5


def test_fail_probability_matches_enumeration():
    cases = [
        ([0, 0, 0, 1], 0.5),
        ([0, 1, 1, 2, 2], 0.7),
        ([0, 0, 0, 0, 0, 0, 1, 1, 1, 1], 0.3),
        ([1, 1, 2, 2, 3], 0.5),
    ]
    for entries, p in cases:
        got = compute_fail_probability(_mtable(entries, p))
        assert got == pytest.approx(fail_oracle(entries, p), abs=1e-12)


def test_fail_probability_monte_carlo_agreement():
    rng = np.random.default_rng(11)
    samples = 100_000
    for _ in range(5):
        k = int(rng.integers(2, 12))
        p = float(rng.uniform(0.2, 0.8))
        mtable = construct_mtable(FairnessParams(k, p, 0.1), adjust=False)
        exact = compute_fail_probability(mtable)
        draws = rng.random((samples, k)) < p
        counts = np.cumsum(draws, axis=1)
        fails = (counts < np.array(mtable.entries)).any(axis=1)
        estimate = fails.mean()
        se = math.sqrt(max(estimate * (1 - estimate), 1e-12) / samples)
        assert abs(exact - estimate) <= 4 * se + 1e-9


# -- adjust_alpha -------------------------------------------------------------


def test_adjust_alpha_single_position_needs_no_correction():
    assert adjust_alpha(FairnessParams(1, 0.5, 0.1)) == 0.1


def test_adjust_alpha_keeps_fail_probability_below_alpha():
    params = FairnessParams(10, 0.5, 0.1)
    alpha_c = adjust_alpha(params)
    assert 0.0 < alpha_c <= 0.1
    mtable = construct_mtable(params, adjust=True)
    assert mtable.alpha_c == alpha_c
    fail = compute_fail_probability(mtable)
    assert fail <= 0.1
    # maximality: this is the largest feasible step of the fail function
    unadjusted = construct_mtable(params, adjust=False)
    assert compute_fail_probability(unadjusted) > 0.1


def test_adjust_alpha_zero_constraint_row():
    params = FairnessParams(12, 0.1, 0.1)
    mtable = construct_mtable(params, adjust=True)
    assert mtable.entries == (0,) * 12
    assert compute_fail_probability(mtable) == 0.0


@pytest.mark.parametrize("k,p,alpha", [(10, 0.5, 0.1), (10, 0.3, 0.05), (20, 0.5, 0.1)])
def test_adjust_alpha_boundary_is_tight(k, p, alpha):
    params = FairnessParams(k, p, alpha)
    alpha_c = adjust_alpha(params)
    adjusted = construct_mtable(params, adjust=True)
    # the table at a level just past the boundary, built without adjustment
    bumped = construct_mtable(
        FairnessParams(k, p, alpha_c + 1e-6), adjust=False
    )
    if bumped.entries == adjusted.entries:
        return  # step-function degeneracy
    assert compute_fail_probability(bumped) > alpha


# -- construct_mtable ---------------------------------------------------------


TABLE_ALPHA_01 = {
    0.1: [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    0.3: [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2],
    0.5: [0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 3, 4],
    0.7: [0, 1, 1, 2, 2, 3, 3, 4, 5, 5, 6, 6],
}


@pytest.mark.parametrize("p", sorted(TABLE_ALPHA_01))
def test_reference_minimum_count_rows(p):
    mtable = construct_mtable(FairnessParams(12, p, 0.1), adjust=False)
    assert list(mtable.entries) == TABLE_ALPHA_01[p]


@settings(max_examples=150, deadline=None)
@given(
    k=st.integers(1, 40),
    p=st.floats(0.05, 0.95),
    alpha=st.floats(0.001, 0.45),
)
def test_mtable_structural_invariants(k, p, alpha):
    mtable = construct_mtable(FairnessParams(k, p, alpha), adjust=False)
    entries = mtable.entries
    assert entries[0] in (0, 1)
    for i in range(1, k):
        assert entries[i] - entries[i - 1] in (0, 1)
    for i in range(k):
        assert entries[i] <= i + 1
        assert entries[i] <= math.ceil(p * (i + 1)) + 1


def test_mtable_rejects_bad_shapes():
    params = FairnessParams(3, 0.5, 0.1)
    with pytest.raises(ValueError):
        MTable(params, 0.1, (0, 2, 2))  # step of 2
    with pytest.raises(ValueError):
        MTable(params, 0.1, (1, 0, 0))  # decreasing
    with pytest.raises(ValueError):
        MTable(params, 0.1, (0, 0))  # wrong length
    with pytest.raises(ValueError):
        MTable(params, 0.2, (0, 0, 0))  # alpha_c above alpha


# -- is_fair ------------------------------------------------------------------


def _ranking(pattern):
    return [
        Candidate(f"c{i}", float(len(pattern) - i), ch == "f")
        for i, ch in enumerate(pattern)
    ]


def test_is_fair_economist_scenario():
    ranking = _ranking("fmmmmmmmmm")
    ok, violation = is_fair(
        ranking, construct_mtable(FairnessParams(10, 0.3, 0.1), adjust=False)
    )
    assert ok and violation is None
    ok, violation = is_fair(
        ranking, construct_mtable(FairnessParams(10, 0.5, 0.1), adjust=False)
    )
    assert not ok
    assert violation == 7  # needs two protected in the top seven


def test_is_fair_all_protected():
    ranking = _ranking("ffffff")
    mtable = construct_mtable(FairnessParams(6, 0.7, 0.1), adjust=False)
    assert is_fair(ranking, mtable) == (True, None)


def test_is_fair_rejects_short_ranking():
    mtable = construct_mtable(FairnessParams(5, 0.5, 0.1), adjust=False)
    with pytest.raises(ValueError):
        is_fair(_ranking("fm"), mtable)


# -- fair_rerank ---------------------------------------------------------------


def test_fair_rerank_worked_example():
    candidates = [
        Candidate("m1", 0.9, False),
        Candidate("m2", 0.8, False),
        Candidate("m3", 0.7, False),
        Candidate("m4", 0.6, False),
        Candidate("f1", 0.5, True),
        Candidate("f2", 0.4, True),
    ]
    mtable = construct_mtable(FairnessParams(6, 0.5, 0.1), adjust=False)
    assert list(mtable.entries) == [0, 0, 0, 1, 1, 1]
    result = fair_rerank(candidates, mtable)
    assert [c.id for c in result.ranking] == ["m1", "m2", "m3", "f1", "m4", "f2"]
    assert result.satisfied
    assert result.violations == ()


def test_fair_rerank_no_constraint_is_score_order():
    candidates = [
        Candidate("a", 0.1, False),
        Candidate("b", 0.9, True),
        Candidate("c", 0.5, False),
    ]
    mtable = _mtable([0, 0, 0], 0.5)
    result = fair_rerank(candidates, mtable)
    assert [c.id for c in result.ranking] == ["b", "c", "a"]
    assert result.satisfied


def test_fair_rerank_all_protected_is_score_order():
    candidates = [Candidate(f"c{i}", float(i), True) for i in range(5)]
    mtable = construct_mtable(FairnessParams(5, 0.7, 0.1), adjust=False)
    result = fair_rerank(candidates, mtable)
    assert [c.id for c in result.ranking] == ["c4", "c3", "c2", "c1", "c0"]
    assert result.satisfied


def test_fair_rerank_records_violations_when_pool_exhausted():
    candidates = [Candidate(f"m{i}", 1.0 - i / 10, False) for i in range(6)]
    candidates.append(Candidate("f1", 0.01, True))
    mtable = _mtable([1, 1, 2, 2, 3, 3, 4], 0.7)
    result = fair_rerank(candidates, mtable)
    assert not result.satisfied
    assert result.violations  # pool of one protected cannot reach count 2
    assert result.ranking[0].id == "f1"
    assert len(result.ranking) == 7


def test_fair_rerank_truncates_to_k():
    candidates = [Candidate(f"c{i}", float(i), i % 2 == 0) for i in range(10)]
    mtable = construct_mtable(FairnessParams(4, 0.5, 0.1), adjust=False)
    result = fair_rerank(candidates, mtable)
    assert len(result.ranking) == 4


def test_fair_rerank_rejects_empty_and_duplicates():
    mtable = _mtable([0, 0], 0.5)
    with pytest.raises(ValueError):
        fair_rerank([], mtable)
    with pytest.raises(ValueError):
        fair_rerank(
            [Candidate("x", 1.0, True), Candidate("x", 0.5, False)], mtable
        )


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_fair_rerank_properties(data):
    n = data.draw(st.integers(1, 25))
    k = data.draw(st.integers(1, n))
    p = data.draw(st.floats(0.1, 0.9))
    alpha = data.draw(st.floats(0.01, 0.3))
    flags = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    scores = data.draw(
        st.lists(
            st.floats(-100, 100, allow_nan=False), min_size=n, max_size=n
        )
    )
    candidates = [
        Candidate(f"c{i:03d}", scores[i], flags[i]) for i in range(n)
    ]
    mtable = construct_mtable(FairnessParams(k, p, alpha), adjust=False)
    result = fair_rerank(candidates, mtable)

    # permutation of the top-min(k, n)
    assert len(result.ranking) == min(k, n)
    assert len({c.id for c in result.ranking}) == len(result.ranking)

    # within-group order preserved
    for group in (True, False):
        picked = [c for c in result.ranking if c.protected is group]
        keys = [(-c.score, c.id) for c in picked]
        assert keys == sorted(keys)

    # enough protected candidates means the constraint is met
    if sum(flags) >= mtable.entries[-1] and n >= k:
        assert result.satisfied
    if result.satisfied and n >= k:
        assert is_fair(result.ranking, mtable) == (True, None)
    assert result.satisfied == (len(result.violations) == 0)


# -- serialization --------------------------------------------------------------


def test_mtable_record_round_trip():
    mtable = construct_mtable(FairnessParams(8, 0.4, 0.1), adjust=True)
    record = mtable_to_record(mtable)
    assert set(record) == {"k", "p", "alpha", "alpha_c", "entries"}
    back = mtable_from_record(record)
    assert back == mtable


def test_mtable_key_rendering():
    assert mtable_key(10, 0.3, 0.1) == "10|0.3|0.1"
    assert mtable_key(7, 0.25, 0.05) == "7|0.25|0.05"

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adamhf.fusion import hazards_to_output
from adamhf.numerics import ContractError, Tensor, grad_check, precision
from adamhf.survival import (LossBreakdown, align_loss, c_index_harrell, c_index_paper, chi2_sf, gammaincc,
                             km_curve, log_rank, median_split, nll_loss)
from oracles import harrell_pairs, km_risk_sets, survival_datasets


def out_from(hazards):
    return hazards_to_output(Tensor(np.asarray(hazards, dtype=np.float64)))


# ---------------------------------------------------------------- losses


def test_censored_certain_survival_costs_nothing():
    assert nll_loss(out_from([0.0, 0.0, 0.0]), 2, 1).item() == pytest.approx(0.0, abs=1e-5)


def test_certain_event_costs_nothing():
    assert nll_loss(out_from([1.0, 0.2]), 1, 0).item() == pytest.approx(0.0, abs=1e-5)


def test_event_at_two_with_half_hazards():
    with precision(64):
        assert nll_loss(out_from([0.5, 0.5]), 2, 0).item() == pytest.approx(2 * math.log(2), abs=1e-9)


def test_nll_rejects_bad_inputs():
    out = out_from([0.3, 0.3])
    for t, c in ((0, 0), (3, 0), (1, 2)):
        with pytest.raises(ContractError):
            nll_loss(out, t, c)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=6), st.data())
def test_nll_non_negative(h, data):
    t = data.draw(st.integers(1, len(h)))
    c = data.draw(st.integers(0, 1))
    with precision(64):
        assert nll_loss(out_from(h), t, c).item() >= 0.0


@pytest.mark.parametrize("t, c", [(1, 0), (2, 0), (4, 0), (1, 1), (3, 1), (4, 1)])
def test_nll_gradient(t, c, f64):
    h = Tensor(np.random.default_rng(t + 10 * c).uniform(0.05, 0.95, size=4), requires_grad=True)
    reports = grad_check(lambda: nll_loss(hazards_to_output(h), t, c), {"h": h}, tol=1e-4)
    assert reports[0].passed


def test_align_loss_examples():
    x = Tensor([1.0, -2.0, 0.5])
    assert align_loss(x, x).item() == 0.0
    assert align_loss(x, x + 1.0).item() == pytest.approx(1.0)
    assert align_loss(Tensor([1.0, -1.0]), Tensor([0.0, 0.0])).item() == 1.0
    with pytest.raises(ContractError):
        align_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_loss_breakdown_total():
    b = LossBreakdown(1.5, 0.25, 0.1)
    assert b.total == 1.5 + 0.1 * 0.25


# ---------------------------------------------------------------- concordance


def test_time_c_index_examples():
    assert c_index_paper([1.0, 2.0, 3.0], [1, 1, 1]) == 0.0
    assert c_index_paper([1.0, 2.0], [0, 0]) == 0.5
    assert c_index_paper([2.0, 2.0, 2.0], [0, 0, 0]) == 0.0
    with pytest.raises(ContractError):
        c_index_paper([1.0], [0])


def test_time_c_index_by_enumeration():
    T = [0.3, 1.2, 0.7, 2.0]
    c = [0, 1, 0, 0]
    n = len(T)
    manual = sum(T[i] < T[j] and c[j] == 0 for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    assert c_index_paper(T, c) == pytest.approx(manual)


# values on a 0.1 grid so the transforms stay strictly increasing in floating point
@given(st.lists(st.integers(-50, 50), min_size=2, max_size=12), st.data())
def test_time_c_index_monotone_invariance(T, data):
    c = data.draw(st.lists(st.integers(0, 1), min_size=len(T), max_size=len(T)))
    T = np.array(T) / 10.0
    assert c_index_paper(np.exp(T), c) == c_index_paper(T, c)
    assert c_index_paper(3 * T + 7, c) == c_index_paper(T, c)


def test_harrell_examples():
    assert c_index_harrell([4, 3, 2, 1], [1, 2, 3, 4], [0, 0, 0, 0]) == 1.0
    assert c_index_harrell([2, 1], [1, 2], [0, 1]) == 1.0
    assert c_index_harrell([1, 2], [1, 2], [1, 1]) is None


def test_harrell_random_risks_near_half():
    g = np.random.default_rng(0)
    t = g.integers(1, 5, size=1000)
    c = (g.random(1000) < 0.3).astype(int)
    assert abs(c_index_harrell(g.random(1000), t, c) - 0.5) <= 0.05


def test_harrell_exhaustive_small_datasets():
    records = list(itertools.product((1, 2, 3), (0, 1), (0, 1, 2)))
    checked = 0
    for n in range(1, 7):
        for data in itertools.combinations_with_replacement(records, n):
            t, c, r = zip(*data)
            expected = harrell_pairs(r, t, c)
            got = c_index_harrell(r, t, c)
            assert got == expected, data
            checked += 1
    assert checked == 134595


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 1), st.integers(-30, 30)), min_size=2, max_size=20))
def test_harrell_monotone_invariance(rows):
    t, c, r = map(np.array, zip(*rows))
    r = r / 10.0
    base = c_index_harrell(r, t, c)
    assert c_index_harrell(np.exp(r), t, c) == base
    assert c_index_harrell(2.5 * r - 1, t, c) == base


# ---------------------------------------------------------------- Kaplan-Meier


def test_km_examples():
    assert km_curve([1, 2, 3], [0, 0, 0]).survival == pytest.approx([2 / 3, 1 / 3, 0.0])
    assert km_curve([1, 2, 2], [1, 1, 1]).survival == [1.0, 1.0]
    assert km_curve([1], [0]).survival == [0.0]
    with pytest.raises(ContractError):
        km_curve([], [])


def test_km_exhaustive_against_risk_sets():
    count = 0
    for data in survival_datasets(6, (1, 2, 3)):
        t, c = zip(*data)
        curve = km_curve(t, c)
        times, at_risk, surv = km_risk_sets(t, c)
        assert curve.event_times == times
        assert curve.at_risk == at_risk
        assert curve.survival == surv  # same arithmetic order, exact equality
        assert all(b <= a for a, b in zip([1.0] + surv, surv))
        count += 1
    assert count == 923


# ---------------------------------------------------------------- log-rank


def test_identical_groups():
    res = log_rank([1, 2, 2, 3], [0, 0, 1, 0], [1, 2, 2, 3], [0, 0, 1, 0])
    assert res.chi_square == 0.0 and res.p_value == 1.0


def test_chi_square_quantile():
    assert chi2_sf(3.841458820694124) == pytest.approx(0.05, abs=1e-9)


def test_separated_groups_significant():
    res = log_rank([1] * 20, [0] * 20, [4] * 20, [0] * 20)
    assert res.p_value < 0.01


def test_log_rank_undefined_without_events():
    assert log_rank([1, 2], [1, 1], [2, 3], [1, 1]) is None


def test_log_rank_matches_reference_formula():
    from scipy.stats import chi2

    g = np.random.default_rng(1)
    ta, tb = g.integers(1, 5, 15), g.integers(1, 5, 12)
    ca, cb = (g.random(15) < 0.3).astype(int), (g.random(12) < 0.3).astype(int)
    res = log_rank(ta, ca, tb, cb)
    t, c = np.concatenate([ta, tb]), np.concatenate([ca, cb])
    grp = np.r_[np.zeros(15), np.ones(12)]
    O = E = V = 0.0
    for u in np.unique(t[c == 0]):
        at = t >= u
        n, na = at.sum(), (at & (grp == 0)).sum()
        d = ((t == u) & (c == 0)).sum()
        O += ((t == u) & (c == 0) & (grp == 0)).sum()
        E += d * na / n
        V += d * (na / n) * (1 - na / n) * (n - d) / max(n - 1, 1)
    assert res.chi_square == pytest.approx((O - E) ** 2 / V)
    assert res.p_value == pytest.approx(chi2.sf(res.chi_square, 1), rel=1e-8)


@pytest.mark.parametrize("a", [0.5, 1.0, 2.5, 7.0, 20.0])
def test_gammaincc_against_scipy(a):
    from scipy.special import gammaincc as ref

    for x in np.linspace(0, 40, 161):
        assert gammaincc(a, float(x)) == pytest.approx(ref(a, x), abs=1e-8)


def test_median_split():
    assert list(median_split([1, 2, 3, 4])) == [False, False, True, True]

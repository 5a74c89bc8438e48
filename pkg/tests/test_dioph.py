import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxlab import criteria as cr
from boxlab import dioph as dp
from boxlab.errors import BudgetExceeded, PrecisionExhausted

fractions = st.fractions(min_value=Fraction(-50), max_value=Fraction(50), max_denominator=10 ** 6)


def exhaustive_best(x, Qmax):
    best = None
    for q in range(1, Qmax + 1):
        r = round(x * q)
        for rr in (r - 1, r, r + 1):
            err = abs(x - Fraction(rr, q))
            if best is None or err < best[0]:
                best = (err, rr, q)
    return best[1], best[2]


def test_golden_ratio_quotients_and_fibonacci():
    cf = dp.continued_fraction(dp.golden_ratio(), 30)
    assert cf.quotients == [1] * 30
    fib = [1, 1]
    while len(fib) < 32:
        fib.append(fib[-1] + fib[-2])
    assert cf.convergents == [(fib[k + 1], fib[k]) for k in range(30)]


def test_one_third_terminates():
    cf = dp.continued_fraction(Fraction(1, 3))
    assert cf.quotients == [0, 3] and cf.convergents[-1] == (1, 3) and cf.terminated


def test_pi_convergents():
    cf = dp.continued_fraction(math.pi, 5, strict=False)
    assert cf.quotients == [3, 7, 15, 1, 292]
    assert cf.convergents[3] == (355, 113)
    assert (dp.best_approx(math.pi, 200).r, dp.best_approx(math.pi, 200).q) == (355, 113)


def test_golden_best_approx():
    a = dp.best_approx(dp.golden_ratio(), 100)
    assert (a.r, a.q) == (144, 89)


def test_cube_root_best_approx_against_exhaustive_search():
    x = dp.pow_rational(2, 2, 3)
    for Qmax in (1, 2, 7, 50, 333, 1000):
        a = dp.best_approx(x, Qmax)
        assert (a.r, a.q) == exhaustive_best(x.mid, Qmax)


@given(fractions)
def test_continued_fraction_reconstructs_rationals(x):
    cf = dp.continued_fraction(x)
    assert cf.terminated and Fraction(*cf.convergents[-1]) == x


@given(fractions, st.integers(1, 300))
@settings(max_examples=60)
def test_best_approx_matches_exhaustive(x, Qmax):
    # ties between two neighbours go to the smaller denominator
    a = dp.best_approx(x, Qmax)
    r, q = exhaustive_best(x, Qmax)
    assert abs(x - Fraction(a.r, a.q)) == abs(x - Fraction(r, q))
    assert a.q <= q


@given(fractions)
def test_convergents_satisfy_legendre_bound(x):
    for p, q in dp.continued_fraction(x).convergents:
        assert abs(x - Fraction(p, q)) <= Fraction(1, q * q)


def test_rational_flag():
    assert dp.kappa_estimate(Fraction(7, 5), 100) is dp.RATIONAL


def test_quadratic_surds_have_exponent_near_one():
    assert dp.kappa_estimate(dp.golden_ratio(), 10 ** 6) == pytest.approx(1.0, abs=0.02)
    assert dp.kappa_estimate(dp.algebraic([-2, 0, 1], Fraction(1.4142)), 10 ** 6) == pytest.approx(1.0, abs=0.02)


def test_imprecise_input_is_refused():
    with pytest.raises(PrecisionExhausted):
        dp.continued_fraction(dp.RealInterval(Fraction(14, 10), Fraction(15, 10)), 10)


def test_cset_matches_bruteforce():
    p = dp.CSetParams(3.0, 0.5, 10.0, 4.0, 4.0, 1.3, 1.7)
    res = dp.enumerate_cset(p)
    ref = cr.cset_bruteforce(p)
    assert np.array_equal(res.members, ref) and res.count == len(ref)


def test_cset_symmetric_when_factors_agree():
    p = dp.CSetParams(3.0, 0.5, 10.0, 4.0, 4.0, 1.3, 1.3)
    mem = dp.enumerate_cset(p).members
    a = set(map(tuple, mem.tolist()))
    assert a == {(c2, d2, c1, d1) for c1, d1, c2, d2 in a}
    assert all((c, d, c, d) in a for c, d in {(r[0], r[1]) for r in a})


def test_cset_members_respect_gap_and_ranges():
    p = dp.CSetParams(2.0, 1.0, 5.0, 3.0, 2.0, 1.1, 2.3)
    mem = dp.enumerate_cset(p).members
    c1, d1, c2, d2 = mem.T
    assert np.all(dp.cset_gap(c1, d1, c2, d2, p.x1, p.x2) <= p.width)
    assert np.all((np.abs(c1) >= 3) & (np.abs(c1) < 6) & (np.abs(c2) >= 2) & (np.abs(c2) < 4))
    assert np.all(np.gcd(c1, d1) == 1) and np.all(np.abs(d2) <= 2 * p.x2 * p.L * p.C2)


def test_cset_parameter_checks():
    with pytest.raises(ValueError):
        dp.CSetParams(1.0, 1.0, 1.0, 0.5, 2.0, 1.0, 1.0)
    with pytest.raises(BudgetExceeded):
        dp.enumerate_cset(dp.CSetParams(3.0, 0.5, 50.0, 10.0, 10.0, 1.3, 1.7), budget=100)


def test_gap_floor_is_a_lower_bound():
    # for X = 2^{-2/3} every gap in the parameter box sits above the Diophantine floor,
    # so a window just below the floor is empty
    X = dp.pow_rational(2, -2, 3)
    kappa = 1.0
    wide = dp.CSetParams(4.0, 0.01 * math.exp(8.0), 10.0, 3.0, 3.0, 1.0, float(X))
    const = dp.diophantine_constant(X, kappa, 10 ** 6)
    floor = dp.cset_gap_floor(wide, kappa, const)
    mem = dp.enumerate_cset(wide).members
    assert floor > 0 and len(mem) > 0
    assert dp.cset_gap(*mem.T, wide.x1, wide.x2).min() >= floor
    tight = dp.CSetParams(4.0, 0.9 * floor * math.exp(8.0), 10.0, 3.0, 3.0, 1.0, float(X))
    assert dp.enumerate_cset(tight).count == 0

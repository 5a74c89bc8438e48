import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxlab import boxspec as bs
from boxlab import qcount as qc
from boxlab.errors import DimensionMismatch
from boxlab.thetaeng import AxisFn, TestFunction

DIO = bs.BoxShape([1.0, 2 ** (1 / 3), 2 ** (-1 / 3)])
ints = st.integers(-20, 20)


def spec(M, L=1.0, F=None, **kw):
    return qc.CountSpec(DIO, M, L, qc.separable_gaussian(DIO) if F is None else F, qc.gaussian_psi(), **kw)


def odd_in_first_axis():
    x = DIO.coeffs
    axes = [AxisFn([0.0, 1.0], x[0] / math.pi, 0.0)]
    axes += [AxisFn([1.0], xj / math.pi, 0.0) for xj in x[1:]] + [AxisFn([1.0], xj / math.pi, 0.0) for xj in x]
    return TestFunction([(1.0, axes)], 6)


def test_eval_Q_examples():
    x = DIO.coeffs
    assert qc.eval_Q(DIO, [1, 0, 0, 0, 0, 0]) == x[0]
    assert qc.eval_Q(DIO, [0, 0, 0, 0, 1, 0]) == -x[1]
    assert qc.eval_Q(DIO, [1, 2, 3, 1, 2, 3]) == 0.0


@given(st.lists(ints, min_size=6, max_size=6))
def test_eval_Q_antisymmetric_and_sign_blind(m):
    q = qc.eval_Q(DIO, m)
    assert qc.eval_Q(DIO, m[3:] + m[:3]) == -q
    assert qc.eval_Q(DIO, [-v for v in m]) == q


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        qc.CountSpec(DIO, 2, 1.0, TestFunction.gaussian(3), qc.gaussian_psi())
    with pytest.raises(ValueError):
        spec(0.5)


def test_zero_function_counts_zero():
    assert qc.count_direct(spec(4, F=TestFunction.zero(6))) == 0.0


def test_matches_bruteforce_oracle():
    # radius 7 at M = 2 leaves a tail below exp(-50)
    s = spec(2)
    ref = qc.count_bruteforce(s, 7)
    assert abs(qc.count_direct(s) - ref) <= 1e-8 * abs(ref)


@pytest.mark.parametrize("M,L", [(2, 1.0), (3, 2.0), (4, 1.0)])
def test_fast_and_generic_paths_agree(M, L):
    s = spec(M, L)
    assert qc.count_direct(s) == pytest.approx(qc.count_direct(s, method="generic"), rel=1e-12)


def test_frozen_counts():
    # frozen from the fast path; M = 2 agrees with the brute-force oracle above
    assert qc.count_direct(spec(2)) == pytest.approx(1.2194862417446126, rel=1e-12)
    assert qc.count_direct(spec(4)) == pytest.approx(12.842645105830618, rel=1e-12)


@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
@settings(max_examples=10, deadline=None)
def test_count_is_linear_in_F(c):
    s = spec(4)
    assert qc.count_direct(s.with_(F=s.F.scale(c))) == pytest.approx(c * 12.842645105830618, rel=1e-12)


def test_odd_function_has_no_diagonal_and_no_count():
    s = spec(4, F=odd_in_first_axis())
    assert qc.diagonal_term(s) == 0.0
    assert qc.count_direct(s) == 0.0
    assert abs(qc.count_direct(s.with_(M=2), method="generic")) < 1e-15


@pytest.mark.parametrize("M,L", [(8, 2.0), (16, 3.0)])
def test_separable_closed_forms(M, L):
    # F = exp(-Q0(u1)) exp(-Q0(u2)): int e^{-2 lam} lam = 1/4, int e^{-2 lam} lam^{1/2} = sqrt(pi) / 2^{5/2}
    s = spec(M, L)
    mt = qc.main_term_separable(DIO, M, L, s.psi.integral(), 0.25)
    dt = qc.diagonal_term_separable(DIO, M, 1.0, math.sqrt(math.pi) / 2 ** 2.5)
    assert qc.main_term(s) == pytest.approx(mt, rel=1e-10)
    assert qc.diagonal_term(s) == pytest.approx(dt, rel=1e-12)


def test_main_and_diagonal_scaling():
    a, b = spec(8, 2.0), spec(16, 6.0)
    assert qc.main_term(b) / qc.main_term(a) == pytest.approx(2 ** 4 / 3, rel=1e-10)
    assert qc.diagonal_term(b) / qc.diagonal_term(a) == pytest.approx(2 ** 3, rel=1e-14)


def test_report_roundtrip(tmp_path):
    r = qc.asymptotic_report(spec(4))
    back = qc.AsymptoticReport.from_json(r.to_json())
    assert back.residual == r.residual and back.ratio == r.ratio
    qc.reports_to_csv([r], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().startswith("M,L,direct")

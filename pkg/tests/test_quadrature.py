import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from boxlab import quadrature as qd
from boxlab.errors import QuadratureFailure


def test_rule_integrates_polynomials_exactly():
    # 16 points integrate degree 31 exactly
    vals = qd.composite(lambda x: x ** 31 + 3 * x ** 30, np.array([0.0, 1.0]))
    assert vals.sum() == pytest.approx(1 / 32 + 3 / 31, rel=1e-14)


def test_composite_panels_sum_to_integral():
    edges = np.linspace(0, math.pi, 9)
    vals = qd.composite(np.sin, edges)
    assert vals.size == 8 and qd.ordered_sum(vals) == pytest.approx(2.0, rel=1e-15)


def test_ordered_sum_compensates():
    assert qd.ordered_sum(np.array([1e16, 1.0, -1e16])) == 1.0
    assert qd.ordered_sum(np.array([1e16 + 1j, 1.0, -1e16])) == 1.0 + 1j


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
def test_ordered_sum_is_exact_rounding(xs):
    assert qd.ordered_sum(np.array(xs)) == math.fsum(xs)


def test_seeded_edges_contain_seeds_and_breaks():
    e = qd.seeded_edges(0.0, 1.0, seeds=[0.3], min_depth_width=1e-6, seed_halo=1e-3, breaks=[0.7])
    assert 0.3 in e and 0.7 in e and e[0] == 0.0 and e[-1] == 1.0
    assert np.min(np.diff(e)) == pytest.approx(1e-6)
    assert np.all(np.diff(qd.seeded_edges(0.0, 1.0, max_width=0.01)) <= 0.01 + 1e-15)


def test_adaptive_resolves_a_narrow_spike():
    w = 1e-6
    f = lambda x: w / ((x - 0.37) ** 2 + w * w)
    exact = math.atan(0.63 / w) + math.atan(0.37 / w)
    res = qd.adaptive(f, 0.0, 1.0, seeds=[0.37], tol=1e-10, min_depth_width=w, seed_halo=1e-3)
    assert res.value == pytest.approx(exact, rel=1e-9)
    assert res.recompute() == res.value and res.panels == res.panel_values.size


def test_adaptive_failure_reports_panels():
    with pytest.raises(QuadratureFailure) as exc:
        qd.adaptive(lambda x: np.sign(x - 0.3) * np.abs(x - 0.3) ** -0.9, 0.0, 1.0, tol=1e-14, max_panels=200)
    assert "unresolved" in exc.value.panels

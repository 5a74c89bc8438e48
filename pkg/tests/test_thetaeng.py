import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxlab import criteria as cr
from boxlab import margulis as mg
from boxlab import sl2geom as sg
from boxlab import thetaeng as te
from boxlab.errors import DimensionMismatch

small = st.floats(-1, 1, allow_nan=False)
heis = st.builds(lambda x, y, z: te.HeisenbergPoint([x], [y], z), small, small, small)
PTS = np.linspace(-3, 3, 41)[:, None]
F1 = te.TestFunction.gaussian(1, widths=0.9, centers=0.1)
F2 = te.TestFunction.gaussian(2, widths=[0.8, 1.3], centers=[0.2, -0.1])


def unimodular(a, b, c, d):
    m = np.array([[a, b], [c, d]], dtype=float)
    return m / math.sqrt(np.linalg.det(m))


def test_gaussian_at_identity_is_theta_squared():
    # sum_m exp(-pi m^2) = pi^{1/4} / Gamma(3/4)
    ref = (math.pi ** 0.25 / math.gamma(0.75)) ** 2
    val = te.theta_dd(te.TestFunction.gaussian(2), None, sg.make("a", 0.0, d=1))
    assert val == pytest.approx(ref, rel=1e-15)
    assert val == pytest.approx(1.1803405990160962, rel=1e-15)


def test_gaussian_normalization():
    assert te.TestFunction.gaussian(2).integral() == pytest.approx(1.0)
    assert te.TestFunction.zero(4).is_zero()


@given(heis, heis, heis)
def test_heisenberg_group_law(a, b, c):
    assert ((a * b) * c).allclose(a * (b * c), 1e-12)
    assert (a * a.inverse()).allclose(te.HeisenbergPoint.identity(1), 1e-15)


@given(heis, heis)
@settings(max_examples=30, deadline=None)
def test_composition_phase(h1, h2):
    for conv in (te.STANDARD, te.LITERAL):
        lhs = te.schrodinger(h1, te.schrodinger(h2, F1, conv), conv)(PTS)
        rhs = te.composition_phase(h1, h2, conv) * te.schrodinger(h1 * h2, F1, conv)(PTS)
        assert np.max(np.abs(lhs - rhs)) < 1e-13


def test_intertwining_holds_only_in_standard_convention():
    m = unimodular(0.8, 0.3, -0.6, 1.025)
    h = te.HeisenbergPoint([0.3], [-0.7], 0.2)
    hg = h.act(sg.GroupTuple([m]))
    a = te.schrodinger(h, te.apply_sl2(m, F1, [0]), te.STANDARD)(PTS)
    b = te.apply_sl2(m, te.schrodinger(hg, F1, te.STANDARD), [0])(PTS)
    assert np.max(np.abs(a - b)) < 1e-13
    a = te.schrodinger(h, te.apply_sl2(m, F1, [0]), te.LITERAL)(PTS)
    b = te.apply_sl2(m, te.schrodinger(hg, F1, te.LITERAL), [0])(PTS)
    i = int(np.argmax(np.abs(b)))
    assert np.max(np.abs(a - a[i] / b[i] * b)) > 0.1


@pytest.mark.parametrize("m", [unimodular(0.8, 0.3, -0.6, 1.025), unimodular(2.0, 1.0, 1.0, 1.0),
                               unimodular(1.0, 0.4, 0.0, 1.0)])
def test_fresnel_and_iwasawa_routes_agree(m):
    _, dev = te.nak_consistency(m, F1)
    assert dev < 1e-13
    g = sg.GroupTuple([m])
    grid = np.repeat(PTS, 2, 1)
    assert np.max(np.abs(te.r_dd(g, F2)(grid) - te.r_dd(g, F2, route="fresnel")(grid))) < 1e-13


def test_fast_matches_direct():
    rng = np.random.default_rng(21)
    for i in range(12):
        d = 1 + i % 3
        g = cr.random_iwasawa(rng, d)
        F = cr.random_gaussian(rng, d)
        h = te.HeisenbergPoint(rng.uniform(-0.5, 0.5, d), rng.uniform(-0.5, 0.5, d), 0.3) if i % 2 else None
        a, b = te.theta_dd(F, h, g), te.theta_dd(F, h, g, method="direct")
        assert abs(a - b) <= 1e-10 * abs(b)


def test_inversion_is_an_automorphy():
    g = sg.IwasawaCoords(np.array([0.3]), np.array([0.7]), np.array([0.4]), np.array([1])).assemble()
    S = sg.GroupTuple([[[0.0, -1.0], [1.0, 0.0]]])
    assert te.theta_dd(F2, None, S @ g) == pytest.approx(te.theta_dd(F2, None, g), rel=1e-13)


def test_theta_group_automorphy():
    rng = np.random.default_rng(22)
    for _ in range(10):
        g = cr.random_iwasawa(rng, 3)
        F = cr.random_gaussian(rng, 3)
        gam = cr.random_theta_group(rng, 3, 20)
        a = te.theta_dd(F, None, g)
        assert abs(te.theta_dd(F, None, gam @ g) - a) <= 1e-8 * abs(a)


def test_cusp_main_term_dominates_deep_in_the_cusp():
    g = sg.IwasawaCoords(np.array([0.1]), np.array([40.0]), np.array([0.4]), np.array([1])).assemble()
    main = te.theta_cusp_main(F2, g)
    assert te.theta_dd(F2, None, g) == pytest.approx(main, rel=1e-12)
    assert abs(main) <= te.envelope_constant(F2) * sg.alpha_top(g)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        te.theta_dd(F2, None, sg.make("a", 0.0, d=2))


@pytest.mark.parametrize("t", [1.0, 2.0])
def test_horosphere_exact_matches_quadrature(t):
    F = te.TestFunction.gaussian(2, widths=[0.8, 1.3])
    exact = te.horosphere_average(F, t)
    quad = te.horosphere_average(F, t, method="quadrature")
    assert abs(exact - quad) < 1e-12


def test_horosphere_gap_decays_like_exp_minus_t():
    # the excess is the doubly counted m = 0 term, y f(0) g(0) with y = e^{-t}
    F = te.TestFunction.gaussian(2, widths=[0.8, 1.3])
    ts = np.array([2.0, 4.0, 6.0, 8.0])
    gaps = [abs(te.horosphere_average(F, t) - te.diagonal_integral(F)) for t in ts]
    assert mg.log_slope(ts, np.log(gaps)) == pytest.approx(-1.0, abs=0.02)


def test_json_roundtrip():
    back = te.TestFunction.from_json(F2.to_json())
    grid = np.repeat(PTS, 2, 1)
    assert np.array_equal(back(grid), F2(grid))

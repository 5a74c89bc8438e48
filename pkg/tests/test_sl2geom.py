import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxlab import boxspec as bs
from boxlab import margulis as mg
from boxlab import sl2geom as sg

DIO = bs.BoxShape([1.0, 2 ** (1 / 3), 2 ** (-1 / 3)])

reals = st.floats(-3, 3, allow_nan=False)
angles = st.floats(0, math.pi, allow_nan=False, exclude_max=True)


def random_tuple(rng, d=3, spread=2.0):
    ic = sg.IwasawaCoords(rng.uniform(-3, 3, d), np.exp(rng.uniform(-spread, spread, d)),
                          rng.uniform(0, math.pi, d), rng.choice([-1, 1], d))
    return ic.assemble()


@st.composite
def tuples(draw, d=3):
    u = [draw(reals) for _ in range(d)]
    v = [math.exp(draw(st.floats(-3, 3))) for _ in range(d)]
    th = [draw(angles) for _ in range(d)]
    return sg.IwasawaCoords(np.array(u), np.array(v), np.array(th), np.ones(d, dtype=int)).assemble()


def test_identity_and_group_law():
    assert sg.make("a", 0.0).allclose(sg.GroupTuple(np.eye(2)[None].repeat(3, 0)))
    assert (sg.make("n", 0.3) @ sg.make("n", -1.1)).allclose(sg.make("n", -0.8), 1e-15)


def test_g0_for_the_diophantine_box():
    g = sg.make("g0", DIO)
    x = math.pi ** 2 * np.array([1.0, 2 ** (-2 / 3), 2 ** (2 / 3)])
    assert np.allclose(g.factors[:, 0, 0] ** 2, x, rtol=1e-14)
    assert np.allclose(g.factors[:, 1, 1], 1 / np.sqrt(x), rtol=1e-14)


def test_determinant_renormalized():
    g = sg.GroupTuple([[[2.0, 0.0], [0.0, 0.5 * (1 + 1e-8)]]])
    assert abs(np.linalg.det(g.factors[0]) - 1) < 1e-15
    with pytest.raises(ValueError):
        sg.GroupTuple([[[2.0, 0.0], [0.0, 2.0]]])


def test_iwasawa_examples():
    ic = sg.iwasawa(sg.n_matrix(0.7, 1) @ sg.diag_matrix(2.5, 1))
    assert ic.u[0] == pytest.approx(0.7) and ic.v[0] == pytest.approx(2.5) and ic.theta[0] == pytest.approx(0.0)
    ic = sg.iwasawa(sg.k_matrix(1.2, 1))
    assert ic.u[0] == pytest.approx(0.0, abs=1e-15) and ic.v[0] == pytest.approx(1.0)
    assert ic.theta[0] == pytest.approx(1.2)


@given(tuples())
def test_iwasawa_roundtrip(g):
    ic = sg.iwasawa(g)
    assert ic.assemble().allclose(g, 1e-9 * max(1.0, np.abs(g.factors).max()))
    assert np.all((ic.theta >= 0) & (ic.theta < math.pi))


def test_reduced_point_is_fixed():
    g = sg.IwasawaCoords(np.array([0.2]), np.array([1.5]), np.array([0.0]), np.array([1])).assemble()
    rep = sg.reduce(g)
    assert np.array_equal(rep.gamma[0], np.eye(2, dtype=int))


def test_half_i_goes_to_two_i():
    g = sg.diag_matrix(0.5, 1)
    rep = sg.reduce(g)
    assert np.array_equal(rep.gamma[0], [[0, -1], [1, 0]])
    ic = sg.iwasawa(rep.reduced)
    assert ic.u[0] == pytest.approx(0.0, abs=1e-15) and ic.v[0] == pytest.approx(2.0)
    # brute force over small gamma: the largest v among gamma z with entries <= 3
    best = 0.0
    for a in range(-3, 4):
        for b in range(-3, 4):
            for c in range(-3, 4):
                for d in range(-3, 4):
                    if a * d - b * c == 1:
                        z = complex(0, 0.5)
                        best = max(best, ((a * z + b) / (c * z + d)).imag)
    assert best == pytest.approx(2.0)


def test_identity_heights():
    rho, alpha = sg.heights(sg.make("a", 0.0, d=1))
    assert rho == [1.0] and alpha == [1.0]


def test_rho_of_a():
    g = sg.a_matrix(0.7)
    rho, _ = sg.heights(g)
    assert rho[0] == pytest.approx(math.exp(0.7)) and rho[2] == pytest.approx(math.exp(2.1))


@given(tuples())
@settings(max_examples=50)
def test_reduction_lands_in_domain(g):
    rep = sg.reduce(g)
    assert np.all(sg.in_domain(rep.reduced.factors))
    assert np.all(np.abs(np.linalg.det(rep.gamma.astype(float)) - 1) < 1e-9)
    # C0 for reduced representatives: the shortest bottom row is at most (2/sqrt 3)^(1/2)
    assert np.all(np.hypot(*rep.reduced.bottom.T) <= sg.HERMITE_BOUND + 1e-9)


def test_reduced_bottom_bound_many():
    rng = np.random.default_rng(3)
    f = np.concatenate([random_tuple(rng, 3, 4.0).factors for _ in range(3400)])[:10 ** 4]
    gam = sg.reduce_matrices(f)
    red = np.einsum("jab,jbc->jac", gam.astype(float), f)
    assert np.all(np.hypot(red[:, 1, 0], red[:, 1, 1]) <= sg.HERMITE_BOUND + 1e-9)


@given(st.floats(-5, 5), st.floats(1e-9, 3), angles)
def test_short_rows_reduce_by_translation(u, logv, th):
    # rho(g) < 1 forces an upper-triangular reducing gamma with +-1 diagonal
    g = sg.IwasawaCoords(np.array([u]), np.array([math.exp(logv)]), np.array([th]), np.array([1])).assemble()
    gam = sg.reduce_matrices(g.factors)[0]
    assert gam[1, 0] == 0 and abs(gam[0, 0]) == 1 and abs(gam[1, 1]) == 1


def test_rho_one_on_the_open_arc_needs_the_inversion():
    # at rho = 1 the point lies on the unit arc; left of the axis the arc is open, so S reduces it
    g = sg.IwasawaCoords(np.array([-1e-7]), np.array([1.0]), np.array([0.0]), np.array([1])).assemble()
    gam = sg.reduce_matrices(g.factors)[0]
    assert abs(gam[1, 0]) == 1
    g = sg.IwasawaCoords(np.array([1e-7]), np.array([1.0]), np.array([0.0]), np.array([1])).assemble()
    assert np.array_equal(sg.reduce_matrices(g.factors)[0], np.eye(2))


def test_alpha_by_reduction_matches_enumeration():
    rng = np.random.default_rng(4)
    n = 0
    while n < 200:
        m = rng.integers(-10, 11, (3, 2, 2)).astype(float)
        det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
        if np.any(det <= 0):
            continue
        m /= np.sqrt(det)[:, None, None]
        g = sg.GroupTuple(m)
        assert np.allclose(sg.heights(g)[1], sg.alpha_by_enumeration(g), rtol=1e-9)
        n += 1


def test_alpha_on_an_orbit_point():
    g = sg.make("g0", DIO) @ sg.n_matrix(0.37) @ sg.a_matrix(3.0)
    short = [min(v[2] for v in sg.primitive_vectors(f, 2.0)) for f in g.factors]
    assert sg.alpha_top(g) == pytest.approx(1 / np.prod(short), rel=1e-12)


def bottoms_from_ratios(r):
    return sg.GroupTuple([[[0.0, -1.0], [1.0, float(x)]] if x is not None else [[1.0, 0.0], [0.0, 1.0]] for x in r])


def test_deltas_examples():
    assert sg.deltas(bottoms_from_ratios([0.0, 0.5, 0.6])).delta3 == pytest.approx(0.05)
    assert sg.deltas(bottoms_from_ratios([1.0, 2.0, 3.0])).delta3 == 1.0
    dl = sg.deltas(bottoms_from_ratios([None, 0.5, 0.6]))
    gm = sg.gap_matrix(bottoms_from_ratios([None, 0.5, 0.6]).bottom)
    assert gm[0, 1] == gm[0, 2] == 1.0 and dl.delta3 == pytest.approx(0.1)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_deltas_range_and_batch(r):
    g = bottoms_from_ratios(r)
    dl = sg.deltas(g)
    assert 0 <= dl.delta3 <= dl.delta2 <= 1
    assert sg.delta3_batch(g.bottom[None])[0] == pytest.approx(dl.delta3, abs=1e-15)
    assert sg.delta2_batch(g.bottom[None])[0] == pytest.approx(dl.delta2, abs=1e-15)


def test_translation_bounds_exact():
    rng = np.random.default_rng(5)
    b = rng.normal(size=(10 ** 5, 2)) * np.exp(rng.uniform(-3, 3, (10 ** 5, 1)))
    xi = rng.uniform(-1, 1, 10 ** 5)
    s = rng.uniform(1e-6, 3, 10 ** 5)
    rho, rho_t = sg.translation_bounds(b, xi, s)
    assert np.all(0.5 * np.exp(-s) * rho <= rho_t) and np.all(rho_t <= 2 * np.exp(s) * rho)


def test_lattice_points_match_primitive_vectors():
    rng = np.random.default_rng(6)
    for _ in range(20):
        m = random_tuple(rng, 1).factors[0]
        cd, rows, norms = sg.primitive_in_disk(m, 3.0)
        ref = sg.primitive_vectors(m, 3.0)
        assert sorted(map(tuple, cd.tolist())) == sorted(map(tuple, [(c, d) for c, d, _ in ref]))


def test_orbit_alpha_growth_rate():
    # max of alpha_3(g0 n(xi) a(t)) over exp(-(1+eta) t) < xi <= 1 grows at most like e^{1.6 t};
    # xi near 0 is excluded since n(0) a(t) runs straight into the cusp
    x = DIO.coeffs
    eta = 0.05
    ts = np.arange(1, 9)
    peaks = []
    for t in ts:
        xi = np.linspace(math.exp(-(1 + eta) * t), 1, 4001)[1:]
        st_ = mg.orbit_stack(x, xi, float(t))
        short = sg.shortest_norms_batch(st_.reshape(-1, 2, 2)).reshape(-1, 3)
        peaks.append(np.log(np.max(1 / short.prod(axis=1))))
    assert mg.log_slope(ts, peaks) <= 1.6


def test_report_json():
    rep = sg.reduce(sg.make("g0", DIO) @ sg.a_matrix(1.0))
    doc = json.loads(rep.to_json())
    assert doc["schema"] == "sl2/1" and len(doc["alpha"]) == 3

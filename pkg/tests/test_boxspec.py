import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxlab import boxspec as bs
from boxlab.errors import BudgetExceeded, InsufficientRange, InvalidShape

DIO = (1.0, 2 ** (1 / 3), 2 ** (-1 / 3))


def triple_loop_count(shape, lam_cut):
    x = shape.coeffs
    top = [int(math.sqrt(lam_cut / xj)) + 1 for xj in x]
    n = 0
    for a in range(1, top[0] + 1):
        for b in range(1, top[1] + 1):
            for c in range(1, top[2] + 1):
                n += x[0] * a * a + x[1] * b * b + x[2] * c * c < lam_cut
    return n


def test_shape_coeffs():
    s = bs.BoxShape([1.0, 2.0, 3.0])
    assert np.allclose(s.coeffs, math.pi ** 2 / np.array([1.0, 4.0, 9.0]), rtol=1e-15)
    assert s.volume == pytest.approx(6.0)


def test_shape_rejects_nonpositive():
    with pytest.raises(InvalidShape):
        bs.BoxShape([1.0, 0.0, 1.0])


def test_unfold_closed_forms():
    cube = bs.BoxShape([1.0, 1.0, 1.0])
    assert bs.unfold(cube, 0.0) == 0.0
    assert bs.unfold(cube, 3 * math.pi ** 2) == pytest.approx(math.sqrt(3) / 2 * math.pi, rel=1e-14)
    assert bs.unfold(bs.BoxShape([1.0, 2.0, 3.0]), 1.0) == pytest.approx(1 / math.pi ** 2, rel=1e-14)


@given(st.just(0.0) | st.floats(1e-100, 1e6))
def test_unfold_inverse_roundtrip(lam):
    s = bs.BoxShape(list(DIO))
    assert bs.unfold_inverse(s, bs.unfold(s, lam)) == pytest.approx(lam, rel=1e-12, abs=1e-300)


def test_cube_lowest_level():
    cube = bs.BoxShape([1.0, 1.0, 1.0])
    T = bs.unfold(cube, 3 * math.pi ** 2) * (1 + 1e-9)
    lev = bs.enumerate_levels(cube, T)
    assert len(lev) == 1
    assert lev.raw[0] == pytest.approx(3 * math.pi ** 2)
    assert lev.unfolded[0] == pytest.approx(2.72070, abs=1e-5)


def test_torus_zero_and_first_shell():
    torus = bs.BoxShape([1.0, 1.0, 1.0], bs.TORUS)
    T = bs.unfold(torus, 1.5 * math.pi ** 2)
    lev = bs.enumerate_levels(torus, T)
    assert lev.raw[0] == 0.0 and np.count_nonzero(lev.raw == 0.0) == 1
    assert np.allclose(lev.raw[1:], math.pi ** 2) and len(lev) == 7


def test_level_count_matches_triple_loop():
    shape = bs.BoxShape(list(DIO))
    T = 1e4
    lev = bs.enumerate_levels(shape, T)
    assert len(lev) == triple_loop_count(shape, bs.unfold_inverse(shape, T))


def test_torus_is_union_of_sign_classes():
    # on the torus m runs over all of Z^3, i.e. every sign class of the box indices plus the faces
    shape = bs.BoxShape(list(DIO), bs.TORUS)
    lam = 600.0
    T = bs.unfold(shape, lam)
    torus = bs.enumerate_levels(shape, T).raw
    x = shape.coeffs
    ref = []
    r = [int(math.sqrt(lam / xj)) + 1 for xj in x]
    for a in range(-r[0], r[0] + 1):
        for b in range(-r[1], r[1] + 1):
            for c in range(-r[2], r[2] + 1):
                v = x[0] * a * a + x[1] * b * b + x[2] * c * c
                if bs.unfold(shape, v) < T:
                    ref.append(v)
    assert np.array_equal(np.sort(torus), np.sort(ref))


def test_partitioning_is_bit_identical():
    shape = bs.BoxShape(list(DIO))
    a = bs.enumerate_levels(shape, 3000.0)
    b = bs.enumerate_levels(shape, 3000.0, partitions=5)
    assert np.array_equal(a.raw, b.raw) and np.array_equal(a.unfolded, b.unfolded)


def test_budget():
    with pytest.raises(BudgetExceeded):
        bs.enumerate_levels(bs.BoxShape(list(DIO)), 1e6, budget=1000)


SAMPLED = [DIO, (1.0, 1.3, 0.7), (0.9, 1.1, 1.0)]


@pytest.mark.xfail(strict=True, reason=(
    "Dirichlet boxes lose the boundary term S lam/(16 pi) of Weyl's law, a relative deficit "
    "(3 pi S / 8V) lam^(-1/2) of about 4% at unfolded T = 1e5, so the leading-order 2% band fails"))
@pytest.mark.parametrize("lengths", SAMPLED)
def test_weyl_ratio_leading_order(lengths):
    lev = bs.enumerate_levels(bs.BoxShape(list(lengths)), 1e5)
    assert abs(len(lev) / 1e5 - 1) < 0.02


@pytest.mark.xfail(strict=True, reason="same boundary-term deficit: the mean spacing is about 1.04")
@pytest.mark.parametrize("lengths", SAMPLED)
def test_mean_spacing_leading_order(lengths):
    lev = bs.enumerate_levels(bs.BoxShape(list(lengths)), 1e5)
    assert abs((lev.unfolded[-1] - lev.unfolded[0]) / (len(lev) - 1) - 1) < 0.02


def two_term_weyl(shape, lam):
    l1, l2, l3 = shape.lengths
    area = 2 * (l1 * l2 + l1 * l3 + l2 * l3)
    return shape.volume * lam ** 1.5 / (6 * math.pi ** 2) - area * lam / (16 * math.pi)


@pytest.mark.parametrize("lengths", SAMPLED)
def test_weyl_two_term(lengths):
    shape = bs.BoxShape(list(lengths))
    lev = bs.enumerate_levels(shape, 1e5)
    pred = two_term_weyl(shape, bs.unfold_inverse(shape, 1e5))
    assert abs(len(lev) / pred - 1) < 0.005


@pytest.mark.parametrize("lengths", SAMPLED)
def test_weyl_ratio_torus(lengths):
    shape = bs.BoxShape(list(lengths), bs.TORUS)
    lev = bs.enumerate_levels(shape, 1e5)
    assert abs(len(lev) / lev.weyl_expected - 1) < 0.02


def test_integers_one_neighbour():
    h = bs.pair_correlation(np.arange(1.0, 1003.0), (0.5, 1.5), T=1000)
    assert h.total == 999
    assert h.ratio == pytest.approx(0.999)


def test_poisson_levels():
    rng = np.random.default_rng(0)
    n = 10 ** 5
    xi = np.sort(rng.uniform(0, n + 2, rng.poisson(n + 2)))
    h = bs.pair_correlation(xi, (0.0, 1.0), T=n)
    # pair count of a Poisson process: mean T, variance about 3T for a unit window
    assert abs(h.ratio - 1) < 3 * math.sqrt(3.0 / n)


@given(st.lists(st.floats(0, 50), min_size=2, max_size=300),
       st.floats(-3, 3), st.floats(0.01, 3))
@settings(max_examples=60)
def test_pair_count_matches_bruteforce(vals, a, width):
    xi = np.sort(np.asarray(vals))
    b = a + width
    T = float(xi[-1]) - max(abs(a), abs(b)) - 1e-9
    if T <= 0:
        return
    h = bs.pair_correlation(xi, (a, b), T)
    assert h.total == bs.pair_count_bruteforce(xi, (a, b), T)


def test_bins_sum_to_total():
    shape = bs.BoxShape(list(DIO))
    lev = bs.enumerate_levels(shape, 3000.0)
    one = bs.pair_correlation(lev, (-1.0, 1.0), 2000.0)
    many = bs.pair_correlation(lev, (-1.0, 1.0), 2000.0, bins=8)
    assert many.counts.sum() == one.total


def test_insufficient_range():
    lev = bs.enumerate_levels(bs.BoxShape(list(DIO)), 100.0)
    with pytest.raises(InsufficientRange):
        bs.pair_correlation(lev, (0.0, 1.0), 100.0)


def test_cube_divergence():
    cube = bs.BoxShape([1.0, 1.0, 1.0])
    lev = bs.enumerate_levels(cube, 1e5 + 2)
    h = bs.pair_correlation(lev, (-0.5, 0.5), 1e5)
    assert h.ratio > 2.0


def test_serialization(tmp_path):
    lev = bs.enumerate_levels(bs.BoxShape(list(DIO)), 50.0)
    lev.to_csv(tmp_path / "lev.csv")
    import json
    doc = json.loads(lev.to_json())
    assert doc["schema"] == "boxspec/1" and len(doc["raw"]) == len(lev)
    h = bs.pair_correlation(lev, (0.0, 1.0), 40.0, bins=4)
    h.to_csv(tmp_path / "h.csv")
    assert json.loads(h.to_json())["counts"] == h.counts.tolist()

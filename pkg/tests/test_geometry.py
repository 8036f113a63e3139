from fractions import Fraction

import numpy as np
import pytest

from cubemaps import SpecificationError
from cubemaps.geometry import (
    alpha,
    alpha_float,
    edge_ratio,
    child_gap,
    generation_measure,
    limit_measure,
    DyadicFamily,
    AxisCube,
    AxisBox,
    RectUnion,
    Ball,
    Ellipsoid,
    cube_at,
    reflect_address,
    CantorAddress,
    cantor_points_float,
    chain_centers,
    locate_points,
)


# Independent reference via the recurrence 1/a_k = 2/a_{k-1} + 1, a_0 = 1.
def oracle_alpha(k):
    inv = 1
    for _ in range(k):
        inv = 2 * inv + 1
    return Fraction(1, inv)


def test_alpha_values():
    assert alpha(0) == 1
    assert alpha(1) == Fraction(1, 3)
    assert alpha(5) == Fraction(1, 63)


@pytest.mark.parametrize("k", range(0, 61))
def test_alpha_matches_recurrence(k):
    assert alpha(k) == oracle_alpha(k)


def test_alpha_halving_gap_exact():
    # 2 a_k < a_{k-1} strictly, and the deficit is exactly a_k * a_{k-1}.
    for k in range(1, 61):
        assert 2 * alpha(k) < alpha(k - 1)
        assert alpha(k - 1) - 2 * alpha(k) == alpha(k) * alpha(k - 1)


def test_alpha_negative_rejected():
    with pytest.raises(SpecificationError):
        alpha(-1)


def test_edge_ratio_and_gap():
    assert edge_ratio(1) == Fraction(1, 3)
    assert edge_ratio(2) == Fraction(3, 7)
    for k in range(1, 40):
        assert edge_ratio(k) == oracle_alpha(k) / oracle_alpha(k - 1)
        assert edge_ratio(k) < Fraction(1, 2)
        assert child_gap(k) == alpha(k) / 4


def test_generation_measure_values():
    assert generation_measure(0, 2) == 1
    assert generation_measure(1, 2) == Fraction(4, 9)
    assert generation_measure(5, 2) == Fraction(1024, 3969)
    assert generation_measure(3, 2) == Fraction(64, 225)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_generation_measure_decreases_to_limit(n):
    prev = generation_measure(0, n)
    for k in range(1, 25):
        cur = generation_measure(k, n)
        assert cur < prev
        assert cur > limit_measure(n)
        prev = cur
    assert float(generation_measure(24, n) - limit_measure(n)) < 1e-6


def test_generation_measure_oracle():
    # count the cubes and multiply by the exact volume of one of them
    for n in (1, 2, 3):
        for k in range(0, 8):
            count = 2 ** (n * k)
            assert generation_measure(k, n) == count * oracle_alpha(k) ** n


# ---------------------------------------------------------------------------
# dyadic family
# ---------------------------------------------------------------------------

def test_dyadic_order_n2():
    fam = DyadicFamily(2)
    q, t = Fraction(1, 4), Fraction(3, 4)
    assert fam.centers() == [(q, q), (t, q), (q, t), (t, t)]


def test_dyadic_order_n1_n3():
    assert DyadicFamily(1).centers() == [(Fraction(1, 4),), (Fraction(3, 4),)]
    fam = DyadicFamily(3)
    assert fam.count == 8
    # bottom layer (last coord 1/4) first, then top layer, same xy order
    ctrs = fam.centers()
    assert all(c[2] == Fraction(1, 4) for c in ctrs[:4])
    assert all(c[2] == Fraction(3, 4) for c in ctrs[4:])
    assert [c[:2] for c in ctrs[4:]] == [c[:2] for c in ctrs[:4]]


def test_dyadic_pairing():
    fam = DyadicFamily(2)
    assert [fam.pair(d) for d in (1, 2, 3, 4)] == [3, 4, 1, 2]
    fam3 = DyadicFamily(3)
    assert [fam3.pair(d) for d in range(1, 9)] == [5, 6, 7, 8, 1, 2, 3, 4]
    # pairing is an involution that only changes the last coordinate
    for n in (1, 2, 3, 4):
        fam = DyadicFamily(n)
        for d in range(1, fam.count + 1):
            p = fam.pair(d)
            assert fam.pair(p) == d
            assert p != d
            c, cp = fam.center(d), fam.center(p)
            assert c[:-1] == cp[:-1]
            assert c[-1] + cp[-1] == 1


def test_dyadic_index_round_trip():
    for n in (1, 2, 3):
        fam = DyadicFamily(n)
        for d in range(1, fam.count + 1):
            assert fam.index_from_bits(fam.bits(d)) == d
            assert fam.index_of(fam.center(d)) == d


def test_dyadic_bad_index():
    fam = DyadicFamily(2)
    with pytest.raises(SpecificationError):
        fam.center(0)
    with pytest.raises(SpecificationError):
        fam.pair(5)


# ---------------------------------------------------------------------------
# nested cubes
# ---------------------------------------------------------------------------

def test_cube_at_examples():
    c1 = cube_at(2, [1])
    assert c1.center == (Fraction(1, 4), Fraction(1, 4))
    assert c1.edge == Fraction(1, 3)
    c2 = cube_at(2, [1, 1])
    assert c2.center == (Fraction(1, 6), Fraction(1, 6))
    assert c2.edge == Fraction(1, 7)
    c4 = cube_at(2, [4])
    assert c4.center == (Fraction(3, 4), Fraction(3, 4))


def test_cube_nesting():
    rng = np.random.default_rng(7)
    for n in (1, 2, 3):
        fam = DyadicFamily(n)
        digits = [int(d) for d in rng.integers(1, fam.count + 1, size=6)]
        for k in range(1, len(digits) + 1):
            child = cube_at(n, digits[:k])
            parent = cube_at(n, digits[:k - 1])
            assert child.edge == alpha(k)
            assert parent.as_box().contains_box(child.as_box())
            # strict clearance: child stays child_gap(k)*parent_edge from walls
            gap = child_gap(k) * parent.edge
            for lo_c, hi_c, lo_p, hi_p in zip(child.lo(), child.hi(),
                                              parent.lo(), parent.hi()):
                assert lo_c - lo_p >= gap
                assert hi_p - hi_c >= gap


@pytest.mark.parametrize("n,k", [(1, 4), (2, 4), (3, 3)])
def test_generation_cubes_disjoint(n, k):
    fam = DyadicFamily(n)
    idx = np.indices((fam.count,) * k).reshape(k, -1).T + 1
    centers = np.array([cube_at(n, dig).center_float() for dig in idx])
    edge = alpha_float(k)
    # all pairwise sup-distances must exceed the common edge
    diff = np.abs(centers[:, None, :] - centers[None, :, :]).max(axis=2)
    np.fill_diagonal(diff, 1.0)
    assert diff.min() > edge * (1 + 1e-12)


def test_reflect_address_mirrors_cube():
    for n in (1, 2, 3):
        rng = np.random.default_rng(n)
        digits = [int(d) for d in rng.integers(1, 2 ** n + 1, size=5)]
        refl = reflect_address(digits, n)
        a, b = cube_at(n, digits), cube_at(n, refl)
        assert a.edge == b.edge
        assert a.center[:-1] == b.center[:-1]
        assert a.center[-1] + b.center[-1] == 1
        assert reflect_address(refl, n) == tuple(digits)


def test_cantor_address_round_trip():
    a = CantorAddress(2, [1, 3, 2])
    assert a.to_string() == "1,3,2"
    assert CantorAddress.from_string(2, "1,3,2") == a
    b = CantorAddress(2, [1, 3], tail=(2, 4))
    assert b.to_string() == "1,3,(2,4)"
    assert CantorAddress.from_string(2, "1,3,(2,4)") == b
    assert b.digit(2) == 3 and b.digit(3) == 2 and b.digit(4) == 4
    assert b.digit(5) == 2 and b.digit(6) == 4
    with pytest.raises(SpecificationError):
        a.digit(4)
    with pytest.raises(SpecificationError):
        CantorAddress(2, [5])


def test_cantor_address_reflect():
    a = CantorAddress(2, [1, 2], tail=(4,))
    r = a.reflect()
    assert r.digits == (3, 4) and r.tail == (2,)


def test_cantor_point_converges():
    a = CantorAddress(2, [], tail=(1,))
    p = a.point()
    # all-ones address: every step goes to the lower-left child
    x = 0.5 + sum(-0.25 * alpha_float(k - 1) for k in range(1, 60))
    assert np.allclose(p, [x, x], atol=1e-14)
    assert a.cube(8).contains(p)


def test_chain_centers_match_cube_at():
    rng = np.random.default_rng(11)
    for n in (2, 3):
        digits = rng.integers(1, 2 ** n + 1, size=(5, 6))
        chains = chain_centers(n, digits)
        pts = cantor_points_float(n, digits)
        assert np.allclose(chains[:, -1, :], pts)
        for i in range(5):
            for k in range(7):
                exact = cube_at(n, digits[i, :k]).center_float()
                assert np.allclose(chains[i, k], exact, atol=1e-15)


def test_locate_points_round_trip():
    rng = np.random.default_rng(3)
    for n in (1, 2, 3):
        digits = rng.integers(1, 2 ** n + 1, size=(40, 7))
        pts = cantor_points_float(n, digits)
        found, escape = locate_points(pts, 5)
        assert np.all(escape == 6)
        assert np.array_equal(found, digits[:, :5])


def test_locate_points_escape():
    # the unit-cube center lies in the cross-shaped gap of generation 1
    digits, escape = locate_points(np.array([0.5, 0.5]), 4)
    assert escape == 1
    assert np.all(digits == 0)
    # the center of a generation-1 cube escapes at generation 2
    digits, escape = locate_points(np.array([0.25, 0.25]), 4)
    assert escape == 2
    assert digits[0] == 1 and digits[1] == 0


def test_locate_undecided_fraction_matches_measure():
    # Monte Carlo check of the generation-3 carrier volume 64/225
    rng = np.random.default_rng(2024)
    pts = rng.random((200_000, 2))
    _, escape = locate_points(pts, 3)
    frac = np.mean(escape == 4)
    expect = float(generation_measure(3, 2))
    sigma = np.sqrt(expect * (1 - expect) / len(pts))
    assert abs(frac - expect) < 4 * sigma


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def test_axis_box_and_union_measure():
    b1 = AxisBox((Fraction(0), Fraction(0)), (Fraction(1, 2), Fraction(1, 2)))
    b2 = AxisBox((Fraction(1, 4), Fraction(1, 4)), (Fraction(3, 4), Fraction(3, 4)))
    u = RectUnion([b1, b2])
    # inclusion-exclusion by hand: 1/4 + 1/4 - 1/16
    assert u.measure() == Fraction(7, 16)
    assert not u.pairwise_disjoint()
    assert u.contains(np.array([0.1, 0.1]))
    assert not u.contains(np.array([0.9, 0.1]))


def test_union_measure_3d():
    b1 = AxisBox((0, 0, 0), (Fraction(1, 2),) * 3)
    b2 = AxisBox((Fraction(1, 2), 0, 0), (1, Fraction(1, 2), Fraction(1, 2)))
    u = RectUnion([b1, b2])
    assert u.measure() == Fraction(1, 4)
    assert u.pairwise_disjoint()  # open-interior overlap test


def test_cube_box_contains():
    c = AxisCube((Fraction(1, 4), Fraction(1, 4)), Fraction(1, 3))
    pts = np.array([[0.25, 0.25], [0.25, 0.42], [0.0, 0.0]])
    assert list(c.contains(pts)) == [True, False, False]
    assert c.as_box().volume() == Fraction(1, 9)


def test_ball_and_ellipsoid():
    b = Ball((Fraction(1, 2), Fraction(1, 2)), Fraction(1, 4))
    pts = np.array([[0.5, 0.5], [0.74, 0.5], [0.76, 0.5]])
    assert list(b.contains(pts)) == [True, True, False]
    e = Ellipsoid.from_ball(b)
    assert np.array_equal(e.contains(pts), b.contains(pts))
    assert np.isclose(e.volume(), np.pi / 16)
    e2 = Ellipsoid([0, 0], [[2.0, 0.0], [0.0, 0.5]])
    assert e2.contains(np.array([1.9, 0.0]))
    assert not e2.contains(np.array([0.0, 0.6]))
    assert np.allclose(sorted(e2.semi_axes()), [0.5, 2.0])

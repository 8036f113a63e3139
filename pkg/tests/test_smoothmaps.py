import numpy as np
import pytest

from cubemaps.errors import ConstructionError, SpecificationError
from cubemaps.geometry import AxisCube
from cubemaps.smoothmaps import (
    AffineMap, AxisWellProfile, BoxCompression, CompositeMap, ConjugatedMap,
    Cutoff, DomainGrid, FlowMap, IdentityMap, InverseMap, PlanarTwist,
    RadialMatrixBlend, TranslationMap, TwistChain, VectorFieldGrid, compose,
    conjugate_into_cube, cutoff_phi, flow_time1, numeric_jacobian, plateau,
    round_trip_error, smooth_step, smooth_step_deriv, smooth_step_integral,
)

rng = np.random.default_rng(8101)


def sample_points(count, n=2, lo=0.0, hi=1.0):
    return lo + (hi - lo) * rng.random((count, n))


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

def test_smooth_step_endpoints_and_symmetry():
    v = np.linspace(-0.5, 1.5, 201)
    s = smooth_step(v)
    assert np.all(s[v <= 0] == 0.0)
    assert np.all(s[v >= 1] == 1.0)
    assert np.all(np.diff(s) >= 0)
    assert smooth_step(0.5) == pytest.approx(0.5, abs=1e-12)
    # s(v) + s(1-v) = 1
    u = np.linspace(0.01, 0.99, 99)
    assert np.max(np.abs(smooth_step(u) + smooth_step(1 - u) - 1)) < 1e-12


def test_smooth_step_deriv_matches_differences():
    u = np.linspace(0.05, 0.95, 91)
    h = 1e-6
    fd = (smooth_step(u + h) - smooth_step(u - h)) / (2 * h)
    assert np.max(np.abs(fd - smooth_step_deriv(u))) < 1e-6
    # peak slope is 2 at the midpoint
    assert smooth_step_deriv(0.5) == pytest.approx(2.0, abs=1e-12)


def test_smooth_step_integral():
    assert smooth_step_integral(0.0) == pytest.approx(0.0, abs=1e-15)
    assert smooth_step_integral(1.0) == pytest.approx(0.5, abs=1e-10)
    # fundamental theorem check
    u = np.linspace(0.1, 0.9, 17)
    h = 1e-5
    fd = (smooth_step_integral(u + h) - smooth_step_integral(u - h)) / (2 * h)
    assert np.max(np.abs(fd - smooth_step(u))) < 1e-8


def test_plateau_zones():
    x = np.linspace(0, 1, 401)
    p = plateau(x, 0.5, 0.1, 0.2)
    assert np.all(p[np.abs(x - 0.5) <= 0.1] == 1.0)
    assert np.all(p[np.abs(x - 0.5) >= 0.2] == 0.0)
    assert np.all((p >= 0) & (p <= 1))


def test_cutoff_values():
    phi = cutoff_phi()
    assert phi(0.5) == pytest.approx(0.0, abs=1e-15)
    assert float(phi(0.6)) == pytest.approx(0.0, abs=1e-15)
    assert phi(0.9) == pytest.approx(1.0, abs=1e-10)
    assert float(phi(0.8)) == pytest.approx(1.0, abs=1e-10)
    t = np.linspace(0, 1, 2001)
    vals = phi(t)
    assert np.all(np.diff(vals) >= -1e-15)


def test_cutoff_derivative_bound_window():
    phi = cutoff_phi()
    assert 5.0 < phi.derivative_bound < 9.0
    # bound really is a sampled sup of the derivative
    t = np.linspace(0.6, 0.8, 50001)
    assert np.max(phi.derivative(t)) <= phi.derivative_bound + 1e-12


def test_cutoff_too_steep_rejected():
    with pytest.raises(ConstructionError):
        Cutoff(inner=0.6, outer=0.7)  # halving the window doubles the peak


# ---------------------------------------------------------------------------
# affine family, composition, conjugation
# ---------------------------------------------------------------------------

def test_numeric_jacobian_identity_and_affine():
    ident = IdentityMap(2)
    J = numeric_jacobian(ident, np.array([0.3, 0.7]))
    assert np.allclose(J, np.eye(2), atol=1e-9)
    refl = AffineMap(np.diag([1.0, -1.0]), [0.0, 1.0])
    J = numeric_jacobian(refl, sample_points(50))
    assert np.allclose(J, np.diag([1.0, -1.0]), atol=1e-9)


def test_numeric_jacobian_boundary_fallback():
    m = AffineMap(np.diag([2.0, 0.5]), [0.1, 0.2])
    x = np.array([0.0, 1.0])  # both stencils clipped one-sided
    J = numeric_jacobian(m, x, domain=(np.zeros(2), np.ones(2)))
    assert np.allclose(J, np.diag([2.0, 0.5]), atol=1e-6)


def test_composite_round_trip_and_jacobian():
    twist = PlanarTwist(2, [0.5, 0.5], (0, 1), 0.1, 0.3, 0.7)
    shift = TranslationMap([0.01, -0.02])
    comp = compose([twist, shift])
    pts = sample_points(200)
    assert round_trip_error(comp, pts) < 1e-9
    J = comp.jacobian(pts)
    Jn = numeric_jacobian(comp, pts)
    assert np.max(np.abs(J - Jn)) < 1e-6


def test_compose_flattens():
    a = TranslationMap([0.1, 0.0])
    b = TranslationMap([0.0, 0.1])
    c = compose([CompositeMap([a, b]), a])
    assert len(c.maps) == 3


def test_inverse_view():
    m = AffineMap([[2.0, 0.0], [0.0, 4.0]], [0.1, 0.2])
    inv = InverseMap(m)
    pts = sample_points(20)
    assert np.allclose(inv.forward(m.forward(pts)), pts, atol=1e-12)
    assert np.allclose(inv.det_jacobian(pts), 1.0 / 8.0, atol=1e-12)


def test_conjugate_into_cube():
    inner = TranslationMap([0.25, 0.0])
    cube = AxisCube((0.25, 0.25), edge=0.5)
    conj = conjugate_into_cube(inner, cube)
    # the similarity scales the displacement by the cube edge
    y = conj.forward1(np.array([0.25, 0.25]))
    assert np.allclose(y, [0.375, 0.25], atol=1e-14)
    # jacobian is carried over unchanged
    assert np.allclose(conj.jacobian(sample_points(5, lo=0.1, hi=0.4)), np.eye(2))


# ---------------------------------------------------------------------------
# planar twists
# ---------------------------------------------------------------------------

def test_twist_rigid_core_and_identity_outside():
    tw = PlanarTwist(2, [0.4, 0.6], (0, 1), 0.08, 0.2, np.pi / 3)
    th = np.pi / 3
    ang = rng.random(100) * 2 * np.pi
    rad = rng.random(100) * 0.08
    core = np.stack([0.4 + rad * np.cos(ang), 0.6 + rad * np.sin(ang)], axis=1)
    got = tw.forward(core)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    want = (core - [0.4, 0.6]) @ R.T + [0.4, 0.6]
    assert np.max(np.abs(got - want)) < 1e-12
    far = np.stack([0.4 + (0.2 + rng.random(50)) * np.cos(ang[:50]),
                    0.6 + (0.2 + rng.random(50)) * np.sin(ang[:50])], axis=1)
    assert np.array_equal(tw.forward(far), far)


def test_twist_inverse_exact():
    tw = PlanarTwist(2, [0.5, 0.5], (0, 1), 0.05, 0.25, 2.1)
    pts = sample_points(500)
    assert round_trip_error(tw, pts) < 1e-13


def test_twist_det_one_and_jacobian():
    tw = PlanarTwist(2, [0.5, 0.5], (0, 1), 0.05, 0.25, 1.3)
    pts = sample_points(300, lo=0.3, hi=0.7)
    J = tw.jacobian(pts)
    assert np.max(np.abs(np.linalg.det(J) - 1.0)) < 1e-12
    Jn = numeric_jacobian(tw, pts)
    assert np.max(np.abs(J - Jn)) < 5e-6


def test_twist_slab_window_3d():
    tw = PlanarTwist(3, [0.5, 0.5, 0.5], (0, 2), 0.05, 0.2, np.pi,
                     slabs=[(1, 0.5, 0.05, 0.15)])
    # inside the slab plateau: full rotation by pi about the (x,z) center
    p = np.array([[0.52, 0.5, 0.53]])
    got = tw.forward(p)
    assert np.allclose(got, [[0.48, 0.5, 0.47]], atol=1e-12)
    # outside the slab: identity
    p2 = np.array([[0.52, 0.8, 0.53]])
    assert np.array_equal(tw.forward(p2), p2)
    # determinant is exactly one everywhere
    pts = sample_points(200, n=3)
    J = tw.jacobian(pts)
    assert np.max(np.abs(np.linalg.det(J) - 1.0)) < 1e-12
    assert np.max(np.abs(J - numeric_jacobian(tw, pts))) < 5e-6


def test_pi_twist_pair_is_translation():
    # two half-turns about different centers translate the common rigid zone
    a = np.array([0.3, 0.5])
    b = np.array([0.34, 0.5])
    t1 = PlanarTwist(2, a, (0, 1), 0.1, 0.2, np.pi)
    t2 = PlanarTwist(2, b, (0, 1), 0.1, 0.2, np.pi)
    chain = TwistChain(2, [t1, t2])
    pts = a + (rng.random((200, 2)) - 0.5) * 0.07  # inside both rigid zones
    got = chain.forward(pts)
    assert np.max(np.abs(got - (pts + 2 * (b - a)))) < 1e-12


def test_twist_chain_matches_plain_composition():
    twists = [
        PlanarTwist(2, [0.25, 0.25], (0, 1), 0.05, 0.12, 1.0),
        PlanarTwist(2, [0.7, 0.3], (0, 1), 0.04, 0.1, -0.8),
        PlanarTwist(2, [0.5, 0.75], (0, 1), 0.06, 0.15, 2.5),
    ]
    chain = TwistChain(2, twists, cells=16)
    comp = CompositeMap(list(twists))
    pts = sample_points(1000)
    assert np.max(np.abs(chain.forward(pts) - comp.forward(pts))) < 1e-14
    assert np.max(np.abs(chain.inverse(pts) - comp.inverse(pts))) < 1e-14
    assert round_trip_error(chain, pts) < 1e-12


# ---------------------------------------------------------------------------
# wells and box compression
# ---------------------------------------------------------------------------

def test_axis_well_profile_shape():
    g = AxisWellProfile(0.0, 0.2, 0.25, 0.18)
    v = np.linspace(-0.4, 0.4, 801)
    gv = g(v)
    core = np.abs(v) <= 0.2
    assert np.max(np.abs(gv[core] - 0.18 * v[core])) < 1e-14
    outside = np.abs(v) >= 0.25
    assert np.array_equal(gv[outside], v[outside])
    assert np.all(np.diff(gv) > 0)  # strictly monotone
    # derivative matches finite differences and stays >= s
    d = g.deriv(v)
    fd = (g(v + 1e-7) - g(v - 1e-7)) / 2e-7
    assert np.max(np.abs(d - fd)) < 1e-5
    assert np.min(d) >= 0.18 - 1e-12


def test_axis_well_solve():
    g = AxisWellProfile(0.0, 0.2, 0.25, 0.18)
    x = np.linspace(-0.3, 0.3, 601)
    w = np.full_like(x, 1.0)
    y = x + w * (g(x) - x)
    back = g.solve(y, w)
    assert np.max(np.abs(back - x)) < 1e-12
    # partial window
    w = np.full_like(x, 0.4)
    y = x + w * (g(x) - x)
    assert np.max(np.abs(g.solve(y, w) - x)) < 1e-12


def make_compression():
    return BoxCompression(2, [
        {"center": [0.25, 0.25], "rho1": 0.19, "rho2": 0.23, "s": 0.2},
        {"center": [0.75, 0.75], "rho1": 0.19, "rho2": 0.23, "s": 0.2},
    ])


def test_box_compression_core_exact():
    sigma = make_compression()
    q = np.array([0.25, 0.25])
    pts = q + (rng.random((300, 2)) - 0.5) * 2 * 0.19
    got = sigma.forward(pts)
    want = q + 0.2 * (pts - q)
    assert np.max(np.abs(got - want)) < 1e-13


def test_box_compression_identity_outside():
    sigma = make_compression()
    pts = sample_points(2000)
    outside = np.all(np.abs(pts - [0.25, 0.25]) > 0.23, axis=1) \
        & np.all(np.abs(pts - [0.75, 0.75]) > 0.23, axis=1)
    got = sigma.forward(pts)
    assert np.array_equal(got[outside], pts[outside])


def test_box_compression_inverse_and_det():
    sigma = make_compression()
    pts = sample_points(2000)
    assert round_trip_error(sigma, pts) < 1e-11
    det = sigma.det_jacobian(pts)
    J = sigma.jacobian(pts)
    assert np.max(np.abs(np.linalg.det(J) - det)) < 1e-10
    Jn = numeric_jacobian(sigma, pts)
    assert np.max(np.abs(J - Jn)) < 2e-5
    # core determinant is exactly s^2
    core = np.all(np.abs(pts - [0.25, 0.25]) < 0.18, axis=1)
    assert np.allclose(det[core], 0.04, atol=1e-12)


def test_box_compression_overlap_rejected():
    with pytest.raises(ConstructionError):
        BoxCompression(2, [
            {"center": [0.4, 0.4], "rho1": 0.19, "rho2": 0.23, "s": 0.2},
            {"center": [0.6, 0.6], "rho1": 0.19, "rho2": 0.23, "s": 0.2},
        ])


# ---------------------------------------------------------------------------
# radial matrix blend
# ---------------------------------------------------------------------------

def test_radial_blend_exact_zones():
    M = np.diag([1.08, 1.0 / 1.08])
    blend = RadialMatrixBlend([0.5, 0.5], M, 0.1, 0.3)
    u = (rng.random((100, 2)) - 0.5) * 0.12
    inner = np.array([0.5, 0.5]) + u[np.linalg.norm(u, axis=1) < 0.1]
    got = blend.forward(inner)
    want = np.array([0.5, 0.5]) + (inner - [0.5, 0.5]) @ M.T
    assert np.max(np.abs(got - want)) < 1e-14
    far = np.array([[0.95, 0.5], [0.5, 0.05], [0.1, 0.9]])
    assert np.array_equal(blend.forward(far), far)


def test_radial_blend_inverse_and_jacobian():
    M = np.diag([1.08, 1.0 / 1.08])
    blend = RadialMatrixBlend([0.5, 0.5], M, 0.1, 0.3)
    pts = sample_points(500)
    assert round_trip_error(blend, pts) < 1e-12
    J = blend.jacobian(pts)
    assert np.max(np.abs(J - numeric_jacobian(blend, pts))) < 5e-6


def test_radial_blend_rejects_large_matrix():
    with pytest.raises(ConstructionError):
        RadialMatrixBlend([0.5, 0.5], np.diag([2.0, 0.5]), 0.1, 0.3)


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------

def test_flow_zero_field_is_identity():
    grid = DomainGrid(2, 33)
    field = VectorFieldGrid(grid, np.zeros((33, 33, 2)))
    fm = flow_time1(field, steps=8)
    pts = sample_points(100)
    assert np.array_equal(fm.forward(pts), pts)
    assert np.array_equal(fm.inverse(pts), pts)


def test_flow_constant_field_is_translation():
    grid = DomainGrid(2, 33)
    vals = np.zeros((33, 33, 2))
    vals[..., 0] = 0.05
    vals[..., 1] = -0.02
    field = VectorFieldGrid(grid, vals)
    fm = flow_time1(field, steps=8)
    pts = sample_points(100, lo=0.3, hi=0.7)
    assert np.max(np.abs(fm.forward(pts) - (pts + [0.05, -0.02]))) < 1e-12


def test_flow_rotation_field_matches_twist():
    # field v = omega(rho) * perp(x - c) integrates to the planar twist with
    # angle profile omega, because trajectories stay on circles
    grid = DomainGrid(2, 257)
    nodes = grid.nodes()
    c = np.array([0.5, 0.5])
    u = nodes - c
    rho = np.linalg.norm(u, axis=1)
    omega = np.pi * smooth_step((0.35 - rho) / (0.35 - 0.15))
    vals = np.stack([-omega * u[:, 1], omega * u[:, 0]], axis=1)
    field = VectorFieldGrid(grid, vals.reshape(257, 257, 2))
    fm = flow_time1(field, steps=64)
    oracle = PlanarTwist(2, c, (0, 1), 0.15, 0.35, np.pi)
    pts = sample_points(400, lo=0.12, hi=0.88)
    assert np.max(np.abs(fm.forward(pts) - oracle.forward(pts))) < 5e-4
    assert np.max(np.abs(fm.inverse(pts) - oracle.inverse(pts))) < 5e-4
    # divergence-free field: volume is preserved to interpolation accuracy
    dets = np.linalg.det(numeric_jacobian(fm, sample_points(100, lo=0.2, hi=0.8),
                                          h=1e-5))
    assert np.max(np.abs(dets - 1.0)) < 1e-3


def test_flow_zero_region_bitwise():
    grid = DomainGrid(2, 33)
    vals = np.zeros((33, 33, 2))
    vals[..., 0] = 1e-3  # tiny drift everywhere
    def zero_region(pts):
        return np.all(np.abs(pts - 0.25) < 0.1, axis=1)
    field = VectorFieldGrid(grid, vals)
    fm = flow_time1(field, steps=4, zero_region=zero_region)
    inside = np.array([[0.25, 0.25], [0.3, 0.2]])
    assert np.array_equal(fm.forward(inside), inside)
    outside = np.array([[0.6, 0.6]])
    assert not np.array_equal(fm.forward(outside), outside)


def test_round_trip_tolerances():
    # analytic building blocks round-trip to 1e-6; flows to 1e-4
    sigma = make_compression()
    tw = PlanarTwist(2, [0.5, 0.5], (0, 1), 0.1, 0.2, 1.0)
    pts = sample_points(500)
    assert round_trip_error(sigma, pts) < 1e-6
    assert round_trip_error(tw, pts) < 1e-6
    grid = DomainGrid(2, 65)
    nodes = grid.nodes()
    u = nodes - [0.5, 0.5]
    rho = np.linalg.norm(u, axis=1)
    omega = 0.8 * smooth_step((0.3 - rho) / 0.2)
    vals = np.stack([-omega * u[:, 1], omega * u[:, 0]], axis=1)
    fm = flow_time1(VectorFieldGrid(grid, vals.reshape(65, 65, 2)), steps=32)
    assert round_trip_error(fm, sample_points(300, lo=0.15, hi=0.85)) < 1e-4

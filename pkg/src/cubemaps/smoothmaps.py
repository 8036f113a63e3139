"""Smooth-map calculus: bump/cutoff profiles, exact local building blocks
(planar twists, windowed compression wells), compositions and similarity
conjugation, numeric derivatives, and grid-sampled flow maps.

Every map here is vectorized over (m, n) point arrays.  Analytic Jacobians
and determinants are supplied wherever a closed form exists; everything else
falls back to central differences.
"""

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import (CubicSpline, NdBSpline, RectBivariateSpline,
                               RegularGridInterpolator)
from scipy.special import expit

from .errors import ConstructionError, NumericalError, SpecificationError

TAU_INV_ANALYTIC = 1e-6
TAU_INV_FLOW = 1e-4


# ---------------------------------------------------------------------------
# scalar profiles
# ---------------------------------------------------------------------------

def smooth_step(v):
    """C-infinity step: 0 for v <= 0, 1 for v >= 1, strictly rising between.

    All derivatives vanish at both ends, so piecewise definitions glued with
    it stay smooth.
    """
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    out[v <= 0.0] = 0.0
    out[v >= 1.0] = 1.0
    mid = (v > 0.0) & (v < 1.0)
    vm = v[mid]
    out[mid] = expit(1.0 / (1.0 - vm) - 1.0 / vm)
    return out


def smooth_step_deriv(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    mid = (v > 0.0) & (v < 1.0)
    vm = v[mid]
    p = expit(1.0 / (1.0 - vm) - 1.0 / vm)
    out[mid] = p * (1.0 - p) * (1.0 / (1.0 - vm) ** 2 + 1.0 / vm ** 2)
    return out


# Antiderivative of smooth_step on [0,1], tabulated once.  By symmetry the
# full integral is exactly 1/2.
_STEP_NODES = np.linspace(0.0, 1.0, 4097)
_STEP_TABLE = cumulative_simpson(smooth_step(_STEP_NODES), x=_STEP_NODES, initial=0.0)
_STEP_INTEGRAL = CubicSpline(_STEP_NODES, _STEP_TABLE)


def smooth_step_integral(v):
    """Integral of smooth_step from 0 to v (clipped to [0,1] outside)."""
    v = np.asarray(v, dtype=float)
    below = np.clip(v, 0.0, 1.0)
    return _STEP_INTEGRAL(below) + np.maximum(v - 1.0, 0.0)


def plateau(x, center, rho1, rho2):
    """Window that is 1 on [center +- rho1], 0 outside [center +- rho2]."""
    t = np.abs(np.asarray(x, dtype=float) - center)
    return smooth_step((rho2 - t) / (rho2 - rho1))


def plateau_deriv(x, center, rho1, rho2):
    x = np.asarray(x, dtype=float)
    t = x - center
    u = (rho2 - np.abs(t)) / (rho2 - rho1)
    return -np.sign(t) * smooth_step_deriv(u) / (rho2 - rho1)


class Cutoff:
    """Non-decreasing smooth profile: 0 up to `inner`, 1 from `outer` on.

    The transition integrates a plateau-flattened bump, which keeps the peak
    derivative at (1/(1-m)) / (outer-inner) instead of the roughly twice
    larger value a plain bump gives; the measured bound is asserted < 9 at
    construction.
    """

    def __init__(self, inner=0.6, outer=0.8, flat=0.25):
        self.inner = inner
        self.outer = outer
        self.flat = flat
        self._norm = 1.0 / (1.0 - flat)
        self._width = outer - inner
        t = np.linspace(inner, outer, 20001)
        self.derivative_bound = float(np.max(self.derivative(t)))
        if not self.derivative_bound < 9.0:
            raise ConstructionError(
                f"cutoff derivative bound {self.derivative_bound:.3f} >= 9")

    def _bump(self, u):
        # the flattened profile on [0,1]: rises on [0,m], flat at 1, falls
        m = self.flat
        up = smooth_step(u / m)
        down = smooth_step((1.0 - u) / m)
        return np.minimum(up, down)

    def _bump_integral(self, u):
        m = self.flat
        u = np.asarray(u, dtype=float)
        out = np.where(
            u <= m,
            m * smooth_step_integral(u / m),
            np.where(
                u <= 1.0 - m,
                m * 0.5 + (u - m),
                m * 0.5 + (1.0 - 2.0 * m)
                + m * (0.5 - smooth_step_integral((1.0 - u) / m)),
            ),
        )
        return out

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        u = np.clip((t - self.inner) / self._width, 0.0, 1.0)
        return self._norm * self._bump_integral(u)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        u = (t - self.inner) / self._width
        inside = (u > 0.0) & (u < 1.0)
        out = np.zeros_like(t)
        out[inside] = self._norm / self._width * self._bump(u[inside])
        return out


_CUTOFF = None


def cutoff_phi():
    """The shared cutoff profile (inner 3/5, outer 4/5)."""
    global _CUTOFF
    if _CUTOFF is None:
        _CUTOFF = Cutoff()
    return _CUTOFF


# ---------------------------------------------------------------------------
# map base class and affine family
# ---------------------------------------------------------------------------

def _as_points(x, n):
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.shape[-1] != n:
        raise SpecificationError(f"expected points in R^{n}, got shape {pts.shape}")
    return pts, single


class SmoothMap:
    """Base: a diffeomorphism with vectorized forward/inverse evaluators.

    `support` (an object with .contains(pts), or None for global) bounds the
    region where the map may differ from `outside` behavior, which is either
    "identity" or a pair (A, b) for the affine map x -> A x + b.
    `metadata` records which construction produced the map and with what
    parameters.
    """

    n = None
    support = None
    outside = "identity"

    def __init__(self, n, metadata=None):
        self.n = n
        self.metadata = dict(metadata or {})

    def forward(self, pts):
        raise NotImplementedError

    def inverse(self, pts):
        raise NotImplementedError

    def jacobian(self, pts):
        """Analytic (m,n,n) derivative, or None when not available."""
        return None

    def det_jacobian(self, pts):
        J = self.jacobian(pts)
        if J is None:
            return None
        return np.linalg.det(J)

    def forward_with_det(self, pts):
        """(forward(pts), det_jacobian(pts)); chains override to share work."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.forward(pts), self.det_jacobian(pts)

    def forward1(self, x):
        return self.forward(np.asarray(x, dtype=float)[None, :])[0]

    def inverse1(self, y):
        return self.inverse(np.asarray(y, dtype=float)[None, :])[0]

    def describe(self):
        d = {"type": type(self).__name__, "n": self.n}
        d.update(self.metadata)
        return d


class IdentityMap(SmoothMap):
    def forward(self, pts):
        return np.array(pts, dtype=float, copy=True)

    inverse = forward

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.broadcast_to(np.eye(self.n), (len(pts), self.n, self.n)).copy()

    def det_jacobian(self, pts):
        return np.ones(len(np.atleast_2d(pts)))


class TranslationMap(SmoothMap):
    def __init__(self, v, metadata=None):
        v = np.asarray(v, dtype=float)
        super().__init__(len(v), metadata)
        self.v = v

    def forward(self, pts):
        return np.asarray(pts, dtype=float) + self.v

    def inverse(self, pts):
        return np.asarray(pts, dtype=float) - self.v

    def jacobian(self, pts):
        return np.broadcast_to(np.eye(self.n), (len(pts), self.n, self.n)).copy()

    def det_jacobian(self, pts):
        return np.ones(len(np.atleast_2d(pts)))


class AffineMap(SmoothMap):
    """x -> A x + b."""

    def __init__(self, A, b, metadata=None):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        super().__init__(len(b), metadata)
        self.A = A
        self.b = b
        self._Ainv = np.linalg.inv(A)
        self._det = float(np.linalg.det(A))

    def forward(self, pts):
        return np.asarray(pts, dtype=float) @ self.A.T + self.b

    def inverse(self, pts):
        return (np.asarray(pts, dtype=float) - self.b) @ self._Ainv.T

    def jacobian(self, pts):
        return np.broadcast_to(self.A, (len(pts), self.n, self.n)).copy()

    def det_jacobian(self, pts):
        return np.full(len(np.atleast_2d(pts)), self._det)


class InverseMap(SmoothMap):
    """View of another map with forward/inverse exchanged."""

    def __init__(self, inner):
        super().__init__(inner.n, {"inverse_of": inner.describe()})
        self.inner = inner
        self.support = inner.support

    def forward(self, pts):
        return self.inner.inverse(pts)

    def inverse(self, pts):
        return self.inner.forward(pts)

    def jacobian(self, pts):
        pre = self.inner.inverse(pts)
        J = self.inner.jacobian(pre)
        if J is None:
            return None
        return np.linalg.inv(J)

    def det_jacobian(self, pts):
        pre = self.inner.inverse(pts)
        d = self.inner.det_jacobian(pre)
        if d is None:
            return None
        return 1.0 / d

    def forward_with_det(self, pts):
        pre = self.inner.inverse(pts)
        d = self.inner.det_jacobian(pre)
        return pre, (None if d is None else 1.0 / d)


class CompositeMap(SmoothMap):
    """Lazy composition; forward applies maps in list order."""

    def __init__(self, maps, metadata=None):
        maps = [m for m in maps if not isinstance(m, IdentityMap)]
        if not maps:
            raise SpecificationError("empty composition")
        n = maps[0].n
        for m in maps:
            if m.n != n:
                raise SpecificationError("dimension mismatch in composition")
        super().__init__(n, metadata)
        self.maps = maps

    def forward(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        for m in self.maps:
            pts = m.forward(pts)
        return pts

    def inverse(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        for m in reversed(self.maps):
            pts = m.inverse(pts)
        return pts

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        J = None
        for m in self.maps:
            Jm = m.jacobian(pts)
            if Jm is None:
                return None
            J = Jm if J is None else Jm @ J
            pts = m.forward(pts)
        return J

    def det_jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        det = np.ones(len(pts))
        for m in self.maps:
            d = m.det_jacobian(pts)
            if d is None:
                return None
            det = det * d
            pts = m.forward(pts)
        return det

    def forward_with_det(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        det = np.ones(len(pts))
        for m in self.maps:
            pts, d = m.forward_with_det(pts)
            if d is None:
                det = None
            elif det is not None:
                det = det * d
        return pts, det


def compose(maps, metadata=None):
    """Flattening composition helper."""
    flat = []
    for m in maps:
        if isinstance(m, CompositeMap):
            flat.extend(m.maps)
        elif not isinstance(m, IdentityMap):
            flat.append(m)
    if not flat:
        return IdentityMap(maps[0].n if maps else 1)
    if len(flat) == 1 and metadata is None:
        return flat[0]
    return CompositeMap(flat, metadata)


class ConjugatedMap(SmoothMap):
    """S o inner o S^{-1} for the similarity S(x) = offset + scale * x.

    The derivative matrix at corresponding points is unchanged by the
    conjugation, so Jacobians and determinants delegate directly.
    """

    def __init__(self, inner, scale, offset, metadata=None):
        if scale <= 0:
            raise SpecificationError(f"similarity scale must be > 0, got {scale}")
        super().__init__(inner.n, metadata)
        self.inner = inner
        self.scale = float(scale)
        self.offset = np.asarray(offset, dtype=float)

    def _down(self, pts):
        return (np.asarray(pts, dtype=float) - self.offset) / self.scale

    def _up(self, pts):
        return self.offset + self.scale * np.asarray(pts, dtype=float)

    def forward(self, pts):
        return self._up(self.inner.forward(self._down(pts)))

    def inverse(self, pts):
        return self._up(self.inner.inverse(self._down(pts)))

    def jacobian(self, pts):
        return self.inner.jacobian(self._down(pts))

    def det_jacobian(self, pts):
        return self.inner.det_jacobian(self._down(pts))


def conjugate_into_cube(m, cube, metadata=None):
    """Transplant a map of the unit cube into `cube` by similarity."""
    edge = float(cube.edge)
    if edge <= 0:
        raise SpecificationError(f"degenerate target cube: {cube}")
    lo = np.array([float(v) for v in cube.lo()])
    md = {"conjugated_into": [float(v) for v in cube.center], "edge": edge}
    md.update(metadata or {})
    return ConjugatedMap(m, edge, lo, md)


# ---------------------------------------------------------------------------
# planar twists
# ---------------------------------------------------------------------------

class PlanarTwist(SmoothMap):
    """Compactly supported rotation in the (i, j) coordinate plane.

    Rotates by the full `angle` rigidly inside radius r_in (around `center`,
    measured in the plane), decays to zero at r_out, optionally windowed by
    plateau factors in the remaining coordinates (slabs).  The rotation
    angle depends only on quantities the rotation itself preserves, so the
    inverse is the twist by -angle and the Jacobian determinant is exactly 1.
    """

    def __init__(self, n, center, axes, r_in, r_out, angle, slabs=(), metadata=None):
        super().__init__(n, metadata)
        if not 0 < r_in < r_out:
            raise SpecificationError(f"need 0 < r_in < r_out, got {r_in}, {r_out}")
        self.center = np.asarray(center, dtype=float)
        self.i, self.j = axes
        if self.i == self.j or not (0 <= self.i < n and 0 <= self.j < n):
            raise SpecificationError(f"bad twist axes {axes} for n={n}")
        self.r_in = float(r_in)
        self.r_out = float(r_out)
        self.angle = float(angle)
        # slabs: (axis, center, rho1, rho2) plateau windows on other axes
        self.slabs = [tuple(s) for s in slabs]
        for ax, _, _, _ in self.slabs:
            if ax in (self.i, self.j):
                raise SpecificationError("slab axis collides with twist plane")

    def _theta(self, pts):
        u = pts[:, self.i] - self.center[self.i]
        v = pts[:, self.j] - self.center[self.j]
        rho = np.hypot(u, v)
        th = self.angle * smooth_step((self.r_out - rho) / (self.r_out - self.r_in))
        for ax, c, rho1, rho2 in self.slabs:
            th = th * plateau(pts[:, ax], c, rho1, rho2)
        return th, u, v, rho

    def _apply(self, pts, sign):
        pts = np.array(pts, dtype=float, copy=True)
        th, u, v, _ = self._theta(pts)
        act = th != 0.0
        if not act.any():
            return pts
        th = sign * th[act]
        c, s = np.cos(th), np.sin(th)
        u, v = u[act], v[act]
        pts[act, self.i] = self.center[self.i] + c * u - s * v
        pts[act, self.j] = self.center[self.j] + s * u + c * v
        return pts

    def forward(self, pts):
        return self._apply(pts, +1.0)

    def inverse(self, pts):
        # the angle profile depends only on rho and the slab coordinates,
        # all invariant under the rotation, so this is exact
        return self._apply(pts, -1.0)

    def bbox(self):
        lo = self.center.copy()
        hi = self.center.copy()
        lo[[self.i, self.j]] -= self.r_out
        hi[[self.i, self.j]] += self.r_out
        lo[np.setdiff1d(np.arange(self.n), [self.i, self.j])] = 0.0
        hi[np.setdiff1d(np.arange(self.n), [self.i, self.j])] = 1.0
        for ax, c, _, rho2 in self.slabs:
            lo[ax] = c - rho2
            hi[ax] = c + rho2
        return lo, hi

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        m = len(pts)
        th, u, v, rho = self._theta(pts)
        c, s = np.cos(th), np.sin(th)
        # gradient of theta
        grad = np.zeros((m, self.n))
        with np.errstate(invalid="ignore", divide="ignore"):
            dstep = smooth_step_deriv((self.r_out - rho) / (self.r_out - self.r_in))
            dth_drho = -self.angle * dstep / (self.r_out - self.r_in)
            base = np.where(rho > 0.0, dth_drho / np.maximum(rho, 1e-300), 0.0)
        slabprod = np.ones(m)
        for ax, cc, rho1, rho2 in self.slabs:
            slabprod = slabprod * plateau(pts[:, ax], cc, rho1, rho2)
        grad[:, self.i] = base * u * slabprod
        grad[:, self.j] = base * v * slabprod
        ramp = smooth_step((self.r_out - rho) / (self.r_out - self.r_in))
        for ax, cc, rho1, rho2 in self.slabs:
            others = np.ones(m)
            for ax2, cc2, r12, r22 in self.slabs:
                if ax2 != ax:
                    others = others * plateau(pts[:, ax2], cc2, r12, r22)
            grad[:, ax] = self.angle * ramp * others * plateau_deriv(
                pts[:, ax], cc, rho1, rho2)
        J = np.broadcast_to(np.eye(self.n), (m, self.n, self.n)).copy()
        # d(rotated)/dx = R + dR/dtheta (u,v) grad^T on the plane rows
        ru = c * u - s * v
        rv = s * u + c * v
        dru = -s * u - c * v     # d(ru)/dtheta
        drv = c * u - s * v      # d(rv)/dtheta
        J[:, self.i, :] = dru[:, None] * grad
        J[:, self.j, :] = drv[:, None] * grad
        J[:, self.i, self.i] += c
        J[:, self.i, self.j] += -s
        J[:, self.j, self.i] += s
        J[:, self.j, self.j] += c
        return J

    def det_jacobian(self, pts):
        return np.ones(len(np.atleast_2d(pts)))


class TwistChain(SmoothMap):
    """Ordered composition of planar twists with a cell-index accelerator.

    Long chains touch each point only through the few twists whose support
    can contain it, found via a coarse cell grid over the unit cube.
    """

    def __init__(self, n, twists, cells=32, metadata=None):
        super().__init__(n, metadata)
        self.twists = list(twists)
        self.cells = cells
        self._lut = self._build_lut()

    def _build_lut(self):
        K = self.cells
        axes = [np.arange(K) for _ in range(self.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        lo_cell = np.stack([m.ravel() for m in mesh], axis=1) / K
        hi_cell = lo_cell + 1.0 / K
        lut = np.zeros((len(self.twists), K ** self.n), dtype=bool)
        for t, tw in enumerate(self.twists):
            lo, hi = tw.bbox()
            hit = np.all((hi_cell >= lo) & (lo_cell <= hi), axis=1)
            lut[t] = hit
        return lut

    def _cell_ids(self, pts):
        K = self.cells
        idx = np.clip((pts * K).astype(np.int64), 0, K - 1)
        ids = idx[:, 0]
        for d in range(1, self.n):
            ids = ids * K + idx[:, d]
        return ids

    def _run(self, pts, twists, sign):
        pts = np.array(pts, dtype=float, copy=True)
        ids = self._cell_ids(pts)
        order = range(len(self.twists)) if sign > 0 else range(len(self.twists) - 1, -1, -1)
        for t in order:
            mask = self._lut[t][ids]
            if not mask.any():
                continue
            sub = self.twists[t]._apply(pts[mask], sign)
            pts[mask] = sub
            ids[mask] = self._cell_ids(sub)
        return pts

    def forward(self, pts):
        return self._run(pts, self.twists, +1.0)

    def inverse(self, pts):
        return self._run(pts, self.twists, -1.0)

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        J = np.broadcast_to(np.eye(self.n), (len(pts), self.n, self.n)).copy()
        for tw in self.twists:
            J = tw.jacobian(pts) @ J
            pts = tw.forward(pts)
        return J

    def det_jacobian(self, pts):
        return np.ones(len(np.atleast_2d(pts)))


# ---------------------------------------------------------------------------
# localized axis slides
# ---------------------------------------------------------------------------

def ramp_window(x, a0, a1, b1, b0):
    """Flat-top window: exactly 1 on [a1, b1], 0 outside (a0, b0).

    The two C-infinity ramps [a0, a1] and [b1, b0] are independent, so the
    window can be widened on whichever side has room.
    """
    x = np.asarray(x, dtype=float)
    return (smooth_step((x - a0) / (a1 - a0))
            * smooth_step((b0 - x) / (b0 - b1)))


def ramp_window_deriv(x, a0, a1, b1, b0):
    x = np.asarray(x, dtype=float)
    up = smooth_step((x - a0) / (a1 - a0))
    down = smooth_step((b0 - x) / (b0 - b1))
    dup = smooth_step_deriv((x - a0) / (a1 - a0)) / (a1 - a0)
    ddown = smooth_step_deriv((b0 - x) / (b0 - b1)) / (b0 - b1)
    return dup * down - up * ddown


class SlideMap(SmoothMap):
    """Compactly supported translation along one coordinate axis.

    Displaces points by delta * B(z) along `axis`, where B is a product of
    flat-top windows, one per coordinate.  On the inner box (B == 1) this is
    the exact translation by delta; off the outer box it is the identity.
    Only the axis coordinate moves, so the cross-window factor is invariant
    and the inverse reduces to a scalar fixed-point iteration whose
    contraction rate |delta| * max|window'| is below 1 by construction.  The
    Jacobian is I + delta * e_axis grad(B)^T, a single-row perturbation with
    determinant 1 + delta * dB/dz_axis.
    """

    def __init__(self, n, axis, delta, windows, metadata=None):
        super().__init__(n, metadata)
        if not 0 <= axis < n:
            raise SpecificationError(f"bad slide axis {axis} for n={n}")
        if len(windows) != n:
            raise SpecificationError(
                f"need one window per coordinate, got {len(windows)} for n={n}")
        self.axis = int(axis)
        self.delta = float(delta)
        self.windows = [tuple(float(v) for v in w) for w in windows]
        for a0, a1, b1, b0 in self.windows:
            if not (a0 < a1 <= b1 < b0):
                raise SpecificationError(f"bad window {(a0, a1, b1, b0)}")
        a0, a1, b1, b0 = self.windows[self.axis]
        rate = abs(self.delta) * 2.0 / min(a1 - a0, b0 - b1)
        if rate >= 0.9:
            raise ConstructionError(
                f"slide by {delta:+.4f} too steep for its ramps (rate {rate:.3f})")
        self._rate = rate
        # iterations for the inverse to contract below 1e-16 from a cold start
        self._iters = 8 + int(np.ceil(
            np.log(1e-16 / max(abs(self.delta), 1e-12))
            / np.log(max(rate, 0.05))))

    def _axis_window(self, z, deriv=False):
        a0, a1, b1, b0 = self.windows[self.axis]
        if deriv:
            return ramp_window_deriv(z, a0, a1, b1, b0)
        return ramp_window(z, a0, a1, b1, b0)

    def _cross(self, pts):
        c = np.ones(len(pts))
        for d, (a0, a1, b1, b0) in enumerate(self.windows):
            if d != self.axis:
                c = c * ramp_window(pts[:, d], a0, a1, b1, b0)
        return c

    def forward(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        c = self._cross(pts)
        act = c > 0.0
        if act.any():
            z = pts[act, self.axis]
            pts[act, self.axis] = z + self.delta * c[act] * self._axis_window(z)
        return pts

    def inverse(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        # cross coordinates are untouched by forward, so c is known exactly
        c = self._cross(pts)
        act = c > 0.0
        if not act.any():
            return pts
        y = pts[act, self.axis]
        dc = self.delta * c[act]
        z = y - dc * self._axis_window(y)
        for _ in range(self._iters):
            znew = y - dc * self._axis_window(z)
            done = np.max(np.abs(znew - z)) < 1e-15
            z = znew
            if done:
                break
        pts[act, self.axis] = z
        return pts

    def bbox(self):
        # the 1-d axis map is monotone and fixes the window ends, so the
        # outer box is invariant under both forward and inverse
        lo = np.array([w[0] for w in self.windows])
        hi = np.array([w[3] for w in self.windows])
        return lo, hi

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        m = len(pts)
        vals = [ramp_window(pts[:, d], *self.windows[d]) for d in range(self.n)]
        ders = [ramp_window_deriv(pts[:, d], *self.windows[d])
                for d in range(self.n)]
        J = np.broadcast_to(np.eye(self.n), (m, self.n, self.n)).copy()
        for d in range(self.n):
            others = np.ones(m)
            for d2 in range(self.n):
                if d2 != d:
                    others = others * vals[d2]
            J[:, self.axis, d] += self.delta * ders[d] * others
        return J

    def det_jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        return 1.0 + self.delta * self._cross(pts) * self._axis_window(
            pts[:, self.axis], deriv=True)

    def forward_with_det(self, pts):
        # shares the cross-window product between the value and the
        # determinant; the det is taken at the starting point
        pts = np.array(np.atleast_2d(pts), dtype=float, copy=True)
        det = np.ones(len(pts))
        c = self._cross(pts)
        act = c > 0.0
        if act.any():
            z = pts[act, self.axis]
            dc = self.delta * c[act]
            det[act] = 1.0 + dc * self._axis_window(z, deriv=True)
            pts[act, self.axis] = z + dc * self._axis_window(z)
        return pts, det


class SlideChain(SmoothMap):
    """Ordered composition of axis slides with a cell-index accelerator.

    Same pruning idea as TwistChain, but slides have non-unit determinants,
    so Jacobians and determinant products track the propagated points.
    """

    def __init__(self, n, slides, cells=32, metadata=None):
        super().__init__(n, metadata)
        self.slides = list(slides)
        self.cells = cells
        self._lut = self._build_lut()

    def _build_lut(self):
        K = self.cells
        axes = [np.arange(K) for _ in range(self.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        lo_cell = np.stack([m.ravel() for m in mesh], axis=1) / K
        hi_cell = lo_cell + 1.0 / K
        lut = np.zeros((len(self.slides), K ** self.n), dtype=bool)
        for t, sl in enumerate(self.slides):
            lo, hi = sl.bbox()
            lut[t] = np.all((hi_cell >= lo) & (lo_cell <= hi), axis=1)
        return lut

    def _cell_ids(self, pts):
        K = self.cells
        idx = np.clip((pts * K).astype(np.int64), 0, K - 1)
        ids = idx[:, 0]
        for d in range(1, self.n):
            ids = ids * K + idx[:, d]
        return ids

    def forward(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        ids = self._cell_ids(pts)
        for t, sl in enumerate(self.slides):
            mask = self._lut[t][ids]
            if not mask.any():
                continue
            sub = sl.forward(pts[mask])
            pts[mask] = sub
            ids[mask] = self._cell_ids(sub)
        return pts

    def inverse(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        ids = self._cell_ids(pts)
        for t in range(len(self.slides) - 1, -1, -1):
            mask = self._lut[t][ids]
            if not mask.any():
                continue
            sub = self.slides[t].inverse(pts[mask])
            pts[mask] = sub
            ids[mask] = self._cell_ids(sub)
        return pts

    def jacobian(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        ids = self._cell_ids(pts)
        J = np.broadcast_to(np.eye(self.n), (len(pts), self.n, self.n)).copy()
        for t, sl in enumerate(self.slides):
            mask = self._lut[t][ids]
            if not mask.any():
                continue
            sub = pts[mask]
            J[mask] = sl.jacobian(sub) @ J[mask]
            moved = sl.forward(sub)
            pts[mask] = moved
            ids[mask] = self._cell_ids(moved)
        return J

    def det_jacobian(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        ids = self._cell_ids(pts)
        det = np.ones(len(pts))
        for t, sl in enumerate(self.slides):
            mask = self._lut[t][ids]
            if not mask.any():
                continue
            sub = pts[mask]
            det[mask] = det[mask] * sl.det_jacobian(sub)
            moved = sl.forward(sub)
            pts[mask] = moved
            ids[mask] = self._cell_ids(moved)
        return det

    def forward_with_det(self, pts):
        pts = np.array(np.atleast_2d(pts), dtype=float, copy=True)
        ids = self._cell_ids(pts)
        det = np.ones(len(pts))
        for t, sl in enumerate(self.slides):
            mask = self._lut[t][ids]
            if not mask.any():
                continue
            moved, d = sl.forward_with_det(pts[mask])
            if d is None:
                det = None
            elif det is not None:
                det[mask] = det[mask] * d
            pts[mask] = moved
            ids[mask] = self._cell_ids(moved)
        return pts, det


# ---------------------------------------------------------------------------
# windowed compression wells
# ---------------------------------------------------------------------------

class AxisWellProfile:
    """1-D profile: linear contraction by s on [q +- rho1], identity off
    [q +- rho2], monotone C-infinity bridges between.

    The bridge derivative is s + (1-s)*step + E*step', with E fixed by the
    requirement that the bridge climbs exactly from q + s*rho1 to q + rho2;
    E >= 0 keeps the derivative >= s > 0 everywhere.
    """

    def __init__(self, q, rho1, rho2, s):
        if not (0 < s < 1 and 0 < rho1 < rho2):
            raise SpecificationError(
                f"bad well parameters q={q} rho1={rho1} rho2={rho2} s={s}")
        self.q = float(q)
        self.rho1 = float(rho1)
        self.rho2 = float(rho2)
        self.s = float(s)
        self.w = self.rho2 - self.rho1
        self.E = (self.rho2 - self.s * self.rho1) / self.w - (1.0 + self.s) / 2.0
        if self.E < 0:
            raise ConstructionError(
                f"well bridge would be non-monotone (E={self.E:.4f})")
        self.max_slope = self.s + (1.0 - self.s) + 2.0 * self.E

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        t = v - self.q
        a = np.abs(t)
        out = np.where(a <= self.rho1, self.q + self.s * t, v)
        bridge = (a > self.rho1) & (a < self.rho2)
        if bridge.any():
            u = (a[bridge] - self.rho1) / self.w
            val = (self.s * self.rho1
                   + self.w * (self.s * u
                               + (1.0 - self.s) * smooth_step_integral(u)
                               + self.E * smooth_step(u)))
            out = np.array(out)
            out[bridge] = self.q + np.sign(t[bridge]) * val
        return out

    def deriv(self, v):
        v = np.asarray(v, dtype=float)
        a = np.abs(v - self.q)
        out = np.where(a <= self.rho1, self.s, 1.0)
        bridge = (a > self.rho1) & (a < self.rho2)
        if bridge.any():
            u = (a[bridge] - self.rho1) / self.w
            out = np.array(out)
            out[bridge] = (self.s + (1.0 - self.s) * smooth_step(u)
                           + self.E * smooth_step_deriv(u) / 1.0)
        return out

    def solve(self, y, window):
        """Solve x + window*(g(x) - x) = y for x, elementwise (window in [0,1])."""
        y = np.asarray(y, dtype=float)
        window = np.asarray(window, dtype=float)
        lo = np.minimum(y, 2.0 * self.q - y)  # symmetric guesses
        lo = np.full_like(y, self.q - self.rho2)
        hi = np.full_like(y, self.q + self.rho2)
        outside = np.abs(y - self.q) >= self.rho2
        x = np.array(y, copy=True)
        act = ~outside & (window > 0.0)
        if act.any():
            la, ha = lo[act], hi[act]
            ya, wa = y[act], window[act]
            for _ in range(52):
                mid = 0.5 * (la + ha)
                val = mid + wa * (self(mid) - mid)
                high = val > ya
                ha = np.where(high, mid, ha)
                la = np.where(high, la, mid)
            x[act] = 0.5 * (la + ha)
        return x


class BoxCompression(SmoothMap):
    """Simultaneous compression of several disjoint boxes toward their
    centers: exactly x -> q + s(x - q) on each core box [q +- rho1]^n,
    identity outside the support boxes [q +- rho2]^n.

    Realized per box as a composition of single-axis moves, each windowed by
    plateau factors in the other coordinates; every factor's Jacobian is a
    rank-one update of the identity, so determinants multiply in closed form.
    """

    def __init__(self, n, wells, metadata=None):
        """wells: list of dicts with keys center (n,), rho1, rho2, s."""
        super().__init__(n, metadata)
        self.boxes = []
        for w in wells:
            q = np.asarray(w["center"], dtype=float)
            profile = AxisWellProfile(0.0, w["rho1"], w["rho2"], w["s"])
            self.boxes.append({
                "q": q, "rho1": float(w["rho1"]), "rho2": float(w["rho2"]),
                "s": float(w["s"]), "profile": profile,
            })
        for a in range(len(self.boxes)):
            for b in range(a + 1, len(self.boxes)):
                qa, qb = self.boxes[a]["q"], self.boxes[b]["q"]
                if np.max(np.abs(qa - qb)) < self.boxes[a]["rho2"] + self.boxes[b]["rho2"]:
                    raise ConstructionError("compression box supports overlap")
        self.max_slope = max(b["profile"].max_slope for b in self.boxes)

    def _window(self, pts, box, skip_axis):
        w = np.ones(len(pts))
        for e in range(self.n):
            if e == skip_axis:
                continue
            w = w * plateau(pts[:, e], box["q"][e], box["rho1"], box["rho2"])
        return w

    def forward(self, pts, with_det=False):
        pts = np.array(pts, dtype=float, copy=True)
        det = np.ones(len(pts)) if with_det else None
        for box in self.boxes:
            mask = np.all(np.abs(pts - box["q"]) < box["rho2"], axis=1)
            if not mask.any():
                continue
            sub = pts[mask]
            sdet = np.ones(len(sub)) if with_det else None
            prof = box["profile"]
            for d in range(self.n):
                w = self._window(sub, box, d)
                t = sub[:, d] - box["q"][d]
                g = box["q"][d] + prof(t + 0.0)  # profile centered at 0
                if with_det:
                    sdet = sdet * (1.0 + w * (prof.deriv(t) - 1.0))
                sub[:, d] = sub[:, d] + w * (g - sub[:, d])
            pts[mask] = sub
            if with_det:
                det[mask] = sdet
        return (pts, det) if with_det else pts

    def inverse(self, pts):
        pts = np.array(pts, dtype=float, copy=True)
        for box in self.boxes:
            mask = np.all(np.abs(pts - box["q"]) < box["rho2"], axis=1)
            if not mask.any():
                continue
            sub = pts[mask]
            prof = box["profile"]
            for d in range(self.n - 1, -1, -1):
                w = self._window(sub, box, d)
                t = prof.solve(sub[:, d] - box["q"][d], w)
                sub[:, d] = box["q"][d] + t
            pts[mask] = sub
        return pts

    def det_jacobian(self, pts):
        _, det = self.forward(pts, with_det=True)
        return det

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        m = len(pts)
        J = np.broadcast_to(np.eye(self.n), (m, self.n, self.n)).copy()
        state = np.array(pts, copy=True)
        for box in self.boxes:
            mask = np.all(np.abs(state - box["q"]) < box["rho2"], axis=1)
            if not mask.any():
                continue
            idx = np.where(mask)[0]
            sub = state[idx]
            subJ = J[idx]
            prof = box["profile"]
            for d in range(self.n):
                w = self._window(sub, box, d)
                t = sub[:, d] - box["q"][d]
                g = box["q"][d] + prof(t)
                gp = prof.deriv(t)
                # step Jacobian: identity except row d
                step = np.broadcast_to(np.eye(self.n), (len(sub), self.n, self.n)).copy()
                step[:, d, d] = 1.0 + w * (gp - 1.0)
                for e in range(self.n):
                    if e == d:
                        continue
                    dw = plateau_deriv(sub[:, e], box["q"][e], box["rho1"], box["rho2"])
                    others = np.ones(len(sub))
                    for e2 in range(self.n):
                        if e2 in (d, e):
                            continue
                        others = others * plateau(sub[:, e2], box["q"][e2],
                                                  box["rho1"], box["rho2"])
                    step[:, d, e] = (g - sub[:, d]) * dw * others
                subJ = step @ subJ
                sub[:, d] = sub[:, d] + w * (g - sub[:, d])
            state[idx] = sub
            J[idx] = subJ
        return J


class RadialMatrixBlend(SmoothMap):
    """x -> c + u + beta(|u|) (M - I) u, u = x - c: exactly the linear map M
    (about c) inside rho_in, identity outside rho_out.

    Requires ||M - I|| small enough that the radial blend stays a
    diffeomorphism; asserted at construction.
    """

    def __init__(self, center, M, rho_in, rho_out, metadata=None):
        M = np.asarray(M, dtype=float)
        super().__init__(len(M), metadata)
        self.center = np.asarray(center, dtype=float)
        self.M = M
        self.rho_in = float(rho_in)
        self.rho_out = float(rho_out)
        dev = np.linalg.norm(M - np.eye(self.n), 2)
        # peak of the plateau derivative is 2/(rho_out-rho_in); the blend is
        # a contraction perturbation of the identity when this product < 1
        self._lip = dev * (1.0 + 2.0 * self.rho_out / (self.rho_out - self.rho_in))
        if self._lip >= 0.9:
            raise ConstructionError(
                f"matrix blend too aggressive (lipschitz {self._lip:.2f}); "
                "split the matrix into more factors")

    def _beta(self, rho):
        return smooth_step((self.rho_out - rho) / (self.rho_out - self.rho_in))

    def forward(self, pts):
        pts = np.asarray(pts, dtype=float)
        u = pts - self.center
        rho = np.linalg.norm(u, axis=1)
        b = self._beta(rho)
        return pts + b[:, None] * (u @ (self.M - np.eye(self.n)).T)

    def inverse(self, pts):
        pts = np.asarray(pts, dtype=float)
        w = pts - self.center
        u = np.array(w, copy=True)
        D = (self.M - np.eye(self.n)).T
        for _ in range(80):
            rho = np.linalg.norm(u, axis=1)
            u_new = w - self._beta(rho)[:, None] * (u @ D)
            if np.max(np.abs(u_new - u)) < 1e-14:
                u = u_new
                break
            u = u_new
        return self.center + u

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        m = len(pts)
        u = pts - self.center
        rho = np.linalg.norm(u, axis=1)
        b = self._beta(rho)
        db = -smooth_step_deriv((self.rho_out - rho) / (self.rho_out - self.rho_in)) \
            / (self.rho_out - self.rho_in)
        D = self.M - np.eye(self.n)
        with np.errstate(invalid="ignore", divide="ignore"):
            rhat = np.where(rho[:, None] > 0, u / np.maximum(rho, 1e-300)[:, None], 0.0)
        J = np.broadcast_to(np.eye(self.n), (m, self.n, self.n)).copy()
        J += b[:, None, None] * D
        J += (db[:, None] * (u @ D.T))[:, :, None] * rhat[:, None, :]
        return J


# ---------------------------------------------------------------------------
# numeric derivatives
# ---------------------------------------------------------------------------

def numeric_jacobian(m, x, h=1e-6, domain=None):
    """Central-difference derivative matrices, (m_pts, n, n).

    When `domain` (lo, hi arrays) is given and a stencil would leave it, that
    column falls back to a one-sided difference (first order).
    """
    pts, single = _as_points(x, m.n)
    n = m.n
    J = np.empty((len(pts), n, n))
    for d in range(n):
        e = np.zeros(n)
        e[d] = h
        hi = pts + e
        lo = pts - e
        if domain is not None:
            dlo, dhi = domain
            hi_ok = hi[:, d] <= dhi[d]
            lo_ok = lo[:, d] >= dlo[d]
            hi[~hi_ok] = pts[~hi_ok]
            lo[~lo_ok] = pts[~lo_ok]
            span = hi[:, d] - lo[:, d]
        else:
            span = np.full(len(pts), 2.0 * h)
        J[:, :, d] = (m.forward(hi) - m.forward(lo)) / span[:, None]
    return J[0] if single else J


def round_trip_error(m, pts):
    """max |inverse(forward(x)) - x| over the sample."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    back = m.inverse(m.forward(pts))
    return float(np.max(np.abs(back - pts)))


# ---------------------------------------------------------------------------
# grids, fields, flows
# ---------------------------------------------------------------------------

class DomainGrid:
    """Node grid on an axis box (default the unit cube).

    Either regular, from a per-axis node count, or given explicitly as
    strictly increasing node arrays (one per axis) for locally refined grids.
    """

    def __init__(self, n, shape=None, lo=None, hi=None, axes=None):
        self.n = n
        if axes is not None:
            self.axes = [np.asarray(a, dtype=float) for a in axes]
            if len(self.axes) != n:
                raise SpecificationError(
                    f"got {len(self.axes)} axes for dimension {n}")
            for a in self.axes:
                if a.ndim != 1 or len(a) < 2 or np.any(np.diff(a) <= 0):
                    raise SpecificationError(
                        "grid axes must be increasing 1-D arrays")
            self.shape = tuple(len(a) for a in self.axes)
            self.lo = np.array([a[0] for a in self.axes])
            self.hi = np.array([a[-1] for a in self.axes])
            return
        if np.isscalar(shape):
            shape = (shape,) * n
        self.shape = tuple(shape)
        self.lo = np.zeros(n) if lo is None else np.asarray(lo, dtype=float)
        self.hi = np.ones(n) if hi is None else np.asarray(hi, dtype=float)
        self.axes = [np.linspace(self.lo[d], self.hi[d], self.shape[d])
                     for d in range(n)]

    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def spacing(self):
        """Largest node gap per axis (the resolution guarantee)."""
        return np.array([np.max(np.diff(a)) for a in self.axes])


class VectorFieldGrid:
    """Vector field sampled on a DomainGrid with an interpolating evaluator.

    `zero_region`, if given, is a callable pts -> bool mask on which the
    interpolated field is clamped to exactly zero (and on which the sampled
    values must already vanish).
    """

    def __init__(self, grid, values, zero_region=None, order=3):
        self.grid = grid
        values = np.asarray(values, dtype=float)
        expect = grid.shape + (grid.n,)
        if values.shape != expect:
            raise SpecificationError(
                f"field shape {values.shape} != grid shape {expect}")
        self.values = values
        self.zero_region = zero_region
        self.order = order
        if grid.n == 2 and order >= 3:
            self._interps = [
                RectBivariateSpline(grid.axes[0], grid.axes[1], values[..., d],
                                    kx=3, ky=3)
                for d in range(grid.n)]
            # evaluate both components through one tensor B-spline so the
            # knot search is paid once per point instead of once per component
            tx, ty = self._interps[0].get_knots()
            coeffs = np.stack(
                [sp.get_coeffs().reshape(len(tx) - 4, len(ty) - 4)
                 for sp in self._interps], axis=-1)
            self._nd = NdBSpline((tx, ty), coeffs, k=3)
            self._mode = "spline2d"
        else:
            self._interps = [
                RegularGridInterpolator(tuple(grid.axes), values[..., d],
                                        bounds_error=False, fill_value=0.0)
                for d in range(grid.n)]
            self._mode = "rgi"

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        clipped = np.clip(pts, self.grid.lo, self.grid.hi)
        if self._mode == "spline2d":
            out = self._nd(clipped)
        else:
            out = np.stack([f(clipped) for f in self._interps], axis=1)
        if self.zero_region is not None:
            out[self.zero_region(pts)] = 0.0
        return out

    def gradient(self, pts):
        """Spline derivative matrices d values_i / d x_j, or None (n != 2)."""
        if self._mode != "spline2d":
            return None
        pts = np.asarray(pts, dtype=float)
        clipped = np.clip(pts, self.grid.lo, self.grid.hi)
        out = np.empty((len(pts), self.grid.n, self.grid.n))
        out[:, :, 0] = self._nd(clipped, nu=(1, 0))
        out[:, :, 1] = self._nd(clipped, nu=(0, 1))
        if self.zero_region is not None:
            out[self.zero_region(pts)] = 0.0
        return out

    def max_norm(self):
        return float(np.max(np.linalg.norm(self.values, axis=-1)))


def rk4_path(velocity, pts, t0, t1, steps):
    """Classical RK4 for dx/dt = velocity(t, x) from t0 to t1."""
    x = np.array(pts, dtype=float, copy=True)
    ts = np.linspace(t0, t1, steps + 1)
    for a, b in zip(ts[:-1], ts[1:]):
        h = b - a
        k1 = velocity(a, x)
        k2 = velocity(a + h / 2, x + h / 2 * k1)
        k3 = velocity(a + h / 2, x + h / 2 * k2)
        k4 = velocity(b, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericalError("flow integration produced non-finite values")
    return x


class FlowMap(SmoothMap):
    """Time-1 flow materialized as displacement fields on a grid.

    Integration happens once per grid node at construction; evaluation is a
    spline lookup.  Points inside the declared zero region are returned
    bitwise unchanged, which keeps "identity on protected sets" exact.
    """

    def __init__(self, grid, disp_fwd, disp_bwd, zero_region=None, metadata=None):
        super().__init__(grid.n, metadata)
        self.grid = grid
        self._fwd = VectorFieldGrid(grid, disp_fwd)
        self._bwd = VectorFieldGrid(grid, disp_bwd)
        self.zero_region = zero_region

    def _eval(self, pts, interp):
        pts = np.asarray(pts, dtype=float)
        out = pts + interp(pts)
        if self.zero_region is not None:
            mask = self.zero_region(pts)
            out[mask] = pts[mask]
        return out

    def forward(self, pts):
        return self._eval(pts, self._fwd)

    def inverse(self, pts):
        return self._eval(pts, self._bwd)

    def jacobian(self, pts):
        """I + spline gradient of the forward displacement (2-D grids)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        G = self._fwd.gradient(pts)
        if G is None:
            return None
        J = G + np.eye(self.n)
        if self.zero_region is not None:
            J[self.zero_region(pts)] = np.eye(self.n)
        return J


def flow_time1(field, steps=32, zero_region=None, metadata=None):
    """Time-1 flow of a static VectorFieldGrid, returned as a FlowMap.

    The inverse is the time-1 flow of the negated field.
    """
    grid = field.grid
    nodes = grid.nodes()
    fwd = rk4_path(lambda t, x: field(x), nodes, 0.0, 1.0, steps) - nodes
    bwd = rk4_path(lambda t, x: -field(x), nodes, 0.0, 1.0, steps) - nodes
    shape = grid.shape + (grid.n,)
    zr = zero_region if zero_region is not None else field.zero_region
    md = {"kind": "flow_time1", "steps": steps}
    md.update(metadata or {})
    return FlowMap(grid, fwd.reshape(shape), bwd.reshape(shape),
                   zero_region=zr, metadata=md)

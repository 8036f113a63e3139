"""Exact geometry of the nested dyadic-cube family.

Scale-critical quantities (edge lengths, cube centers, measures, clearances)
are computed in `fractions.Fraction`; floats appear only at the numpy
boundary for bulk point processing.

The construction places, inside the unit n-cube, 2^n child cubes of edge
``alpha(1)`` centered at the dyadic points {1/4, 3/4}^n, and repeats
recursively inside each child with edge ratio ``alpha(k)/alpha(k-1)``.
The intersection over all generations is a Cantor set of measure 2^{-n}.
"""

from fractions import Fraction
import itertools

import numpy as np

from .errors import SpecificationError

ONE_HALF = Fraction(1, 2)
ONE_QUARTER = Fraction(1, 4)


# ---------------------------------------------------------------------------
# edge-length sequence
# ---------------------------------------------------------------------------

def alpha(k):
    """Edge length of a generation-k cube: 1, 1/3, 1/7, 1/15, ...

    ``alpha(k) = 1/(2^(k+1) - 1)``; the defining inequality
    ``2*alpha(k) < alpha(k-1)`` holds exactly for every k >= 1, which is
    what leaves a positive gap between sibling cubes at every generation.
    """
    if k < 0:
        raise SpecificationError(f"generation index must be >= 0, got {k}")
    return Fraction(1, 2 ** (k + 1) - 1)


def alpha_float(k):
    return float(alpha(k))


def edge_ratio(k):
    """Child-to-parent edge ratio ``alpha(k)/alpha(k-1)`` for k >= 1.

    Equals (2^k - 1)/(2^(k+1) - 1); increases strictly toward 1/2.
    """
    if k < 1:
        raise SpecificationError(f"edge_ratio needs k >= 1, got {k}")
    return alpha(k) / alpha(k - 1)


def child_gap(k):
    """Clearance between a generation-k cube and the walls of the quadrant
    it sits in, measured in parent-frame units.  Equals alpha(k)/4 exactly."""
    return ONE_QUARTER - edge_ratio(k) / 2


def generation_measure(k, n):
    """Total volume of the 2^(n*k) generation-k cubes in dimension n.

    Strictly decreasing in k with limit 2^{-n}, the measure of the limit
    Cantor set.
    """
    if k < 0:
        raise SpecificationError(f"generation index must be >= 0, got {k}")
    if n < 1:
        raise SpecificationError(f"dimension must be >= 1, got {n}")
    return Fraction(2 ** (n * k)) * alpha(k) ** n


def limit_measure(n):
    """Measure of the limit Cantor set: 2^{-n}."""
    return Fraction(1, 2 ** n)


# ---------------------------------------------------------------------------
# the dyadic family of child positions inside a unit frame
# ---------------------------------------------------------------------------

class DyadicFamily:
    """The 2^n child positions {1/4, 3/4}^n of a unit cube, with 1-based
    indices and the mirror pairing used by the exchange maps.

    Index convention: digit ``d`` in 1..2^n has bit pattern ``d - 1`` where
    bit i-1 (least significant first) is the coordinate-i choice, 0 for 1/4
    and 1 for 3/4.  So the bottom layer is enumerated first and the last
    coordinate is the most significant bit.
    """

    def __init__(self, n):
        if n < 1:
            raise SpecificationError(f"dimension must be >= 1, got {n}")
        self.n = n
        self.count = 2 ** n

    def bits(self, d):
        self._check(d)
        v = d - 1
        return tuple((v >> i) & 1 for i in range(self.n))

    def index_from_bits(self, bits):
        if len(bits) != self.n:
            raise SpecificationError(f"need {self.n} bits, got {len(bits)}")
        return 1 + sum(int(b) << i for i, b in enumerate(bits))

    def center(self, d):
        """Center of child d, exact."""
        return tuple(ONE_QUARTER + b * ONE_HALF for b in self.bits(d))

    def centers(self):
        return [self.center(d) for d in range(1, self.count + 1)]

    def centers_array(self):
        return np.array([[float(c) for c in ctr] for ctr in self.centers()])

    def pair(self, d):
        """Index of the mirror partner of child d across the midplane of the
        last coordinate (flip the most significant bit)."""
        self._check(d)
        return ((d - 1) ^ (1 << (self.n - 1))) + 1

    def pair_axis(self, d, axis):
        """Partner of child d mirrored in coordinate ``axis`` (0-based)."""
        self._check(d)
        if not 0 <= axis < self.n:
            raise SpecificationError(f"axis {axis} out of range for n={self.n}")
        return ((d - 1) ^ (1 << axis)) + 1

    def index_of(self, center):
        bits = []
        for c in center:
            c = Fraction(c)
            if c == ONE_QUARTER:
                bits.append(0)
            elif c == Fraction(3, 4):
                bits.append(1)
            else:
                raise SpecificationError(f"not a dyadic child center: {center}")
        return self.index_from_bits(bits)

    def _check(self, d):
        if not 1 <= d <= self.count:
            raise SpecificationError(
                f"child index {d} out of range 1..{self.count}")


# ---------------------------------------------------------------------------
# axis-aligned shapes
# ---------------------------------------------------------------------------

class AxisCube:
    """Axis-aligned cube given by center and edge (exact or float)."""

    def __init__(self, center, edge):
        self.center = tuple(center)
        self.edge = edge

    @property
    def n(self):
        return len(self.center)

    @property
    def half_edge(self):
        return self.edge / 2

    def lo(self):
        return tuple(c - self.half_edge for c in self.center)

    def hi(self):
        return tuple(c + self.half_edge for c in self.center)

    def volume(self):
        return self.edge ** self.n

    def as_box(self):
        return AxisBox(self.lo(), self.hi())

    def contains_point(self, x):
        return all(lo <= xi <= hi for lo, xi, hi in zip(self.lo(), x, self.hi()))

    def contains(self, pts, pad=0.0):
        """Vectorized float membership for an (m, n) array of points."""
        pts = np.asarray(pts, dtype=float)
        c = np.array([float(v) for v in self.center])
        h = float(self.half_edge) + pad
        return np.all(np.abs(pts - c) <= h, axis=-1)

    def center_float(self):
        return np.array([float(v) for v in self.center])

    def __repr__(self):
        return f"AxisCube(center={self.center}, edge={self.edge})"


class AxisBox:
    """Axis-aligned box with per-axis bounds."""

    def __init__(self, lo, hi):
        self.lo = tuple(lo)
        self.hi = tuple(hi)
        if len(self.lo) != len(self.hi):
            raise SpecificationError("lo/hi dimension mismatch")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise SpecificationError(f"empty box: lo={lo}, hi={hi}")

    @property
    def n(self):
        return len(self.lo)

    def volume(self):
        v = self.hi[0] - self.lo[0]
        for a, b in zip(self.lo[1:], self.hi[1:]):
            v = v * (b - a)
        return v

    def intersects(self, other):
        return all(a < d and c < b
                   for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def contains_box(self, other):
        return all(a <= c and d <= b
                   for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float)
        lo = np.array([float(v) for v in self.lo])
        hi = np.array([float(v) for v in self.hi])
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def __repr__(self):
        return f"AxisBox(lo={self.lo}, hi={self.hi})"


def _interval_union_length(intervals):
    # intervals: list of (lo, hi) with exact endpoints
    if not intervals:
        return 0
    intervals = sorted(intervals)
    total = 0
    cur_lo, cur_hi = intervals[0]
    for lo, hi in intervals[1:]:
        if lo > cur_hi:
            total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    return total + (cur_hi - cur_lo)


def _union_measure(boxes):
    # Recursive coordinate sweep; exact when endpoints are Fractions.
    if not boxes:
        return 0
    n = len(boxes[0][0])
    if n == 1:
        return _interval_union_length([(lo[0], hi[0]) for lo, hi in boxes])
    cuts = sorted({v for lo, hi in boxes for v in (lo[0], hi[0])})
    total = 0
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid_boxes = [(lo[1:], hi[1:]) for lo, hi in boxes
                     if lo[0] <= a and b <= hi[0]]
        if mid_boxes:
            total += (b - a) * _union_measure(mid_boxes)
    return total


class RectUnion:
    """Finite union of axis-aligned boxes with exact measure."""

    def __init__(self, boxes=()):
        self.boxes = list(boxes)

    def add(self, box):
        self.boxes.append(box)

    def measure(self):
        return _union_measure([(b.lo, b.hi) for b in self.boxes])

    def pairwise_disjoint(self):
        for b1, b2 in itertools.combinations(self.boxes, 2):
            if b1.intersects(b2):
                return False
        return True

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1], dtype=bool)
        for b in self.boxes:
            out |= b.contains(pts)
        return out

    def __len__(self):
        return len(self.boxes)


class Ball:
    def __init__(self, center, radius):
        self.center = tuple(center)
        self.radius = radius

    @property
    def n(self):
        return len(self.center)

    def center_float(self):
        return np.array([float(v) for v in self.center])

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float)
        d2 = np.sum((pts - self.center_float()) ** 2, axis=-1)
        return d2 <= float(self.radius) ** 2

    def bbox(self):
        r = self.radius
        return AxisBox([c - r for c in self.center], [c + r for c in self.center])

    def __repr__(self):
        return f"Ball(center={self.center}, radius={self.radius})"


class Ellipsoid:
    """Image of the unit ball under x -> center + A x (A invertible)."""

    def __init__(self, center, A):
        self.center = np.asarray(center, dtype=float)
        self.A = np.asarray(A, dtype=float)
        if self.A.shape != (len(self.center),) * 2:
            raise SpecificationError("ellipsoid matrix shape mismatch")
        self._Ainv = np.linalg.inv(self.A)

    @property
    def n(self):
        return len(self.center)

    @classmethod
    def from_ball(cls, ball):
        n = ball.n
        return cls(ball.center_float(), np.eye(n) * float(ball.radius))

    def contains(self, pts, tol=0.0):
        pts = np.asarray(pts, dtype=float)
        y = (pts - self.center) @ self._Ainv.T
        return np.sum(y * y, axis=-1) <= (1.0 + tol) ** 2

    def semi_axes(self):
        return np.linalg.svd(self.A, compute_uv=False)

    def volume(self):
        n = self.n
        unit = {1: 2.0, 2: np.pi, 3: 4.0 * np.pi / 3.0}[n]
        return unit * abs(np.linalg.det(self.A))

    def __repr__(self):
        return f"Ellipsoid(center={self.center.tolist()}, A={self.A.tolist()})"


# ---------------------------------------------------------------------------
# addresses and nested cubes
# ---------------------------------------------------------------------------

def cube_at(n, digits):
    """Exact generation-k cube reached by following ``digits`` (k = len).

    Recursion from the unit cube: the cube at depth k sits inside its parent
    at the child position given by digit d_k, scaled by the parent edge.
    """
    fam = DyadicFamily(n)
    center = [ONE_HALF] * n
    edge = Fraction(1)
    for k, d in enumerate(digits, start=1):
        c = fam.center(d)
        center = [ctr + edge * (ci - ONE_HALF) for ctr, ci in zip(center, c)]
        edge = alpha(k)
    return AxisCube(center, edge)


def reflect_digit(d, n):
    """Partner digit under the mirror in the last coordinate."""
    return DyadicFamily(n).pair(d)


def reflect_address(digits, n):
    fam = DyadicFamily(n)
    return tuple(fam.pair(d) for d in digits)


class CantorAddress:
    """A point of the limit set, named by its digit string.

    ``digits`` is the explicit prefix; ``tail``, if given, repeats forever
    after it, so arbitrarily deep digits are defined.  Without a tail the
    address names the whole depth-len(digits) cube rather than a point.

    Serialized form: "1,3,2" and, with a periodic tail, "1,3,(2,4)".
    """

    def __init__(self, n, digits, tail=None):
        self.n = n
        fam = DyadicFamily(n)
        self.digits = tuple(int(d) for d in digits)
        for d in self.digits:
            fam._check(d)
        self.tail = None
        if tail is not None:
            self.tail = tuple(int(d) for d in tail)
            if not self.tail:
                raise SpecificationError("periodic tail must be non-empty")
            for d in self.tail:
                fam._check(d)

    def digit(self, k):
        """1-based digit at depth k, following the periodic tail if needed."""
        if k < 1:
            raise SpecificationError(f"depth must be >= 1, got {k}")
        if k <= len(self.digits):
            return self.digits[k - 1]
        if self.tail is None:
            raise SpecificationError(
                f"address has only {len(self.digits)} digits, asked for {k}")
        return self.tail[(k - 1 - len(self.digits)) % len(self.tail)]

    def prefix(self, k):
        return tuple(self.digit(j) for j in range(1, k + 1))

    def reflect(self):
        fam = DyadicFamily(self.n)
        tail = None if self.tail is None else tuple(fam.pair(d) for d in self.tail)
        return CantorAddress(self.n, [fam.pair(d) for d in self.digits], tail)

    def cube(self, k=None):
        if k is None:
            k = len(self.digits)
        return cube_at(self.n, self.prefix(k))

    def point(self, depth=60):
        """Float coordinates of the limit point (needs a tail, or enough
        explicit digits that the remaining cube is below float resolution)."""
        k = depth if self.tail is not None else min(depth, len(self.digits))
        return self.cube(k).center_float()

    def to_string(self):
        s = ",".join(str(d) for d in self.digits)
        if self.tail is not None:
            t = "(" + ",".join(str(d) for d in self.tail) + ")"
            s = s + "," + t if s else t
        return s

    @classmethod
    def from_string(cls, n, text):
        text = text.strip()
        tail = None
        if "(" in text:
            head, rest = text.split("(", 1)
            if not rest.endswith(")"):
                raise SpecificationError(f"malformed address string: {text!r}")
            tail = [int(v) for v in rest[:-1].split(",") if v.strip()]
            head = head.rstrip(",")
        else:
            head = text
        digits = [int(v) for v in head.split(",") if v.strip()] if head else []
        return cls(n, digits, tail)

    def __eq__(self, other):
        return (isinstance(other, CantorAddress) and self.n == other.n
                and self.digits == other.digits and self.tail == other.tail)

    def __repr__(self):
        return f"CantorAddress(n={self.n}, {self.to_string()!r})"


def cantor_points_float(n, digits):
    """Centers of the deepest cubes for a batch of digit strings.

    ``digits``: (m, K) integer array of 1-based child indices.  Returns the
    (m, n) float centers of the depth-K cubes; with K big enough these are
    the Cantor points to float precision (the depth-K cube has edge
    alpha(K), and the point lies inside it).
    """
    digits = np.asarray(digits, dtype=np.int64)
    if digits.ndim == 1:
        digits = digits[None, :]
    m, K = digits.shape
    centers = np.full((m, n), 0.5)
    for k in range(1, K + 1):
        bits = (digits[:, k - 1:k] - 1) >> np.arange(n)[None, :]
        offs = np.where(bits & 1, 0.25, -0.25)
        centers = centers + alpha_float(k - 1) * offs
    return centers


def chain_centers(n, digits):
    """All intermediate cube centers along each address chain.

    Returns (m, K+1, n): entry [:, k, :] is the depth-k cube center.
    """
    digits = np.asarray(digits, dtype=np.int64)
    if digits.ndim == 1:
        digits = digits[None, :]
    m, K = digits.shape
    out = np.empty((m, K + 1, n))
    centers = np.full((m, n), 0.5)
    out[:, 0, :] = centers
    for k in range(1, K + 1):
        bits = (digits[:, k - 1:k] - 1) >> np.arange(n)[None, :]
        offs = np.where(bits & 1, 0.25, -0.25)
        centers = centers + alpha_float(k - 1) * offs
        out[:, k, :] = centers
    return out


def locate_points(pts, depth):
    """Follow each point down the nested cube family.

    Returns ``(digits, escape)``: digits is (m, depth) with the child index
    at each generation (0 once the point has left the family), and escape is
    (m,) giving the first generation whose cubes miss the point, or
    ``depth + 1`` if the point is still inside a generation-``depth`` cube
    ("undecided" at this resolution).
    """
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    m, n = pts.shape
    digits = np.zeros((m, depth), dtype=np.int64)
    escape = np.full(m, depth + 1, dtype=np.int64)
    alive = np.ones(m, dtype=bool)
    centers = np.full((m, n), 0.5)
    edge = 1.0
    for k in range(1, depth + 1):
        r = float(edge_ratio(k))
        t = (pts - centers) / edge                     # frame coords in [-1/2, 1/2]
        bits = t > 0
        offs = np.where(bits, 0.25, -0.25)
        inside = np.all(np.abs(t - offs) <= r / 2, axis=1)
        newly_out = alive & ~inside
        escape[newly_out] = k
        alive &= inside
        d = 1 + np.sum(bits.astype(np.int64) << np.arange(n)[None, :], axis=1)
        digits[:, k - 1] = np.where(alive, d, 0)
        centers = centers + edge * offs
        edge *= r
    if single:
        return digits[0], escape[0]
    return digits, escape

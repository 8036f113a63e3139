"""Rearrangement diffeomorphisms, not yet volume-corrected.

Two constructions live here:

* the cube exchange: a smooth map of the unit cube, identity near the
  boundary, that rigidly translates each dyadic sub-cube onto its partner
  (the one mirrored in the last coordinate).  Realized as compress -> chain
  of core-carrying axis slides -> expand, with every clearance certified in
  exact rational arithmetic before any floating-point map is built.

* ball-to-ellipsoid transport: a map equal to a unit-determinant linear map
  L on a collar of the source ball and a pure translation near each source
  cube, carrying it onto an assigned target cube inside the ellipsoid.

A grid cube-packing helper shared by both constructions also lives here.
"""

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CertificationError, ConstructionError, SpecificationError
from .geometry import AxisCube, Ball, DyadicFamily, Ellipsoid
from .smoothmaps import (
    AffineMap, BoxCompression, CompositeMap, PlanarTwist, RadialMatrixBlend,
    SlideChain, SlideMap, SmoothMap, TwistChain, smooth_step_deriv,
)

# rational upper bound for sqrt(2), used throughout the certifications
SQRT2_UP = Fraction(707107, 500000)

HALF = Fraction(1, 2)
QUARTER = Fraction(1, 4)

# half-turn constants used by the ball-to-ellipsoid transport (scaled to the
# ball radius there): hop length of one half-turn pair, width of the twist
# decay annulus, clearance between the carried square and the decay annulus,
# and the gap kept between any support disk and any parked square
HOP = Fraction(1, 50)
TWIST_BUMP = Fraction(3, 200)
RIGID_CLEAR = Fraction(1, 500)
STATIC_GAP = Fraction(1, 500)

# cube-exchange layout constants.  The compressed linear zones ride inside
# flat cores of half-width H <= CORE_HALF_TARGET; each move is cut into
# SUBSTEPS short slides so the travel-axis ramps never fold (certified via
# |delta| * SLOPE_BOUND <= FOLD_MARGIN * ramp, SLOPE_BOUND being a proven
# bound on max |smooth_step'| = 2).  Ramps transverse to the travel use
# CROSS_RAMP; the ramp facing the opposite cube column across the center
# line is capped at CENTER_RAMP so supports keep SLIDE_GAP away from every
# parked core.
CORE_HALF_TARGET = Fraction(17, 200)
PAYLOAD_CLEAR = Fraction(1, 200)
S_CAP = Fraction(9, 10)
CROSS_RAMP = Fraction(1, 20)
CENTER_RAMP = Fraction(3, 50)
SLIDE_GAP = Fraction(1, 100)
SLOPE_BOUND = Fraction(21, 10)
FOLD_MARGIN = Fraction(3, 5)
LANE_DELTA = Fraction(1, 64)
SWAP_DELTA = Fraction(1, 32)
SUBSTEPS = 16


# ---------------------------------------------------------------------------
# exchange layout
# ---------------------------------------------------------------------------

def _budget_fractions(ratio):
    # shares of the free budget 1/4 - ratio/2 spent on the linear-zone
    # margin, the compression bridge, and the boundary collar.  The bridge
    # takes the lion's share: its slope bounds the anisotropy of the
    # conjugating compression, the widest feature the volume correction
    # later has to resolve.
    return Fraction(6, 25), Fraction(16, 25), Fraction(3, 25)


def default_collar(ratio):
    ratio = Fraction(ratio)
    budget = QUARTER - ratio / 2
    return _budget_fractions(ratio)[2] * budget


@dataclass
class ExchangeSpec:
    """Which exchange to build: dimension, cube-edge ratio, collar width."""

    n: int
    ratio: Fraction
    family: DyadicFamily = None
    collar: Fraction = None

    def __post_init__(self):
        self.ratio = Fraction(self.ratio)
        if self.family is None:
            self.family = DyadicFamily(self.n)
        if self.collar is None:
            self.collar = default_collar(self.ratio)
        else:
            self.collar = Fraction(self.collar)

    def validate(self):
        if self.n < 1:
            raise SpecificationError(f"dimension must be >= 1, got {self.n}")
        if not 0 < self.ratio < HALF:
            raise SpecificationError(
                f"cube ratio must be in (0, 1/2), got {self.ratio}")
        if not self.collar > 0:
            raise SpecificationError(f"collar must be > 0, got {self.collar}")
        if self.family.n != self.n:
            raise SpecificationError("family dimension mismatch")
        p = exchange_params(self.n, self.ratio, self.collar)
        if not QUARTER - p.rho2 >= self.collar:
            raise SpecificationError(
                f"protection radius {p.rho2} enters the collar {self.collar}")
        return p


@dataclass
class ExchangeParams:
    """Exact layout constants of one exchange, all Fractions."""
    n: int
    ratio: Fraction
    r: Fraction            # cube half-edge
    m: Fraction            # linear-zone margin beyond the cube
    bridge: Fraction       # bridge width of the compression well
    collar: Fraction
    rho1: Fraction         # linear-zone half-width r + m
    rho2: Fraction         # support half-width rho1 + bridge
    H: Fraction            # carried-core half-width s * rho1 + clearance
    s: Fraction            # compression factor
    park: Fraction         # lane offset to the shared parking slot
    ramp_outer: Fraction   # travel ramp on the boundary-facing side
    ramp_long: Fraction    # travel ramp of the swap-axis moves
    lane_delta: Fraction   # per-slide travel of the lane moves
    swap_delta: Fraction   # per-slide travel of the swap moves

    def as_dict(self):
        return {k: str(v) for k, v in self.__dict__.items() if v is not None}


def exchange_params(n, ratio, collar=None):
    """Solve the exchange layout exactly.

    The carried core must cover the compressed linear zone s * rho1 plus a
    clearance, stay below CORE_HALF_TARGET so that two cores, a center-side
    ramp and a static gap fit between the cube columns, and leave room for
    ramps between the core and the boundary collar.  The compression factor
    follows; every remaining clearance is checked here or when the slide
    schedule is certified.
    """
    ratio = Fraction(ratio)
    r = ratio / 2
    budget = QUARTER - r
    if budget <= 0:
        raise SpecificationError(f"ratio {ratio} leaves no free budget")
    fm, fb, fc = _budget_fractions(ratio)
    m = fm * budget
    bridge = fb * budget
    collar = fc * budget if collar is None else Fraction(collar)
    rho1 = r + m
    rho2 = rho1 + bridge
    s = min(S_CAP, (CORE_HALF_TARGET - PAYLOAD_CLEAR) / rho1)
    H = s * rho1 + PAYLOAD_CLEAR
    if 2 * H + CENTER_RAMP + SLIDE_GAP > QUARTER:
        raise ConstructionError(
            f"core half-width {H} cannot pass between the cube columns")
    room = QUARTER - H - collar
    ramp_outer = min(Fraction(1, 10), room)
    ramp_long = min(Fraction(3, 20), room)
    if LANE_DELTA * SLOPE_BOUND > FOLD_MARGIN * min(ramp_outer, CENTER_RAMP):
        raise ConstructionError(
            f"collar {collar} leaves no room for the lane-move ramps")
    if SWAP_DELTA * SLOPE_BOUND > FOLD_MARGIN * ramp_long:
        raise ConstructionError(
            f"collar {collar} leaves no room for the swap-move ramps")
    return ExchangeParams(n=n, ratio=ratio, r=r, m=m, bridge=bridge,
                          collar=collar, rho1=rho1, rho2=rho2, H=H, s=s,
                          park=QUARTER, ramp_outer=ramp_outer,
                          ramp_long=ramp_long, lane_delta=LANE_DELTA,
                          swap_delta=SWAP_DELTA)


@dataclass
class SlideStep:
    """One slide of the schedule: exact windows, who moves, who is parked."""
    label: str
    axis: int
    delta: Fraction
    pos: tuple             # carried-core center before this slide
    windows: list          # per-axis (a0, a1, b1, b0), all Fractions
    carried: int
    parked: list           # (cube id, center) frozen while this slide acts


@dataclass
class ExchangePlan:
    spec: ExchangeSpec
    params: ExchangeParams
    slides: list = field(default_factory=list)
    moves: list = field(default_factory=list)      # (label, start, end)

    def polylines(self):
        """Lane layout for plotting: (label, [point, point])."""
        return [(label, [tuple(map(float, a)), tuple(map(float, b))])
                for label, a, b in self.moves]


def _slide_windows(p, axis, pos, delta, ramps):
    """Exact window tuples for one slide of the core centered at pos.

    The travel-axis flat covers the core at the start and end of the slide;
    transverse flats hug the core with CROSS_RAMP ramps.
    """
    windows = []
    for d in range(p.n):
        if d == axis:
            lo = min(pos[d], pos[d] + delta) - p.H
            hi = max(pos[d], pos[d] + delta) + p.H
            windows.append((lo - ramps[0], lo, hi, hi + ramps[1]))
        else:
            c = pos[d]
            windows.append((c - p.H - CROSS_RAMP, c - p.H,
                            c + p.H, c + p.H + CROSS_RAMP))
    return windows


def build_exchange_plan(spec):
    """Lay out the full slide schedule and certify it exactly.

    One cube pair at a time: the bottom cube sidesteps to the parking slot
    on the center line, the top cube descends the column, the parked cube
    ascends beside it, then returns onto the top position.  Every move is a
    run of SUBSTEPS dyadic slides sharing their ramp widths, so each core
    hand-off adds up to an exact rational translation.
    """
    p = spec.validate()
    n, fam = spec.n, spec.family
    if n == 1:
        raise ConstructionError(
            "no orientation-preserving exchange exists on an interval: an "
            "increasing map cannot swap two disjoint sub-intervals")
    lane_axis = 0                # parking lanes run along the first axis
    swap_axis = n - 1            # partners differ in the last coordinate

    centers = {d: fam.center(d) for d in range(1, fam.count + 1)}
    pos = dict(centers)
    plan = ExchangePlan(spec=spec, params=p)

    def offset(point, axis, amount):
        return tuple(v + (amount if k == axis else 0)
                     for k, v in enumerate(point))

    def run_move(label, cube, axis, target, ramps):
        start = pos[cube]
        delta = (target[axis] - start[axis]) / SUBSTEPS
        if delta == 0:
            raise ConstructionError(f"empty move {label}")
        parked = [(c, pos[c]) for c in sorted(pos) if c != cube]
        cur = start
        for _ in range(SUBSTEPS):
            plan.slides.append(SlideStep(
                label=label, axis=axis, delta=delta, pos=cur,
                windows=_slide_windows(p, axis, cur, delta, ramps),
                carried=cube, parked=parked))
            cur = offset(cur, axis, delta)
        plan.moves.append((label, start, target))
        pos[cube] = target

    seen = set()
    for d in range(1, fam.count + 1):
        partner = fam.pair(d)
        if d in seen:
            continue
        seen.update((d, partner))
        if centers[d][swap_axis] < centers[partner][swap_axis]:
            bottom, top = d, partner
        else:
            bottom, top = partner, d
        b, t = centers[bottom], centers[top]
        inward = 1 if b[lane_axis] < HALF else -1
        # ramp pair (low side, high side) for lane moves: the outer ramp
        # faces the boundary, the center ramp faces the opposite column
        lane_ramps = ((p.ramp_outer, CENTER_RAMP) if inward > 0
                      else (CENTER_RAMP, p.ramp_outer))
        long_ramps = (p.ramp_long, p.ramp_long)
        run_move(f"pair{bottom}:side", bottom, lane_axis,
                 offset(b, lane_axis, inward * p.park), lane_ramps)
        run_move(f"pair{bottom}:down", top, swap_axis, b, long_ramps)
        run_move(f"pair{bottom}:up", bottom, swap_axis,
                 offset(t, lane_axis, inward * p.park), long_ramps)
        run_move(f"pair{bottom}:home", bottom, lane_axis, t, lane_ramps)
    for d in range(1, fam.count + 1):
        if pos[d] != centers[fam.pair(d)]:
            raise ConstructionError("schedule did not complete the exchange")
    certify_exchange_plan(plan)
    return plan


_SLOPE_BOUND_CHECKED = False


def _assert_slope_bound():
    """Check max |smooth_step'| (= 2 analytically) against SLOPE_BOUND."""
    global _SLOPE_BOUND_CHECKED
    if _SLOPE_BOUND_CHECKED:
        return
    t = np.linspace(0.0, 1.0, 20001)
    mx = float(np.max(np.abs(smooth_step_deriv(t))))
    if mx > float(SLOPE_BOUND) - 0.05:
        raise CertificationError(
            f"measured ramp slope {mx:.6f} breaks the bound {SLOPE_BOUND}")
    _SLOPE_BOUND_CHECKED = True


def certify_exchange_plan(plan):
    """Exact-arithmetic safety proof of a slide schedule.

    Checks, for every slide: (i) the core at the start and end of the slide
    sits inside every window flat, so the core translates rigidly, (ii) the
    travel never exceeds the fold margin of its ramps, (iii) the support
    stays inside the collar complement, (iv) every parked core is separated
    from the support along some axis by the static gap, and (v) the position
    bookkeeping is consistent and ends with every cube on its partner.
    """
    p = plan.params
    n = plan.spec.n
    collar = plan.spec.collar
    fam = plan.spec.family
    _assert_slope_bound()
    pos = {d: fam.center(d) for d in range(1, fam.count + 1)}
    for k, st in enumerate(plan.slides):
        where = f"slide {k} ({st.label})"
        if st.pos != pos[st.carried]:
            raise CertificationError(f"{where} starts off its cube position")
        for d in range(n):
            a0, a1, b1, b0 = st.windows[d]
            if not a0 < a1 <= b1 < b0:
                raise CertificationError(f"{where} has a degenerate window")
            if a0 < collar or b0 > 1 - collar:
                raise CertificationError(f"{where} reaches the collar")
            lo = st.pos[d] - p.H + (min(st.delta, 0) if d == st.axis else 0)
            hi = st.pos[d] + p.H + (max(st.delta, 0) if d == st.axis else 0)
            if lo < a1 or hi > b1:
                raise CertificationError(
                    f"{where} flat does not cover the carried core")
        a0, a1, b1, b0 = st.windows[st.axis]
        if abs(st.delta) * SLOPE_BOUND > FOLD_MARGIN * min(a1 - a0, b0 - b1):
            raise CertificationError(f"{where} exceeds the fold margin")
        for c, q in st.parked:
            if q != pos[c]:
                raise CertificationError(f"{where} parks cube {c} off-spot")
            clear = any(q[d] + p.H + SLIDE_GAP <= st.windows[d][0]
                        or q[d] - p.H - SLIDE_GAP >= st.windows[d][3]
                        for d in range(n))
            if not clear:
                raise CertificationError(
                    f"{where} too close to the parked core at "
                    f"{tuple(map(float, q))}")
        cur = list(st.pos)
        cur[st.axis] += st.delta
        pos[st.carried] = tuple(cur)
    for d in pos:
        if pos[d] != fam.center(fam.pair(d)):
            raise CertificationError("schedule does not complete the exchange")


class ExchangeMap(SmoothMap):
    """compress -> slide chain -> expand; a translation on each linear zone."""

    def __init__(self, spec, plan, sigma, chain):
        super().__init__(spec.n, {"kind": "cube_exchange",
                                  "ratio": str(spec.ratio),
                                  "links": len(chain.slides)})
        self.spec = spec
        self.plan = plan
        self.sigma = sigma
        self.chain = chain

    def forward(self, pts):
        return self.sigma.inverse(self.chain.forward(self.sigma.forward(pts)))

    def inverse(self, pts):
        return self.sigma.inverse(self.chain.inverse(self.sigma.forward(pts)))

    def det_jacobian(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        mid = self.sigma.forward(pts)
        moved, dchain = self.chain.forward_with_det(mid)
        out = self.sigma.inverse(moved)
        return (self.sigma.det_jacobian(pts) * dchain
                / self.sigma.det_jacobian(out))

    def jacobian(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        J1 = self.sigma.jacobian(pts)
        mid = self.sigma.forward(pts)
        J2 = self.chain.jacobian(mid)
        out = self.sigma.inverse(self.chain.forward(mid))
        J3 = np.linalg.inv(self.sigma.jacobian(out))
        return J3 @ J2 @ J1

    # --- geometry accessors used by the volume correction and the towers

    def params(self):
        return self.plan.params

    def cube_centers(self):
        return self.spec.family.centers()

    def translation_vector(self, d):
        """Exact displacement applied to child cube d."""
        fam = self.spec.family
        src, dst = fam.center(d), fam.center(fam.pair(d))
        return tuple(b - a for a, b in zip(src, dst))

    def protected_boxes(self, margin_fraction=Fraction(7, 8)):
        """(center, half-width) of the boxes, strictly inside the linear
        zones, on which the map is exactly the translation to the partner."""
        p = self.plan.params
        half = p.r + margin_fraction * p.m
        return [(c, half) for c in self.cube_centers()]


def exchange_wells(spec, p):
    """Compression wells of the exchange, one per cube center."""
    wells = [{"center": [float(x) for x in c],
              "rho1": float(p.rho1), "rho2": float(p.rho2), "s": float(p.s)}
             for c in spec.family.centers()]
    return BoxCompression(spec.n, wells)


def plan_slide_maps(plan):
    """Float SlideMap realizations of the certified schedule, in order."""
    return [SlideMap(plan.spec.n, st.axis, float(st.delta),
                     [tuple(float(v) for v in w) for w in st.windows],
                     metadata={"label": st.label})
            for st in plan.slides]


def exchange_diffeo(spec):
    """Build the certified exchange map for `spec`."""
    plan = build_exchange_plan(spec)
    sigma = exchange_wells(spec, plan.params)
    chain = SlideChain(spec.n, plan_slide_maps(plan),
                       cells=32 if spec.n == 2 else 12)
    return ExchangeMap(spec, plan, sigma, chain)


# ---------------------------------------------------------------------------
# grid cube packing
# ---------------------------------------------------------------------------

def _corner_inside(region, corner):
    if isinstance(region, Ball):
        s = sum((Fraction(c) - Fraction(rc)) ** 2
                for c, rc in zip(corner, region.center))
        return s <= Fraction(region.radius) ** 2
    if isinstance(region, Ellipsoid):
        return bool(region.contains(
            np.array([float(c) for c in corner]), tol=1e-12))
    raise SpecificationError(f"cannot pack into {type(region).__name__}")


def pack_grid_cubes(region, q, shrink=Fraction(19, 20)):
    """Cubes of edge q*shrink at the cells of a grid of pitch q, anchored at
    the region center, whose closed cell lies inside the region.

    Deterministic (lexicographic cell order); exact for rational inputs on
    a ball.  Convexity makes the corner test sufficient.
    """
    q = Fraction(q)
    shrink = Fraction(shrink)
    if q <= 0 or not 0 < shrink < 1:
        raise SpecificationError(f"bad packing parameters q={q}, shrink={shrink}")
    center = [Fraction(c) for c in region.center]
    n = len(center)
    if isinstance(region, Ball):
        reach = Fraction(region.radius)
    else:
        reach = Fraction(float(np.max(region.semi_axes())))
    kmax = int(reach / q) + 1
    half = q / 2
    cubes = []
    for idx in itertools.product(range(-kmax, kmax + 1), repeat=n):
        cell = [center[d] + idx[d] * q for d in range(n)]
        if all(_corner_inside(region,
                              [cell[d] + (half if bits >> d & 1 else -half)
                               for d in range(n)])
               for bits in range(2 ** n)):
            cubes.append(AxisCube(tuple(cell), q * shrink))
    return cubes


# ---------------------------------------------------------------------------
# ball -> ellipsoid transport
# ---------------------------------------------------------------------------

@dataclass
class CubeTransportSpec:
    source: Ball
    source_cubes: list
    target: Ellipsoid
    target_cubes: list
    assignment: list = None    # assignment[i] = index of the target cube

    def __post_init__(self):
        if self.assignment is None:
            self.assignment = list(range(len(self.source_cubes)))

    def validate(self):
        if len(self.source_cubes) != len(self.target_cubes):
            raise SpecificationError(
                f"cube count mismatch: {len(self.source_cubes)} vs "
                f"{len(self.target_cubes)}")
        if sorted(self.assignment) != list(range(len(self.source_cubes))):
            raise SpecificationError("assignment is not a bijection")
        vol_b = Ellipsoid.from_ball(self.source).volume()
        vol_e = self.target.volume()
        if abs(vol_b - vol_e) > 1e-9 * max(vol_b, 1.0):
            raise SpecificationError(
                f"source volume {vol_b} != target volume {vol_e}")
        edges = [float(c.edge) for c in self.source_cubes] \
            + [float(c.edge) for c in self.target_cubes]
        if edges and max(edges) - min(edges) > 1e-12:
            raise SpecificationError("all cubes must share one edge length")


def _linear_part(spec):
    """The unit-determinant linear map L with L(source ball) = target."""
    r = float(spec.source.radius)
    A = np.asarray(spec.target.A, dtype=float) / r
    det = float(np.linalg.det(A))
    if det <= 0:
        raise SpecificationError("target ellipsoid is orientation reversing")
    if abs(det - 1.0) > 1e-9:
        raise SpecificationError(
            f"transport linear part has determinant {det}, expected 1")
    cB = np.array([float(c) for c in spec.source.center])
    cE = np.array([float(c) for c in spec.target.center])
    return AffineMap(A, cE - A @ cB, {"kind": "transport_linear"})


class _RouteCert:
    """Exact clearance bookkeeping for the in-ball cube router.  The
    exchange constants reappear here scaled by the ball radius."""

    def __init__(self, ball, half, collar_frac=Fraction(1, 20)):
        self.center = tuple(Fraction(c) for c in ball.center)
        self.radius = Fraction(ball.radius)
        self.half = Fraction(half)
        self.r_allow = self.radius * (1 - collar_frac)
        self.hop = HOP * self.radius
        self.gap = STATIC_GAP * self.radius
        self.r_in = self.hop / 2 + self.half * SQRT2_UP \
            + RIGID_CLEAR * self.radius
        self.r_out = self.r_in + TWIST_BUMP * self.radius

    def check_disk(self, c, parked):
        inside = sum((a - b) ** 2 for a, b in zip(c, self.center)) \
            <= (self.r_allow - self.r_out) ** 2
        if not inside:
            raise ConstructionError(
                f"transport support disk at {tuple(map(float, c))} reaches "
                "the ball collar")
        need_sq = (self.r_out + self.gap) ** 2
        for q in parked:
            if _box_clearance_sq(c, q, self.half) < need_sq:
                raise ConstructionError(
                    f"transport support disk at {tuple(map(float, c))} hits "
                    f"a parked cube at {tuple(map(float, q))}")


def _hops_for_segment(start, end, hop):
    """Half-turn centers translating start -> end along a straight segment
    (any direction), hops of euclidean length at most `hop`."""
    delta = [e - s for s, e in zip(start, end)]
    dist_sq = sum(d * d for d in delta)
    if dist_sq == 0:
        return []
    # rational upper bound on |delta| for the pair count
    dist_hi = Fraction(math.isqrt(math.ceil(float(dist_sq) * 10 ** 12)) + 1,
                       10 ** 6)
    pairs = max(1, -(-dist_hi // (2 * hop)))
    count = 2 * int(pairs)
    return [tuple(s + (2 * k + 1) * d / (2 * count)
                  for s, d in zip(start, delta)) for k in range(count)]


def _route_moves(spec, goals, cert):
    """Order the cube moves, parking a cube at a free station whenever its
    goal slot is still occupied.  Returns (cube, start, end, parked) tuples
    in execution order, exact rationals in the source-ball frame."""
    count = len(spec.source_cubes)
    pos = {i: tuple(Fraction(c) for c in spec.source_cubes[i].center)
           for i in range(count)}
    moves = []

    def occupied(point, skip):
        for j in range(count):
            if j != skip and max(abs(a - b) for a, b in zip(pos[j], point)) \
                    < 2 * cert.half + cert.gap:
                return j
        return None

    def station_for(i):
        step = cert.radius / 4
        for ring in range(1, 4):
            for sx in range(-ring, ring + 1):
                for sy in range(-ring, ring + 1):
                    if max(abs(sx), abs(sy)) != ring:
                        continue
                    cand = (cert.center[0] + sx * step,
                            cert.center[1] + sy * step)
                    if sum((a - b) ** 2 for a, b in zip(cand, cert.center)) \
                            > (cert.r_allow - cert.r_out - cert.half) ** 2:
                        continue
                    if occupied(cand, i) is None and all(
                            max(abs(a - b) for a, b in zip(cand, g))
                            > 2 * cert.half + cert.gap for g in goals.values()):
                        return cand
        raise ConstructionError("no free station available for cube routing")

    def record(i, target):
        parked = [pos[j] for j in range(count) if j != i]
        moves.append((i, pos[i], target, parked))
        pos[i] = target

    pending = list(range(count))
    guard = 0
    while pending:
        guard += 1
        if guard > 4 * count + 8:
            raise ConstructionError("cube routing did not terminate")
        i = pending[0]
        if pos[i] == goals[i]:
            pending.pop(0)
            continue
        blocker = occupied(goals[i], i)
        if blocker is not None and blocker in pending:
            if occupied(goals[blocker], blocker) is None:
                pending.remove(blocker)
                pending.insert(0, blocker)
            else:
                record(i, station_for(i))
                pending.pop(0)
                pending.append(i)
            continue
        record(i, goals[i])
        pending.pop(0)
    return moves, pos


def _unshear_factors(K, tol=0.06):
    """Factor K (2x2, det 1) into near-identity steps: K = R^m S^m with S
    symmetric positive definite and R a rotation, each step within `tol`
    of the identity in spectral norm."""
    U, sv, Vt = np.linalg.svd(K)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        raise ConstructionError("transport linear part is orientation reversing")
    S = Vt.T @ np.diag(sv) @ Vt
    theta = float(np.arctan2(R[1, 0], R[0, 0]))
    w, V = np.linalg.eigh(S)
    if np.any(w <= 0):
        raise ConstructionError("transport linear part is degenerate")
    m = 1
    while max(w.max() ** (1.0 / m) - 1.0, 1.0 - w.min() ** (1.0 / m),
              2.0 * abs(math.sin(theta / (2 * m)))) > tol:
        m += 1
        if m > 500:
            raise ConstructionError("transport linear part too distorted")
    Sroot = V @ np.diag(w ** (1.0 / m)) @ V.T
    ct, st = math.cos(theta / m), math.sin(theta / m)
    Rstep = np.array([[ct, -st], [st, ct]])
    return m, Sroot, Rstep, float(sv.max())


def ball_ellipsoid_transport(spec):
    """Diffeomorphism carrying the source ball onto the target ellipsoid:
    equal to the linear part on the ball collar, a pure translation on a
    neighborhood of each source cube."""
    spec.validate()
    n = len(spec.source.center)
    L = _linear_part(spec)
    count = len(spec.source_cubes)
    if count == 0:
        return L
    if n != 2:
        raise ConstructionError(
            f"in-ball cube routing is implemented for n=2, got n={n}")

    # goal slots in the ball frame; snap float noise back onto the sources
    Ainv = np.linalg.inv(L.A)
    snap = 1e-9 * float(spec.source.radius)
    goals = {}
    for i in range(count):
        t = spec.target_cubes[spec.assignment[i]]
        raw = Ainv @ (np.array([float(c) for c in t.center]) - L.b)
        src = spec.source_cubes[i].center
        if max(abs(raw[d] - float(src[d])) for d in range(n)) <= snap:
            goals[i] = tuple(Fraction(c) for c in src)
        else:
            goals[i] = tuple(Fraction(v) for v in raw)

    half = Fraction(spec.source_cubes[0].edge) / 2
    cert = _RouteCert(spec.source, half)
    moves, final_pos = _route_moves(spec, goals, cert)

    maps = []
    twists = []
    for i, start, end, parked in moves:
        for c in _hops_for_segment(start, end, cert.hop):
            cert.check_disk(c, parked)
            twists.append(PlanarTwist(2, [float(v) for v in c], (0, 1),
                                      float(cert.r_in), float(cert.r_out),
                                      np.pi))
    if twists:
        maps.append(TwistChain(2, twists, cells=32))

    # unshear: realize L^{-1} near each landed cube so the composite with L
    # ends as a pure translation there
    K = Ainv
    if np.linalg.norm(K - np.eye(2), 2) > 1e-12:
        m, Sroot, Rstep, sigma_max = _unshear_factors(K)
        rho_in = float(half) * math.sqrt(2.0) * 1.3 * max(1.0, sigma_max)
        rho_out = 2.2 * rho_in
        centers = [np.array([float(v) for v in final_pos[i]])
                   for i in range(count)]
        ball_c = np.array([float(v) for v in cert.center])
        for a in range(count):
            if np.linalg.norm(centers[a] - ball_c) + rho_out \
                    > float(cert.r_allow):
                raise ConstructionError(
                    "no room for the unshear blend inside the ball")
            for b2 in range(a):
                if np.linalg.norm(centers[a] - centers[b2]) < 2 * rho_out:
                    raise ConstructionError(
                        "unshear blends of two landed cubes overlap")
        for a in range(count):
            for _ in range(m):
                maps.append(RadialMatrixBlend(centers[a], Sroot,
                                              rho_in, rho_out))
            for _ in range(m):
                maps.append(RadialMatrixBlend(centers[a], Rstep,
                                              rho_in, rho_out))

    maps.append(L)
    if len(maps) == 1:
        return L
    return CompositeMap(maps, {"kind": "ball_ellipsoid_transport",
                               "cubes": count, "moves": len(moves)})

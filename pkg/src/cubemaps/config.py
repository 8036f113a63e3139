"""Run configuration: dataclasses with JSON round-trip and a stable hash.

All tunable numerical knobs live here so a verification report can snapshot
exactly what produced it.
"""

import dataclasses
import hashlib
import json

from .errors import SpecificationError


@dataclasses.dataclass
class MoserParams:
    """Numerical knobs for one prescribed-Jacobian solve."""

    grid: int = 512            # nodes per axis for the density / field grids
    flow_steps: int = 24       # RK4 steps for the time-1 flow at grid nodes
    splits: int = 1            # factor the density into this many gentler flows
    outer_iters: int = 0       # measured-residual correction rounds
    tol: float = 5e-3          # target sup relative Jacobian error
    grading: float = 0.0       # geometric time-step ratio; 0 = auto from the
                               # density range, 1 = uniform steps

    def validate(self):
        if self.grid < 16 or self.flow_steps < 2 or self.splits < 1:
            raise SpecificationError(f"degenerate Moser parameters: {self}")
        if self.grading < 0.0:
            raise SpecificationError(f"grading must be >= 0, got {self.grading}")
        return self


# Per-stage defaults for measure-preserving correction of the exchange
# stages.  `grid` counts the coarse breakpoints per axis; the actual solve
# grid adds slope-adapted breakpoints across each compression bridge and a
# midpoint per gap (see moser.exchange_solve_axis).  Deeper stages compress
# harder, so their Jacobians span more decades and get more flow resolution.
MP_STAGE_PARAMS = {
    1: MoserParams(grid=384, flow_steps=16, splits=2, outer_iters=1),
    2: MoserParams(grid=384, flow_steps=16, splits=3, outer_iters=1),
    3: MoserParams(grid=384, flow_steps=20, splits=3, outer_iters=1),
}

# Acceptance gate for the corrected exchanges: sup |det/f - 1| at grid nodes.
MP_TOL_REL = 2e-2


@dataclasses.dataclass
class RunConfig:
    """Top-level knobs shared by the CLI and the test suite."""

    dim: int = 2
    depth: int = 4                 # tower depth for generic builds
    mp_depth_cap: int = 3          # deepest stage that gets a Moser correction
    seed: int = 20240921
    samples: int = 1_000_000       # Monte Carlo sample budget
    moser: MoserParams = dataclasses.field(default_factory=MoserParams)

    def validate(self):
        if self.dim < 1:
            raise SpecificationError(f"dim must be >= 1, got {self.dim}")
        if self.depth < 1:
            raise SpecificationError(f"depth must be >= 1, got {self.depth}")
        self.moser.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        moser = d.pop("moser", None)
        cfg = cls(**d)
        if moser is not None:
            cfg.moser = MoserParams(**moser)
        return cfg.validate()

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def config_hash(self):
        """Short stable digest identifying this configuration."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

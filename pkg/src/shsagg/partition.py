"""
Mode-domain geometry for the density solver.

Each mode q of a hybrid load lives on its own continuous domain X_q,
split into axis-aligned components that meet on declared interfaces.
The boundary of X_q divides into three kinds of faces:

* guard faces G_q, the outflow part of the boundary (drift exits):
  density is absorbed there when noise is present, and the outgoing
  probability flux is handed to the matching inflow face of the target
  mode q+;
* walls, true boundary portions that are not outflow (the drift is
  tangent or entering): zero flux;
* truncation faces, artificial cut-offs of an unbounded domain: the
  decaying-at-infinity condition is imposed through zero-density ghost
  cells and any mass that leaks out is accounted separately.

Per mode the components are laid out as one contiguous strip (a single
rectangular index range whose x1 spacing may change between blocks at
the component boundaries).  Interior interfaces between the components
of a single mode then need no special treatment: continuity of the
density across them holds by construction, and only the guard faces at
the strip edges take part in the interface exchange.

Concrete partitions:

* HVAC (two modes): OFF occupies [x1_lo, u+delta], split at u-delta
  into a margin component and the deadband component; ON occupies
  [u-delta, x1_hi] split at u+delta.  G_OFF is the hot edge x1=u+delta
  with normal +e1, G_ON the cold edge x1=u-delta with normal -e1; each
  maps onto the interior face of the other strip at the same
  coordinate.  u here is the effective setpoint u_set + du(v).
* PEV (three modes): waiting occupies [0, L1] x [0, L2] with a wall at
  x1=0 (drift is tangent); its outflow face is x2=0 with normal -e2,
  feeding the charging mode.  Charging spans a small band of negative
  x2 as well (deadline starts travel along x2<=0; early random starts
  populate x2>0), with outflow at x1=0, normal -e1, feeding the
  completed mode which extends to negative x1.
* anything else with an affine-threshold description and no active
  guards gets one component per mode on the given truncation box
  (optionally periodic, for scheme verification against exact
  solutions).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import LoadModel, OFF, ON, PEV_WAITING, PEV_CHARGING, PEV_DONE

__all__ = [
    "WALL", "TRUNCATION", "GUARD", "PERIODIC",
    "Component", "GuardFace", "DomainPartition", "build_partition",
]

# edge condition tags
WALL = "wall"
TRUNCATION = "truncation"
GUARD = "guard"
PERIODIC = "periodic"

_SIDES = ("x1_min", "x1_max", "x2_min", "x2_max")


@dataclass(frozen=True)
class Component:
    """One axis-aligned box Omega_i(q) of a mode domain."""
    mode: int
    index: int                 # 1-based position within the mode
    box: tuple                 # (x1_lo, x1_hi, x2_lo, x2_hi)


@dataclass(frozen=True)
class GuardFace:
    """Outflow face of one mode, paired with its inflow side.

    The face is the strip edge of `mode` at `coord` along `axis`
    (side +1: max edge, -1: min edge), with outward normal
    `normal` = side * e_axis.  Its geometric image in `target_mode` is
    the face at the same coordinate; mass crossing here is injected
    there.
    """
    mode: int
    axis: int                  # 0 or 1, the normal axis
    side: int                  # +1 or -1
    coord: float
    span: tuple                # extent along the transverse axis
    target_mode: int

    @property
    def normal(self):
        n = np.zeros(2)
        n[self.axis] = float(self.side)
        return n


@dataclass
class DomainPartition:
    """Geometric description of all mode domains of one load.

    x1_blocks/x2_blocks list, per mode, the consecutive intervals whose
    union is the strip extent along that axis; block boundaries are the
    component interfaces.  edge_kind assigns one of WALL, TRUNCATION,
    GUARD, PERIODIC to each of the four strip edges per mode.
    """
    family: str
    modes: tuple
    components: list
    guards: list
    x1_blocks: dict            # mode -> list of (lo, hi)
    x2_blocks: dict            # mode -> list of (lo, hi)
    edge_kind: dict            # mode -> {side: kind}
    shift: float = 0.0         # setpoint shift du(v) baked into the geometry
    meta: dict = field(default_factory=dict)

    def extent(self, mode):
        x1 = self.x1_blocks[mode]
        x2 = self.x2_blocks[mode]
        return (x1[0][0], x1[-1][1], x2[0][0], x2[-1][1])

    def guard_for(self, mode):
        return [g for g in self.guards if g.mode == mode]

    def mode_components(self, mode):
        return [c for c in self.components if c.mode == mode]

    def describe(self) -> dict:
        """Plain-data description for reproducibility exports."""
        return {
            "family": self.family,
            "shift": self.shift,
            "components": [
                {"mode": c.mode, "index": c.index, "box": list(c.box)}
                for c in self.components
            ],
            "guards": [
                {"mode": g.mode, "axis": g.axis, "side": g.side,
                 "coord": g.coord, "span": list(g.span),
                 "target_mode": g.target_mode}
                for g in self.guards
            ],
            "edges": {str(q): dict(kinds) for q, kinds in self.edge_kind.items()},
        }


def _check_blocks(blocks):
    for (a, b) in blocks:
        if not b > a:
            raise ValueError(f"degenerate block [{a}, {b}]")
    for (_, b), (a2, _) in zip(blocks, blocks[1:]):
        if abs(b - a2) > 1e-12:
            raise ValueError("blocks must be consecutive")


def _hvac_partition(model: LoadModel, v, alpha, truncation_bounds, margin):
    du = alpha.setpoint_shift(v)
    u = alpha.u_set + du
    d = alpha.deadband
    if truncation_bounds is None:
        x1_lo, x1_hi = u - d - margin, u + d + margin
        x2_lo, x2_hi = u - d - margin, u + d + margin
    else:
        (x1_lo, x1_hi), (x2_lo, x2_hi) = truncation_bounds
    if not (x1_lo < u - d and x1_hi > u + d):
        raise ValueError("truncation bounds must enclose the deadband with margin")
    if not (x2_lo < u - d and x2_hi > u + d):
        raise ValueError("truncation bounds must enclose the deadband in x2")

    x1_blocks = {
        OFF: [(x1_lo, u - d), (u - d, u + d)],
        ON: [(u - d, u + d), (u + d, x1_hi)],
    }
    x2_blocks = {OFF: [(x2_lo, x2_hi)], ON: [(x2_lo, x2_hi)]}
    components = []
    for q in (OFF, ON):
        for i, (a, b) in enumerate(x1_blocks[q], start=1):
            components.append(Component(q, i, (a, b, x2_lo, x2_hi)))
    guards = [
        GuardFace(OFF, axis=0, side=+1, coord=u + d,
                  span=(x2_lo, x2_hi), target_mode=ON),
        GuardFace(ON, axis=0, side=-1, coord=u - d,
                  span=(x2_lo, x2_hi), target_mode=OFF),
    ]
    edge_kind = {
        OFF: {"x1_min": TRUNCATION, "x1_max": GUARD,
              "x2_min": TRUNCATION, "x2_max": TRUNCATION},
        ON: {"x1_min": GUARD, "x1_max": TRUNCATION,
             "x2_min": TRUNCATION, "x2_max": TRUNCATION},
    }
    return DomainPartition("hvac", (OFF, ON), components, guards,
                           x1_blocks, x2_blocks, edge_kind, shift=du,
                           meta={"u_eff": u, "deadband": d})


def _pev_partition(model: LoadModel, truncation_bounds, margin):
    if truncation_bounds is None:
        x1_hi, x2_hi = 4.0, 2.0
        x1_neg, x2_neg = margin, None
    else:
        (x1_neg_b, x1_hi), (x2_neg_b, x2_hi) = truncation_bounds
        x1_neg, x2_neg = -x1_neg_b, -x2_neg_b if x2_neg_b < 0.0 else None
    if x1_hi <= 0.0 or x2_hi <= 0.0:
        raise ValueError("PEV truncation bounds must have positive extent")
    if x2_neg is None:
        # a thin band below x2=0 carries the deadline-start population;
        # its width snaps to whole cells of the positive block at grid
        # build time, this is the nominal geometry
        x2_neg = 4.0 * x2_hi / 120.0

    x1_blocks = {
        PEV_WAITING: [(0.0, x1_hi)],
        PEV_CHARGING: [(0.0, x1_hi)],
        PEV_DONE: [(-x1_neg, 0.0)],
    }
    x2_blocks = {
        PEV_WAITING: [(0.0, x2_hi)],
        PEV_CHARGING: [(-x2_neg, 0.0), (0.0, x2_hi)],
        PEV_DONE: [(-x2_neg, 0.0), (0.0, x2_hi)],
    }
    components = [
        Component(PEV_WAITING, 1, (0.0, x1_hi, 0.0, x2_hi)),
        Component(PEV_CHARGING, 1, (0.0, x1_hi, -x2_neg, 0.0)),
        Component(PEV_CHARGING, 2, (0.0, x1_hi, 0.0, x2_hi)),
        Component(PEV_DONE, 1, (-x1_neg, 0.0, -x2_neg, x2_hi)),
    ]
    guards = [
        GuardFace(PEV_WAITING, axis=1, side=-1, coord=0.0,
                  span=(0.0, x1_hi), target_mode=PEV_CHARGING),
        GuardFace(PEV_CHARGING, axis=0, side=-1, coord=0.0,
                  span=(-x2_neg, x2_hi), target_mode=PEV_DONE),
    ]
    edge_kind = {
        PEV_WAITING: {"x1_min": WALL, "x1_max": TRUNCATION,
                      "x2_min": GUARD, "x2_max": TRUNCATION},
        PEV_CHARGING: {"x1_min": GUARD, "x1_max": TRUNCATION,
                       "x2_min": TRUNCATION, "x2_max": TRUNCATION},
        PEV_DONE: {"x1_min": TRUNCATION, "x1_max": TRUNCATION,
                   "x2_min": TRUNCATION, "x2_max": TRUNCATION},
    }
    return DomainPartition("pev", (PEV_WAITING, PEV_CHARGING, PEV_DONE),
                           components, guards, x1_blocks, x2_blocks,
                           edge_kind, shift=0.0,
                           meta={"x2_neg": x2_neg})


def _generic_partition(model: LoadModel, truncation_bounds, periodic):
    if truncation_bounds is None:
        raise ValueError("truncation bounds are required for a generic model")
    fs = model.fast
    if fs is not None and np.any(fs.guard_sign != 0.0):
        raise NotImplementedError(
            "guard surfaces of generic models are not supported; "
            "use the hvac or pev families")
    (x1_lo, x1_hi), (x2_lo, x2_hi) = truncation_bounds
    modes = tuple(model.modes)
    x1_blocks = {q: [(x1_lo, x1_hi)] for q in modes}
    x2_blocks = {q: [(x2_lo, x2_hi)] for q in modes}
    components = [Component(q, 1, (x1_lo, x1_hi, x2_lo, x2_hi)) for q in modes]
    kind = PERIODIC if periodic else TRUNCATION
    edge_kind = {q: {s: kind for s in _SIDES} for q in modes}
    return DomainPartition(model.family, modes, components, [],
                           x1_blocks, x2_blocks, edge_kind)


def build_partition(model: LoadModel, v: float = 0.0, alpha=None,
                    truncation_bounds=None, margin: float = 6.0,
                    periodic: bool = False) -> DomainPartition:
    """Mode domains, outflow faces and interface pairing for one load.

    `v` is the external signal in force (it moves the HVAC thresholds
    through the setpoint-shift map); `truncation_bounds` is a pair of
    (lo, hi) intervals per axis cutting off the unbounded domains, with
    `margin` supplying the default extent beyond the deadband edges.
    `periodic` wraps the domain of a guard-free generic model instead
    of truncating (scheme-verification aid).
    """
    if periodic and model.family in ("hvac", "pev"):
        raise ValueError("periodic domains are only for guard-free models")
    if model.family == "hvac":
        part = _hvac_partition(model, v, alpha or model.alpha,
                               truncation_bounds, margin)
    elif model.family == "pev":
        part = _pev_partition(model, truncation_bounds, margin)
    else:
        part = _generic_partition(model, truncation_bounds, periodic)
    for q in part.modes:
        _check_blocks(part.x1_blocks[q])
        _check_blocks(part.x2_blocks[q])
    return part

"""
Density solver: coupled forward equations on the mode partition.

The population density p(q, x, t) of one (homogeneous) load satisfies,
inside every mode component, a Fokker-Planck equation

    D_t p + div( f(q,x) p - (1/2) grad(p Sigma) ) = lam(q-,x) p(q-,x,t)
                                                  - lam(q,x) p(q,x,t)

coupled across modes by the random-jump source terms and by boundary
conditions on the outflow faces G_q:

* absorbing: where the noise acts across the face, p vanishes on G_q;
* continuity: the density is single-valued across the interior
  interfaces of a mode (automatic here, each mode is one contiguous
  strip);
* conservation: the probability flux gamma.nu leaving through G_q
  re-enters the target mode q+ through the geometrically coincident
  face, so that arriving minus departing minus handed-over flux
  vanishes identically.

Discretization: Donor-Cell upwind finite volumes with explicit
central-difference diffusion, advanced by dimensional splitting (the
x1 and x2 sweeps alternate order step to step).  Each full step is
sweeps, then random-jump exchange, then boundary application (outflow
removal, hand-off injection, truncation leakage).  Every stage moves
mass pairwise, so total mass is conserved to rounding; the interface
balance is asserted each step.  With the step bound used by solve()
(advection and diffusion rates combined per axis) every stage is also
positivity preserving, and any clipping would be counted.

Diffusion is restricted to a constant diagonal Gram matrix per mode,
which covers the shipped families (air-temperature noise for HVAC,
none for PEV); anything else raises NotImplementedError.
"""
from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import LoadModel, OFF, ON, PEV_DONE, gram
from .mc import ControlSchedule, PowerSeries
from .partition import (DomainPartition, build_partition,
                        GUARD, PERIODIC, TRUNCATION, WALL)
from .kernels import sweep_x1, sweep_x2

__all__ = [
    "ConservationError", "MassRoutingError",
    "GridSpec", "Grid", "DensityField", "FluxField", "SolveResult",
    "make_grid", "band_uniform_density", "box_uniform_density",
    "bump_density", "cell_density",
    "compute_flux", "advect_diffuse_step", "jump_exchange_step",
    "apply_boundary", "guard_face_values", "cfl_dt", "step_dt_max",
    "solve", "total_mass", "aggregated_power",
]


class ConservationError(RuntimeError):
    """Mass accounting left the declared tolerance."""


class MassRoutingError(RuntimeError):
    """Random-jump mass has no geometric image in the target mode."""


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass
class GridSpec:
    """Cells per component span: nx1 along x1, nx2 along x2.

    The reference resolution is 160 x1 cells per component and 120
    across x2.  Narrow auxiliary blocks (the negative-x2 band of the
    PEV charging mode) get cells of matching width instead of the full
    count.
    """
    nx1: int = 160
    nx2: int = 120


@dataclass
class _GuardBinding:
    """One outflow face resolved onto the grid."""
    mode: int
    axis: int
    side: int
    target_mode: int
    edge_cell: int             # source cell index along the normal axis
    src_dx: float              # its width along the normal
    v_out: np.ndarray          # outward face velocity per transverse cell
    d_src: float               # diffusion coefficient along the normal
    t_widths: np.ndarray       # transverse cell widths
    tgt_cells: np.ndarray      # target cell index along the normal, per t
    tgt_dx: np.ndarray         # widths of those target cells


@dataclass
class _JumpMap:
    source_mode: int
    target_mode: int
    lam: float
    src: tuple                 # index arrays into the source strip
    dst: tuple                 # matching cells of the target strip
    unroutable: tuple          # source cells with no geometric image


@dataclass
class Grid:
    """Cell geometry, face velocities and exchange maps for one load."""
    partition: DomainPartition
    x1_edges: dict
    x2_edges: dict
    x1_centers: dict = field(default_factory=dict)
    x2_centers: dict = field(default_factory=dict)
    dx1: dict = field(default_factory=dict)
    dx2: dict = field(default_factory=dict)
    dc1: dict = field(default_factory=dict)
    dc2: dict = field(default_factory=dict)
    v1: dict = field(default_factory=dict)
    v2: dict = field(default_factory=dict)
    d1: dict = field(default_factory=dict)
    d2: dict = field(default_factory=dict)
    lam: dict = field(default_factory=dict)
    vol: dict = field(default_factory=dict)
    guards: list = field(default_factory=list)
    jump_maps: list = field(default_factory=list)
    spec: GridSpec = None
    dt: Optional[float] = None

    @property
    def modes(self):
        return self.partition.modes

    @property
    def periodic(self):
        kinds = next(iter(self.partition.edge_kind.values()))
        return kinds["x1_min"] == PERIODIC

    def shape(self, q):
        return (len(self.dx1[q]), len(self.dx2[q]))

    def locate(self, q, x):
        """Cell containing x in mode q, or None if outside."""
        e1, e2 = self.x1_edges[q], self.x2_edges[q]
        if not (e1[0] <= x[0] <= e1[-1] and e2[0] <= x[1] <= e2[-1]):
            return None
        i = min(int(np.searchsorted(e1, x[0], side="right")) - 1, len(e1) - 2)
        j = min(int(np.searchsorted(e2, x[1], side="right")) - 1, len(e2) - 2)
        return max(i, 0), max(j, 0)

    def component_windows(self, q):
        """Index windows (i0, i1, j0, j1) of mode q's components."""
        out = []
        for c in self.partition.mode_components(q):
            x1lo, x1hi, x2lo, x2hi = c.box
            i0 = int(np.argmin(np.abs(self.x1_edges[q] - x1lo)))
            i1 = int(np.argmin(np.abs(self.x1_edges[q] - x1hi)))
            j0 = int(np.argmin(np.abs(self.x2_edges[q] - x2lo)))
            j1 = int(np.argmin(np.abs(self.x2_edges[q] - x2hi)))
            out.append((c, i0, i1, j0, j1))
        return out

    def describe(self) -> dict:
        d = {"spec": {"nx1": self.spec.nx1, "nx2": self.spec.nx2},
             "partition": self.partition.describe(), "modes": {}}
        for q in self.modes:
            d["modes"][str(q)] = {
                "shape": list(self.shape(q)),
                "x1_range": [float(self.x1_edges[q][0]), float(self.x1_edges[q][-1])],
                "x2_range": [float(self.x2_edges[q][0]), float(self.x2_edges[q][-1])],
            }
        return d


def _block_edges(blocks, n_per_block, axis_hint=""):
    """Concatenated cell edges, n cells per block; thin blocks (under
    half the width of the largest) get width-matched counts instead."""
    widths = [b - a for a, b in blocks]
    ref = max(widths)
    parts = []
    for (a, b), w in zip(blocks, widths):
        if w < 0.5 * ref:
            n = max(1, int(round(w / (ref / n_per_block))))
        else:
            n = n_per_block
        parts.append(np.linspace(a, b, n + 1))
    edges = parts[0]
    for seg in parts[1:]:
        edges = np.concatenate([edges, seg[1:]])
    return edges


def _affine_face_velocities(fs, q, e1, c1, e2, c2):
    a, b = fs.a_mats[q], fs.b_vecs[q]
    v1 = a[0, 0] * e1[:, None] + a[0, 1] * c2[None, :] + b[0]
    v2 = a[1, 0] * c1[:, None] + a[1, 1] * e2[None, :] + b[1]
    return v1, v2


def make_grid(model: LoadModel, part: DomainPartition, spec: GridSpec = None) -> Grid:
    """Discretize the partition and bind the model's coefficients to it."""
    if spec is None:
        spec = GridSpec()
    fs = model.fast
    if fs is None:
        raise NotImplementedError(
            "the density solver needs the affine-threshold description")
    g = Grid(part, {}, {}, spec=spec)
    for q in part.modes:
        e1 = _block_edges(part.x1_blocks[q], spec.nx1)
        e2 = _block_edges(part.x2_blocks[q], spec.nx2)
        if part.family == "hvac":
            u, d = part.meta["u_eff"], part.meta["deadband"]
            n_db = int(np.sum((e1 > u - d - 1e-12) & (e1 < u + d + 1e-12))) - 1
            if n_db < 2:
                raise ValueError("deadband needs at least 2 cells across")
        g.x1_edges[q], g.x2_edges[q] = e1, e2
        g.x1_centers[q] = 0.5 * (e1[:-1] + e1[1:])
        g.x2_centers[q] = 0.5 * (e2[:-1] + e2[1:])
        g.dx1[q] = np.diff(e1)
        g.dx2[q] = np.diff(e2)
        dc1 = np.empty(len(e1))
        dc1[1:-1] = np.diff(g.x1_centers[q])
        dc1[0] = dc1[-1] = np.nan     # edge faces never use center distances
        dc2 = np.empty(len(e2))
        dc2[1:-1] = np.diff(g.x2_centers[q])
        dc2[0] = dc2[-1] = np.nan
        g.dc1[q], g.dc2[q] = dc1, dc2
        g.vol[q] = g.dx1[q][:, None] * g.dx2[q][None, :]
        g.v1[q], g.v2[q] = _affine_face_velocities(
            fs, q, e1, g.x1_centers[q], e2, g.x2_centers[q])
        sig = gram(fs.sigma[q])
        scale = max(abs(sig).max(), 1.0)
        if abs(sig[0, 1]) > 1e-14 * scale or abs(sig[1, 0]) > 1e-14 * scale:
            raise NotImplementedError(
                "only diagonal diffusion is supported on the grid")
        g.d1[q] = 0.5 * sig[0, 0]
        g.d2[q] = 0.5 * sig[1, 1]
        g.lam[q] = float(fs.lam[q])

    for gf in part.guards:
        g.guards.append(_bind_guard(g, gf))
    g.jump_maps = _build_jump_maps(g, fs)
    return g


def _bind_guard(g: Grid, gf) -> _GuardBinding:
    q, tq = gf.mode, gf.target_mode
    if gf.axis == 0:
        n1 = len(g.dx1[q])
        edge_cell = n1 - 1 if gf.side > 0 else 0
        face = n1 if gf.side > 0 else 0
        v_out = gf.side * g.v1[q][face, :]
        src_dx = g.dx1[q][edge_cell]
        t_edges_src, t_edges_tgt = g.x2_edges[q], g.x2_edges[tq]
        t_widths = g.dx2[q]
        d_src = g.d1[q]
        tgt_edges_n = g.x1_edges[tq]
        v_tgt_face = None  # filled below
    else:
        n2 = len(g.dx2[q])
        edge_cell = n2 - 1 if gf.side > 0 else 0
        face = n2 if gf.side > 0 else 0
        v_out = gf.side * g.v2[q][:, face]
        src_dx = g.dx2[q][edge_cell]
        t_edges_src, t_edges_tgt = g.x1_edges[q], g.x1_edges[tq]
        t_widths = g.dx1[q]
        d_src = g.d2[q]
        tgt_edges_n = g.x2_edges[tq]
    if not np.array_equal(t_edges_src, t_edges_tgt):
        raise ValueError("interface-adjacent modes must share transverse edges")

    # face index in the target strip along the normal axis
    k = int(np.argmin(np.abs(tgt_edges_n - gf.coord)))
    if abs(tgt_edges_n[k] - gf.coord) > 1e-9:
        raise ValueError("outflow face has no coincident target face")
    n_t = len(t_widths)
    if gf.axis == 0:
        v_tgt_face = g.v1[tq][k, :]
        tgt_dx_all = g.dx1[tq]
    else:
        v_tgt_face = g.v2[tq][:, k]
        tgt_dx_all = g.dx2[tq]
    n_tgt = len(tgt_dx_all)
    cells = np.empty(n_t, dtype=np.int64)
    for t in range(n_t):
        v = v_tgt_face[t]
        if v > 0.0:
            c = k
        elif v < 0.0:
            c = k - 1
        else:
            # no normal velocity on the receiving side: keep moving in the
            # arrival direction
            c = k if gf.side > 0 else k - 1
        cells[t] = min(max(c, 0), n_tgt - 1)
    return _GuardBinding(q, gf.axis, gf.side, tq, edge_cell, src_dx,
                         v_out.copy(), d_src, t_widths.copy(),
                         cells, tgt_dx_all[cells])


def _build_jump_maps(g: Grid, fs) -> list:
    maps = []
    for q in g.modes:
        if g.lam[q] <= 0.0:
            continue
        tq = int(fs.succ[q])
        if tq not in g.modes:
            raise MassRoutingError(f"jump target mode {tq} has no domain")
        i_map = _match_cells(g.x1_edges[q], g.x1_edges[tq])
        j_map = _match_cells(g.x2_edges[q], g.x2_edges[tq])
        n1, n2 = g.shape(q)
        ii, jj = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        ti, tj = i_map[ii], j_map[jj]
        ok = (ti >= 0) & (tj >= 0)
        src = (ii[ok], jj[ok])
        dst = (ti[ok], tj[ok])
        bad = (ii[~ok], jj[~ok])
        maps.append(_JumpMap(q, tq, g.lam[q], src, dst, bad))
    return maps


def _match_cells(src_edges, tgt_edges):
    """For each source cell, the target cell with identical extent
    (-1 when there is none)."""
    out = np.full(len(src_edges) - 1, -1, dtype=np.int64)
    tol = 1e-9
    pos = np.searchsorted(tgt_edges, src_edges[:-1] - tol)
    for i in range(len(out)):
        k = pos[i]
        if k < len(tgt_edges) - 1 and \
           abs(tgt_edges[k] - src_edges[i]) <= tol and \
           abs(tgt_edges[k + 1] - src_edges[i + 1]) <= tol:
            out[i] = k
    return out


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class DensityField:
    """Cell-average density per mode strip, plus mass bookkeeping.

    escaped_mass counts leakage through truncation faces; for the PEV
    family the outflow of already-completed load through the deep end
    of the completed mode is tracked separately in completed_mass
    (it is part of the conserved total, not a defect).  clipped_mass
    counts any negativity repair.
    """
    grid: Grid
    data: dict
    time: float = 0.0
    escaped_mass: float = 0.0
    completed_mass: float = 0.0
    clipped_mass: float = 0.0

    @classmethod
    def zeros(cls, grid: Grid, time: float = 0.0):
        return cls(grid, {q: np.zeros(grid.shape(q)) for q in grid.modes}, time)

    def zeros_like(self):
        return DensityField.zeros(self.grid, self.time)

    def copy(self):
        f = DensityField(self.grid, {q: a.copy() for q, a in self.data.items()},
                         self.time, self.escaped_mass, self.completed_mass,
                         self.clipped_mass)
        return f

    def same_grid(self, other) -> bool:
        if self.grid is other.grid:
            return True
        a, b = self.grid, other.grid
        return all(np.array_equal(a.x1_edges[q], b.x1_edges[q]) and
                   np.array_equal(a.x2_edges[q], b.x2_edges[q])
                   for q in a.modes) and a.modes == b.modes

    def deposit(self, mode: int, x, w: float) -> int:
        """Add probability w at point x; 1 if placed, 0 if outside."""
        if mode not in self.data:
            self.escaped_mass += w
            return 0
        loc = self.grid.locate(mode, x)
        if loc is None:
            self.escaped_mass += w
            return 0
        i, j = loc
        self.data[mode][i, j] += w / self.grid.vol[mode][i, j]
        return 1

    def mode_mass(self, q) -> float:
        return float(np.sum(self.data[q] * self.grid.vol[q]))

    def accounted_mass(self) -> float:
        """In-domain mass plus tracked leakage (what conservation checks)."""
        return total_mass(self) + self.escaped_mass + self.completed_mass


@dataclass
class FluxField:
    """Face-centered probability flux per mode and axis, oriented along
    the positive axis directions."""
    grid: Grid
    g1: dict
    g2: dict


def total_mass(p: DensityField) -> float:
    return float(sum(p.mode_mass(q) for q in p.grid.modes))


def aggregated_power(p: DensityField, model: LoadModel, n_loads: int = 1) -> float:
    """Expected electrical power N * sum_q h(q) * mass_q, in kW."""
    y = 0.0
    for q in p.grid.modes:
        y += model.output(q, model.theta) * p.mode_mass(q)
    return n_loads * y


# ---------------------------------------------------------------------------
# initial densities
# ---------------------------------------------------------------------------

def _overlap_lengths(edges, lo, hi):
    """Per-cell overlap of [lo, hi] with the cell intervals."""
    a = np.maximum(edges[:-1], lo)
    b = np.minimum(edges[1:], hi)
    return np.maximum(b - a, 0.0)


def band_uniform_density(grid: Grid, on_fraction: float = 0.5) -> DensityField:
    """Uniform over the deadband square, split between OFF and ON.

    The customary arbitrary start for thermostat populations: both
    temperatures uniform on [u - delta, u + delta], a coin for the
    compressor state.
    """
    part = grid.partition
    if part.family != "hvac":
        raise ValueError("band_uniform_density is for the hvac family")
    u, d = part.meta["u_eff"], part.meta["deadband"]
    p = DensityField.zeros(grid)
    for q, frac in ((OFF, 1.0 - on_fraction), (ON, on_fraction)):
        w1 = _overlap_lengths(grid.x1_edges[q], u - d, u + d)
        w2 = _overlap_lengths(grid.x2_edges[q], u - d, u + d)
        cell_mass = frac * np.outer(w1, w2) / (2.0 * d) ** 2
        p.data[q] = cell_mass / grid.vol[q]
    _normalize(p)
    return p


def box_uniform_density(grid: Grid, mode: int, x1_range, x2_range) -> DensityField:
    """Uniform over a rectangle inside one mode (partial cells weighted)."""
    lo1, hi1 = x1_range
    lo2, hi2 = x2_range
    if hi1 <= lo1 or hi2 <= lo2:
        raise ValueError("empty box")
    p = DensityField.zeros(grid)
    w1 = _overlap_lengths(grid.x1_edges[mode], lo1, hi1)
    w2 = _overlap_lengths(grid.x2_edges[mode], lo2, hi2)
    covered = w1.sum() * w2.sum()
    if covered < (hi1 - lo1) * (hi2 - lo2) * (1.0 - 1e-9):
        raise ValueError("box extends beyond the mode domain")
    p.data[mode] = np.outer(w1, w2) / ((hi1 - lo1) * (hi2 - lo2) * grid.vol[mode])
    _normalize(p)
    return p


def bump_density(grid: Grid, mode: int, center, width) -> DensityField:
    """Smooth compact bump (cosine-squared profile) of unit mass."""
    p = DensityField.zeros(grid)
    c1, c2 = center
    w1, w2 = (width, width) if np.isscalar(width) else width
    x1 = grid.x1_centers[mode]
    x2 = grid.x2_centers[mode]
    b1 = np.where(np.abs(x1 - c1) < w1,
                  np.cos(0.5 * np.pi * (x1 - c1) / w1) ** 2, 0.0)
    b2 = np.where(np.abs(x2 - c2) < w2,
                  np.cos(0.5 * np.pi * (x2 - c2) / w2) ** 2, 0.0)
    p.data[mode] = np.outer(b1, b2)
    _normalize(p)
    return p


def cell_density(grid: Grid, mode: int, x) -> DensityField:
    """All mass in the cell containing x."""
    p = DensityField.zeros(grid)
    loc = grid.locate(mode, x)
    if loc is None:
        raise ValueError(f"point {x} lies outside mode {mode}")
    i, j = loc
    p.data[mode][i, j] = 1.0 / grid.vol[mode][i, j]
    return p


def _normalize(p: DensityField):
    m = total_mass(p)
    if m <= 0.0:
        raise ValueError("density has no mass on the grid")
    for q in p.grid.modes:
        p.data[q] /= m


# ---------------------------------------------------------------------------
# flux and single stages
# ---------------------------------------------------------------------------

def _edge_out_flux(kind, v_out, p_edge, d, dx):
    """Outward flux density through a strip-edge face row.

    Guard faces: Donor-Cell outflow where the drift exits, plus the
    absorbing one-sided diffusive flux (the face value is pinned to
    zero, giving gradient 2 p_edge / dx).  Truncation faces: zero
    density ghost at one cell distance.  Walls: nothing.
    """
    if kind == GUARD:
        phi = np.maximum(v_out, 0.0) * p_edge
        if d > 0.0:
            phi = phi + (2.0 * d / dx) * p_edge
    elif kind == TRUNCATION:
        phi = np.maximum(v_out, 0.0) * p_edge
        if d > 0.0:
            phi = phi + (d / dx) * p_edge
    else:
        phi = np.zeros_like(p_edge)
    return phi


def compute_flux(p: DensityField, model: LoadModel, grid: Grid) -> FluxField:
    """Probability flux gamma = f p - (1/2) grad(p Sigma) on all faces."""
    if model.family != grid.partition.family:
        raise ValueError("model and grid disagree on the load family")
    g1, g2 = {}, {}
    for q in grid.modes:
        a = p.data[q]
        n1, n2 = a.shape
        v1, v2 = grid.v1[q], grid.v2[q]
        d1, d2 = grid.d1[q], grid.d2[q]
        f1 = np.zeros((n1 + 1, n2))
        vi = v1[1:n1, :]
        f1[1:n1] = np.where(vi > 0.0, vi * a[:-1, :], vi * a[1:, :])
        if d1 > 0.0:
            f1[1:n1] -= d1 * (a[1:, :] - a[:-1, :]) / grid.dc1[q][1:n1, None]
        f2 = np.zeros((n1, n2 + 1))
        vj = v2[:, 1:n2]
        f2[:, 1:n2] = np.where(vj > 0.0, vj * a[:, :-1], vj * a[:, 1:])
        if d2 > 0.0:
            f2[:, 1:n2] -= d2 * (a[:, 1:] - a[:, :-1]) / grid.dc2[q][None, 1:n2]

        kinds = grid.partition.edge_kind[q]
        if kinds["x1_min"] == PERIODIC:
            vw = v1[0, :]
            fw = np.where(vw > 0.0, vw * a[-1, :], vw * a[0, :])
            if d1 > 0.0:
                dc = 0.5 * (grid.dx1[q][0] + grid.dx1[q][-1])
                fw = fw - d1 * (a[0, :] - a[-1, :]) / dc
            f1[0] = f1[n1] = fw
            vw = v2[:, 0]
            fw = np.where(vw > 0.0, vw * a[:, -1], vw * a[:, 0])
            if d2 > 0.0:
                dc = 0.5 * (grid.dx2[q][0] + grid.dx2[q][-1])
                fw = fw - d2 * (a[:, 0] - a[:, -1]) / dc
            f2[:, 0] = f2[:, n2] = fw
        else:
            f1[0] = -_edge_out_flux(kinds["x1_min"], -v1[0, :], a[0, :],
                                    d1, grid.dx1[q][0])
            f1[n1] = _edge_out_flux(kinds["x1_max"], v1[n1, :], a[-1, :],
                                    d1, grid.dx1[q][-1])
            f2[:, 0] = -_edge_out_flux(kinds["x2_min"], -v2[:, 0], a[:, 0],
                                       d2, grid.dx2[q][0])
            f2[:, n2] = _edge_out_flux(kinds["x2_max"], v2[:, n2], a[:, -1],
                                       d2, grid.dx2[q][-1])
        g1[q], g2[q] = f1, f2
    return FluxField(grid, g1, g2)


def step_dt_max(grid: Grid) -> float:
    """Largest stable (and positivity-preserving) split step.

    Per axis the combined advection plus diffusion outflow rate of any
    cell must stay below 0.9/dt; random jumps additionally require
    lam*dt <= 0.45.
    """
    rate = 0.0
    lam_max = 0.0
    for q in grid.modes:
        v1, v2 = grid.v1[q], grid.v2[q]
        dx1 = grid.dx1[q][:, None]
        dx2 = grid.dx2[q][None, :]
        s1 = np.maximum(np.abs(v1[:-1, :]), np.abs(v1[1:, :])) / dx1 \
            + 2.0 * grid.d1[q] / dx1 ** 2
        s2 = np.maximum(np.abs(v2[:, :-1]), np.abs(v2[:, 1:])) / dx2 \
            + 2.0 * grid.d2[q] / dx2 ** 2
        rate = max(rate, s1.max(), s2.max())
        lam_max = max(lam_max, grid.lam[q])
    dt = 0.9 / rate if rate > 0.0 else np.inf
    if lam_max > 0.0:
        dt = min(dt, 0.45 / lam_max)
    return dt


def cfl_dt(grid: Grid, model: LoadModel) -> float:
    """Advisory step bound 0.9 * min(dx/|f|, dx^2/(2 Sigma)) over all
    cells and axes, capped by 0.5/lam_max."""
    best = np.inf
    lam_max = 0.0
    for q in grid.modes:
        v1, v2 = grid.v1[q], grid.v2[q]
        dx1 = grid.dx1[q][:, None]
        dx2 = grid.dx2[q][None, :]
        with np.errstate(divide="ignore"):
            c = np.minimum(dx1 / np.maximum(np.abs(v1[:-1, :]),
                                            np.abs(v1[1:, :])),
                           dx2 / np.maximum(np.abs(v2[:, :-1]),
                                            np.abs(v2[:, 1:]))).min()
            best = min(best, float(c))
            if grid.d1[q] > 0.0:
                best = min(best, float((dx1 ** 2).min() / (4.0 * grid.d1[q])))
            if grid.d2[q] > 0.0:
                best = min(best, float((dx2 ** 2).min() / (4.0 * grid.d2[q])))
        lam_max = max(lam_max, grid.lam[q])
    dt = 0.9 * best
    if lam_max > 0.0:
        dt = min(dt, 0.5 / lam_max)
    return dt


def advect_diffuse_step(p: DensityField, model: LoadModel, grid: Grid,
                        dt: float, axis_order=(0, 1)) -> DensityField:
    """One dimensionally split transport step on the component interiors.

    Strip-edge faces carry no flux here; apply_boundary settles them.
    Refuses steps beyond the combined stability bound.
    """
    adm = step_dt_max(grid)
    if dt > adm * (1.0 + 1e-12):
        raise ValueError(f"dt={dt} violates the stability bound; "
                         f"admissible dt <= {adm}")
    out = p.copy()
    _sweeps_inplace(out.data, grid, dt, axis_order)
    return out


def _sweeps_inplace(data, grid, dt, axis_order):
    per = grid.periodic
    for axis in axis_order:
        for q in grid.modes:
            if axis == 0:
                sweep_x1(data[q], grid.v1[q], grid.d1[q], grid.dx1[q],
                         grid.dc1[q], dt, per)
            else:
                sweep_x2(data[q], grid.v2[q], grid.d2[q], grid.dx2[q],
                         grid.dc2[q], dt, per)


def jump_exchange_step(p: DensityField, model: LoadModel, grid: Grid,
                       dt: float, routing_tol: float = 1e-9) -> DensityField:
    """Move random-jump mass lam*p*dt to the same point of the target mode.

    Raises MassRoutingError when more than routing_tol of mass sits on
    cells whose geometric image is missing from the target domain.
    """
    for jm in grid.jump_maps:
        if jm.lam * dt >= 0.5:
            raise ValueError(f"lam*dt = {jm.lam * dt:.3f} >= 0.5; shrink dt")
    out = p.copy()
    _jump_inplace(out, grid, dt, routing_tol)
    return out


def _jump_inplace(p: DensityField, grid: Grid, dt, routing_tol):
    # Two passes: every transfer is computed from the pre-stage density
    # before any is applied, so opposing hazards update simultaneously
    # and the exchange keeps the exact balance point of the rate matrix.
    moves = []
    for jm in grid.jump_maps:
        a = p.data[jm.source_mode]
        if len(jm.unroutable[0]):
            vol = grid.vol[jm.source_mode]
            stuck = float(np.sum(a[jm.unroutable] * vol[jm.unroutable]))
            if stuck > routing_tol:
                raise MassRoutingError(
                    f"{stuck:.2e} of mode-{jm.source_mode} jump mass has no "
                    f"image in mode {jm.target_mode}")
        moves.append(jm.lam * dt * a[jm.src])
    for jm, moved in zip(grid.jump_maps, moves):
        p.data[jm.source_mode][jm.src] -= moved
        p.data[jm.target_mode][jm.dst] += moved


def guard_face_values(p: DensityField, grid: Grid) -> dict:
    """Nearest-cell density estimate on each outflow face (absorbing
    boundary diagnostic); keyed by source mode."""
    out = {}
    for gb in grid.guards:
        a = p.data[gb.mode]
        row = a[gb.edge_cell, :] if gb.axis == 0 else a[:, gb.edge_cell]
        out[gb.mode] = row.copy()
    return out


def apply_boundary(p: DensityField, flux: Optional[FluxField], grid: Grid,
                   dt: float) -> DensityField:
    """Settle all strip-edge faces on p in place.

    Outflow faces: remove the outgoing flux from the edge cells and
    inject the identical mass into the receiving cells of the target
    mode (downwind of the coincident face); the discrete interface
    balance is asserted every call.  Truncation faces: remove the
    zero-ghost leakage into the escape counters.  Negative cells from
    any stage are clipped and counted.
    """
    bal = _boundary_inplace(p, grid, dt, flux)
    if abs(bal) > 1e-10:
        raise ConservationError(f"interface flux imbalance {bal:.3e}")
    return p


def _boundary_inplace(p: DensityField, grid: Grid, dt, flux=None) -> float:
    part = grid.partition
    removed_total = 0.0
    injected_total = 0.0
    # outflow faces: removal + hand-off
    for gb in grid.guards:
        q = gb.mode
        a = p.data[q]
        if gb.axis == 0:
            p_edge = a[gb.edge_cell, :]
        else:
            p_edge = a[:, gb.edge_cell]
        if flux is not None:
            phi = _read_edge_flux(flux, gb)
        else:
            phi = _edge_out_flux(GUARD, gb.v_out, p_edge, gb.d_src, gb.src_dx)
        dp = phi * (dt / gb.src_dx)
        if gb.axis == 0:
            a[gb.edge_cell, :] -= dp
        else:
            a[:, gb.edge_cell] -= dp
        removed_total += float(np.sum(phi * gb.t_widths)) * dt
        inj = phi * (dt / gb.tgt_dx)
        tgt = p.data[gb.target_mode]
        if gb.axis == 0:
            np.add.at(tgt, (gb.tgt_cells, np.arange(len(inj))), inj)
        else:
            np.add.at(tgt, (np.arange(len(inj)), gb.tgt_cells), inj)
        injected_total += float(np.sum(inj * gb.tgt_dx * gb.t_widths))
    # truncation faces: leakage
    for q in grid.modes:
        kinds = part.edge_kind[q]
        a = p.data[q]
        n1, n2 = a.shape
        for side, sel in (("x1_min", (0, slice(None))),
                          ("x1_max", (n1 - 1, slice(None))),
                          ("x2_min", (slice(None), 0)),
                          ("x2_max", (slice(None), n2 - 1))):
            if kinds[side] != TRUNCATION:
                continue
            axis = 0 if side.startswith("x1") else 1
            sgn = -1.0 if side.endswith("min") else 1.0
            if axis == 0:
                vface = grid.v1[q][0 if sgn < 0 else n1, :]
                d, dxe = grid.d1[q], grid.dx1[q][sel[0]]
                tw = grid.dx2[q]
            else:
                vface = grid.v2[q][:, 0 if sgn < 0 else n2]
                d, dxe = grid.d2[q], grid.dx2[q][sel[1]]
                tw = grid.dx1[q]
            p_edge = a[sel]
            phi = _edge_out_flux(TRUNCATION, sgn * vface, p_edge, d, dxe)
            if not np.any(phi):
                continue
            a[sel] = p_edge - phi * (dt / dxe)
            lost = float(np.sum(phi * tw)) * dt
            if part.family == "pev" and q == PEV_DONE and side == "x1_min":
                p.completed_mass += lost
            else:
                p.escaped_mass += lost
    # positivity repair
    for q in grid.modes:
        a = p.data[q]
        mn = a.min()
        if mn < 0.0:
            neg = a < 0.0
            p.clipped_mass += float(-np.sum(a[neg] * grid.vol[q][neg]))
            a[neg] = 0.0
    return removed_total - injected_total


def _read_edge_flux(flux: FluxField, gb: _GuardBinding):
    q = gb.mode
    if gb.axis == 0:
        n1 = flux.g1[q].shape[0] - 1
        row = flux.g1[q][n1 if gb.side > 0 else 0, :]
    else:
        n2 = flux.g2[q].shape[1] - 1
        row = flux.g2[q][:, n2 if gb.side > 0 else 0]
    return gb.side * row


# ---------------------------------------------------------------------------
# event-time remapping
# ---------------------------------------------------------------------------

def _overlap_matrix(old_edges, new_edges, lo=-np.inf, hi=np.inf):
    """Mass-fraction matrix M (n_new, n_old): the share of each old
    cell's mass that lands in each new cell, after clipping the old
    cells to [lo, hi].  Mass outside the new range is clamped into the
    end cells, so column sums equal the clipped fraction exactly."""
    n_old = len(old_edges) - 1
    n_new = len(new_edges) - 1
    m = np.zeros((n_new, n_old))
    for i in range(n_old):
        a = max(old_edges[i], lo)
        b = min(old_edges[i + 1], hi)
        if b <= a:
            continue
        w = old_edges[i + 1] - old_edges[i]
        head = min(b, new_edges[0])
        if head > a:
            m[0, i] += (head - a) / w
        tail = max(a, new_edges[-1])
        if b > tail:
            m[-1, i] += (b - tail) / w
        a2, b2 = max(a, new_edges[0]), min(b, new_edges[-1])
        if b2 > a2:
            k0 = min(max(int(np.searchsorted(new_edges, a2, "right")) - 1, 0),
                     n_new - 1)
            k1 = min(max(int(np.searchsorted(new_edges, b2, "left")) - 1, 0),
                     n_new - 1)
            for k in range(k0, k1 + 1):
                ov = min(b2, new_edges[k + 1]) - max(a2, new_edges[k])
                if ov > 0.0:
                    m[k, i] += ov / w
    return m


def _remap_event(p: DensityField, new_grid: Grid, model: LoadModel) -> DensityField:
    """Carry the density onto the re-built (shifted) partition.

    Thresholds moved, the state did not: each mode's density is
    re-binned onto its translated strip, and mass now beyond a mode's
    new switching surface is re-routed to the successor mode exactly as
    the forced transitions act on trajectories.  x2 geometry is fixed
    across events, only x1 is touched."""
    old_grid = p.grid
    fs = model.fast
    out = DensityField.zeros(new_grid, p.time)
    out.escaped_mass, out.completed_mass = p.escaped_mass, p.completed_mass
    out.clipped_mass = p.clipped_mass
    for q in old_grid.modes:
        if not np.array_equal(old_grid.x2_edges[q], new_grid.x2_edges[q]):
            raise ValueError("x2 geometry must not change at events")
        e_old, e_new = old_grid.x1_edges[q], new_grid.x1_edges[q]
        sign = fs.guard_sign[q]
        mass_old = p.data[q] * old_grid.dx1[q][:, None]
        if sign < 0.0:       # switching surface at the strip max
            keep_lo, keep_hi = -np.inf, e_new[-1]
            cross_lo, cross_hi = e_new[-1], np.inf
        elif sign > 0.0:     # at the strip min
            keep_lo, keep_hi = e_new[0], np.inf
            cross_lo, cross_hi = -np.inf, e_new[0]
        else:
            keep_lo = keep_hi = None
        if keep_lo is None:
            m_keep = _overlap_matrix(e_old, e_new)
            out.data[q] += (m_keep @ mass_old) / new_grid.dx1[q][:, None]
            continue
        m_keep = _overlap_matrix(e_old, e_new, keep_lo, keep_hi)
        out.data[q] += (m_keep @ mass_old) / new_grid.dx1[q][:, None]
        succ = int(fs.succ[q])
        e_succ = new_grid.x1_edges[succ]
        m_cross = _overlap_matrix(e_old, e_succ, cross_lo, cross_hi)
        out.data[succ] += (m_cross @ mass_old) / new_grid.dx1[succ][:, None]
    drift = total_mass(out) - total_mass(p)
    if abs(drift) > 1e-9:
        raise ConservationError(f"event remap lost {drift:.3e} of mass")
    return out


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

@dataclass
class SolveResult:
    """Density trajectory plus per-load power of one solver run.

    Iterating yields (snapshots, power) so the result unpacks as the
    documented pair.  For cluster-set input, power is the weighted
    per-load mixture and per_cluster holds the individual runs.
    """
    power: PowerSeries
    snapshots: list
    diagnostics: dict
    per_cluster: Optional[list] = None

    def __iter__(self):
        return iter((self.snapshots, self.power))


def _as_schedule(events) -> ControlSchedule:
    if isinstance(events, ControlSchedule):
        return events
    return ControlSchedule.from_events(list(events) if events else [])


def solve(model_or_clusters, init, horizon: float, events=None,
          grid_spec: GridSpec = None, snapshot_times: Sequence = (),
          output_dt: float = 5e-3, dt_max: Optional[float] = None,
          tol_mass: float = 1e-3,
          escape_tol: float = 1e-6, routing_tol: float = 1e-9,
          margin: float = 6.0, truncation_bounds=None,
          periodic: bool = False, jump_stage: Optional[bool] = None) -> SolveResult:
    """Advance the population density over [0, horizon].

    `init` is a DensityField on the matching initial grid or a callable
    grid -> DensityField.  `events` is a ControlSchedule or a list of
    (time, value) pairs; each event rebuilds the partition for the new
    signal and conservatively remaps the density.  Snapshot times are
    hit exactly.  The per-load power series is sampled on a uniform
    output grid.  A ClusterSet for a heterogeneous population solves
    every cluster and mixes the power by the cluster weights.
    """
    from .hetero import ClusterSet, cluster_models, mixture_power

    if isinstance(model_or_clusters, ClusterSet):
        cs = model_or_clusters
        runs = []
        for mdl in cluster_models(cs):
            runs.append(solve(mdl, init, horizon, events=events,
                              grid_spec=grid_spec,
                              snapshot_times=snapshot_times,
                              output_dt=output_dt, dt_max=dt_max,
                              tol_mass=tol_mass,
                              escape_tol=escape_tol, routing_tol=routing_tol,
                              margin=margin,
                              truncation_bounds=truncation_bounds,
                              jump_stage=jump_stage))
        mixed = mixture_power([r.power for r in runs], cs.weights)
        mixed.source = "pde"
        diag = {"clusters": len(runs),
                "escaped": max(r.diagnostics["escaped"] for r in runs),
                "max_mass_drift": max(r.diagnostics["max_mass_drift"]
                                      for r in runs)}
        return SolveResult(mixed, [], diag, per_cluster=runs)

    model = model_or_clusters
    schedule = _as_schedule(events)
    t0 = _time.perf_counter()

    shifts = [model.setpoint_shift(v) for v in schedule.values]
    seg_bounds = [0.0] + [t for t in schedule.times if 0.0 < t < horizon] \
        + [horizon]
    seg_shift = [model.setpoint_shift(schedule.value(0.5 * (a + b)))
                 for a, b in zip(seg_bounds[:-1], seg_bounds[1:])]

    bounds = truncation_bounds
    if model.family == "hvac" and bounds is None:
        al = model.alpha
        d = al.deadband
        lo = al.u_set + min(shifts) - d - margin
        hi = al.u_set + max(shifts) + d + margin
        x2_fixed = (lo, hi)

        def _bounds(du):
            u = al.u_set + du
            return ((u - d - margin, u + d + margin), x2_fixed)
    else:
        def _bounds(du):
            return bounds

    def _grid_for(v, du):
        part = build_partition(model, v=v, truncation_bounds=_bounds(du),
                               margin=margin, periodic=periodic)
        return make_grid(model, part, grid_spec)

    grid = _grid_for(schedule.value(0.5 * (seg_bounds[0] + seg_bounds[1])),
                     seg_shift[0])
    field = init(grid) if callable(init) else init
    if not isinstance(field, DensityField):
        raise TypeError("init must be a DensityField or a grid -> field callable")
    if not field.same_grid(DensityField.zeros(grid)):
        raise ValueError("initial density lives on a different grid")
    field = field.copy()
    field.grid = grid
    m0 = field.accounted_mass()
    if abs(m0 - 1.0) > 1e-6:
        raise ValueError(f"initial density must have unit mass, got {m0}")

    jump_on = jump_stage if jump_stage is not None \
        else any(grid.lam[q] > 0.0 for q in grid.modes)
    snaps_left = sorted(float(t) for t in snapshot_times)
    snapshots = []
    t_hist, y_hist, m_hist = [], [], []
    max_drift = 0.0
    step_count = 0
    n_steps_total = 0

    def record(t):
        t_hist.append(t)
        y_hist.append(aggregated_power(field, model))
        m_hist.append(field.accounted_mass())

    def maybe_snapshot(t):
        nonlocal snaps_left
        while snaps_left and abs(snaps_left[0] - t) <= 1e-12:
            snap = field.copy()
            snap.time = t
            snapshots.append(snap)
            snaps_left.pop(0)

    record(0.0)
    maybe_snapshot(0.0)

    t = 0.0
    last = len(seg_shift) - 1
    for s, (seg_a, seg_b) in enumerate(zip(seg_bounds[:-1], seg_bounds[1:])):
        if s > 0:
            if model.family == "hvac" \
                    and abs(seg_shift[s] - seg_shift[s - 1]) > 0.0:
                grid = _grid_for(schedule.value(0.5 * (seg_a + seg_b)),
                                 seg_shift[s])
                field = _remap_event(field, grid, model)
                record(t)
                t_hist.pop(-2); y_hist.pop(-2); m_hist.pop(-2)
            maybe_snapshot(t)  # event-time snapshots see the switched density
        dt_stable = step_dt_max(grid)
        if dt_max is not None:
            dt_stable = min(dt_stable, dt_max)
        grid.dt = dt_stable
        targets = [ts for ts in snaps_left if seg_a < ts < seg_b] + [seg_b]
        for tgt in targets:
            while t < tgt - 1e-12:
                dt = min(dt_stable, tgt - t)
                order = (0, 1) if step_count % 2 == 0 else (1, 0)
                _sweeps_inplace(field.data, grid, dt, order)
                if jump_on:
                    _jump_inplace(field, grid, dt, routing_tol)
                bal = _boundary_inplace(field, grid, dt)
                if abs(bal) > 1e-10:
                    raise ConservationError(
                        f"interface flux imbalance {bal:.3e} at t={t}")
                t += dt
                step_count += 1
                n_steps_total += 1
                field.time = t
                record(t)
                drift = abs(m_hist[-1] - 1.0)
                max_drift = max(max_drift, drift)
                if drift > tol_mass:
                    raise ConservationError(
                        f"mass drifted to {m_hist[-1]:.6f} at t={t:.4f} "
                        f"(escaped={field.escaped_mass:.2e}, "
                        f"clipped={field.clipped_mass:.2e})")
            t = tgt
            if tgt < seg_b or s == last:
                maybe_snapshot(t)

    if field.escaped_mass > escape_tol:
        raise ConservationError(
            f"escaped mass {field.escaped_mass:.3e} exceeds {escape_tol}")

    times = np.arange(0.0, horizon + 0.5 * output_dt, output_dt)
    values = np.interp(times, np.asarray(t_hist), np.asarray(y_hist))
    power = PowerSeries(times, values, source="pde",
                        meta={"n_steps": n_steps_total})
    diag = {
        "n_steps": n_steps_total,
        "runtime_s": _time.perf_counter() - t0,
        "escaped": field.escaped_mass,
        "completed": field.completed_mass,
        "clipped": field.clipped_mass,
        "max_mass_drift": max_drift,
        "mass_times": np.asarray(t_hist),
        "mass_values": np.asarray(m_hist),
        "final_field": field,
    }
    return SolveResult(power, snapshots, diag)

"""
Monte Carlo simulation of hybrid load populations.

Trajectories follow the Euler-Maruyama scheme on a fixed step dt.
Deterministic switches are located inside a step by linear interpolation
of the guard value; random switches are sampled by thinning with one
Bernoulli draw per step (success probability 1 - exp(-lambda dt)) plus a
uniform position within the step.  When both fire in the same step the
earlier one wins.  After any switch the step is completed from the event
point with drift only; the skipped noise is O(dt^(3/2)) locally and keeps
the random streams of the reference and compiled paths aligned.

Reproducibility: every load owns an RNG stream spawned from the run seed
via numpy's SeedSequence, so results do not depend on execution order and
a population of one load reproduces `simulate_trajectory` exactly.

All times are hours, power in kW.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .model import HybridState, LoadModel


class ZenoError(RuntimeError):
    """Raised when switches accumulate faster than the zeno guard allows."""


class BlowupError(RuntimeError):
    """Raised when an integrated state turns non-finite."""


# ---------------------------------------------------------------------------
# small value types
# ---------------------------------------------------------------------------

@dataclass
class JumpEvent:
    time: float
    kind: str          # 'guard' | 'hazard' | 'forced'
    from_mode: int
    to_mode: int


_KIND_NAMES = {kernels.JUMP_GUARD: "guard",
               kernels.JUMP_HAZARD: "hazard",
               kernels.JUMP_FORCED: "forced"}


@dataclass
class Trajectory:
    """Sampled path of one load: arrays on the sample grid plus the exact
    jump log (event times are sub-step accurate)."""
    times: np.ndarray
    modes: np.ndarray
    states: np.ndarray          # (n_samples, n); filled on the sample grid
    jumps: list

    def mode_occupancy(self, mode: int, t0: float, t1: float) -> float:
        """Fraction of [t0, t1] spent in `mode`, integrated from the jump
        log (not the sample grid), so the estimate is event-accurate."""
        if t1 <= t0:
            raise ValueError("empty window")
        edges = [t0]
        modes = []
        cur = int(self.modes[0])
        for j in self.jumps:
            if j.time <= t0:
                cur = j.to_mode
                continue
            if j.time >= t1:
                break
            edges.append(j.time)
            modes.append(cur)
            cur = j.to_mode
        edges.append(t1)
        modes.append(cur)
        total = 0.0
        for k, m in enumerate(modes):
            if m == mode:
                total += edges[k + 1] - edges[k]
        return total / (t1 - t0)


@dataclass
class PowerSeries:
    times: np.ndarray
    values: np.ndarray
    source: str = ""
    meta: dict = field(default_factory=dict)

    def window(self, t0: float, t1: float) -> "PowerSeries":
        sel = (self.times >= t0 - 1e-12) & (self.times <= t1 + 1e-12)
        return PowerSeries(self.times[sel], self.values[sel], self.source, self.meta)


@dataclass
class PopulationState:
    """Synchronous snapshot of every load."""
    time: float
    modes: np.ndarray           # (N,)
    states: np.ndarray          # (N, n)


@dataclass
class PopulationResult:
    power: PowerSeries
    snapshots: list
    n_jumps: int


class ControlSchedule:
    """Piecewise-constant control signal v(t) shared by the population.

    `times` must start at 0 and be strictly increasing; v(t) = values[k]
    for t in [times[k], times[k+1]).
    """

    def __init__(self, times=(0.0,), values=(0.0,)):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be matching 1-D sequences")
        if self.times[0] != 0.0:
            raise ValueError("schedule must start at t=0")
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("schedule times must be strictly increasing")

    def value(self, t: float) -> float:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(k, 0)])

    def event_times(self):
        return self.times[1:]

    @staticmethod
    def from_events(events):
        """events: iterable of (time, value) with v=0 before the first."""
        ts = [0.0]
        vs = [0.0]
        for t, v in events:
            ts.append(float(t))
            vs.append(float(v))
        return ControlSchedule(ts, vs)


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def step_euler_maruyama(state: HybridState, model: LoadModel, theta, dt: float,
                        noise: np.ndarray) -> np.ndarray:
    """One explicit step of the continuous dynamics; mode is untouched."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    th = model.theta if theta is None else theta
    f = model.drift(state.mode, state.x, th)
    s = model.diffusion(state.mode, state.x, th)
    return state.x + dt * f + math.sqrt(dt) * (s @ noise)


def locate_crossing(prev: HybridState, candidate_x: np.ndarray,
                    model: LoadModel, v: float):
    """Linear-interpolation event location within one step.

    Returns (rho, new_mode) with rho in [0, 1] when the guard of the
    current mode is crossed by the candidate state, else None.
    """
    g0 = model.guard(prev.mode, prev.x, v, model.alpha)
    g1 = model.guard(prev.mode, candidate_x, v, model.alpha)
    if g1 > 0.0:
        return None
    rho = 0.0 if g0 <= 0.0 else g0 / (g0 - g1)
    new_mode = model.transition(prev.mode, candidate_x, v, model.alpha)
    return rho, new_mode


def sample_random_jump(state: HybridState, model: LoadModel, dt: float,
                       uniform: float) -> bool:
    """Thinning: does a hazard-driven jump fire during this step?"""
    from .model import evaluate_jump_intensity
    lam = evaluate_jump_intensity(model, state)
    if lam * dt > 0.5:
        raise ValueError(f"lambda*dt = {lam * dt:.3g} too coarse; shrink dt")
    return uniform < -math.expm1(-lam * dt)


# ---------------------------------------------------------------------------
# single-load driver
# ---------------------------------------------------------------------------

def _time_grid(horizon, dt, sample_dt):
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a whole number of steps")
    if sample_dt is None:
        stride = 1
    else:
        stride = int(round(sample_dt / dt))
        if stride < 1 or abs(stride * dt - sample_dt) > 1e-9:
            raise ValueError("sample_dt must be a whole multiple of dt")
    return n_steps, stride


def _segment_bounds(schedule: ControlSchedule, n_steps, dt):
    """Split [0, horizon] at control events; events must sit on the grid."""
    bounds = [0]
    vals = [float(schedule.values[0])]
    for t, v in zip(schedule.times[1:], schedule.values[1:]):
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9:
            raise ValueError(f"control event at t={t} is off the step grid")
        if 0 < k < n_steps:
            bounds.append(k)
            vals.append(float(v))
    bounds.append(n_steps)
    return bounds, vals


def _need_uniforms(model: LoadModel) -> bool:
    if model.fast is not None:
        return bool(model.fast.lam.max() > 0.0)
    return True


def _forced_transitions(model, q, x, v, t, jumps, max_chain=8):
    """Apply guard-forced switches after a control change (or at t=0)."""
    chain = 0
    while model.guard(q, x, v, model.alpha) <= 0.0:
        qn = model.transition(q, x, v, model.alpha)
        if qn == q:
            break
        jumps.append(JumpEvent(t, "forced", q, qn))
        q = qn
        chain += 1
        if chain > max_chain:
            raise ZenoError(f"forced transition chain at t={t}")
    return q


def _python_segment(model, x, q, k0, k1, dt, v, normals, uniforms, uc,
                    eps_zeno, last_jump_t, same_cnt, stride, modes_out,
                    snap_steps, snap_x, sp, jumps):
    """Reference step loop; mirrors kernels.affine_threshold_segment."""
    theta, alpha = model.theta, model.alpha
    for k in range(k0, k1):
        lam = model.hazard(q, x, theta, alpha)
        if lam < 0.0:
            raise ValueError("negative hazard rate")
        if lam * dt > 0.5:
            raise ValueError("lambda*dt > 0.5; shrink dt")
        jump_pending = False
        rho_jump = 2.0
        if lam > 0.0:
            u = uniforms[uc]
            uc += 1
            if u < -math.expm1(-lam * dt):
                jump_pending = True
                rho_jump = uniforms[uc]
                uc += 1

        f = model.drift(q, x, theta)
        s = model.diffusion(q, x, theta)
        xc = x + dt * f + math.sqrt(dt) * (s @ normals[k])
        if not np.all(np.isfinite(xc)):
            raise BlowupError(f"non-finite state at t={k * dt:.6g}")

        rho_cross = 2.0
        g0 = model.guard(q, x, v, alpha)
        g1 = model.guard(q, xc, v, alpha)
        if g1 <= 0.0:
            rho_cross = 0.0 if g0 <= 0.0 else g0 / (g0 - g1)

        if rho_cross <= 1.0 or jump_pending:
            if rho_cross <= rho_jump:
                rho = rho_cross
                qn = model.transition(q, xc, v, alpha)
                kind = "guard"
            else:
                rho = rho_jump
                qn = model.jump_target(q, x, theta, alpha)
                kind = "hazard"
            tj = (k + rho) * dt
            if tj > last_jump_t and tj - last_jump_t < eps_zeno:
                raise ZenoError(f"jumps {eps_zeno} apart at t={tj}")
            if tj == last_jump_t:
                same_cnt += 1
                if same_cnt > 8:
                    raise ZenoError(f"transition pile-up at t={tj}")
            else:
                same_cnt = 1
            if qn != q:
                jumps.append(JumpEvent(tj, kind, q, qn))
                last_jump_t = tj
                xe = x + rho * (xc - x)
                x = xe + (1.0 - rho) * dt * model.drift(qn, xe, theta)
                q = qn
                chain = 0
                while model.guard(q, x, v, alpha) <= 0.0:
                    tj = (k + 1) * dt
                    qn = model.transition(q, x, v, alpha)
                    if qn == q:
                        break
                    same_cnt = same_cnt + 1 if tj == last_jump_t else 1
                    jumps.append(JumpEvent(tj, "guard", q, qn))
                    last_jump_t = tj
                    q = qn
                    chain += 1
                    if chain > 8 or same_cnt > 8:
                        raise ZenoError(f"transition pile-up at t={tj}")
            else:
                x = xc
        else:
            x = xc

        if (k + 1) % stride == 0:
            modes_out[(k + 1) // stride] = q
        if sp < len(snap_steps) and k + 1 == snap_steps[sp]:
            snap_x[sp] = x
            sp += 1

    return x, q, uc, last_jump_t, same_cnt, sp


def _simulate_one(model: LoadModel, init: HybridState, schedule, n_steps,
                  dt, stride, rng, snap_steps, eps_zeno, force_python,
                  modes_out, snap_x):
    """Run one load across all control segments; fills modes_out/snap_x.

    Returns (jump log, final x, final mode)."""
    m = model.noise_dim
    normals = rng.standard_normal((n_steps, m)) if m > 0 else np.zeros((n_steps, 0))
    if _need_uniforms(model):
        uniforms = rng.random(2 * n_steps + 16)
    else:
        uniforms = np.zeros(0)

    bounds, vals = _segment_bounds(schedule, n_steps, dt)
    x = np.array(init.x, dtype=float)
    q = int(init.mode)
    jumps: list = []
    q = _forced_transitions(model, q, x, vals[0], 0.0, jumps)
    modes_out[0] = q

    uc = 0
    last_jump_t = -1.0
    same_cnt = 0
    sp = int(np.searchsorted(snap_steps, 1))  # snapshots at step 0 are caller's job
    use_fast = model.fast is not None and not force_python

    for seg in range(len(vals)):
        k0, k1, v = bounds[seg], bounds[seg + 1], vals[seg]
        if seg > 0:
            q = _forced_transitions(model, q, x, v, k0 * dt, jumps)
            if k0 % stride == 0:
                modes_out[k0 // stride] = q
        if use_fast:
            fs = model.fast
            thr = fs.thresholds(model.setpoint_shift(v))
            cap = max(16, 2 * (k1 - k0) + 16)
            jt = np.empty(cap)
            jk = np.empty(cap, dtype=np.int8)
            jf = np.empty(cap, dtype=np.int8)
            jto = np.empty(cap, dtype=np.int8)
            q, uc, last_jump_t, same_cnt, sp, jn, status = \
                kernels.affine_threshold_segment(
                    x, q, k0, k1, dt, fs.a_mats, fs.b_vecs, fs.sigma,
                    fs.guard_axis, fs.guard_sign, thr, fs.succ, fs.lam,
                    normals, uniforms, uc, eps_zeno, last_jump_t, same_cnt,
                    stride, modes_out, snap_steps, snap_x, sp,
                    jt, jk, jf, jto, 0)
            for i in range(jn):
                jumps.append(JumpEvent(jt[i], _KIND_NAMES[jk[i]],
                                       int(jf[i]), int(jto[i])))
            if status == 1:
                raise ZenoError(f"jumps closer than {eps_zeno} near t={last_jump_t}")
            if status in (2, 3):
                raise ZenoError(f"transition pile-up near t={last_jump_t}")
            if status == 4:
                raise BlowupError(f"non-finite state at t={last_jump_t:.6g}")
        else:
            x, q, uc, last_jump_t, same_cnt, sp = _python_segment(
                model, x, q, k0, k1, dt, v, normals, uniforms, uc,
                eps_zeno, last_jump_t, same_cnt, stride, modes_out,
                snap_steps, snap_x, sp, jumps)

    return jumps, x, q


def simulate_trajectory(model: LoadModel, init: HybridState,
                        schedule: Optional[ControlSchedule] = None,
                        horizon: float = 1.0, dt: float = 1e-3,
                        seed: Optional[int] = None, rng=None,
                        sample_dt: Optional[float] = None,
                        eps_zeno: float = 1e-9,
                        force_python: bool = False) -> Trajectory:
    """Simulate one load and return its sampled path plus jump log.

    The continuous state is recorded on every sample instant; for long
    population runs use `simulate_population`, which records modes only.
    """
    if schedule is None:
        schedule = ControlSchedule()
    n_steps, stride = _time_grid(horizon, dt, sample_dt)
    if rng is None:
        rng = np.random.default_rng(seed)
    n_out = n_steps // stride + 1
    modes_out = np.zeros(n_out, dtype=np.int8)
    # record the state at every sample instant via the snapshot mechanism
    snap_steps = np.arange(1, n_out, dtype=np.int64) * stride
    snap_x = np.empty((n_out - 1, model.dim))
    jumps, x_end, q_end = _simulate_one(
        model, init, schedule, n_steps, dt, stride, rng, snap_steps,
        eps_zeno, force_python, modes_out, snap_x)
    states = np.empty((n_out, model.dim))
    states[0] = init.x
    states[1:] = snap_x
    times = np.arange(n_out) * (stride * dt)
    return Trajectory(times, modes_out, states, jumps)


# ---------------------------------------------------------------------------
# population driver
# ---------------------------------------------------------------------------

def simulate_population(models: Sequence[LoadModel],
                        inits: Sequence[HybridState],
                        schedule: Optional[ControlSchedule] = None,
                        horizon: float = 8.0, dt: float = 1e-3,
                        seed: int = 0, sample_dt: float = 5e-3,
                        snapshot_times: Sequence[float] = (),
                        eps_zeno: float = 1e-9,
                        force_python: bool = False) -> PopulationResult:
    """Simulate N loads on independent RNG streams and aggregate power.

    Every load gets a child stream of SeedSequence(seed), so the result
    is independent of execution order and identical across runs with the
    same seed.  Aggregate power is the sum of per-mode outputs on the
    shared sample grid.
    """
    if len(models) != len(inits):
        raise ValueError("one initial state per load required")
    if schedule is None:
        schedule = ControlSchedule()
    n_steps, stride = _time_grid(horizon, dt, sample_dt)
    n_out = n_steps // stride + 1
    times = np.arange(n_out) * (stride * dt)

    snap_steps = []
    for t in snapshot_times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9:
            raise ValueError(f"snapshot time {t} is off the step grid")
        snap_steps.append(k)
    snap_steps = np.array(sorted(snap_steps), dtype=np.int64)

    n = len(models)
    dim = models[0].dim
    children = np.random.SeedSequence(seed).spawn(n)
    y = np.zeros(n_out)
    snap_modes = np.zeros((len(snap_steps), n), dtype=np.int8)
    snap_states = np.zeros((len(snap_steps), n, dim))
    modes_out = np.zeros(n_out, dtype=np.int8)
    snap_x = np.empty((len(snap_steps), dim))
    total_jumps = 0

    for i, (mdl, init) in enumerate(zip(models, inits)):
        rng = np.random.Generator(np.random.PCG64(children[i]))
        try:
            jumps, x_end, q_end = _simulate_one(
                mdl, init, schedule, n_steps, dt, stride, rng, snap_steps,
                eps_zeno, force_python, modes_out, snap_x)
        except (ZenoError, BlowupError) as exc:
            raise type(exc)(f"load {i}: {exc}") from None
        power_by_mode = np.array([mdl.output(q, mdl.theta) for q in mdl.modes])
        y += power_by_mode[modes_out]
        total_jumps += len(jumps)
        # reconstruct snapshot modes from the jump log
        for s, k in enumerate(snap_steps):
            t = k * dt
            qs = int(modes_out[0])
            for j in jumps:
                if j.time <= t:
                    qs = j.to_mode
                else:
                    break
            if k == 0:
                snap_x_s = np.array(init.x, dtype=float)
            else:
                snap_x_s = snap_x[s]
            snap_modes[s, i] = qs
            snap_states[s, i] = snap_x_s

    snapshots = [PopulationState(k * dt, snap_modes[s].copy(), snap_states[s].copy())
                 for s, k in enumerate(snap_steps)]
    power = PowerSeries(times, y, source="mc",
                        meta={"n_loads": n, "dt": dt, "seed": seed})
    return PopulationResult(power, snapshots, total_jumps)


def empirical_density(snapshot: PopulationState, grid) -> "object":
    """Bin a population snapshot onto a PDE grid.

    Returns a DensityField normalized so that the total cell mass is the
    in-grid fraction of loads; loads outside the grid are reported in the
    field's escaped-mass counter.
    """
    from .pde import DensityField

    field = DensityField.zeros(grid, time=snapshot.time)
    n = snapshot.modes.shape[0]
    w = 1.0 / n
    placed = 0
    for i in range(n):
        ok = field.deposit(int(snapshot.modes[i]), snapshot.states[i], w)
        placed += ok
    field.escaped_mass = (n - placed) * w
    return field

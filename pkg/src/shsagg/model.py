"""
Hybrid models of responsive electric loads.

A load is a stochastic hybrid system: a discrete mode q in a finite set Q, a
continuous state x in R^n evolving by a mode-dependent SDE

    dx = f(q, x; theta) dt + sigma(q, x) dW,

and two switching mechanisms.  Deterministic switches fire when the state
reaches the outflow part of the mode-domain boundary (the guard surface);
random switches fire with hazard rate lambda(q, x).  The electrical output
y = h(q) depends on the mode only.

Two load families are provided.

1. HVAC with the second-order equivalent thermal parameter (ETP) house model.
   State x = [air temperature, inner-mass temperature] in degF, time in hours:

       C_a dT_a/dt = U_a (T_out - T_a) + H_m (T_m - T_a) + Q_a - q * Q_h
       C_m dT_m/dt = H_m (T_a - T_m)

   written below as dx/dt = A x + b_q.  Modes: 0 = compressor OFF, 1 = ON
   (cooling, so Q_h is the heat extraction rate while ON).  The thermostat
   with setpoint u_set and half-deadband delta keeps the air temperature in
   [u_set - delta, u_set + delta]: OFF flips to ON at the hot edge, ON flips
   to OFF at the cold edge.  Optional diffusion acts on the air coordinate
   only, sigma = (sigma0, 0)^T.

   An external control signal v(t), shared by the whole population, shifts
   the effective setpoint.  The price-response map saturates:

       du = a * v          for |v| <= b,
       du = a * b * sign(v) otherwise,

   so the plain setback case is a = 1, b = inf (du = v).

2. PEV charging.  State x = [remaining charging time, slack until the
   latest admissible start] in hours.  Modes: 0 = waiting (slack runs
   down, f = [0, -1]), 1 = charging at fixed power (f = [-1, 0]),
   2 = complete (drift continues at [-1, 0], output zero).  Deterministic
   transitions 0 -> 1 when the slack hits zero and 1 -> 2 when the
   remaining time hits zero; an optional constant hazard in mode 0 models
   early, price-triggered starts.

Load parameters theta (matrices, ratings) are separated from control
parameters alpha (setpoint, deadband, price coefficients); heterogeneous
populations vary both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

# --- mode labels ---

OFF, ON = 0, 1
PEV_WAITING, PEV_CHARGING, PEV_DONE = 0, 1, 2


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------

@dataclass
class HouseParameters:
    """Physical house constants for the second-order ETP model.

    Units: thermal masses in Btu/degF, conductances in Btu/(h degF), heat
    rates in Btu/h, temperatures in degF.  The nominal values describe a
    small, lightly built house with a 2-ton cooling unit in a warm
    afternoon: fastest eigenvalue time constant ~0.14 h, mass-node
    relaxation c_mass/hm ~0.8 h, ~25% duty cycle at a 74 degF setpoint,
    and a ~10% steady power reduction per +1 degF of setpoint.
    """
    c_air: float = 500.0       # air + fast-coupled furnishings
    c_mass: float = 2000.0     # building envelope / interior mass
    ua: float = 600.0          # envelope conductance to ambient
    hm: float = 2500.0         # air <-> mass conductance
    q_gain: float = 1200.0     # solar + internal gains to the air node
    q_hvac: float = 24000.0    # heat extraction rate while ON
    t_out: float = 82.0        # ambient temperature
    power_kw: float = 2.5      # electrical draw while ON

    def validate(self):
        for name in ("c_air", "c_mass", "ua", "hm", "q_hvac"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"house parameter {name} must be positive")


def etp_matrices(house: HouseParameters):
    """Continuous-time ETP system matrices (per hour).

    Returns (A, b_off, b_on) with dx/dt = A x + b_q.
    """
    ca, cm = house.c_air, house.c_mass
    a = np.array([
        [-(house.ua + house.hm) / ca, house.hm / ca],
        [house.hm / cm, -house.hm / cm],
    ])
    b_off = np.array([(house.ua * house.t_out + house.q_gain) / ca, 0.0])
    b_on = b_off + np.array([-house.q_hvac / ca, 0.0])
    return a, b_off, b_on


@dataclass
class EtpParameters:
    """Load parameters theta of one HVAC unit: dynamics and rating."""
    a_mat: np.ndarray          # (2, 2)
    b_off: np.ndarray          # (2,)
    b_on: np.ndarray           # (2,)
    power_kw: float = 2.5
    sigma0: float = 0.0        # diffusion on the air coordinate, degF/sqrt(h)

    def copy(self):
        return EtpParameters(self.a_mat.copy(), self.b_off.copy(),
                             self.b_on.copy(), self.power_kw, self.sigma0)


@dataclass
class HvacControl:
    """Control parameters alpha of one HVAC unit."""
    u_set: float = 74.0
    deadband: float = 1.0      # half-width delta of the thermostat band
    price_gain: float = 1.0    # a in the saturating price map
    price_cap: float = math.inf  # b; du = a * clip(v, -b, b)
    hazard_off: float = 0.0    # random OFF->ON rate, 1/h
    hazard_on: float = 0.0     # random ON->OFF rate, 1/h

    def setpoint_shift(self, v: float) -> float:
        return self.price_gain * min(max(v, -self.price_cap), self.price_cap)


@dataclass
class PevParameters:
    """PEV charging job: rating plus hazard for early starts."""
    charge_rate_kw: float = 6.6
    deadline_slack: float = 1.0   # nominal initial slack, hours
    hazard_wait: float = 0.0      # random early-start rate in mode 0, 1/h


# ---------------------------------------------------------------------------
# hybrid state and model
# ---------------------------------------------------------------------------

@dataclass
class HybridState:
    mode: int
    x: np.ndarray


@dataclass
class AffineThresholdSystem:
    """Compiled description of a load whose modes all have affine drift,
    constant diffusion and a single-axis threshold guard.

    Both shipped families fit this shape, which is what the numba fast
    paths and the PDE grid builders consume.  Guard convention:
    g_q(x) = guard_sign[q] * (x[guard_axis[q]] - thr_q) with
    thr_q = threshold_base[q] + threshold_gain[q] * du(v); positive inside.
    """
    a_mats: np.ndarray        # (Q, n, n)
    b_vecs: np.ndarray        # (Q, n)
    sigma: np.ndarray         # (Q, n, m), constant per mode
    guard_axis: np.ndarray    # (Q,) int
    guard_sign: np.ndarray    # (Q,) +-1.0; 0 disables the guard
    threshold_base: np.ndarray   # (Q,)
    threshold_gain: np.ndarray   # (Q,)
    succ: np.ndarray          # (Q,) int, mode after a switch
    lam: np.ndarray           # (Q,) hazard rate
    power: np.ndarray         # (Q,) output kW per mode

    def thresholds(self, du: float) -> np.ndarray:
        return self.threshold_base + self.threshold_gain * du

    @property
    def n_modes(self):
        return self.a_mats.shape[0]

    @property
    def dim(self):
        return self.a_mats.shape[1]

    @property
    def noise_dim(self):
        return self.sigma.shape[2]


@dataclass
class LoadModel:
    """One responsive load as a stochastic hybrid system.

    The callables receive theta/alpha explicitly so a family definition can
    be shared; `theta` and `alpha` hold this instance's bindings.  `fast`
    is the affine-threshold compilation used by the vectorized simulators
    and the PDE geometry builders (None for hand-written custom models).
    """
    family: str
    modes: tuple
    dim: int
    noise_dim: int
    drift: Callable      # (q, x, theta) -> (n,)
    diffusion: Callable  # (q, x, theta) -> (n, m)
    guard: Callable      # (q, x, v, alpha) -> signed scalar, positive inside
    transition: Callable  # (q, x, v, alpha) -> next mode
    hazard: Callable     # (q, x, theta, alpha) -> rate >= 0
    jump_target: Callable  # (q, x, theta, alpha) -> mode after a random jump
    output: Callable     # (q, theta) -> kW
    theta: object
    alpha: object
    fast: Optional[AffineThresholdSystem] = None

    def setpoint_shift(self, v: float) -> float:
        if hasattr(self.alpha, "setpoint_shift"):
            return self.alpha.setpoint_shift(v)
        return 0.0


def gram(sigma_mat: np.ndarray) -> np.ndarray:
    """Diffusion Gram matrix Sigma = sigma sigma^T."""
    return sigma_mat @ sigma_mat.T


# ---------------------------------------------------------------------------
# accessors
# ---------------------------------------------------------------------------

def evaluate_drift(model: LoadModel, state: HybridState, theta=None) -> np.ndarray:
    if state.mode not in model.modes:
        raise ValueError(f"mode {state.mode} not in model mode set {model.modes}")
    return model.drift(state.mode, state.x, model.theta if theta is None else theta)


def evaluate_jump_intensity(model: LoadModel, state: HybridState, theta=None) -> float:
    if state.mode not in model.modes:
        raise ValueError(f"mode {state.mode} not in model mode set {model.modes}")
    lam = model.hazard(state.mode, state.x,
                       model.theta if theta is None else theta, model.alpha)
    if lam < 0.0:
        raise ValueError("negative hazard rate")
    return lam


# ---------------------------------------------------------------------------
# HVAC factory
# ---------------------------------------------------------------------------

def _hvac_drift(q, x, theta):
    return theta.a_mat @ x + (theta.b_on if q == ON else theta.b_off)


def _hvac_diffusion(q, x, theta):
    return np.array([[theta.sigma0], [0.0]])


def _hvac_guard(q, x, v, alpha):
    u_eff = alpha.u_set + alpha.setpoint_shift(v)
    if q == ON:
        return x[0] - (u_eff - alpha.deadband)
    return (u_eff + alpha.deadband) - x[0]


def _hvac_transition(q, x, v, alpha):
    return 1 - q if _hvac_guard(q, x, v, alpha) <= 0.0 else q


def _hvac_hazard(q, x, theta, alpha):
    return alpha.hazard_on if q == ON else alpha.hazard_off


def _hvac_jump_target(q, x, theta, alpha):
    return 1 - q


def _hvac_output(q, theta):
    return theta.power_kw if q == ON else 0.0


def _hvac_fast(theta: EtpParameters, alpha: HvacControl) -> AffineThresholdSystem:
    a = np.stack([theta.a_mat, theta.a_mat])
    b = np.stack([theta.b_off, theta.b_on])
    sig = np.zeros((2, 2, 1))
    sig[:, 0, 0] = theta.sigma0
    return AffineThresholdSystem(
        a_mats=a, b_vecs=b, sigma=sig,
        guard_axis=np.array([0, 0]),
        guard_sign=np.array([-1.0, 1.0]),
        threshold_base=np.array([alpha.u_set + alpha.deadband,
                                 alpha.u_set - alpha.deadband]),
        threshold_gain=np.array([1.0, 1.0]),
        succ=np.array([ON, OFF]),
        lam=np.array([alpha.hazard_off, alpha.hazard_on]),
        power=np.array([0.0, theta.power_kw]),
    )


def make_hvac_etp(theta: EtpParameters, control: HvacControl = None) -> LoadModel:
    """Build a thermostat-controlled HVAC load.

    Rejects a non-dissipative A (any eigenvalue with nonnegative real
    part) and a non-positive deadband: both would break the limit-cycle
    structure the aggregation relies on.
    """
    if control is None:
        control = HvacControl()
    if control.deadband <= 0.0:
        raise ValueError("deadband must be positive")
    if theta.sigma0 < 0.0:
        raise ValueError("sigma0 must be nonnegative")
    if control.hazard_off < 0.0 or control.hazard_on < 0.0:
        raise ValueError("hazard rates must be nonnegative")
    eigs = np.linalg.eigvals(theta.a_mat)
    if np.any(eigs.real >= 0.0):
        raise ValueError(f"ETP matrix must be Hurwitz, eigenvalues {eigs}")
    return LoadModel(
        family="hvac", modes=(OFF, ON), dim=2, noise_dim=1,
        drift=_hvac_drift, diffusion=_hvac_diffusion,
        guard=_hvac_guard, transition=_hvac_transition,
        hazard=_hvac_hazard, jump_target=_hvac_jump_target,
        output=_hvac_output,
        theta=theta, alpha=control,
        fast=_hvac_fast(theta, control),
    )


def make_price_responsive(base: LoadModel, a: float, b: float) -> LoadModel:
    """Wrap an HVAC load with the saturating price-to-setpoint map."""
    if base.family != "hvac":
        raise ValueError("price response is defined for the hvac family")
    if b <= 0.0:
        raise ValueError("saturation bound b must be positive")
    control = replace(base.alpha, price_gain=a, price_cap=b)
    return make_hvac_etp(base.theta, control)


def hvac_from_house(house: HouseParameters, control: HvacControl = None,
                    sigma0: float = 0.0) -> LoadModel:
    """Convenience: physical house constants -> HVAC load."""
    house.validate()
    a, b_off, b_on = etp_matrices(house)
    theta = EtpParameters(a, b_off, b_on, power_kw=house.power_kw, sigma0=sigma0)
    return make_hvac_etp(theta, control)


# --- clustering feature map -------------------------------------------------
#
# Heterogeneous populations are reduced by clustering over the derived
# dynamics coefficients, not the raw house constants: two houses with the
# same (A, b_q, u_set) are the same load even if built differently.

ETP_FEATURE_NAMES = ("a11", "a12", "a21", "a22", "b_off1", "b_on1", "u_set")


def etp_feature_vector(theta: EtpParameters, alpha: HvacControl) -> np.ndarray:
    a = theta.a_mat
    return np.array([a[0, 0], a[0, 1], a[1, 0], a[1, 1],
                     theta.b_off[0], theta.b_on[0], alpha.u_set])


def etp_from_features(vec, theta_like: EtpParameters, alpha_like: HvacControl):
    """Rebuild (theta, alpha) from a feature vector, e.g. a cluster center.

    Rating, noise, deadband and price coefficients are taken from the
    templates; the second components of b_q are structurally zero.
    """
    a = np.array([[vec[0], vec[1]], [vec[2], vec[3]]])
    theta = EtpParameters(a, np.array([vec[4], 0.0]), np.array([vec[5], 0.0]),
                          power_kw=theta_like.power_kw, sigma0=theta_like.sigma0)
    alpha = replace(alpha_like, u_set=float(vec[6]))
    return theta, alpha


# ---------------------------------------------------------------------------
# PEV factory
# ---------------------------------------------------------------------------

_PEV_DRIFTS = np.array([[0.0, -1.0], [-1.0, 0.0], [-1.0, 0.0]])


def _pev_drift(q, x, theta):
    return _PEV_DRIFTS[q].copy()


def _pev_diffusion(q, x, theta):
    return np.zeros((2, 0))


def _pev_guard(q, x, v, alpha):
    if q == PEV_WAITING:
        return x[1]
    if q == PEV_CHARGING:
        return x[0]
    return 1.0


def _pev_transition(q, x, v, alpha):
    if q != PEV_DONE and _pev_guard(q, x, v, alpha) <= 0.0:
        return q + 1
    return q


def _pev_hazard(q, x, theta, alpha):
    return theta.hazard_wait if q == PEV_WAITING else 0.0


def _pev_jump_target(q, x, theta, alpha):
    return min(q + 1, PEV_DONE)


def _pev_output(q, theta):
    return theta.charge_rate_kw if q == PEV_CHARGING else 0.0


def make_pev(charge_rate: float, deadline_slack: float,
             hazard_wait: float = 0.0) -> LoadModel:
    """Build a deferrable PEV charging load.

    charge_rate in kW; deadline_slack is the nominal initial slack in
    hours (the state carries the per-vehicle value).
    """
    if charge_rate <= 0.0:
        raise ValueError("charge_rate must be positive")
    if deadline_slack < 0.0:
        raise ValueError("deadline_slack must be nonnegative")
    theta = PevParameters(charge_rate, deadline_slack, hazard_wait)
    fast = AffineThresholdSystem(
        a_mats=np.zeros((3, 2, 2)),
        b_vecs=_PEV_DRIFTS.copy(),
        sigma=np.zeros((3, 2, 0)),
        guard_axis=np.array([1, 0, 0]),
        guard_sign=np.array([1.0, 1.0, 0.0]),
        threshold_base=np.zeros(3),
        threshold_gain=np.zeros(3),
        succ=np.array([PEV_CHARGING, PEV_DONE, PEV_DONE]),
        lam=np.array([hazard_wait, 0.0, 0.0]),
        power=np.array([0.0, charge_rate, 0.0]),
    )
    return LoadModel(
        family="pev", modes=(PEV_WAITING, PEV_CHARGING, PEV_DONE),
        dim=2, noise_dim=0,
        drift=_pev_drift, diffusion=_pev_diffusion,
        guard=_pev_guard, transition=_pev_transition,
        hazard=_pev_hazard, jump_target=_pev_jump_target,
        output=_pev_output,
        theta=theta, alpha=None, fast=fast,
    )

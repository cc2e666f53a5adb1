"""
Independent reference computations for the tests.

Everything here is built directly on scipy primitives with no imports
from the package under test, so a disagreement between a test subject
and its oracle localizes the fault.  The thermostat-cycle oracle
integrates the two-node thermal ODE with adaptive stepping and
event-located threshold crossings (tolerances ~1e-10), far tighter than
anything the simulators themselves claim.
"""
import numpy as np
from scipy.integrate import solve_ivp


# nominal house constants, duplicated here on purpose: the oracle must
# not share code with the package
NOMINAL = dict(c_air=500.0, c_mass=2000.0, ua=600.0, hm=2500.0,
               q_gain=1200.0, q_hvac=24000.0, t_out=82.0)


def etp_coefficients(c_air=None, c_mass=None, ua=None, hm=None,
                     q_gain=None, q_hvac=None, t_out=None):
    """System matrices of the two-node thermal model, (A, b_off, b_on)."""
    p = dict(NOMINAL)
    for k, v in locals().items():
        if k != "p" and v is not None:
            p[k] = v
    a = np.array([
        [-(p["ua"] + p["hm"]) / p["c_air"], p["hm"] / p["c_air"]],
        [p["hm"] / p["c_mass"], -p["hm"] / p["c_mass"]],
    ])
    b_off = np.array([(p["ua"] * p["t_out"] + p["q_gain"]) / p["c_air"], 0.0])
    b_on = b_off + np.array([-p["q_hvac"] / p["c_air"], 0.0])
    return a, b_off, b_on


def crossing_time(a, b, x0, threshold, direction, t_max=50.0):
    """First time the air temperature crosses `threshold` moving in
    `direction` (+1 rising, -1 falling), plus the state there."""

    def rhs(t, x):
        return a @ x + b

    def event(t, x):
        return x[0] - threshold

    event.terminal = True
    event.direction = direction
    sol = solve_ivp(rhs, (0.0, t_max), np.asarray(x0, dtype=float),
                    events=event, rtol=1e-12, atol=1e-12, max_step=0.05)
    if len(sol.t_events[0]) == 0:
        raise RuntimeError("no threshold crossing within t_max")
    return float(sol.t_events[0][0]), sol.y_events[0][0].copy()


def hvac_limit_cycle(u_set=74.0, deadband=1.0, tol=1e-10, max_cycles=400,
                     **house):
    """Converged thermostat cycle of the deterministic two-node model.

    Iterates the return map on the section (air = u_set + deadband,
    switching ON) until the mass temperature repeats to `tol`.  Returns
    a dict with the ON/OFF leg durations, period, duty cycle and the
    section state.
    """
    a, b_off, b_on = etp_coefficients(**house)
    hi = u_set + deadband
    lo = u_set - deadband
    x = np.array([hi, hi])
    t_on = t_off = 0.0
    for _ in range(max_cycles):
        t_on, x_lo = crossing_time(a, b_on, x, lo, -1)
        t_off, x_hi = crossing_time(a, b_off, x_lo, hi, +1)
        if abs(x_hi[1] - x[1]) < tol:
            x = x_hi
            break
        x = x_hi
    else:
        raise RuntimeError("thermostat cycle did not converge")
    period = t_on + t_off
    return {
        "t_on": t_on,
        "t_off": t_off,
        "period": period,
        "duty": t_on / period,
        "section_state": x,
        "x_lo": x_lo,
    }


def hvac_cycle_samples(n=4096, u_set=74.0, deadband=1.0, **house):
    """Time-uniform samples along the converged limit cycle.

    Returns (modes, states) with n points spread uniformly over one
    period; as an occupation measure this is the invariant density of
    the deterministic cycle.
    """
    a, b_off, b_on = etp_coefficients(**house)
    cyc = hvac_limit_cycle(u_set=u_set, deadband=deadband, **house)
    x0 = cyc["section_state"]

    def rhs_on(t, x):
        return a @ x + b_on

    def rhs_off(t, x):
        return a @ x + b_off

    sol_on = solve_ivp(rhs_on, (0.0, cyc["t_on"]), x0, dense_output=True,
                       rtol=1e-12, atol=1e-12, max_step=0.05)
    sol_off = solve_ivp(rhs_off, (0.0, cyc["t_off"]), cyc["x_lo"],
                        dense_output=True, rtol=1e-12, atol=1e-12,
                        max_step=0.05)
    ts = (np.arange(n) + 0.5) / n * cyc["period"]
    modes = np.where(ts < cyc["t_on"], 1, 0).astype(np.int8)
    states = np.empty((n, 2))
    on = ts < cyc["t_on"]
    states[on] = sol_on.sol(ts[on]).T
    states[~on] = sol_off.sol(ts[~on] - cyc["t_on"]).T
    return modes, states


def two_state_markov_mass(l01, l10, t, p1_0=0.0):
    """Occupancy of state 1 under constant switching rates."""
    rate = l01 + l10
    pi1 = l01 / rate
    return pi1 + (p1_0 - pi1) * np.exp(-rate * t)


if __name__ == "__main__":
    cyc = hvac_limit_cycle()
    for k in ("t_on", "t_off", "period", "duty"):
        print(f"{k:8s} {cyc[k]:.12f}")
    print("section ", cyc["section_state"])
    print("x_lo    ", cyc["x_lo"])

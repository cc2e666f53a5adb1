"""
Numba inner loops for the trajectory and density solvers.

Everything here works on plain arrays; the surrounding modules own all
model/geometry bookkeeping.  The trajectory kernel replicates, draw for
draw, the reference python loop in mc.py: noise comes from a pre-drawn
(n_steps, m) normal block consumed one row per step, hazard and
jump-position uniforms from a shared pre-drawn vector consumed through a
running counter, so both paths see identical streams.

Status codes returned by the trajectory kernel:
    0 ok, 1 zeno spacing violation, 2 same-instant transition chain
    exceeded, 3 jump log overflow, 4 non-finite state (on status 4 the
    last_jump_t slot carries the step time for the error message).
"""
from __future__ import annotations

import numpy as np
from numba import njit

# jump kinds in the log
JUMP_GUARD = 0
JUMP_HAZARD = 1
JUMP_FORCED = 2


@njit(cache=True)
def affine_threshold_segment(x, q, k0, k1, dt, a_mats, b_vecs, sig,
                             gaxis, gsign, thr, succ, lam,
                             normals, uniforms, uc,
                             eps_zeno, last_jump_t, same_cnt,
                             stride, modes_out,
                             snap_steps, snap_x, sp,
                             jump_t, jump_kind, jump_from, jump_to, jn):
    """Advance one load over steps k0..k1-1 with fixed thresholds.

    x is modified in place.  Returns (q, uc, last_jump_t, same_cnt, sp,
    jn, status).
    """
    n = x.shape[0]
    m = sig.shape[2]
    sqrtdt = np.sqrt(dt)
    xc = np.empty(n)
    max_jumps = jump_t.shape[0]
    status = 0

    for k in range(k0, k1):
        # hazard thinning: one Bernoulli draw per step where lambda > 0
        jump_pending = False
        rho_jump = 2.0
        lq = lam[q]
        if lq > 0.0:
            u = uniforms[uc]
            uc += 1
            if u < -np.expm1(-lq * dt):
                jump_pending = True
                rho_jump = uniforms[uc]
                uc += 1

        # Euler-Maruyama candidate
        for i in range(n):
            d = b_vecs[q, i]
            for j in range(n):
                d += a_mats[q, i, j] * x[j]
            w = 0.0
            for c in range(m):
                w += sig[q, i, c] * normals[k, c]
            xc[i] = x[i] + dt * d + sqrtdt * w

        finite = True
        for i in range(n):
            if not np.isfinite(xc[i]):
                finite = False
        if not finite:
            status = 4
            last_jump_t = k * dt
            break

        # deterministic crossing: linear interpolation of the guard
        rho_cross = 2.0
        s = gsign[q]
        if s != 0.0:
            g0 = s * (x[gaxis[q]] - thr[q])
            g1 = s * (xc[gaxis[q]] - thr[q])
            if g1 <= 0.0:
                if g0 <= 0.0:
                    rho_cross = 0.0
                else:
                    rho_cross = g0 / (g0 - g1)

        if rho_cross <= 1.0 or jump_pending:
            # earlier event wins; exact ties go to the crossing
            if rho_cross <= rho_jump:
                rho = rho_cross
                kind = JUMP_GUARD
            else:
                rho = rho_jump
                kind = JUMP_HAZARD
            tj = (k + rho) * dt
            if tj > last_jump_t and tj - last_jump_t < eps_zeno:
                status = 1
                break
            if tj == last_jump_t:
                same_cnt += 1
                if same_cnt > 8:
                    status = 2
                    break
            else:
                same_cnt = 1
            if jn >= max_jumps:
                status = 3
                break
            qn = succ[q]
            jump_t[jn] = tj
            jump_kind[jn] = kind
            jump_from[jn] = q
            jump_to[jn] = qn
            jn += 1
            last_jump_t = tj
            # interpolate to the event, finish the step with drift only
            for i in range(n):
                xc[i] = x[i] + rho * (xc[i] - x[i])
            rem = (1.0 - rho) * dt
            for i in range(n):
                d = b_vecs[qn, i]
                for j in range(n):
                    d += a_mats[qn, i, j] * xc[j]
                x[i] = xc[i] + rem * d
            q = qn
            # the completion may have overshot the next threshold
            chain = 0
            while gsign[q] != 0.0 and gsign[q] * (x[gaxis[q]] - thr[q]) <= 0.0:
                tj = (k + 1) * dt
                if jn >= max_jumps:
                    status = 3
                    break
                if tj == last_jump_t:
                    same_cnt += 1
                else:
                    same_cnt = 1
                jump_t[jn] = tj
                jump_kind[jn] = JUMP_GUARD
                jump_from[jn] = q
                q = succ[q]
                jump_to[jn] = q
                jn += 1
                last_jump_t = tj
                chain += 1
                if chain > 8 or same_cnt > 8:
                    status = 2
                    break
            if status != 0:
                break
        else:
            for i in range(n):
                x[i] = xc[i]

        if (k + 1) % stride == 0:
            modes_out[(k + 1) // stride] = q
        if sp < snap_steps.shape[0] and k + 1 == snap_steps[sp]:
            for i in range(n):
                snap_x[sp, i] = x[i]
            sp += 1

    return q, uc, last_jump_t, same_cnt, sp, jn, status


# ---------------------------------------------------------------------------
# density solver sweeps
# ---------------------------------------------------------------------------
#
# Donor-Cell upwind advection plus central-difference diffusion, one axis
# at a time (dimensional splitting).  Strip-edge faces carry no flux here;
# outflow through guard and truncation faces is applied separately from
# the boundary bookkeeping, which keeps every sweep exactly conservative.
# The periodic variant wraps the edge faces instead (used only by the
# scheme-verification domains without guards).


@njit(cache=True)
def sweep_x1(p, v1, d1, dx1, dc1, dt, periodic):
    """In-place conservative update of p along axis 0.

    v1 is the face-normal velocity (n1+1, n2), d1 the constant diffusion
    coefficient (half the Gram entry), dx1 the cell widths and dc1 the
    center-to-center distances indexed by interior face.
    """
    n1, n2 = p.shape
    flux = np.empty(n1 + 1)
    for j in range(n2):
        for i in range(1, n1):
            v = v1[i, j]
            if v > 0.0:
                f = v * p[i - 1, j]
            else:
                f = v * p[i, j]
            if d1 > 0.0:
                f -= d1 * (p[i, j] - p[i - 1, j]) / dc1[i]
            flux[i] = f
        if periodic:
            v = v1[0, j]
            if v > 0.0:
                f = v * p[n1 - 1, j]
            else:
                f = v * p[0, j]
            if d1 > 0.0:
                dc = 0.5 * (dx1[0] + dx1[n1 - 1])
                f -= d1 * (p[0, j] - p[n1 - 1, j]) / dc
            flux[0] = f
            flux[n1] = f
        else:
            flux[0] = 0.0
            flux[n1] = 0.0
        for i in range(n1):
            p[i, j] -= dt / dx1[i] * (flux[i + 1] - flux[i])


@njit(cache=True)
def sweep_x2(p, v2, d2, dx2, dc2, dt, periodic):
    """In-place conservative update of p along axis 1."""
    n1, n2 = p.shape
    flux = np.empty(n2 + 1)
    for i in range(n1):
        for j in range(1, n2):
            v = v2[i, j]
            if v > 0.0:
                f = v * p[i, j - 1]
            else:
                f = v * p[i, j]
            if d2 > 0.0:
                f -= d2 * (p[i, j] - p[i, j - 1]) / dc2[j]
            flux[j] = f
        if periodic:
            v = v2[i, 0]
            if v > 0.0:
                f = v * p[i, n2 - 1]
            else:
                f = v * p[i, 0]
            if d2 > 0.0:
                dc = 0.5 * (dx2[0] + dx2[n2 - 1])
                f -= d2 * (p[i, 0] - p[i, n2 - 1]) / dc
            flux[0] = f
            flux[n2] = f
        else:
            flux[0] = 0.0
            flux[n2] = 0.0
        for j in range(n2):
            p[i, j] -= dt / dx2[j] * (flux[j + 1] - flux[j])

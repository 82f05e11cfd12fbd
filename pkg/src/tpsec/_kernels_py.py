"""Pure numpy backend for the nodal power-state kernel.

Solves batches of square systems of the form

    linear row i:     (Y v + r)_i + g_i v_i - c_i = 0
    quadratic row i:  v_i (Y v + r)_i - clip(a_i + b_i v_i, lo_i, hi_i) = 0

with damped Newton iterations vectorised across seeds. The quadratic rows
carry train power balances (watts), the linear rows substation Thevenin
equivalents and passive nodes; the constant offset r supports systems whose
linear rows were eliminated analytically. The clamp coefficients may vary
per seed (shape (M, N)), which batches frames with different train powers in
one call. The compiled twin in ``_kernels_c`` has the same contract.
"""

from __future__ import annotations

import numpy as np

_BACKTRACK_STEPS = 8
_MERIT_DECREASE = 1e-4
_MAX_BAD_STEPS = 6
_DIVERGENCE_LIMIT = 1e9


def _residual(v, y, y_shift, quad, lin_g, lin_b, pw_a, pw_b, pw_lo, pw_hi):
    yv = v @ y + y_shift
    power = np.clip(pw_a + pw_b * v, pw_lo, pw_hi)
    f_quad = v * yv - power
    f_lin = yv + lin_g * v - lin_b
    return np.where(quad, f_quad, f_lin), yv


def _merit(f, v, quad):
    # Quadratic rows are in watts; rescale to ampere-like units so the
    # line search weighs all rows comparably.
    scale = np.where(quad, np.maximum(np.abs(v), 1.0), 1.0)
    return np.sum((f / scale) ** 2, axis=-1)


def newton_power_states(
    y,
    quad_mask,
    lin_g,
    lin_b,
    pw_a,
    pw_b,
    pw_lo,
    pw_hi,
    seeds,
    tol_v: float = 1e-9,
    max_iter: int = 80,
    step_limit: float = 400.0,
    y_shift=None,
):
    """Solve the nodal system from every seed; returns (roots, converged, iters)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    quad = np.asarray(quad_mask, dtype=bool)
    lin_g = np.asarray(lin_g, dtype=float)
    lin_b = np.asarray(lin_b, dtype=float)
    y_shift = np.zeros(n) if y_shift is None else np.asarray(y_shift, dtype=float)

    v = np.array(seeds, dtype=float, copy=True)
    if v.ndim == 1:
        v = v[None, :]
    m = v.shape[0]

    def per_seed(arr):
        arr = np.asarray(arr, dtype=float)
        return arr if arr.ndim == 2 else np.broadcast_to(arr, (m, n))

    pw_a = per_seed(pw_a)
    pw_b = per_seed(pw_b)
    pw_lo = per_seed(pw_lo)
    pw_hi = per_seed(pw_hi)

    converged = np.zeros(m, dtype=bool)
    dead = np.zeros(m, dtype=bool)
    bad_steps = np.zeros(m, dtype=np.int32)
    iters = np.zeros(m, dtype=np.int32)

    eye = np.eye(n)
    for _ in range(max_iter):
        active = ~(converged | dead)
        if not active.any():
            break
        idx = np.flatnonzero(active)
        va = v[idx]
        a_a, b_a, lo_a, hi_a = pw_a[idx], pw_b[idx], pw_lo[idx], pw_hi[idx]
        f, yv = _residual(va, y, y_shift, quad, lin_g, lin_b, a_a, b_a, lo_a, hi_a)
        merit0 = _merit(f, va, quad)

        raw = a_a + b_a * va
        inside = (raw > lo_a) & (raw < hi_a)
        # J = Y row-scaled by v on quadratic rows, plus diagonal corrections.
        jac = np.where(quad[None, :, None], va[:, :, None] * y[None, :, :], y[None, :, :])
        diag = np.where(quad, yv - np.where(inside, b_a, 0.0), lin_g)
        jac = jac + diag[:, :, None] * eye[None, :, :]

        try:
            delta = np.linalg.solve(jac, f[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            delta = np.squeeze(np.linalg.pinv(jac) @ f[:, :, None], axis=-1)

        step = -np.clip(delta, -step_limit, step_limit)
        newly_converged = np.max(np.abs(delta), axis=1) <= tol_v

        # Backtracking line search on the scaled residual norm.
        t = np.ones(len(va))
        vt = va + step
        for _bt in range(_BACKTRACK_STEPS):
            ft, _ = _residual(vt, y, y_shift, quad, lin_g, lin_b, a_a, b_a, lo_a, hi_a)
            shrink = (_merit(ft, vt, quad) > merit0 * (1.0 - _MERIT_DECREASE * t)) & ~newly_converged
            if not shrink.any():
                break
            t[shrink] *= 0.5
            vt = va + t[:, None] * step

        ft, _ = _residual(vt, y, y_shift, quad, lin_g, lin_b, a_a, b_a, lo_a, hi_a)
        no_progress = (_merit(ft, vt, quad) >= merit0) & ~newly_converged

        v[idx] = vt
        iters[idx] += 1
        bad_steps[idx] = np.where(no_progress, bad_steps[idx] + 1, 0)
        converged[idx] |= newly_converged
        blown = ~np.isfinite(vt).all(axis=1) | (np.abs(vt).max(axis=1) > _DIVERGENCE_LIMIT)
        dead[idx] |= blown | (bad_steps[idx] >= _MAX_BAD_STEPS)

    return v, converged, iters

# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled backend for the nodal power-state kernel.

Same contract as ``_kernels_py.newton_power_states``: batches of damped
Newton solves of the mixed linear / clamped-quadratic nodal system, one seed
per row. Small dense systems (N up to a few tens), so the linear solves are
plain partial-pivot Gaussian elimination on stack-local buffers.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, isfinite

cnp.import_array()

cdef double _BACKTRACK_FLOOR = 1.0 / 256.0
cdef double _MERIT_DECREASE = 1e-4
cdef int _MAX_BAD_STEPS = 6
cdef double _DIVERGENCE_LIMIT = 1e9


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef double _residual_merit(
    double[::1] v,
    double[:, ::1] y,
    double[::1] y_shift,
    unsigned char[::1] quad,
    double[::1] lin_g,
    double[::1] lin_b,
    double[::1] a,
    double[::1] b,
    double[::1] lo,
    double[::1] hi,
    double[::1] f_out,
    double[::1] yv_out,
) nogil:
    """Fill residual and Y*v buffers; return the scaled squared merit."""
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t i, j
    cdef double acc, power, scale, merit = 0.0
    for i in range(n):
        acc = y_shift[i]
        for j in range(n):
            acc += y[i, j] * v[j]
        yv_out[i] = acc
        if quad[i]:
            power = _clip(a[i] + b[i] * v[i], lo[i], hi[i])
            f_out[i] = v[i] * acc - power
            scale = fabs(v[i])
            if scale < 1.0:
                scale = 1.0
            merit += (f_out[i] / scale) * (f_out[i] / scale)
        else:
            f_out[i] = acc + lin_g[i] * v[i] - lin_b[i]
            merit += f_out[i] * f_out[i]
    return merit


cdef int _solve_inplace(double[:, ::1] m, double[::1] rhs) nogil:
    """Gaussian elimination with partial pivoting; returns 0 on success."""
    cdef Py_ssize_t n = rhs.shape[0]
    cdef Py_ssize_t i, j, k, piv
    cdef double best, factor, tmp
    for k in range(n):
        piv = k
        best = fabs(m[k, k])
        for i in range(k + 1, n):
            if fabs(m[i, k]) > best:
                best = fabs(m[i, k])
                piv = i
        if best == 0.0:
            return 1
        if piv != k:
            for j in range(n):
                tmp = m[k, j]
                m[k, j] = m[piv, j]
                m[piv, j] = tmp
            tmp = rhs[k]
            rhs[k] = rhs[piv]
            rhs[piv] = tmp
        for i in range(k + 1, n):
            factor = m[i, k] / m[k, k]
            if factor != 0.0:
                for j in range(k, n):
                    m[i, j] -= factor * m[k, j]
                rhs[i] -= factor * rhs[k]
    for k in range(n - 1, -1, -1):
        tmp = rhs[k]
        for j in range(k + 1, n):
            tmp -= m[k, j] * rhs[j]
        rhs[k] = tmp / m[k, k]
    return 0


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
    double tol_v=1e-9,
    int max_iter=80,
    double step_limit=400.0,
    y_shift=None,
):
    """Solve the nodal system from every seed; returns (roots, converged, iters)."""
    y_c = np.ascontiguousarray(y, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] y_arr = y_c if y_c.flags.writeable else y_c.copy()
    cdef Py_ssize_t n = y_arr.shape[0]
    cdef cnp.ndarray[double, ndim=2] v_arr = np.array(seeds, dtype=np.float64, copy=True)
    if v_arr.ndim == 1:
        v_arr = v_arr[None, :].copy()
    cdef Py_ssize_t m_count = v_arr.shape[0]

    def per_seed(arr):
        out = np.asarray(arr, dtype=np.float64)
        if out.ndim == 1:
            out = np.broadcast_to(out, (m_count, n))
        out = np.ascontiguousarray(out)
        return out if out.flags.writeable else out.copy()

    def vec(arr):
        out = np.ascontiguousarray(arr, dtype=np.float64)
        return out if out.flags.writeable else out.copy()

    cdef cnp.ndarray[double, ndim=2] a_arr = per_seed(pw_a)
    cdef cnp.ndarray[double, ndim=2] b_arr = per_seed(pw_b)
    cdef cnp.ndarray[double, ndim=2] lo_arr = per_seed(pw_lo)
    cdef cnp.ndarray[double, ndim=2] hi_arr = per_seed(pw_hi)
    cdef cnp.ndarray[double, ndim=1] g_arr = vec(lin_g)
    cdef cnp.ndarray[double, ndim=1] c_arr = vec(lin_b)
    cdef cnp.ndarray[double, ndim=1] shift_arr
    if y_shift is None:
        shift_arr = np.zeros(n)
    else:
        shift_arr = vec(y_shift)
    cdef cnp.ndarray[unsigned char, ndim=1] quad_arr = np.ascontiguousarray(
        np.asarray(quad_mask, dtype=bool), dtype=np.uint8
    )

    cdef cnp.ndarray[unsigned char, ndim=1] conv = np.zeros(m_count, dtype=np.uint8)
    cdef cnp.ndarray[int, ndim=1] iters = np.zeros(m_count, dtype=np.intc)

    cdef double[:, ::1] v = v_arr
    cdef double[:, ::1] av = a_arr
    cdef double[:, ::1] bv = b_arr
    cdef double[:, ::1] lov = lo_arr
    cdef double[:, ::1] hiv = hi_arr
    cdef double[::1] g = g_arr
    cdef double[::1] c = c_arr
    cdef double[::1] shift = shift_arr
    cdef double[:, ::1] ymat = y_arr
    cdef unsigned char[::1] quad = quad_arr
    cdef unsigned char[::1] conv_v = conv
    cdef int[::1] iters_v = iters

    cdef cnp.ndarray[double, ndim=2] jac_buf = np.empty((n, n))
    cdef cnp.ndarray[double, ndim=1] f_buf = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] yv_buf = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] step_buf = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] trial_buf = np.empty(n)
    cdef double[:, ::1] jac = jac_buf
    cdef double[::1] f = f_buf
    cdef double[::1] yv = yv_buf
    cdef double[::1] step = step_buf
    cdef double[::1] trial = trial_buf

    cdef Py_ssize_t s, i, j, it, bt
    cdef int bad, failed
    cdef double merit0, merit1, raw, t, delta_max, vmax
    cdef bint inside, newly, done

    with nogil:
        for s in range(m_count):
            bad = 0
            for it in range(max_iter):
                merit0 = _residual_merit(
                    v[s], ymat, shift, quad, g, c, av[s], bv[s], lov[s], hiv[s], f, yv
                )
                for i in range(n):
                    if quad[i]:
                        raw = av[s, i] + bv[s, i] * v[s, i]
                        inside = lov[s, i] < raw < hiv[s, i]
                        for j in range(n):
                            jac[i, j] = v[s, i] * ymat[i, j]
                        jac[i, i] += yv[i]
                        if inside:
                            jac[i, i] -= bv[s, i]
                    else:
                        for j in range(n):
                            jac[i, j] = ymat[i, j]
                        jac[i, i] += g[i]
                for i in range(n):
                    step[i] = f[i]
                failed = _solve_inplace(jac, step)
                if failed:
                    break
                delta_max = 0.0
                for i in range(n):
                    if fabs(step[i]) > delta_max:
                        delta_max = fabs(step[i])
                    step[i] = -_clip(step[i], -step_limit, step_limit)
                newly = delta_max <= tol_v

                t = 1.0
                while True:
                    for i in range(n):
                        trial[i] = v[s, i] + t * step[i]
                    merit1 = _residual_merit(
                        trial, ymat, shift, quad, g, c, av[s], bv[s], lov[s], hiv[s], f, yv
                    )
                    if newly or merit1 <= merit0 * (1.0 - _MERIT_DECREASE * t) or t <= _BACKTRACK_FLOOR:
                        break
                    t *= 0.5
                for i in range(n):
                    v[s, i] = trial[i]
                iters_v[s] += 1
                if merit1 >= merit0 and not newly:
                    bad += 1
                else:
                    bad = 0
                if newly:
                    conv_v[s] = 1
                    break
                done = False
                vmax = 0.0
                for i in range(n):
                    if not isfinite(v[s, i]):
                        done = True
                    if fabs(v[s, i]) > vmax:
                        vmax = fabs(v[s, i])
                if done or vmax > _DIVERGENCE_LIMIT or bad >= _MAX_BAD_STEPS:
                    break

    return v_arr, conv.astype(bool), iters

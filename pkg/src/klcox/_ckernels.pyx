# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. ``_pykernels`` mirrors every function here."""

import numpy as np
from libc.math cimport exp, log, fabs, INFINITY


def risk_set_sums(const double[::1] lp, const double[:, ::1] x,
                  const Py_ssize_t[::1] risk_end, const double[::1] d,
                  bint with_hessian=True):
    """Accumulate Breslow risk-set terms over nested prefixes.

    Rows of ``x`` and ``lp`` are sorted by descending time, so the risk set of
    event time ``k`` is the prefix ``[0, risk_end[k])``. ``risk_end`` must be
    nondecreasing. Returns ``(sum_k d_k log S0_k, sum_k d_k S1_k/S0_k,
    sum_k d_k (S2_k/S0_k - (S1_k/S0_k)^2))``; the last is ``None`` unless
    ``with_hessian``.
    """
    cdef Py_ssize_t n = x.shape[0], p = x.shape[1], K = risk_end.shape[0]
    cdef Py_ssize_t k, i, a, b, pos = 0
    cdef double m = -INFINITY, s0 = 0.0, scale, e, v, dk, logsum = 0.0, inv

    s1_arr = np.zeros(p)
    mean_arr = np.zeros(p)
    grad_arr = np.zeros(p)
    cdef double[::1] s1 = s1_arr, mean = mean_arr, grad = grad_arr
    cdef double[:, ::1] s2, hess
    if with_hessian:
        s2_arr = np.zeros((p, p))
        hess_arr = np.zeros((p, p))
        s2 = s2_arr
        hess = hess_arr

    for k in range(K):
        while pos < risk_end[k]:
            v = lp[pos]
            if v > m:
                # running-max shift keeps every prefix sum in range
                if s0 > 0.0:
                    scale = exp(m - v)
                    s0 *= scale
                    for a in range(p):
                        s1[a] *= scale
                    if with_hessian:
                        for a in range(p):
                            for b in range(a, p):
                                s2[a, b] *= scale
                m = v
            e = exp(v - m)
            s0 += e
            for a in range(p):
                s1[a] += e * x[pos, a]
            if with_hessian:
                for a in range(p):
                    for b in range(a, p):
                        s2[a, b] += e * x[pos, a] * x[pos, b]
            pos += 1
        dk = d[k]
        if dk == 0.0:
            continue
        logsum += dk * (log(s0) + m)
        inv = 1.0 / s0
        for a in range(p):
            mean[a] = s1[a] * inv
            grad[a] += dk * mean[a]
        if with_hessian:
            for a in range(p):
                for b in range(a, p):
                    hess[a, b] += dk * (s2[a, b] * inv - mean[a] * mean[b])

    if not with_hessian:
        return logsum, grad_arr, None
    for a in range(p):
        for b in range(a):
            hess[a, b] = hess[b, a]
    return logsum, grad_arr, hess_arr


cdef inline double _cd_update(const double[::1, :] x, const double[::1] w,
                              double[::1] res, double[::1] beta,
                              const double[::1] curv, const double[::1] lam,
                              Py_ssize_t j, Py_ssize_t n, double inv_n):
    cdef double h = curv[j], g = 0.0, z, new, delta
    cdef Py_ssize_t i
    if h <= 0.0:
        return 0.0
    for i in range(n):
        g += x[i, j] * res[i]
    z = h * beta[j] + g * inv_n
    if z > lam[j]:
        new = (z - lam[j]) / h
    elif z < -lam[j]:
        new = (z + lam[j]) / h
    else:
        new = 0.0
    delta = new - beta[j]
    if delta != 0.0:
        beta[j] = new
        for i in range(n):
            res[i] -= w[i] * x[i, j] * delta
    return fabs(delta)


def cd_wls(const double[::1, :] x, const double[::1] w, double[::1] res,
           double[::1] beta, const double[::1] curv, const double[::1] lam,
           const Py_ssize_t[::1] idx, Py_ssize_t max_sweeps, double tol,
           double inv_n):
    """Cyclic coordinate descent on a weighted quadratic with L1 penalty.

    Maximises ``inv_n * (res' X d - 0.5 d' X' W X d) - sum_j lam_j |beta_j|``
    over the coordinates listed in ``idx``; ``res`` holds the working gradient
    ``g - W X (beta - beta_start)`` and is updated in place, as is ``beta``.
    ``curv[j]`` is ``inv_n * sum_i w_i x_ij^2``. A full sweep is followed by
    sweeps over the nonzero coordinates only until they settle; stops when a
    full sweep moves no coefficient by ``tol`` or more. Returns
    ``(sweeps, max_delta)``.
    """
    cdef Py_ssize_t n = x.shape[0], m = idx.shape[0]
    cdef Py_ssize_t sweeps = 0, t, j, n_nz
    cdef double max_delta = 0.0, dl, inner
    nz_arr = np.empty(m, dtype=np.intp)
    cdef Py_ssize_t[::1] nz = nz_arr
    while sweeps < max_sweeps:
        max_delta = 0.0
        n_nz = 0
        for t in range(m):
            j = idx[t]
            dl = _cd_update(x, w, res, beta, curv, lam, j, n, inv_n)
            if dl > max_delta:
                max_delta = dl
            if beta[j] != 0.0:
                nz[n_nz] = j
                n_nz += 1
        sweeps += 1
        if max_delta < tol:
            break
        while sweeps < max_sweeps:
            inner = 0.0
            for t in range(n_nz):
                dl = _cd_update(x, w, res, beta, curv, lam, nz[t], n, inv_n)
                if dl > inner:
                    inner = dl
            sweeps += 1
            if inner < tol:
                break
    return sweeps, max_delta


def concordance_counts(const double[::1] time, const long[::1] status,
                       const double[::1] score):
    """Harrell pair counts: ``(2*concordant + tied, usable)`` as integers."""
    cdef Py_ssize_t n = time.shape[0], i, j
    cdef long long num = 0, usable = 0
    for i in range(n):
        if status[i] != 1:
            continue
        for j in range(n):
            if time[j] > time[i]:
                usable += 1
                if score[i] > score[j]:
                    num += 2
                elif score[i] == score[j]:
                    num += 1
    return num, usable

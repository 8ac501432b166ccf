"""NumPy implementations of the compiled kernels in ``_ckernels.pyx``.

Signatures and return values match the compiled versions; results agree to
rounding. Used when the extension is not built or ``KLCOX_PURE_PYTHON`` is set.
"""

import numpy as np


def _suffix_sum(v):
    return np.cumsum(v[::-1])[::-1]


def risk_set_sums(lp, x, risk_end, d, with_hessian=True):
    n, p = x.shape
    if len(risk_end) == 0:
        return 0.0, np.zeros(p), (np.zeros((p, p)) if with_hessian else None)
    shift = lp.max()
    e = np.exp(lp - shift)
    last = np.asarray(risk_end) - 1
    s0 = np.cumsum(e)[last]
    if not np.all(s0 > 0):
        # a prefix lies entirely >700 below the global max; rerun per prefix
        return _risk_set_sums_loop(lp, x, risk_end, d, with_hessian)
    s1 = np.cumsum(e[:, None] * x, axis=0)[last]
    mean = s1 / s0[:, None]
    keep = d != 0
    logsum = float(np.sum(d[keep] * (np.log(s0[keep]) + shift)))
    grad = (d[:, None] * mean).sum(axis=0)
    if not with_hessian:
        return logsum, grad, None
    # sum_k d_k S2_k/S0_k = X' diag(e_i * sum_{k: i in R_k} d_k/S0_k) X
    coef = np.zeros(n)
    np.add.at(coef, last, d / s0)
    c = e * _suffix_sum(coef)
    hess = (x * c[:, None]).T @ x - (mean * d[:, None]).T @ mean
    hess = 0.5 * (hess + hess.T)
    return logsum, grad, hess


def _risk_set_sums_loop(lp, x, risk_end, d, with_hessian):
    p = x.shape[1]
    logsum = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    for k, r in enumerate(risk_end):
        if d[k] == 0:
            continue
        v = lp[:r]
        m = v.max()
        e = np.exp(v - m)
        s0 = e.sum()
        mean = e @ x[:r] / s0
        logsum += d[k] * (np.log(s0) + m)
        grad += d[k] * mean
        if with_hessian:
            hess += d[k] * ((x[:r] * e[:, None]).T @ x[:r] / s0 - np.outer(mean, mean))
    return logsum, grad, (hess if with_hessian else None)


def _cd_update(x, w, res, beta, curv, lam, j, inv_n):
    h = curv[j]
    if h <= 0.0:
        return 0.0
    xj = x[:, j]
    z = h * beta[j] + (xj @ res) * inv_n
    if z > lam[j]:
        new = (z - lam[j]) / h
    elif z < -lam[j]:
        new = (z + lam[j]) / h
    else:
        new = 0.0
    delta = new - beta[j]
    if delta != 0.0:
        beta[j] = new
        res -= (w * xj) * delta
    return abs(delta)


def cd_wls(x, w, res, beta, curv, lam, idx, max_sweeps, tol, inv_n):
    sweeps = 0
    max_delta = 0.0
    while sweeps < max_sweeps:
        max_delta = 0.0
        for j in idx:
            max_delta = max(max_delta, _cd_update(x, w, res, beta, curv, lam, j, inv_n))
        nz = [j for j in idx if beta[j] != 0.0]
        sweeps += 1
        if max_delta < tol:
            break
        while sweeps < max_sweeps:
            inner = 0.0
            for j in nz:
                inner = max(inner, _cd_update(x, w, res, beta, curv, lam, j, inv_n))
            sweeps += 1
            if inner < tol:
                break
    return sweeps, max_delta


def concordance_counts(time, status, score, block=512):
    num = 0
    usable = 0
    events = np.flatnonzero(status == 1)
    for start in range(0, len(events), block):
        rows = events[start:start + block]
        later = time[None, :] > time[rows, None]
        higher = score[rows, None] > score[None, :]
        tied = score[rows, None] == score[None, :]
        usable += int(later.sum())
        num += int(2 * (later & higher).sum() + (later & tied).sum())
    return num, usable

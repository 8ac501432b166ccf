"""Backend selection for the numerical inner loops.

The compiled extension ``klcox._ckernels`` is used when it was built and
``KLCOX_PURE_PYTHON`` is unset or ``0``; otherwise the NumPy versions in
``klcox._pykernels`` are used. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("KLCOX_PURE_PYTHON", "0") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def risk_set_sums(lp, x, risk_end, d, with_hessian=True):
    return _impl.risk_set_sums(
        np.ascontiguousarray(lp, dtype=float),
        np.ascontiguousarray(x, dtype=float),
        np.ascontiguousarray(risk_end, dtype=np.intp),
        np.ascontiguousarray(d, dtype=float),
        with_hessian,
    )


def cd_wls(x, w, res, beta, curv, lam, idx, max_sweeps, tol, inv_n):
    """``x`` must be Fortran-ordered float64; ``res`` and ``beta`` are updated in place."""
    return _impl.cd_wls(x, w, res, beta, curv, lam,
                        np.ascontiguousarray(idx, dtype=np.intp),
                        int(max_sweeps), float(tol), float(inv_n))


def concordance_counts(time, status, score):
    return _impl.concordance_counts(
        np.ascontiguousarray(time, dtype=float),
        np.ascontiguousarray(status, dtype=np.int_),
        np.ascontiguousarray(score, dtype=float),
    )


def lp_gradient(lp, a, risk_end, d):
    """Gradient and Hessian diagonal of ``a'lp - sum_k d_k log S0_k`` in ``lp``.

    Rows are in descending-time order as for :func:`risk_set_sums`. Returns
    ``(g, w)`` with ``g_i = a_i - exp(lp_i) sum_{k: i in R_k} d_k / S0_k`` and
    ``w_i`` the negated second derivative (>= 0).
    """
    n = len(lp)
    shift = lp.max()
    e = np.exp(lp - shift)
    last = np.asarray(risk_end) - 1
    s0 = np.cumsum(e)[last]
    c1 = np.zeros(n)
    c2 = np.zeros(n)
    np.add.at(c1, last, d / s0)
    np.add.at(c2, last, d / s0**2)
    c1 = np.cumsum(c1[::-1])[::-1]
    c2 = np.cumsum(c2[::-1])[::-1]
    mu = e * c1
    g = a - mu
    w = mu - e * e * c2
    return g, np.maximum(w, 0.0)

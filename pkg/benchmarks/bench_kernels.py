"""Time the compiled kernels against their NumPy fallbacks.

    python benchmarks/bench_kernels.py [--n 2000] [--p 20] [--repeat 5]

Prints one line per kernel with the best-of-``repeat`` time of each backend
and the speed ratio. Also times a full CoxKL fit under each backend in a
subprocess, since backend selection happens at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from klcox import _pykernels

try:
    from klcox import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _inputs(n, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    lp = x @ rng.normal(scale=0.3, size=p)
    # descending-time rows: every row ends a risk set, ~70% carry an event
    risk_end = np.arange(1, n + 1, dtype=np.intp)
    d = (rng.uniform(size=n) < 0.7).astype(float)
    time = rng.exponential(size=n)
    status = (rng.uniform(size=n) < 0.5).astype(np.int_)
    score = rng.normal(size=n)
    return x, lp, risk_end, d, time, status, score


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(n, p, repeat, seed=0):
    x, lp, risk_end, d, time, status, score = _inputs(n, p, seed)
    xf = np.asfortranarray(x)
    w = np.full(n, 0.25)
    curv = (w[:, None] * x ** 2).sum(axis=0) / n
    lam = np.full(p, 0.01)
    idx = np.arange(p, dtype=np.intp)
    g = np.random.default_rng(seed + 1).normal(size=n)

    def cases(mod):
        return {
            "risk_set_sums": lambda: mod.risk_set_sums(lp, x, risk_end, d, True),
            "risk_set_sums (no hessian)": lambda: mod.risk_set_sums(lp, x, risk_end, d, False),
            "cd_wls": lambda: mod.cd_wls(xf, w, g.copy(), np.zeros(p), curv, lam, idx,
                                         200, 1e-9, 1.0 / n),
            "concordance_counts": lambda: mod.concordance_counts(time, status, score),
        }

    py = cases(_pykernels)
    cy = cases(_ckernels) if _ckernels is not None else {}
    print(f"n={n} p={p} best of {repeat}")
    print(f"{'kernel (ms)':28s} {'cython':>10s} {'python':>10s} {'ratio':>7s}")
    for name, fn in py.items():
        tp = _best(fn, repeat)
        if name in cy:
            tc = _best(cy[name], repeat)
            print(f"{name:28s} {1e3 * tc:10.3f} {1e3 * tp:10.3f} {tp / tc:7.1f}")
        else:
            print(f"{name:28s} {'n/a':>10s} {1e3 * tp:10.3f} {'':>7s}")


FIT_SNIPPET = """
import time, numpy as np
from klcox import kernels
from klcox.core import SurvivalDataset
from klcox.coxkl import ExternalScores, fit_coxkl
rng = np.random.default_rng(0)
n, p = {n}, {p}
z = rng.normal(size=(n, p))
t = rng.exponential(size=n) * np.exp(-0.2 * z[:, 0])
ds = SurvivalDataset(t, (rng.uniform(size=n) < 0.6).astype(int), z)
ext = ExternalScores("e", z @ rng.normal(scale=0.2, size=p))
best = min((lambda s: (fit_coxkl(ds, [ext], [1.0]), time.perf_counter() - s)[1])(time.perf_counter())
           for _ in range({repeat}))
print(kernels.BACKEND, best)
"""


def bench_fit(n, p, repeat):
    print(f"\nfull fit_coxkl, n={n} p={p}")
    for pure in ("0", "1"):
        env = dict(os.environ, KLCOX_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET.format(n=n, p=p, repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"{backend:8s} {1e3 * float(secs):.3f} ms")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--p", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    bench(args.n, args.p, args.repeat)
    bench_fit(args.n, args.p, args.repeat)


if __name__ == "__main__":
    main()

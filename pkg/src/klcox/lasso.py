"""L1-penalised CoxKL by pathwise coordinate descent.

Maximises ``l_eta(beta)/n - lambda * sum_j pf_j |beta_j|``. Each outer step
takes a diagonal quadratic approximation of the objective in the linear
predictor (working weights ``w_i``, working gradient ``g_i``), solves the
weighted lasso by cyclic coordinate descent, and backtracks on the exact
penalised objective. Covariates are scaled to unit standard deviation
inside the solver with the penalty rescaled to match, so the problem solved
is the one stated on the original scale.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cox import CoxKLFit
from .coxkl import IntegratedProblem, prepare

log = logging.getLogger(__name__)

KKT_TOL = 1e-6


@dataclass
class RegularizationPath:
    lambdas: np.ndarray
    coefficients: np.ndarray  # (n_lambda, p), original scale
    nonzero_counts: np.ndarray
    objective_values: np.ndarray
    converged: np.ndarray
    eta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        coefs = []
        for row in self.coefficients:
            nz = np.flatnonzero(row)
            coefs.append({"index": [int(i) for i in nz], "value": [float(row[i]) for i in nz]})
        return {
            "lambdas": [float(v) for v in self.lambdas],
            "nonzero_counts": [int(v) for v in self.nonzero_counts],
            "objective_values": [float(v) for v in self.objective_values],
            "eta": [float(v) for v in self.eta],
            "p": int(self.coefficients.shape[1]),
            "coefficients": coefs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizationPath":
        lambdas = np.array(d["lambdas"], dtype=float)
        coef = np.zeros((len(lambdas), int(d["p"])))
        for k, c in enumerate(d["coefficients"]):
            coef[k, c["index"]] = c["value"]
        return cls(lambdas, coef, np.array(d["nonzero_counts"], dtype=int),
                   np.array(d["objective_values"], dtype=float),
                   np.ones(len(lambdas), dtype=bool), np.array(d.get("eta", []), dtype=float))


class LassoSolver:
    """Penalised CoxKL solver bound to one prepared problem and ``etas``."""

    def __init__(self, problem: IntegratedProblem, etas, penalty_factor=None,
                 max_outer=200, max_sweeps=1000, tol=1e-9, inner_tol=1e-8):
        self.prob = problem
        self.etas = problem.check_etas(etas)
        self.n, self.p = problem.n, problem.p
        if self.p == 0:
            raise ValueError("no covariates to penalise")
        x = problem.x
        scale = x.std(axis=0, ddof=1) if self.n > 1 else np.zeros(self.p)
        self.pinned = ~(scale > 1e-12 * (1 + np.abs(x).max(axis=0)))
        if self.pinned.any():
            log.warning("%d constant covariate(s) pinned at 0", int(self.pinned.sum()))
        self.scale = np.where(self.pinned, 1.0, scale)
        # centring changes lp by a constant only, which the partial likelihood
        # ignores, but keeps the diagonal working weights a sound curvature proxy
        self.xs = np.asfortranarray((x - x.mean(axis=0)) / self.scale)
        pf = np.ones(self.p) if penalty_factor is None else np.asarray(penalty_factor, float)
        if pf.shape != (self.p,) or np.any(pf < 0):
            raise ValueError("penalty_factor must be a nonnegative vector of length p")
        self.pf = pf
        self.a = problem.event_weights(self.etas)
        self.max_outer = max_outer
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.inner_tol = inner_tol
        self._lam_max = None
        self._null = None

    # gradients on the original scale, per n
    def score(self, beta):
        g, _ = kernels.lp_gradient(self.prob.x @ beta, self.a, self.prob.risk_end, self.prob.d)
        out = self.prob.x.T @ g / self.n
        out[self.pinned] = 0.0
        return out

    def null_fit(self):
        """Solution for large lambda: penalised coordinates 0, unpenalised ones fitted."""
        if self._null is None:
            free = np.flatnonzero((self.pf == 0) & ~self.pinned)
            gamma = np.zeros(self.p)
            if free.size:
                gamma, _, _ = self._solve_active(gamma, 0.0, np.zeros(self.p), free)
            beta = gamma / self.scale
            self._null = (beta, self.score(beta))
        return self._null

    def lambda_max(self) -> float:
        """Smallest lambda at which :meth:`null_fit` satisfies KKT."""
        if self._lam_max is None:
            _, u = self.null_fit()
            pen = (self.pf > 0) & ~self.pinned
            self._lam_max = float(np.max(np.abs(u[pen]) / self.pf[pen])) if pen.any() else 0.0
        return self._lam_max

    def penalised_objective(self, beta, lam, lp=None):
        if lp is None:
            lp = self.prob.x @ beta
        logsum = kernels.risk_set_sums(lp, self.prob.x[:, :0], self.prob.risk_end,
                                       self.prob.d, False)[0]
        return (float(self.a @ lp) - logsum) / self.n - lam * float(self.pf @ np.abs(beta))

    def kkt_violation(self, beta, lam, score=None) -> float:
        u = self.score(beta) if score is None else score
        lamj = lam * self.pf
        zero = (beta == 0) & ~self.pinned
        nz = beta != 0
        viol = np.zeros(self.p)
        viol[zero] = np.maximum(np.abs(u[zero]) - lamj[zero], 0.0)
        viol[nz] = np.abs(u[nz] - lamj[nz] * np.sign(beta[nz]))
        return float(viol.max()) if self.p else 0.0

    def solve(self, lam, beta0=None, active=None):
        """Return ``(beta, converged, outer_iterations, score)`` at penalty ``lam``."""
        p = self.p
        if lam >= self.lambda_max():
            # the null fit satisfies KKT exactly
            beta, u = self.null_fit()
            return beta.copy(), True, 0, u
        gamma = np.zeros(p) if beta0 is None else np.asarray(beta0, float) * self.scale
        gamma[self.pinned] = 0.0
        lamj = lam * self.pf / self.scale
        free = ~self.pinned
        if active is None:
            active = np.zeros(p, dtype=bool)
        active = (active | (gamma != 0)) & free
        total_outer = 0
        converged = False
        for _ in range(50):
            idx = np.flatnonzero(active)
            gamma, ok, n_outer = self._solve_active(gamma, lam, lamj, idx)
            total_outer += n_outer
            beta = gamma / self.scale
            u = self.score(beta)
            # coordinates outside the working set that violate KKT
            add = free & ~active & (np.abs(u) > lam * self.pf + 0.5 * KKT_TOL)
            if not add.any():
                converged = ok
                break
            active |= add
        return gamma / self.scale, converged, total_outer, u

    def _solve_active(self, gamma, lam, lamj, idx):
        xs, prob = self.xs, self.prob
        lp = xs[:, idx] @ gamma[idx] if idx.size else np.zeros(self.n)
        obj = self.penalised_objective(gamma / self.scale, lam, lp)
        if idx.size == 0:
            return gamma, True, 0
        curv = np.zeros(self.p)
        for outer in range(1, self.max_outer + 1):
            g, w = kernels.lp_gradient(lp, self.a, prob.risk_end, prob.d)
            curv[idx] = (w @ xs[:, idx] ** 2) / self.n
            new = gamma.copy()
            res = g.copy()
            kernels.cd_wls(xs, w, res, new, curv, lamj, idx, self.max_sweeps, self.inner_tol,
                           1.0 / self.n)
            delta = new - gamma
            dlp = xs[:, idx] @ delta[idx]
            t = 1.0
            slack = 1e-14 * (abs(obj) + 1)
            for _ in range(40):
                cand_lp = lp + t * dlp
                cand = gamma + t * delta
                obj_c = self.penalised_objective(cand / self.scale, lam, cand_lp)
                if obj_c >= obj - slack:
                    break
                t *= 0.5
            else:
                return gamma, False, outer
            step = float(np.max(np.abs(t * delta)))
            gamma, lp, obj = cand, cand_lp, obj_c
            if step < self.tol:
                return gamma, True, outer
        return gamma, False, self.max_outer


def _solver(dataset_or_problem, exts, etas, penalty_factor=None):
    prob = (dataset_or_problem if isinstance(dataset_or_problem, IntegratedProblem)
            else prepare(dataset_or_problem, exts))
    return LassoSolver(prob, etas, penalty_factor)


def lambda_max(dataset, exts, etas, penalty_factor=None) -> float:
    """Smallest penalty with an all-zero solution: ``max_j |U_eta,j(0)| / pf_j``
    (scores taken at the unpenalised fit when some ``pf_j`` are 0)."""
    return _solver(dataset, exts, etas, penalty_factor).lambda_max()


def fit_coxkl_lasso(dataset, exts, etas, lam: float, warm_start=None,
                    penalty_factor=None) -> CoxKLFit:
    """CoxKL-LASSO fit at one penalty. ``objective`` is the penalised per-n value."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    solver = _solver(dataset, exts, etas, penalty_factor)
    if warm_start is None:
        # strong-rule screen from the null model
        u0 = np.abs(solver.score(np.zeros(solver.p)))
        active = u0 >= 2 * lam * solver.pf - solver.lambda_max()
    else:
        active = None
    beta, ok, outer, u = solver.solve(lam, warm_start, active)
    return CoxKLFit(beta, solver.etas, ok, outer, solver.penalised_objective(beta, lam),
                    solver.kkt_violation(beta, lam, u), None, None, False, float(lam),
                    solver.n)


def lambda_grid(lam_max: float, n_lambda=100, lambda_min_ratio=None, n=None, p=None):
    if n_lambda < 2:
        raise ValueError("n_lambda must be >= 2")
    if lambda_min_ratio is None:
        lambda_min_ratio = 0.05 if (n is not None and p is not None and n < p) else 1e-4
    if not 0 < lambda_min_ratio < 1:
        raise ValueError("lambda_min_ratio must lie in (0, 1)")
    return lam_max * np.logspace(0, np.log10(lambda_min_ratio), n_lambda)


def path_on_solver(solver: LassoSolver, lambdas) -> RegularizationPath:
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) >= 0) or np.any(lambdas <= 0):
        raise ValueError("lambdas must be positive and strictly decreasing")
    p = solver.p
    coef = np.zeros((len(lambdas), p))
    objs = np.zeros(len(lambdas))
    conv = np.zeros(len(lambdas), dtype=bool)
    beta, u = solver.null_fit()
    beta = beta.copy()
    lam_prev = max(solver.lambda_max(), lambdas[0])
    for k, lam in enumerate(lambdas):
        # sequential strong rule
        active = (np.abs(u) >= (2 * lam - lam_prev) * solver.pf) | (beta != 0)
        beta, conv[k], _, u = solver.solve(lam, beta, active)
        coef[k] = beta
        objs[k] = solver.penalised_objective(beta, lam)
        lam_prev = lam
    return RegularizationPath(lambdas, coef, np.count_nonzero(coef, axis=1), objs, conv,
                              solver.etas)


def lasso_path(dataset, exts, etas, n_lambda=100, lambda_min_ratio=None, lambdas=None,
               penalty_factor=None) -> RegularizationPath:
    """Warm-started path from ``lambda_max`` down to ``lambda_min_ratio * lambda_max``."""
    solver = _solver(dataset, exts, etas, penalty_factor)
    if lambdas is None:
        lam_max = solver.lambda_max()
        if lam_max <= 0:
            raise ValueError("lambda_max is 0: no penalised covariate varies")
        lambdas = lambda_grid(lam_max, n_lambda, lambda_min_ratio, solver.n, solver.p)
    return path_on_solver(solver, lambdas)

"""Internal-only Cox proportional hazards fitting.

Objective values are raw sums over event times. Scores and information
matrices are divided by ``n``; the factor cancels in Newton steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import SurvivalDataset


@dataclass(frozen=True)
class CoxFitOptions:
    max_iterations: int = 100
    objective_tolerance: float = 1e-9
    gradient_tolerance: float = 1e-8
    step_halving_max: int = 20
    # Newton steps longer than this (sup-norm) mean the fit has not settled
    step_tolerance: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1 or self.step_halving_max < 1:
            raise ValueError("max_iterations and step_halving_max must be >= 1")
        if min(self.objective_tolerance, self.gradient_tolerance, self.step_tolerance) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class CoxKLFit:
    beta_hat: np.ndarray
    eta: np.ndarray
    converged: bool
    iterations: int
    objective: float
    gradient_norm: float
    information: np.ndarray | None = None
    std_errors: np.ndarray | None = None
    ill_conditioned: bool = False
    penalty: float | None = None
    n: int | None = field(default=None, repr=False)

    @property
    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.beta_hat))

    def to_dict(self) -> dict:
        out = {
            "beta": [float(v) for v in self.beta_hat],
            "eta": [float(v) for v in self.eta],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "objective": float(self.objective),
            "gradient_norm": float(self.gradient_norm),
            "std_errors": None if self.std_errors is None
            else [None if np.isnan(v) else float(v) for v in self.std_errors],
        }
        if self.ill_conditioned:
            out["ill_conditioned"] = True
        if self.penalty is not None:
            out["lambda"] = float(self.penalty)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CoxKLFit":
        se = d.get("std_errors")
        return cls(np.array(d["beta"], dtype=float), np.array(d.get("eta", []), dtype=float),
                   bool(d["converged"]), int(d["iterations"]), float(d["objective"]),
                   float(d["gradient_norm"]), None,
                   None if se is None else np.array([np.nan if v is None else v for v in se],
                                                    dtype=float),
                   bool(d.get("ill_conditioned", False)), d.get("lambda"))


class RiskProblem:
    """Sorted design and risk-set structure of one dataset, reused across fits.

    The objective of every fit in the package has the form
    ``target' beta - sum_k d_k log S0_k(beta)``; only ``target`` changes
    between the internal model and its KL-integrated variants.
    """

    def __init__(self, dataset: SurvivalDataset):
        self.dataset = dataset
        self.n = dataset.n
        self.p = dataset.p
        self.x, self.risk_end, self.d = dataset.sorted_view()
        self.status_sorted = dataset.status[dataset.order].astype(float)
        self.event_sum = self.x.T @ self.status_sorted
        # a constant column cancels from every risk-set ratio
        self.constant = np.ptp(self.x, axis=0) == 0 if self.n else np.zeros(self.p, bool)

    def log_denominator(self, beta):
        return kernels.risk_set_sums(self.x @ beta, self.x, self.risk_end, self.d, False)[0]

    def objective(self, beta, target):
        return float(target @ beta - self.log_denominator(beta))

    def derivatives(self, beta, target, hessian=True):
        """``(objective, score/n, information/n)`` at ``beta``."""
        logsum, mean_sum, hess = kernels.risk_set_sums(
            self.x @ beta, self.x, self.risk_end, self.d, hessian)
        obj = float(target @ beta - logsum)
        score = (target - mean_sum) / self.n
        info = hess / self.n if hessian else None
        return obj, score, info


def _check_beta(beta, p):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (p,):
        raise ValueError(f"beta must have length {p}, got shape {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    return beta


def log_partial_likelihood(dataset: SurvivalDataset, beta) -> float:
    """Breslow log-partial likelihood ``sum_k [Z_k'b - d_k log sum_R exp(Z'b)]``."""
    prob = RiskProblem(dataset)
    return prob.objective(_check_beta(beta, dataset.p), prob.event_sum)


def score_and_information(dataset: SurvivalDataset, beta):
    prob = RiskProblem(dataset)
    _, score, info = prob.derivatives(_check_beta(beta, dataset.p), prob.event_sum)
    return score, info


def _newton_direction(info, score):
    """Solve ``info @ step = score``; ridge ``1e-10 * trace/p`` when ill-conditioned."""
    p = len(score)
    if p == 0:
        return np.zeros(0), False
    try:
        chol = np.linalg.cholesky(info)
        diag = np.diag(chol)
        if diag.min() > 0 and (diag.max() / diag.min()) ** 2 < 1e12:
            y = np.linalg.solve(chol, score)
            return np.linalg.solve(chol.T, y), False
    except np.linalg.LinAlgError:
        pass
    tr = np.trace(info)
    ridge = 1e-10 * (tr / p if tr > 0 else 1.0)
    return np.linalg.solve(info + ridge * np.eye(p), score), True


def newton_fit(problem: RiskProblem, target, opts: CoxFitOptions | None = None,
               beta0=None, eta=()) -> CoxKLFit:
    """Maximise ``target' beta - sum_k d_k log S0_k`` by damped Newton steps."""
    opts = opts or CoxFitOptions()
    p = problem.p
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    free = np.flatnonzero(~problem.constant)
    beta[problem.constant] = 0.0
    obj, score, info = problem.derivatives(beta, target)
    ill = False
    converged = False
    stalled = 0
    it = 0
    while True:
        step = np.zeros(p)
        step[free], ridged = _newton_direction(info[np.ix_(free, free)], score[free])
        ill = ill or ridged
        gnorm = float(np.max(np.abs(score))) if p else 0.0
        if gnorm <= opts.gradient_tolerance and \
                (p == 0 or np.max(np.abs(step)) <= opts.step_tolerance * (1 + np.max(np.abs(beta)))):
            converged = True
            break
        if it >= opts.max_iterations or stalled >= 5:
            break
        it += 1
        t = 1.0
        slack = 1e-13 * (abs(obj) + 1)
        for _ in range(opts.step_halving_max + 1):
            cand = beta + t * step
            obj_c, score_c, info_c = problem.derivatives(cand, target)
            if math.isfinite(obj_c) and obj_c >= obj - slack:
                break
            t *= 0.5
        else:
            break
        rel = abs(obj_c - obj) / (abs(obj) + 1)
        stalled = stalled + 1 if rel < opts.objective_tolerance else 0
        beta, obj, score, info = cand, obj_c, score_c, info_c

    gnorm = float(np.max(np.abs(score))) if p else 0.0
    se = None
    if not ill and p:
        try:
            cov = np.linalg.inv(info[np.ix_(free, free)] * problem.n)
            se = np.full(p, np.nan)
            se[free] = np.sqrt(np.clip(np.diag(cov), 0, None))
        except np.linalg.LinAlgError:
            se = None
    return CoxKLFit(beta, np.asarray(eta, dtype=float), converged, it, obj, gnorm,
                    info, se, ill, None, problem.n)


def fit_cox(dataset: SurvivalDataset, opts: CoxFitOptions | None = None,
            beta0=None) -> CoxKLFit:
    """Maximum partial-likelihood fit of the internal Cox model.

    A monotone likelihood (separation) shows up as ``converged=False`` with the
    last iterate rather than an exception.
    """
    prob = RiskProblem(dataset)
    return newton_fit(prob, prob.event_sum, opts, beta0)


def fit_to_json(fit: CoxKLFit) -> str:
    return fit.to_json()


def fit_from_json(text: str) -> CoxKLFit:
    return CoxKLFit.from_dict(json.loads(text))


__all__ = ["CoxFitOptions", "CoxKLFit", "RiskProblem", "log_partial_likelihood",
           "score_and_information", "newton_fit", "fit_cox"]

"""Cross-validated partial likelihood (Verweij & van Houwelingen) over (eta, lambda)."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass

import numpy as np

from .core import SurvivalDataset
from .cox import CoxFitOptions, RiskProblem, newton_fit
from .coxkl import IntegratedProblem, _as_list
from .lasso import LassoSolver, lambda_grid

log = logging.getLogger(__name__)


def default_eta_grid() -> np.ndarray:
    return np.concatenate([[0.0], np.logspace(-2, 2, 15)])


def make_folds(n: int, V: int, seed: int, stratify_on_events: bool = True,
               statuses=None) -> np.ndarray:
    """Fold labels ``1..V``. Stratified folds get event counts differing by at most one."""
    if not 2 <= V <= n:
        raise ValueError(f"need 2 <= V <= n, got V={V}, n={n}")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if stratify_on_events:
        if statuses is None:
            raise ValueError("statuses are required for event-stratified folds")
        statuses = np.asarray(statuses)
        ev = rng.permutation(np.flatnonzero(statuses == 1))
        cen = rng.permutation(np.flatnonzero(statuses != 1))
        order = np.concatenate([ev, cen])
    else:
        order = rng.permutation(n)
    folds[order] = np.arange(n) % V + 1
    return folds


@dataclass
class CvReport:
    eta_grid: np.ndarray        # (G, M): one row of integration weights per candidate
    lambda_grid: np.ndarray | None
    cvpl: np.ndarray            # (G, L), L = 1 without a lambda grid
    selected_eta: np.ndarray
    selected_lambda: float | None
    fold_assignment: np.ndarray
    seed: int
    nonconverged: int = 0

    @property
    def fold_sizes(self):
        return np.bincount(self.fold_assignment)[1:]

    def to_dict(self) -> dict:
        single = self.eta_grid.shape[1] <= 1
        eta_grid = self.eta_grid[:, 0].tolist() if self.eta_grid.shape[1] == 1 else \
            self.eta_grid.tolist()
        sel = (float(self.selected_eta[0]) if self.selected_eta.size else 0.0) if single \
            else self.selected_eta.tolist()
        return {
            "eta_grid": eta_grid,
            "lambda_grid": None if self.lambda_grid is None else self.lambda_grid.tolist(),
            "cvpl": self.cvpl.tolist(),
            "selected_eta": sel,
            "selected_lambda": self.selected_lambda,
            "seed": int(self.seed),
            "fold_sizes": self.fold_sizes.tolist(),
            "nonconverged_fold_fits": int(self.nonconverged),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class FoldSet:
    """Training-fold problems and the full-data likelihood, built once per fold split."""

    def __init__(self, dataset: SurvivalDataset, exts, folds):
        folds = np.asarray(folds)
        if folds.shape != (dataset.n,):
            raise ValueError("folds must have one label per record")
        exts = _as_list(exts)
        self.full = RiskProblem(dataset)
        self.labels = np.unique(folds)
        self.train = []
        for v in self.labels:
            idx = np.flatnonzero(folds != v)
            sub = dataset.subset(idx)
            self.train.append(IntegratedProblem(sub, [e.subset(idx) for e in exts]))

    def criterion(self, fold: int, beta) -> float:
        """``l_full(beta) - l_train(beta)``, both unpenalised."""
        tr = self.train[fold]
        return (self.full.objective(beta, self.full.event_sum)
                - tr.objective(beta, tr.event_sum))


def _eta_rows(eta_grid, m: int) -> np.ndarray:
    g = np.asarray(eta_grid, dtype=float)
    if g.ndim == 2:
        if g.shape[1] != m:
            raise ValueError(f"eta grid rows must have {m} entries")
        return g
    if m <= 1:
        return g.reshape(-1, 1) if m == 1 else np.zeros((1, 0)) if np.all(g == 0) else \
            _raise(ValueError("nonzero eta given without external scores"))
    return np.array(list(itertools.product(g, repeat=m)))


def _raise(exc):
    raise exc


def cv_grid(foldset: FoldSet, eta_rows, lambdas=None, opts: CoxFitOptions | None = None):
    """CV-PL for every (eta row, lambda); returns ``(cvpl, nonconverged)``."""
    eta_rows = np.asarray(eta_rows, dtype=float)
    # warm starts follow the sorted unique rows, so the values never depend on grid order
    eta_rows, back = np.unique(eta_rows.reshape(len(eta_rows), -1), axis=0, return_inverse=True)
    L = 1 if lambdas is None else len(lambdas)
    cvpl = np.zeros((len(eta_rows), L))
    bad = 0
    for f, prob in enumerate(foldset.train):
        beta = None
        for g, etas in enumerate(eta_rows):
            if lambdas is None:
                fit = newton_fit(prob, prob.target(etas), opts, beta, eta=etas)
                # warm start only from a settled fit
                beta = fit.beta_hat if fit.converged else None
                bad += not fit.converged
                cvpl[g, 0] += foldset.criterion(f, fit.beta_hat)
            else:
                solver = LassoSolver(prob, etas)
                b = np.zeros(prob.p)
                u = solver.score(b)
                lam_prev = max(solver.lambda_max(), lambdas[0])
                for l, lam in enumerate(lambdas):
                    active = (np.abs(u) >= 2 * lam - lam_prev) | (b != 0)
                    b, ok, _, u = solver.solve(lam, b, active)
                    bad += not ok
                    lam_prev = lam
                    cvpl[g, l] += foldset.criterion(f, b)
    return cvpl[back.ravel()], bad


def vvh_cvpl(dataset: SurvivalDataset, exts, eta, lam=None, folds=None,
             opts: CoxFitOptions | None = None) -> float:
    """Sum over folds of ``l_full(b_-v) - l_-v(b_-v)`` for the fit ``b_-v`` without fold v."""
    exts = _as_list(exts)
    fs = FoldSet(dataset, exts, folds)
    rows = _eta_rows(np.atleast_1d(eta).reshape(1, -1) if exts else [0.0], len(exts))
    cvpl, _ = cv_grid(fs, rows, None if lam is None else np.array([float(lam)]), opts)
    return float(cvpl[0, 0])


def _select(cvpl, eta_rows, lambdas):
    best = cvpl.max()
    # smaller total eta first, then larger lambda
    eta_order = sorted(range(len(eta_rows)), key=lambda g: (eta_rows[g].sum(), tuple(eta_rows[g])))
    lam_order = range(cvpl.shape[1]) if lambdas is None else \
        sorted(range(len(lambdas)), key=lambda l: -lambdas[l])
    for g in eta_order:
        for l in lam_order:
            if cvpl[g, l] == best:
                return g, l
    raise RuntimeError("cvpl has no finite maximum")


def select_tuning(dataset: SurvivalDataset, exts, eta_grid=None, lambda_grid_=None, V: int = 5,
                  seed: int = 0, opts: CoxFitOptions | None = None, folds=None) -> CvReport:
    """Joint grid search maximising the CV partial likelihood.

    With several external scores a 1-d ``eta_grid`` is expanded to the
    Cartesian product; a 2-d grid lists candidate weight vectors directly.
    """
    exts = _as_list(exts)
    if eta_grid is None:
        eta_grid = default_eta_grid() if exts else [0.0]
    rows = _eta_rows(eta_grid, len(exts))
    if len(rows) == 0:
        raise ValueError("eta grid is empty")
    if folds is None:
        folds = make_folds(dataset.n, V, seed, True, dataset.status)
    lambdas = None
    if lambda_grid_ is not None:
        lambdas = np.asarray(lambda_grid_, dtype=float)
        if np.any(lambdas <= 0):
            raise ValueError("lambda values must be positive")
        order = np.argsort(-lambdas, kind="stable")
        if np.any(np.diff(lambdas[order]) >= 0):
            raise ValueError("lambda grid values must be distinct")
    fs = FoldSet(dataset, exts, folds)
    if lambdas is None:
        cvpl, bad = cv_grid(fs, rows, None, opts)
    else:
        sorted_cv, bad = cv_grid(fs, rows, lambdas[order], opts)
        cvpl = np.empty_like(sorted_cv)
        cvpl[:, order] = sorted_cv
    if bad:
        log.warning("%d fold fits did not converge; their last iterates were used", bad)
    g, l = _select(cvpl, rows, lambdas)
    return CvReport(rows, lambdas, cvpl, rows[g].copy(),
                    None if lambdas is None else float(lambdas[l]),
                    np.asarray(folds), int(seed), bad)


def default_lambda_grid(dataset: SurvivalDataset, exts, eta_grid, n_lambda=100,
                        lambda_min_ratio=None) -> np.ndarray:
    """Log-spaced grid from the largest ``lambda_max`` over the eta candidates."""
    exts = _as_list(exts)
    prob = IntegratedProblem(dataset, exts)
    rows = _eta_rows(eta_grid if exts else [0.0], len(exts))
    lam_max = max(LassoSolver(prob, r).lambda_max() for r in rows)
    if lam_max <= 0:
        raise ValueError("lambda_max is 0: no penalised covariate varies")
    return lambda_grid(lam_max, n_lambda, lambda_min_ratio, dataset.n, dataset.p)

import json
import time

import numpy as np
import pytest

from conftest import random_dataset
from oracles import cox_lasso_exact, cox_lasso_naive
from klcox.core import SurvivalDataset
from klcox.coxkl import ExternalScores, fit_coxkl, prepare
from klcox.lasso import (KKT_TOL, LassoSolver, RegularizationPath, fit_coxkl_lasso, lambda_grid,
                         lambda_max, lasso_path)


def check_kkt(solver, beta, lam):
    u = solver.score(beta)
    zero = beta == 0
    assert np.all(np.abs(u[zero]) <= lam * solver.pf[zero] + KKT_TOL)
    nz = ~zero
    np.testing.assert_allclose(u[nz], lam * solver.pf[nz] * np.sign(beta[nz]), atol=KKT_TOL, rtol=0)


def test_lambda_max_example(two_subjects):
    assert lambda_max(two_subjects, [], []) == pytest.approx(0.25)


def test_lambda_max_constant_covariates():
    ds = SurvivalDataset([1, 2, 3], [1, 1, 0], np.ones((3, 2)))
    assert lambda_max(ds, [], []) == 0.0


def test_zero_at_and_above_lambda_max(rng):
    ds = random_dataset(rng, n=40, p=4)
    e = ExternalScores("e", rng.normal(size=ds.n))
    lm = lambda_max(ds, [e], [1.5])
    for lam in (lm, 1.01 * lm, 10 * lm):
        fit = fit_coxkl_lasso(ds, [e], [1.5], lam)
        assert np.all(fit.beta_hat == 0.0)
    assert np.any(fit_coxkl_lasso(ds, [e], [1.5], 0.9 * lm).beta_hat != 0)


def test_small_lambda_matches_unpenalised(rng):
    ds = random_dataset(rng, n=80, p=3, ties=False)
    e = ExternalScores("e", ds.covariates @ np.array([0.3, 0.1, -0.2]))
    full = fit_coxkl(ds, [e], [0.7])
    fit = fit_coxkl_lasso(ds, [e], [0.7], 1e-9)
    np.testing.assert_allclose(fit.beta_hat, full.beta_hat, atol=1e-4)


def test_kkt_along_path_and_zero_first_entry(rng):
    for _ in range(5):
        ds = random_dataset(rng, n=50, p=6)
        e = ExternalScores("e", rng.normal(size=ds.n))
        path = lasso_path(ds, [e], [0.8], n_lambda=25, lambda_min_ratio=0.01)
        solver = LassoSolver(prepare(ds, [e]), [0.8])
        assert path.nonzero_counts[0] == 0
        assert np.all(np.diff(path.lambdas) < 0)
        assert path.converged.all()
        for lam, beta in zip(path.lambdas, path.coefficients):
            check_kkt(solver, beta, lam)


def test_path_endpoint_matches_cold_start(rng):
    ds = random_dataset(rng, n=60, p=5)
    path = lasso_path(ds, [], [], n_lambda=30, lambda_min_ratio=0.02)
    cold = fit_coxkl_lasso(ds, [], [], path.lambdas[-1])
    np.testing.assert_allclose(path.coefficients[-1], cold.beta_hat, atol=1e-5)


def test_eta_zero_path_matches_naive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(5):
        ds = random_dataset(rng, n=5, p=3, ties=False, censor=0.0)
        lm = lambda_max(ds, [], [])
        lams = lm * np.array([0.6, 0.3, 0.1])
        path = lasso_path(ds, [], [], lambdas=lams)
        for lam, beta in zip(lams, path.coefficients):
            naive = cox_lasso_naive(ds.time, ds.status, ds.covariates, lam)
            np.testing.assert_allclose(beta, naive, atol=1e-5)
            support = np.flatnonzero(beta)
            if support.size:
                exact = cox_lasso_exact(ds.time, ds.status, ds.covariates, lam, support,
                                        np.sign(beta[support]))
                np.testing.assert_allclose(beta, exact, atol=1e-7)


def test_duplicated_columns_objective(rng):
    base = random_dataset(rng, n=40, p=1)
    ds = base.with_covariates(np.column_stack([base.covariates, base.covariates]))
    lam = 0.3 * lambda_max(ds, [], [])
    fit = fit_coxkl_lasso(ds, [], [], lam)
    # any split of the total coefficient is optimal; search the total on a grid
    solver = LassoSolver(prepare(ds), [])
    grid = np.linspace(-3, 3, 6001)
    vals = [solver.penalised_objective(np.array([b, 0.0]), lam) for b in grid]
    k = int(np.argmax(vals))
    fine = np.linspace(grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)], 2001)
    best = max(solver.penalised_objective(np.array([b, 0.0]), lam) for b in fine)
    assert fit.objective == pytest.approx(best, abs=1e-8)
    assert fit.objective >= best - 1e-10


def test_constant_column_pinned(rng, caplog):
    ds = random_dataset(rng, n=30, p=2)
    z = np.column_stack([ds.covariates, np.full(ds.n, 3.0)])
    fit = fit_coxkl_lasso(ds.with_covariates(z), [], [], 0.01)
    assert fit.beta_hat[2] == 0.0
    assert "pinned" in caplog.text


def test_penalty_factor_zero_leaves_coefficient_free(rng):
    ds = random_dataset(rng, n=60, p=3)
    pf = np.array([0.0, 1.0, 1.0])
    lm = lambda_max(ds, [], [], penalty_factor=pf)
    fit = fit_coxkl_lasso(ds, [], [], 2 * lm, penalty_factor=pf)
    assert fit.beta_hat[0] != 0 and np.all(fit.beta_hat[1:] == 0)


def test_errors(rng):
    ds = random_dataset(rng, n=20, p=2)
    with pytest.raises(ValueError):
        fit_coxkl_lasso(ds, [], [], 0.0)
    with pytest.raises(ValueError):
        lambda_grid(1.0, n_lambda=1)
    with pytest.raises(ValueError):
        LassoSolver(prepare(ds.with_covariates(np.zeros((ds.n, 0)))), [])


def test_default_grid_ratio():
    g = lambda_grid(2.0, 5, None, n=10, p=100)
    assert g[0] == 2.0 and g[-1] == pytest.approx(0.1)
    g = lambda_grid(2.0, 5, None, n=100, p=10)
    assert g[-1] == pytest.approx(2e-4)


def test_path_json_round_trip(rng):
    ds = random_dataset(rng, n=30, p=4)
    path = lasso_path(ds, [], [], n_lambda=6)
    d = json.loads(path.to_json())
    assert {"lambdas", "nonzero_counts", "coefficients"} <= set(d)
    back = RegularizationPath.from_dict(d)
    np.testing.assert_array_equal(back.coefficients, path.coefficients)


def test_setting2_sized_path_is_fast(rng):
    ds = random_dataset(rng, n=50, p=20)
    t = time.perf_counter()
    lasso_path(ds, [], [], n_lambda=100)
    # informative bound, generous for slow machines
    assert time.perf_counter() - t < 10

"""Simulation studies: data generators, external models and the Monte Carlo runner.

Setting I estimates six coefficients with one external Cox score; Setting II
compares predictions when the truth has an interaction and two unobserved
covariates, with one or two external scores (boosted trees, Cox, or null).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .core import DataError, SurvivalDataset
from .cox import CoxFitOptions, CoxKLFit, fit_cox
from .coxkl import ExternalScores, IntegratedProblem, fit_coxkl
from .metrics import c_index
from .tuning import make_folds, select_tuning

log = logging.getLogger(__name__)

BETA_SETTING1 = (0.3, -0.3, 0.3, -0.3, 0.3, -0.3)
# main effects, Z1*Z5 interaction, hidden u1 and u2
BETA_SETTING2 = (0.3, -0.3, 0.3, -0.3, -0.3, 0.5, 1.0, 1.0)

N_REFERENCE = 200_000
# spawn keys reserved for non-replicate streams
_KEY_CALIBRATE = 1 << 40
_KEY_EXTERNAL = 1 << 41

AGGREGATION_NOTE = ("bias = mean_j |mean(b_j) - beta_j|; se = mean_j sd(b_j); mse = bias^2 + se^2 "
                    "(table layout); mse_mean = mean_j mean((b_j - beta_j)^2); c_index on an "
                    "independent test set")


# ---------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class ExternalSpec:
    p_l: float
    covariates: tuple  # 1-based indices of observed covariates
    family: str = "cox"  # cox | boosted | null

    def __post_init__(self):
        if not 0 <= self.p_l <= 1:
            raise ValueError("p_l must lie in [0, 1]")
        if self.family not in ("cox", "boosted", "null"):
            raise ValueError(f"unknown external family {self.family!r}")
        object.__setattr__(self, "covariates", tuple(int(c) for c in self.covariates))


@dataclass(frozen=True)
class SimScenario:
    setting: int
    n_internal: int
    censoring_target: float
    p_l_internal: float = 1.0
    external_spec: tuple = ()
    n_external: int = 10_000
    n_test: int = 1000
    name: str = ""
    beta_true: tuple = field(default=None)

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise ValueError("setting must be 1 or 2")
        if self.beta_true is None:
            object.__setattr__(self, "beta_true",
                               BETA_SETTING1 if self.setting == 1 else BETA_SETTING2)
        if not 0 <= self.censoring_target <= 0.95:
            raise ValueError("censoring_target must lie in [0, 0.95]")
        if not 0 <= self.p_l_internal <= 1:
            raise ValueError("p_l_internal must lie in [0, 1]")
        specs = tuple(s if isinstance(s, ExternalSpec) else ExternalSpec(**s)
                      for s in self.external_spec)
        for s in specs:
            if not set(s.covariates) <= set(range(1, self.p + 1)):
                raise ValueError(f"external covariates {s.covariates} outside 1..{self.p}")
        object.__setattr__(self, "external_spec", specs)
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))

    @property
    def p(self) -> int:
        """Observed covariates used by the fitted models."""
        return 6 if self.setting == 1 else 5

    @property
    def beta_observed(self) -> np.ndarray:
        return np.array(self.beta_true[:self.p])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["external_spec"] = [asdict(s) for s in self.external_spec]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        d = dict(d)
        d["external_spec"] = tuple(ExternalSpec(**s) for s in d.get("external_spec", ()))
        if d.get("beta_true") is not None:
            d["beta_true"] = tuple(d["beta_true"])
        return cls(**d)


_EXTERNALS_1 = {
    "E1": (ExternalSpec(1.0, (1, 2, 3, 4, 5, 6)),),
    "E2": (ExternalSpec(0.5, (1, 3, 5, 6)),),
    "E3": (ExternalSpec(0.0, (1, 5)),),
}
_EXTERNALS_2 = {
    "E4": (ExternalSpec(1.0, (1, 2, 3, 4, 5), "boosted"), ExternalSpec(1.0, (1, 2, 3, 4, 5))),
    "E5": (ExternalSpec(0.25, (1, 3, 5), "boosted"), ExternalSpec(0.25, (2, 4))),
    "E6": (ExternalSpec(0.0, (2, 4), "boosted"), ExternalSpec(0.0, (), "null")),
    # single external Cox score, homogeneous or not
    "H1": (ExternalSpec(1.0, (1, 3, 5)),),
    "H0": (ExternalSpec(0.0, (1, 3, 5)),),
}


def _cells():
    out = {}
    for n, c in [(50, 60), (50, 30), (100, 30)]:
        for e, spec in _EXTERNALS_1.items():
            name = f"n{n}_c{c}_{e}"
            out[name] = SimScenario(1, n, c / 100, 1.0, spec, name=name)
    for e in ("E4", "E5", "E6"):
        name = f"n50_c30_{e}"
        out[name] = SimScenario(2, 50, 0.30, 1.0, _EXTERNALS_2[e], name=name)
    grid = {(n, 60) for n in (50, 75, 100)} | {(50, c) for c in (60, 40, 20)}
    for n, c in sorted(grid):
        for e in ("H1", "H0"):
            name = f"n{n}_c{c}_{e}"
            out[name] = SimScenario(2, n, c / 100, 1.0, _EXTERNALS_2[e], name=name)
    return out


CELLS = _cells()
SETTING1_CELLS = tuple(f"n{n}_c{c}_{e}" for n, c in [(50, 60), (50, 30), (100, 30)]
                     for e in ("E1", "E2", "E3"))


def get_cell(name: str) -> SimScenario:
    try:
        return CELLS[name]
    except KeyError:
        raise KeyError(f"unknown cell {name!r}; valid cells: {', '.join(CELLS)}") from None


# ---------------------------------------------------------------- generators

@dataclass
class Covariates:
    observed: np.ndarray
    hidden: np.ndarray  # (n, 2) unobserved u1, u2 in Setting II, else (n, 0)
    latent: np.ndarray  # Z^l, never observed


def generate_covariates(n: int, p_l: float, setting: int, rng) -> Covariates:
    """Z1, Z2 AR(1) normals (rho 0.5); Z3, Z4 Bernoulli(0.5); Z5 ~ N(2 Z^l, 1),
    Z6 ~ N(-2 Z^l, 1) with latent Z^l ~ Bernoulli(p_l). Setting II keeps Z1..Z5
    and draws hidden u1 ~ Bernoulli(0.5), u2 ~ N(0, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z12 = rng.multivariate_normal([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]], size=n)
    z34 = rng.binomial(1, 0.5, size=(n, 2)).astype(float)
    zl = rng.binomial(1, p_l, size=n).astype(float)
    z5 = rng.normal(2 * zl, 1.0)
    z6 = rng.normal(-2 * zl, 1.0)
    if setting == 1:
        return Covariates(np.column_stack([z12, z34, z5, z6]), np.zeros((n, 0)), zl)
    u = np.column_stack([rng.binomial(1, 0.5, size=n).astype(float), rng.normal(size=n)])
    return Covariates(np.column_stack([z12, z34, z5]), u, zl)


def full_design(cov: Covariates, setting: int) -> np.ndarray:
    """Columns multiplying the full true coefficient vector."""
    z = cov.observed
    if setting == 1:
        return z
    return np.column_stack([z, z[:, 0] * z[:, 4], cov.hidden])


def generate_outcomes(design, beta_full, censor_upper: float, rng):
    """Hazard ``2t exp(Z'b)``: ``T = sqrt(E / exp(Z'b))``, ``E ~ Exp(1)``,
    ``C ~ U(0, censor_upper)``. An infinite bound means no censoring."""
    if not censor_upper > 0:
        raise ValueError("censor_upper must be positive")
    lp = np.asarray(design) @ np.asarray(beta_full, dtype=float)
    t = np.sqrt(rng.exponential(size=lp.shape[0]) * np.exp(-lp))
    if math.isinf(censor_upper):
        return t, np.ones(t.shape[0], dtype=np.int64)
    c = rng.uniform(0.0, censor_upper, size=t.shape[0])
    return np.minimum(t, c), (t <= c).astype(np.int64)


def censoring_rate(t, censor_upper: float) -> float:
    """``P(C < T)`` for ``C ~ U(0, u)`` averaged over event times ``t``."""
    if math.isinf(censor_upper):
        return 0.0
    return float(np.mean(np.minimum(t, censor_upper)) / censor_upper)


def calibrate_censoring(scenario: SimScenario, target_rate: float, tolerance: float = 0.005,
                        seed: int = 0) -> float:
    """Uniform censoring bound giving ``target_rate`` censoring (``inf`` for 0)."""
    if not 0 <= target_rate <= 0.95:
        raise ValueError("target censoring rate must lie in [0, 0.95]")
    if target_rate == 0:
        return math.inf
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_KEY_CALIBRATE,)))
    cov = generate_covariates(N_REFERENCE, scenario.p_l_internal, scenario.setting, rng)
    lp = full_design(cov, scenario.setting) @ np.array(scenario.beta_true)
    t = np.sqrt(rng.exponential(size=N_REFERENCE) * np.exp(-lp))
    # the rate falls monotonically from 1 (u -> 0) to 0 (u -> inf)
    lo, hi = 1e-8 * float(t.min()), 1e4 * float(t.max())
    if not censoring_rate(t, lo) > target_rate > censoring_rate(t, hi):
        raise ValueError(f"censoring rate {target_rate} is unreachable")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        rate = censoring_rate(t, mid)
        if abs(rate - target_rate) <= tolerance / 10:
            return mid
        if rate > target_rate:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


# ---------------------------------------------------------------- external models

@dataclass
class ExternalModel:
    """A fitted external risk model: linear ``coefficients`` (length p) or trees."""

    label: str
    family: str
    covariates: tuple
    coefficients: np.ndarray | None = None
    trees: list = field(default_factory=list)
    learning_rate: float = 0.1

    def score(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.family == "boosted":
            zs = z[:, [c - 1 for c in self.covariates]]
            return self.learning_rate * sum(t.predict(zs) for t in self.trees)
        if self.family == "null":
            return np.zeros(z.shape[0])
        return z @ self.coefficients

    def scores_for(self, dataset: SurvivalDataset) -> ExternalScores:
        coef = self.coefficients if self.family == "cox" else None
        return ExternalScores(self.label, self.score(dataset.covariates), coef)


def fit_boosted_cox(z, time, status, n_rounds=200, learning_rate=0.1, max_depth=3):
    """Gradient boosting of the Cox log partial likelihood with regression trees.

    Each round fits a tree to the current gradient in the log-hazard scores,
    the martingale residuals ``delta_i - exp(F_i) Lambda0(X_i)``.
    """
    from sklearn.tree import DecisionTreeRegressor

    ds = SurvivalDataset(time, status, np.zeros((len(time), 0)))
    order = ds.order
    _, risk_end, d = ds.sorted_view()
    a = ds.status[order].astype(float)
    f = np.zeros(len(time))
    trees = []
    for _ in range(n_rounds):
        g_sorted, _ = kernels.lp_gradient(f[order], a, risk_end, d)
        g = np.empty_like(g_sorted)
        g[order] = g_sorted
        tree = DecisionTreeRegressor(max_depth=max_depth, random_state=0).fit(z, g)
        f += learning_rate * tree.predict(z)
        trees.append(tree)
    return trees


def build_external_model(scenario: SimScenario, spec: ExternalSpec, rng, censor_upper=None,
                         label="external") -> ExternalModel:
    """Simulate an external cohort of ``n_external`` and fit ``spec.family`` on it."""
    p = scenario.p
    if spec.family == "null":
        return ExternalModel(label, "null", spec.covariates, np.zeros(p))
    if censor_upper is None:
        censor_upper = calibrate_censoring(scenario, scenario.censoring_target)
    cov = generate_covariates(scenario.n_external, spec.p_l, scenario.setting, rng)
    time, status = generate_outcomes(full_design(cov, scenario.setting),
                                     scenario.beta_true, censor_upper, rng)
    cols = [c - 1 for c in spec.covariates]
    if spec.family == "cox":
        ds = SurvivalDataset(time, status, cov.observed[:, cols])
        fit = fit_cox(ds)
        if not fit.converged:
            raise RuntimeError(f"external Cox fit for {label!r} did not converge")
        coef = np.zeros(p)
        coef[cols] = fit.beta_hat
        return ExternalModel(label, "cox", spec.covariates, coef)
    trees = fit_boosted_cox(cov.observed[:, cols], time, status)
    return ExternalModel(label, "boosted", spec.covariates, None, trees)


def stacked_baseline(dataset: SurvivalDataset, exts, opts: CoxFitOptions | None = None) -> CoxKLFit:
    """Internal Cox fit with the external scores appended as covariates."""
    exts = [exts] if isinstance(exts, ExternalScores) else list(exts)
    aug = np.column_stack([dataset.covariates, *[e.scores for e in exts]])
    return fit_cox(dataset.with_covariates(aug), opts)


# ---------------------------------------------------------------- experiment runner

@dataclass(frozen=True)
class RunConfig:
    reps: int = 500
    seed: int = 0
    eta_grid: tuple | None = None   # CV candidates; None uses the default for the setting
    sweep_grid: tuple | None = None  # Setting I sweep curves; None uses the default
    folds: int = 5


def default_cv_grid(setting: int, m: int):
    if setting == 1 or m == 1:
        return tuple(np.concatenate([[0.0], np.logspace(-2, 2, 15)]))
    return (0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0)


def default_sweep_grid():
    return tuple(np.concatenate([[0.0], np.logspace(-2, 2, 15)]))


@dataclass
class ReplicateResult:
    rep: int
    coef: dict         # method -> fitted coefficient vector (observed covariates)
    c_index: dict      # method -> test C-index
    selected_eta: np.ndarray
    sweep_coef: np.ndarray | None = None
    sweep_c: np.ndarray | None = None
    sweep_eta: np.ndarray | None = None
    nonconverged: dict = field(default_factory=dict)


def _replicate_rng(seed: int, rep: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


def _simulate_dataset(scenario, n, censor_upper, rng, prefix=""):
    cov = generate_covariates(n, scenario.p_l_internal, scenario.setting, rng)
    t, s = generate_outcomes(full_design(cov, scenario.setting), scenario.beta_true,
                             censor_upper, rng)
    return SurvivalDataset(t, s, cov.observed, [f"{prefix}{i + 1}" for i in range(n)])


def run_replicate(scenario: SimScenario, models, censor_upper, rep, config: RunConfig):
    rng = _replicate_rng(config.seed, rep)
    train = _simulate_dataset(scenario, scenario.n_internal, censor_upper, rng)
    test = _simulate_dataset(scenario, scenario.n_test, censor_upper, rng)
    folds = make_folds(train.n, config.folds, int(rng.integers(2**31)), True, train.status)
    exts = [m.scores_for(train) for m in models]
    test_scores = [m.score(test.covariates) for m in models]

    def cidx(score):
        return c_index(test.time, test.status, score)

    coef, cs, bad = {}, {}, {}
    internal = fit_cox(train)
    coef["internal"] = internal.beta_hat
    cs["internal"] = cidx(test.covariates @ internal.beta_hat)
    bad["internal"] = not internal.converged

    grid = config.eta_grid or default_cv_grid(scenario.setting, len(models))
    report = select_tuning(train, exts, grid, None, config.folds, folds=folds)
    prob = IntegratedProblem(train, exts)
    kl = fit_coxkl(prob, exts, report.selected_eta)
    coef["coxkl"] = kl.beta_hat
    cs["coxkl"] = cidx(test.covariates @ kl.beta_hat)
    bad["coxkl"] = not kl.converged

    st = stacked_baseline(train, exts)
    coef["stacked"] = st.beta_hat[:train.p]
    cs["stacked"] = cidx(np.column_stack([test.covariates, *test_scores]) @ st.beta_hat)
    bad["stacked"] = not st.converged

    for k, (m, s) in enumerate(zip(models, test_scores)):
        name = "external" if len(models) == 1 else f"external{k + 1}"
        if m.family == "cox":
            coef[name] = m.coefficients
        cs[name] = cidx(s) if np.ptp(s) > 0 else 0.5

    res = ReplicateResult(rep, coef, cs, report.selected_eta, nonconverged=bad)
    if scenario.setting == 1 and len(models) == 1:
        sweep = np.asarray(config.sweep_grid or default_sweep_grid(), dtype=float)
        bs = np.zeros((len(sweep), train.p))
        cv = np.zeros(len(sweep))
        beta = None
        for g, eta in enumerate(sweep):
            fit = fit_coxkl(prob, exts, [eta], beta0=beta)
            beta = fit.beta_hat if fit.converged else None
            bs[g] = fit.beta_hat
            cv[g] = cidx(test.covariates @ fit.beta_hat)
        res.sweep_coef, res.sweep_c, res.sweep_eta = bs, cv, sweep
    return res


def _safe_replicate(*args):
    try:
        return run_replicate(*args)
    except (DataError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        log.warning("replicate %d failed: %s", args[3], exc)
        return args[3], repr(exc)


def coef_summary(b, beta) -> dict:
    """Bias, SE and MSE of replicate estimates ``b`` (reps x p).

    ``bias`` and ``se`` average the per-coordinate values; ``mse`` is
    ``bias**2 + se**2`` of those averages, the table convention, while
    ``mse_mean`` averages the per-coordinate empirical MSE.
    """
    b = np.asarray(b, dtype=float)
    bias = float(np.abs(b.mean(axis=0) - beta).mean())
    se = float(b.std(axis=0, ddof=1).mean()) if len(b) > 1 else 0.0
    return {"bias": bias, "se": se, "mse": bias ** 2 + se ** 2,
            "mse_mean": float(((b - beta) ** 2).mean())}


@dataclass
class CellResult:
    scenario: SimScenario
    censor_upper: float
    summary: dict       # method -> {bias, se, mse, c_index, c_index_median}
    selected_eta: np.ndarray
    c_by_rep: dict      # method -> per-replicate test C-index
    sweep: dict | None  # {"eta": [...], "mse": [...], "c_index": [...]}
    replicates: int
    failures: int
    nonconverged: dict
    external_coefficients: list

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "censor_upper": None if math.isinf(self.censor_upper) else self.censor_upper,
            "summary": self.summary,
            "selected_eta": self.selected_eta.tolist(),
            "sweep": self.sweep,
            "replicates": self.replicates,
            "failures": self.failures,
            "nonconverged": self.nonconverged,
            "external_coefficients": self.external_coefficients,
        }


def run_cell(scenario: SimScenario, config: RunConfig, jobs: int = 1) -> CellResult:
    """Monte Carlo over ``config.reps`` replicates of one scenario."""
    censor_upper = calibrate_censoring(scenario, scenario.censoring_target, seed=config.seed)
    models = []
    for k, spec in enumerate(scenario.external_spec):
        rng = np.random.default_rng(
            np.random.SeedSequence(config.seed, spawn_key=(_KEY_EXTERNAL, k)))
        label = "external" if len(scenario.external_spec) == 1 else f"external{k + 1}"
        models.append(build_external_model(scenario, spec, rng, censor_upper, label))
    args = [(scenario, models, censor_upper, r, config) for r in range(config.reps)]
    if jobs == 1:
        out = [_safe_replicate(*a) for a in args]
    else:
        from joblib import Parallel, delayed
        out = Parallel(n_jobs=jobs)(delayed(_safe_replicate)(*a) for a in args)
    good = [r for r in out if isinstance(r, ReplicateResult)]
    failures = len(out) - len(good)
    if not good:
        raise RuntimeError(f"every replicate of {scenario.name or 'scenario'} failed")
    return _aggregate(scenario, censor_upper, models, good, failures)


def _aggregate(scenario, censor_upper, models, reps, failures) -> CellResult:
    beta = scenario.beta_observed
    methods = list(reps[0].c_index)
    summary = {}
    c_by_rep = {}
    for m in methods:
        cvals = np.array([r.c_index[m] for r in reps])
        c_by_rep[m] = cvals.tolist()
        row = {"c_index": float(cvals.mean()), "c_index_median": float(np.median(cvals))}
        if scenario.setting == 1 and m in reps[0].coef:
            b = np.array([r.coef[m] for r in reps])
            row.update(coef_summary(b, beta))
        summary[m] = row
    sweep = None
    if reps[0].sweep_coef is not None:
        bs = np.array([r.sweep_coef for r in reps])  # reps x G x p
        mse = ((bs - beta) ** 2).mean(axis=(0, 2))
        cv = np.array([r.sweep_c for r in reps]).mean(axis=0)
        sweep = {"eta": reps[0].sweep_eta.tolist(), "mse": mse.tolist(), "c_index": cv.tolist()}
    nonconv = {m: int(sum(r.nonconverged.get(m, False) for r in reps))
               for m in reps[0].nonconverged}
    ext_coef = [None if m.coefficients is None else m.coefficients.tolist() for m in models]
    return CellResult(scenario, censor_upper, summary,
                      np.array([r.selected_eta for r in reps]), c_by_rep, sweep, len(reps),
                      failures, nonconv, ext_coef)


@dataclass
class ExperimentReport:
    setting: int
    config: RunConfig
    cells: dict  # name -> CellResult

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        return {
            "setting": self.setting,
            "config": cfg,
            "aggregation": AGGREGATION_NOTE,
            "cells": {k: v.to_dict() for k, v in self.cells.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table_csv(self) -> str:
        """One row per (cell, method): ``cell,method,bias,se,mse,c_index``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "method", "bias", "se", "mse", "c_index"])
        for name, cell in self.cells.items():
            for method, row in cell.summary.items():
                w.writerow([name, method, *[_fmt(row.get(k)) for k in
                                            ("bias", "se", "mse", "c_index")]])
        return buf.getvalue()

    def long_csv(self) -> str:
        """Plot-ready ``eta,metric,value,method,cell`` rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta", "metric", "value", "method", "cell"])
        for name, cell in self.cells.items():
            if cell.sweep is not None:
                for metric in ("mse", "c_index"):
                    for eta, v in zip(cell.sweep["eta"], cell.sweep[metric]):
                        w.writerow([_fmt(eta), metric, _fmt(v), "coxkl", name])
            for method, vals in cell.c_by_rep.items():
                for v in vals:
                    w.writerow(["", "c_index_rep", _fmt(v), method, name])
            for row in cell.selected_eta:
                for k, v in enumerate(row):
                    w.writerow([_fmt(v), f"selected_eta{k + 1}", _fmt(v), "coxkl", name])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


def _run(setting, cell_names, config, jobs):
    cells = {}
    for name in cell_names:
        sc = get_cell(name)
        if sc.setting != setting:
            raise ValueError(f"cell {name!r} belongs to setting {sc.setting}")
        cells[name] = run_cell(sc, config, jobs)
    return ExperimentReport(setting, config, cells)


def run_setting1(cells=SETTING1_CELLS, config: RunConfig = RunConfig(), jobs: int = 1):
    return _run(1, cells, config, jobs)


def run_setting2(cells=("n50_c30_E4", "n50_c30_E5", "n50_c30_E6"),
                 config: RunConfig = RunConfig(), jobs: int = 1):
    return _run(2, cells, config, jobs)

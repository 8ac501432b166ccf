"""KL-penalised Cox regression with external risk scores.

For an external score ``r`` the penalised objective
``l(b) - eta * D_KL(b)`` is, up to the factor ``1 + eta`` and a constant,

    sum_k [ ((Z_k + eta * Zt_k) / (1 + eta))' b - d_k log sum_{R_k} exp(Z'b) ]

where ``Zt_k`` is the ``exp(r)``-weighted mean of the at-risk covariates.
Several scores add one such term each. Because
``sum_k d_k Zt_k = sum_i E_i Z_i`` with ``E_i`` the expected event count of
subject ``i`` under the external score (a Breslow cumulative hazard), the
integrated model is a Cox model with fractional event weights
``(delta_i + sum_m eta_m E_i^m) / (1 + sum_m eta_m)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DataError, SurvivalDataset
from .cox import CoxFitOptions, CoxKLFit, RiskProblem, _check_beta, newton_fit


@dataclass(frozen=True)
class ExternalScores:
    """Per-record external risk scores ``r(Z_i, beta_tilde)``, aligned to a dataset."""

    label: str
    scores: np.ndarray
    linear_coefficients: np.ndarray | None = None

    def __post_init__(self):
        s = np.array(self.scores, dtype=float)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise DataError(f"external scores {self.label!r} must be a finite 1-d array")
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)
        if self.linear_coefficients is not None:
            object.__setattr__(self, "linear_coefficients",
                               np.array(self.linear_coefficients, dtype=float))

    @classmethod
    def from_coefficients(cls, dataset: SurvivalDataset, beta_tilde, label="external"):
        beta_tilde = np.asarray(beta_tilde, dtype=float)
        if beta_tilde.shape != (dataset.p,):
            raise ValueError(f"coefficients must have length {dataset.p}")
        return cls(label, dataset.covariates @ beta_tilde, beta_tilde)

    def subset(self, idx) -> "ExternalScores":
        return ExternalScores(self.label, self.scores[idx], self.linear_coefficients)

    def shifted(self, c: float) -> "ExternalScores":
        return ExternalScores(self.label, self.scores + c, None)


@dataclass(frozen=True)
class PseudoCovariates:
    """Row ``k`` is the externally weighted at-risk covariate mean at ``event_times[k]``."""

    z_tilde: np.ndarray


def _check_alignment(dataset, exts):
    for e in exts:
        if e.scores.shape != (dataset.n,):
            raise DataError(f"external scores {e.label!r} have {e.scores.shape[0]} entries, "
                            f"dataset has {dataset.n} records")


def align_scores(dataset: SurvivalDataset, ids, values, label="external") -> ExternalScores:
    """Reorder ``values`` (keyed by ``ids``) to the dataset's record order.

    Every dataset id must appear exactly once; extra or missing ids are errors.
    """
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate ids in scores {label!r}")
    lookup = dict(zip(ids, values))
    missing = [i for i in dataset.ids if i not in lookup]
    extra = sorted(set(ids) - set(dataset.ids))
    if missing or extra:
        raise DataError(f"scores {label!r} ids do not match dataset "
                        f"(missing {missing[:5]}, unexpected {extra[:5]})")
    return ExternalScores(label, np.array([lookup[i] for i in dataset.ids], dtype=float))


def load_scores(source, dataset: SurvivalDataset, name=None) -> list[ExternalScores]:
    """Read ``id,score`` or ``id,score_1,...,score_M`` CSV aligned to ``dataset``."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="", encoding="utf-8") as fh:
            return load_scores(fh, dataset, name or str(source))
    reader = csv.reader(source)
    header = [h.strip() for h in next(reader)]
    if len(header) < 2 or header[0] != "id":
        raise DataError("scores file must start with an 'id' column", source=name)
    ids, cols = [], [[] for _ in header[1:]]
    for r, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields", row=r, source=name)
        ids.append(row[0].strip())
        for j, cell in enumerate(row[1:]):
            try:
                cols[j].append(float(cell))
            except ValueError:
                raise DataError(f"cannot parse {cell!r}", row=r, column=header[j + 1],
                                source=name) from None
    return [align_scores(dataset, ids, c, label) for label, c in zip(header[1:], cols)]


def write_scores(exts: list[ExternalScores], ids, dest) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["id", *[e.label for e in exts]])
    for i, rid in enumerate(ids):
        w.writerow([rid, *[repr(float(e.scores[i])) for e in exts]])


def expected_events(dataset: SurvivalDataset, ext: ExternalScores) -> np.ndarray:
    """``E_i = exp(r_i) * sum_{k: t_k <= X_i} d_k / sum_{R_k} exp(r)``, record order."""
    r = ext.scores[dataset.order]
    _, risk_end, d = dataset.sorted_view()
    g, _ = kernels.lp_gradient(r, np.zeros_like(r), risk_end, d)
    out = np.empty(dataset.n)
    out[dataset.order] = -g
    return out


class IntegratedProblem(RiskProblem):
    """A :class:`RiskProblem` plus the external-score terms, computed once."""

    def __init__(self, dataset: SurvivalDataset, exts=()):
        super().__init__(dataset)
        exts = list(exts)
        _check_alignment(dataset, exts)
        self.exts = exts
        self.expected = [expected_events(dataset, e) for e in exts]
        # sum_k d_k Zt_k^(m) for each score
        self.ext_sums = [dataset.covariates.T @ e for e in self.expected]

    def check_etas(self, etas):
        etas = np.atleast_1d(np.asarray(etas, dtype=float))
        if etas.shape != (len(self.exts),):
            if len(self.exts) == 0 and np.all(etas == 0):
                return np.zeros(0)
            raise ValueError(f"need {len(self.exts)} eta values, got {etas.size}")
        if np.any(~np.isfinite(etas)) or np.any(etas < 0):
            raise ValueError("eta values must be finite and nonnegative")
        return etas

    def target(self, etas) -> np.ndarray:
        etas = self.check_etas(etas)
        if not etas.size or not np.any(etas):
            return self.event_sum
        num = self.event_sum + sum(e * s for e, s in zip(etas, self.ext_sums))
        return num / (1.0 + etas.sum())

    def event_weights(self, etas) -> np.ndarray:
        """Fractional event weights in descending-time row order."""
        etas = self.check_etas(etas)
        if not etas.size or not np.any(etas):
            return self.status_sorted
        order = self.dataset.order
        num = self.status_sorted + sum(e * ex[order] for e, ex in zip(etas, self.expected))
        return num / (1.0 + etas.sum())


def _as_list(exts):
    if exts is None:
        return []
    if isinstance(exts, ExternalScores):
        return [exts]
    return list(exts)


def prepare(dataset: SurvivalDataset, exts=()) -> IntegratedProblem:
    return IntegratedProblem(dataset, _as_list(exts))


def external_weighted_covariates(dataset: SurvivalDataset, ext: ExternalScores) -> PseudoCovariates:
    _check_alignment(dataset, [ext])
    x, risk_end, _ = dataset.sorted_view()
    r = ext.scores[dataset.order]
    e = np.exp(r - r.max())
    last = risk_end - 1
    z = np.cumsum(e[:, None] * x, axis=0)[last] / np.cumsum(e)[last][:, None]
    return PseudoCovariates(z[::-1])


def kl_divergence(dataset: SurvivalDataset, ext: ExternalScores, beta) -> float:
    """Accumulated partial-likelihood KL information of the model at ``beta``
    from the external score's conditional densities.

    Each of the ``d_k`` tied events at ``t_k`` contributes one risk-set term.
    """
    _check_alignment(dataset, [ext])
    beta = _check_beta(beta, dataset.p)
    x, risk_end, d = dataset.sorted_view()
    r = ext.scores[dataset.order]
    lp = x @ beta
    lse_r, mean_diff, _ = kernels.risk_set_sums(r, (r - lp)[:, None], risk_end, d, False)
    lse_lp, _, _ = kernels.risk_set_sums(lp, x[:, :0], risk_end, d, False)
    return float(mean_diff[0] - lse_r + lse_lp)


def coxkl_objective(dataset: SurvivalDataset, exts, etas, beta) -> float:
    prob = prepare(dataset, exts)
    beta = _check_beta(beta, dataset.p)
    return prob.objective(beta, prob.target(etas))


def coxkl_score_and_information(dataset: SurvivalDataset, exts, etas, beta):
    prob = prepare(dataset, exts)
    beta = _check_beta(beta, dataset.p)
    _, score, info = prob.derivatives(beta, prob.target(etas))
    return score, info


def fit_coxkl(dataset, exts, etas, opts: CoxFitOptions | None = None,
              beta0=None) -> CoxKLFit:
    """CoxKL estimate for integration weights ``etas`` (one per external score).

    ``dataset`` may also be an :class:`IntegratedProblem` built by
    :func:`prepare`, which skips recomputing the external-score terms.
    """
    prob = dataset if isinstance(dataset, IntegratedProblem) else prepare(dataset, exts)
    etas = prob.check_etas(etas)
    return newton_fit(prob, prob.target(etas), opts, beta0, eta=etas)

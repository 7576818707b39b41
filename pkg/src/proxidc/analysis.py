"""End-to-end two-trial analysis: proximal and standard transport estimates of the
source-trial effect in the target population, plus the indirect comparison."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bridges import LINEAR, TrialBridgeProblem, eval_bridge, fit_outcome_bridge, \
    fit_trial_bridge, pseudo_outcome
from .data import BasisSpec, Dataset, build_basis, fit_basis
from .estimators import (EstimateReport, dr_ate_standard, dr_transport_standard,
                         influence_psi_mar, psi_mar, theta_indirect)
from .regression import MarNuisance, fit_linear, fit_logistic_irls, predict, select_lambda_cv

DEFAULT_LAMBDA_GRID = (0.0, 1e-6, 1e-4, 1e-2, 1.0)


@dataclass
class AnalysisOptions:
    e_source: float
    e_target: float
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    k_folds: int = 10
    cv_seed: int = 0
    q_form: str = LINEAR


@dataclass
class AnalysisReport:
    rows: list[EstimateReport]
    diagnostics: dict = field(default_factory=dict)

    def row(self, estimand: str) -> EstimateReport:
        for r in self.rows:
            if r.estimand == estimand:
                return r
        raise KeyError(estimand)


def _x_spec(ds: Dataset, proxy: str | None) -> BasisSpec:
    cat = {j: tuple(ds.levels[name]) for j, name in enumerate(ds.x_names) if name in ds.levels}
    return BasisSpec("ortho_quad", proxy=proxy, categorical=cat)


def _group_mask(ds, trial, arm, observed=True):
    m = (ds.s == trial) & (ds.a == arm)
    return m & (ds.delta == 1) if observed else m


def empirical_pi(ds: Dataset) -> tuple[np.ndarray, dict]:
    """Nonmissing proportion within each (trial, arm) cell, mapped to rows."""
    out = np.full(ds.n, np.nan)
    table = {}
    for trial, arms in ((1, (1, 0)), (0, (-1, 0))):
        for arm in arms:
            cell = _group_mask(ds, trial, arm, observed=False)
            if cell.any():
                table[(trial, arm)] = float(np.mean(ds.delta[cell] == 1))
                out[cell] = table[(trial, arm)]
    return out, table


def fit_outcome_models(ds: Dataset, design: np.ndarray) -> dict:
    """Linear outcome regression per (trial, arm) on observed rows; predictions on all rows."""
    m_hat = {}
    for trial, arms in ((1, (1, 0)), (0, (-1, 0))):
        for arm in arms:
            obs = _group_mask(ds, trial, arm)
            if obs.sum() >= design.shape[1]:
                fit = fit_linear(design[obs], ds.y[obs])
                m_hat[(trial, arm)] = design @ fit.coef
    return m_hat


def fit_source_mu(ds: Dataset, pi_rows: np.ndarray, x_spec: BasisSpec) -> MarNuisance:
    """Per-arm linear mu on (1, Z, W, X~) fitted on observed source rows."""
    spec = BasisSpec("ortho_quad", proxy="z", categorical=x_spec.categorical, ortho=x_spec.ortho)
    src = np.flatnonzero(ds.source)
    zx = build_basis(ds, spec, src)
    design = np.column_stack([zx[:, :1 + ds.z.shape[1]], ds.w[src], zx[:, 1 + ds.z.shape[1]:]])
    mu = {}
    for arm in (0, 1):
        obs = (ds.a[src] == arm) & (ds.delta[src] == 1)
        mu[arm] = design @ fit_linear(design[obs], ds.y[src][obs]).coef

    def full(v):
        out = np.full(ds.n, np.nan)
        out[src] = v
        return out

    return MarNuisance(pi=np.where(ds.source, pi_rows, np.nan), mu0=full(mu[0]), mu1=full(mu[1]))


def _cv_h(ds, h_spec, b_spec, mar, opts):
    def score(lam, train, test):
        h = fit_outcome_bridge(ds, h_spec, b_spec, lam=lam, mar=mar, rows=train)
        use, resp = pseudo_outcome(ds, mar)
        keep = np.isin(use, test)
        use, resp = use[keep], resp[keep]
        if not len(use):
            return np.nan
        g = build_basis(ds, b_spec, use).T @ (resp - build_basis(ds, h_spec, use) @ h.coef)
        g = g / len(use)
        return float(g @ g)

    return select_lambda_cv(score, opts.lambda_grid, ds.n, opts.k_folds, opts.cv_seed,
                            return_scores=True)


def _cv_q(ds, q_spec, c_spec, opts):
    def score(lam, train, test):
        q = fit_trial_bridge(ds, q_spec, c_spec, opts.q_form, lam=lam, rows=train)
        if not q.converged:
            return np.nan
        r = TrialBridgeProblem(ds, q_spec, c_spec, opts.q_form, rows=test).residuals(q.coef)
        return float(r @ r)

    return select_lambda_cv(score, opts.lambda_grid, ds.n, opts.k_folds, opts.cv_seed,
                            return_scores=True)


def analyze(ds: Dataset, opts: AnalysisOptions) -> AnalysisReport:
    """Six-row report: psi (standard, proximal), theta (standard, proximal), ATE per trial."""
    ds = ds.with_(e1=np.where(ds.source, opts.e_source, np.nan))
    x_spec = fit_basis(ds, _x_spec(ds, None))
    h_spec = BasisSpec("ortho_quad", proxy="w", categorical=x_spec.categorical, ortho=x_spec.ortho)
    b_spec = BasisSpec("ortho_quad", proxy="z", categorical=x_spec.categorical, ortho=x_spec.ortho)
    x_design = build_basis(ds, x_spec)
    e_by_trial = {1: opts.e_source, 0: opts.e_target}

    pi_rows, pi_table = empirical_pi(ds)
    mar = fit_source_mu(ds, pi_rows, x_spec)

    lam_h, h_scores = _cv_h(ds, h_spec, b_spec, mar, opts)
    lam_q, q_scores = _cv_q(ds, b_spec, h_spec, opts)
    h = fit_outcome_bridge(ds, h_spec, b_spec, lam=lam_h, mar=mar)
    q = fit_trial_bridge(ds, b_spec, h_spec, opts.q_form, lam=lam_q)
    hv, qv = eval_bridge(h, ds), eval_bridge(q, ds)
    point = psi_mar(ds, hv, qv, mar)
    psi_prox = EstimateReport.from_influence(
        "psi_proximal", point, influence_psi_mar(ds, hv, qv, mar, point),
        {"lambda_h": lam_h, "lambda_q": lam_q, "q_converged": q.converged,
         "q_form": opts.q_form, "q_clipped": q.diagnostics.get("clipped", 0)})

    m_hat = fit_outcome_models(ds, x_design)
    p_hat = predict(fit_logistic_irls(x_design, ds.s.astype(float)), x_design)
    psi_std = dr_transport_standard(ds, m_hat, p_hat, pi_rows, e_by_trial, "psi_standard")
    ate_t = dr_ate_standard(ds, 0, (-1, 0), m_hat, pi_rows, e_by_trial, "ate_target")
    ate_s = dr_ate_standard(ds, 1, (1, 0), m_hat, pi_rows, e_by_trial, "ate_source")
    theta_std = theta_indirect(ate_t, psi_std, estimand="theta_standard")
    theta_prox = theta_indirect(ate_t, psi_prox, estimand="theta_proximal")
    diag = {"lambda_h": lam_h, "lambda_q": lam_q, "cv_scores_h": h_scores,
            "cv_scores_q": q_scores, "pi": pi_table, "n_source": int(ds.source.sum()),
            "n_target": ds.n0}
    return AnalysisReport([psi_std, psi_prox, theta_std, theta_prox, ate_t, ate_s], diag)


def joint_se(a: EstimateReport, b: EstimateReport) -> float:
    """Standard error of a.point - b.point from the difference of influence functions."""
    phi = a.influence - b.influence
    return float(np.sqrt(np.mean(phi ** 2) / len(phi)))

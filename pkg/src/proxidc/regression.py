"""Nuisance regressions: ridge least squares, IRLS logistic regression, k-fold lambda selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)


class RankDeficiencyError(np.linalg.LinAlgError):
    """Normal equations are singular; ``columns`` names the dependent column set."""

    def __init__(self, columns):
        self.columns = tuple(int(c) for c in columns)
        super().__init__(f"rank-deficient design; dependent columns {self.columns}")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearFit:
    coef: np.ndarray
    lam: float
    penalty_mask: np.ndarray
    n: int


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int


def dependent_columns(mat: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Columns with nonzero loading on the numerical null space of ``mat``."""
    _, sv, vt = np.linalg.svd(mat)
    null = vt[sv <= rtol * sv.max()] if sv.size else vt
    if null.size == 0:
        return np.array([], dtype=int)
    return np.flatnonzero(np.abs(null).max(axis=0) > 1e-8)


def solve_ridge_normal(lhs: np.ndarray, rhs: np.ndarray, rtol: float = 1e-13) -> np.ndarray:
    """Solve a symmetric PSD system, raising RankDeficiencyError if numerically singular."""
    sv = np.linalg.svd(lhs, compute_uv=False)
    if sv.size and (sv.min() <= rtol * sv.max() or not np.isfinite(sv).all()):
        raise RankDeficiencyError(dependent_columns(lhs))
    return np.linalg.solve(lhs, rhs)


def fit_linear(design, response, weights=None, lam: float = 0.0, penalty_mask=None) -> LinearFit:
    """Weighted ridge least squares.

    Minimizes sum_i w_i (y_i - d_i'b)^2 + lam * b' diag(mask) b.
    """
    d = np.asarray(design, float)
    y = np.asarray(response, float)
    if d.ndim == 1:
        d = d[:, None]
    n, k = d.shape
    mask = np.ones(k) if penalty_mask is None else np.asarray(penalty_mask, float)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if weights is None:
        dw = d
    else:
        w = np.asarray(weights, float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        dw = d * w[:, None]
    lhs = dw.T @ d
    if lam > 0:
        lhs = lhs + lam * np.diag(mask)
    coef = solve_ridge_normal(lhs, dw.T @ y)
    return LinearFit(coef=coef, lam=float(lam), penalty_mask=mask, n=n)


def logistic_loglik(coef, design, response) -> float:
    eta = design @ coef
    return float(np.sum(response * eta - np.logaddexp(0.0, eta)))


def logistic_score(coef, design, response) -> np.ndarray:
    return design.T @ (response - expit(design @ coef))


def fit_logistic_irls(design, response, max_iter: int = 100, tol: float = 1e-10,
                      separation_bound: float = 1e3) -> LogisticFit:
    """Newton/IRLS for logistic regression with step-halving on likelihood decrease."""
    d = np.asarray(design, float)
    y = np.asarray(response, float)
    if d.ndim == 1:
        d = d[:, None]
    if y.min() == y.max():
        raise ValueError("class absent")
    coef = np.zeros(d.shape[1])
    ll = logistic_loglik(coef, d, y)
    for it in range(1, max_iter + 1):
        p = expit(d @ coef)
        score = d.T @ (y - p)
        if np.max(np.abs(score)) < tol:
            if np.max(np.abs(y - p)) < 1e-6:
                raise ConvergenceError("separation detected: fitted probabilities are 0 or 1")
            return LogisticFit(coef=coef, converged=True, iterations=it - 1)
        info = (d * (p * (1 - p))[:, None]).T @ d
        step = solve_ridge_normal(info, score)
        t = 1.0
        while True:
            cand = coef + t * step
            ll_new = logistic_loglik(cand, d, y)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t /= 2
        coef, ll = cand, ll_new
        if np.max(np.abs(coef)) > separation_bound:
            raise ConvergenceError("separation detected: logistic coefficients diverge")
    score = logistic_score(coef, d, y)
    if np.max(np.abs(score)) < tol:
        return LogisticFit(coef=coef, converged=True, iterations=max_iter)
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")


def predict(fit, design) -> np.ndarray:
    d = np.asarray(design, float)
    if d.ndim == 1:
        d = d[None, :]
    if d.shape[1] != len(fit.coef):
        raise ValueError(f"design has {d.shape[1]} columns, fit expects {len(fit.coef)}")
    eta = d @ fit.coef
    return expit(eta) if isinstance(fit, LogisticFit) else eta


def kfold_indices(n: int, k_folds: int, seed: int) -> list[np.ndarray]:
    if k_folds > n:
        raise ValueError("more folds than observations")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[i::k_folds]) for i in range(k_folds)]


def select_lambda_cv(score_fold: Callable[[float, np.ndarray, np.ndarray], float],
                     grid: Sequence[float], n: int, k_folds: int = 10, seed: int = 0,
                     return_scores: bool = False):
    """Pick the grid value minimizing the mean held-out criterion.

    ``score_fold(lam, train_idx, test_idx)`` fits on the training indices and returns
    the held-out criterion; it may raise or return NaN when the fit fails. Ties go to
    the largest lambda.
    """
    grid = sorted(set(float(g) for g in grid))
    if not grid:
        raise ValueError("empty lambda grid")
    if len(grid) == 1:
        return (grid[0], {grid[0]: np.nan}) if return_scores else grid[0]
    folds = kfold_indices(n, k_folds, seed)
    everything = np.arange(n)
    scores = {}
    for lam in grid:
        vals = []
        for test in folds:
            train = np.setdiff1d(everything, test, assume_unique=True)
            try:
                v = float(score_fold(lam, train, test))
            except (np.linalg.LinAlgError, ConvergenceError, FloatingPointError):
                v = np.nan
            vals.append(v)
        vals = np.asarray(vals)
        scores[lam] = float(np.mean(vals[np.isfinite(vals)])) if np.isfinite(vals).any() else np.nan
    finite = {k: v for k, v in scores.items() if np.isfinite(v)}
    if not finite:
        raise ConvergenceError("every lambda failed on every fold")
    best = min(finite.values())
    chosen = max(k for k, v in finite.items() if v <= best * (1 + 1e-12) + 1e-300)
    log.debug("cv scores %s -> %g", scores, chosen)
    return (chosen, scores) if return_scores else chosen


# ---------------------------------------------------------------------------
# Missing-outcome nuisances in the source trial

@dataclass(frozen=True)
class MarNuisance:
    """Per-row predictions (full length, NaN off the source trial).

    ``pi``: P(delta=1 | Z, W, A, X, S=1) at the observed A; ``mu0``/``mu1``: outcome
    regression at A=0 and A=1.
    """

    pi: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray

    def mu_at(self, a) -> np.ndarray:
        return np.where(np.asarray(a) == 1, self.mu1, self.mu0)


def mar_design(ds, a=None) -> np.ndarray:
    """(1, Z, W, X) for the nonresponse model (A appended) on source rows."""
    src = ds.source
    base = np.column_stack([np.ones(src.sum()), ds.z[src], ds.w[src], ds.x[src]])
    if a is None:
        return base
    return np.column_stack([base, a])


def _mu_design(ds, a):
    src = ds.source
    zwx = np.column_stack([ds.z[src], ds.w[src], ds.x[src]])
    a = np.broadcast_to(np.asarray(a, float), (zwx.shape[0],))
    return np.column_stack([np.ones(len(a)), zwx, a, a[:, None] * zwx])


def fit_mar_nuisances(ds, pi_ds=None, mu_ds=None) -> MarNuisance:
    """Logistic pi linear in (Z,W,A,X) and linear mu with A x (Z,W,X) interactions.

    ``pi_ds`` / ``mu_ds`` optionally supply transformed copies of ``ds`` (e.g. with
    misspecified proxies) on which the respective model is fitted and evaluated.
    """
    pi_ds = ds if pi_ds is None else pi_ds
    mu_ds = ds if mu_ds is None else mu_ds
    src = ds.source
    a_src = ds.a[src]
    d_src = ds.delta[src].astype(float)
    pi_fit = fit_logistic_irls(mar_design(pi_ds, a_src), d_src)
    pi_src = predict(pi_fit, mar_design(pi_ds, a_src))

    obs = d_src == 1
    design = _mu_design(mu_ds, a_src)
    mu_fit = fit_linear(design[obs], ds.y[src][obs])
    mu0_src = _mu_design(mu_ds, 0.0) @ mu_fit.coef
    mu1_src = _mu_design(mu_ds, 1.0) @ mu_fit.coef

    def full(v):
        out = np.full(ds.n, np.nan)
        out[src] = v
        return out

    return MarNuisance(pi=full(pi_src), mu0=full(mu0_src), mu1=full(mu1_src))


def trivial_mar_nuisance(ds) -> MarNuisance:
    """pi = 1 and mu = 0 on source rows: reduces the MAR residual to the complete-data one."""
    src = ds.source.astype(float)
    return MarNuisance(pi=np.where(src == 1, 1.0, np.nan), mu0=np.where(src == 1, 0.0, np.nan),
                       mu1=np.where(src == 1, 0.0, np.nan))

"""Point estimators, influence-function standard errors and confidence intervals."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bridges import EXP_LINEAR, BridgeModel, eval_bridge
from .data import BasisSpec, Dataset, build_basis, fit_basis
from .regression import MarNuisance

Z_95 = 1.96
P_CLIP = 1e-6


class SingularMomentError(np.linalg.LinAlgError):
    pass


@dataclass
class EstimateReport:
    estimand: str
    point: float
    se: float
    n_used: int
    diagnostics: dict = field(default_factory=dict)
    influence: np.ndarray | None = field(default=None, repr=False)

    @property
    def ci_low(self) -> float:
        return self.point - Z_95 * self.se

    @property
    def ci_high(self) -> float:
        return self.point + Z_95 * self.se

    @classmethod
    def from_influence(cls, estimand, point, phi, diagnostics=None):
        phi = np.asarray(phi, float)
        return cls(estimand, float(point), se_from_influence(phi), len(phi),
                   dict(diagnostics or {}), phi)

    def as_row(self) -> dict:
        row = {"estimand": self.estimand, "point": self.point, "se": self.se,
               "ci_low": self.ci_low, "ci_high": self.ci_high, "n_used": self.n_used}
        row.update({k: v for k, v in self.diagnostics.items()})
        return row


def se_from_influence(phi) -> float:
    phi = np.asarray(phi, float)
    return float(np.sqrt(np.mean(phi ** 2) / len(phi)))


def _values(bridge, ds: Dataset) -> np.ndarray:
    if isinstance(bridge, BridgeModel):
        return eval_bridge(bridge, ds)
    vals = np.asarray(bridge, float)
    if vals.ndim == 0:
        vals = np.full(ds.n, float(vals))
    if len(vals) != ds.n:
        raise ValueError("bridge values must have one entry per dataset row")
    return vals


def _alpha(ds: Dataset) -> float:
    if ds.n0 == 0:
        raise ValueError("no target rows")
    return ds.alpha_hat


def _src(v, ds):
    """Zero outside the source trial (so NaN placeholders there do not propagate)."""
    return np.where(ds.s == 1, v, 0.0)


def _tgt(v, ds):
    return np.where(ds.s == 0, v, 0.0)


def _complete_ytilde(ds: Dataset) -> np.ndarray:
    if np.any(ds.delta[ds.source] == 0):
        raise ValueError("outcomes must be complete on the source trial")
    return _src(ds.ytilde, ds)


def psi_h(ds: Dataset, h) -> float:
    """Mean of the outcome bridge over target-trial rows."""
    _alpha(ds)
    return float(np.mean(_values(h, ds)[ds.target]))


def psi_q(ds: Dataset, q) -> float:
    """(1/alpha) P_n S q(Z,X) Ytilde."""
    alpha = _alpha(ds)
    return float(np.mean(_src(_values(q, ds), ds) * _complete_ytilde(ds)) / alpha)


def _dr_terms(ds, h, q):
    hv = _values(h, ds)
    qv = _src(_values(q, ds), ds)
    yt = _complete_ytilde(ds)
    return qv * (yt - _src(hv, ds)) + _tgt(hv, ds), hv, qv, yt


def psi_dr(ds: Dataset, h, q) -> float:
    """(1/alpha) P_n [S q (Ytilde - h) + (1-S) h]."""
    alpha = _alpha(ds)
    terms, *_ = _dr_terms(ds, h, q)
    return float(np.mean(terms) / alpha)


def influence_psi_dr(ds: Dataset, h, q, point: float) -> np.ndarray:
    alpha = _alpha(ds)
    terms, *_ = _dr_terms(ds, h, q)
    return (terms - (ds.s == 0) * point) / alpha


def se_psi_dr(ds: Dataset, h, q, point: float) -> float:
    return se_from_influence(influence_psi_dr(ds, h, q, point))


def _zeta(ds: Dataset, h, q, mar: MarNuisance) -> np.ndarray:
    src = ds.source
    if np.any(~(mar.pi[src] > 0)):
        raise ValueError("nonpositive pi")
    a = np.where(src, ds.a, 0.0)
    e = np.where(a == 1, ds.e1, 1 - ds.e1)
    d = (ds.delta == 1) & src
    resid = np.where(d, ds.y - mar.mu_at(a), 0.0)
    pi = np.where(src, mar.pi, 1.0)
    aug = np.where(d, (2 * a - 1) / e / pi * resid, 0.0)
    inner = aug + _src(mar.mu1 - mar.mu0, ds) - _src(_values(h, ds), ds)
    return _src(_values(q, ds), ds) * inner


def psi_mar(ds: Dataset, h, q, mar: MarNuisance) -> float:
    """(1/alpha) P_n [S zeta(h, q, pi, mu) + (1-S) h]."""
    alpha = _alpha(ds)
    terms = _zeta(ds, h, q, mar) + _tgt(_values(h, ds), ds)
    return float(np.mean(terms) / alpha)


def influence_psi_mar(ds: Dataset, h, q, mar: MarNuisance, point: float) -> np.ndarray:
    alpha = _alpha(ds)
    hv = _values(h, ds)
    return (_zeta(ds, h, q, mar) + _tgt(hv - point, ds)) / alpha


def se_psi_mar(ds: Dataset, h, q, mar: MarNuisance, point: float) -> float:
    return se_from_influence(influence_psi_mar(ds, h, q, mar, point))


def _solve_m(m_mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """M^{-1} rhs (square) or (M'M)^{-1} M' rhs (overidentified)."""
    cond = np.linalg.cond(m_mat)
    if not np.isfinite(cond) or cond > 1e10:
        raise SingularMomentError(f"moment derivative matrix is singular (cond={cond:.3g})")
    if m_mat.shape[0] == m_mat.shape[1]:
        return np.linalg.solve(m_mat, rhs)
    return np.linalg.solve(m_mat.T @ m_mat, m_mat.T @ rhs)


def influence_psi_parametric(ds: Dataset, which: str, bridge: BridgeModel,
                             instrument: BasisSpec, point: float | None = None,
                             nuisance_correction: bool = True) -> np.ndarray:
    """Influence function of psi_h or psi_q with the parametric-bridge correction.

    ``which='h'``: (1-S)/alpha (h - psi) + (1/alpha) P_n[(1-S) dh]' phi_eta, where
    phi_eta = M^{-1} S b (Ytilde - h), M = P_n S b dh'.
    ``which='q'``: (1/alpha)(S q Ytilde - (1-S) psi) + (1/alpha) P_n[S Ytilde dq]' phi_xi,
    where phi_xi = M^{-1} c ((1-S) - S q), M = P_n S c dq'.
    """
    alpha = _alpha(ds)
    n = ds.n
    instrument = fit_basis(ds, instrument)
    src = np.flatnonzero(ds.source)
    yt = _complete_ytilde(ds)
    vals = eval_bridge(bridge, ds)
    basis_src = build_basis(ds, bridge.basis, src)
    grad_src = basis_src * vals[src][:, None] if bridge.form == EXP_LINEAR else basis_src

    if which == "h":
        point = psi_h(ds, bridge) if point is None else point
        base = _tgt(vals - point, ds) / alpha
        if not nuisance_correction:
            return base
        b_src = build_basis(ds, instrument, src)
        m_mat = b_src.T @ grad_src / n
        moments = np.zeros((n, b_src.shape[1]))
        moments[src] = b_src * (yt[src] - vals[src])[:, None]
        tgt = np.flatnonzero(ds.target)
        grad_tgt = build_basis(ds, bridge.basis, tgt)
        if bridge.form == EXP_LINEAR:
            grad_tgt = grad_tgt * vals[tgt][:, None]
        d_vec = grad_tgt.sum(axis=0) / n
        phi = _solve_m(m_mat, moments.T).T
        return base + phi @ d_vec / alpha
    if which == "q":
        qv = _src(vals, ds)
        point = psi_q(ds, bridge) if point is None else point
        base = (qv * yt - (ds.s == 0) * point) / alpha
        if not nuisance_correction:
            return base
        c_all = build_basis(ds, instrument)
        m_mat = c_all[src].T @ grad_src / n
        moments = c_all * ((ds.s == 0) - qv)[:, None]
        d_vec = grad_src.T @ yt[src] / n
        phi = _solve_m(m_mat, moments.T).T
        return base + phi @ d_vec / alpha
    raise ValueError("which must be 'h' or 'q'")


def se_psi_parametric(ds: Dataset, which: str, bridge: BridgeModel, instrument: BasisSpec,
                      point: float | None = None, nuisance_correction: bool = True) -> float:
    return se_from_influence(influence_psi_parametric(ds, which, bridge, instrument, point,
                                                      nuisance_correction))


# ---------------------------------------------------------------------------
# Comparison estimators without proxies

def arm_propensity(a, s, e_by_trial) -> np.ndarray:
    """e(A|S): e_by_trial[s] is the probability of the nonzero arm in trial s."""
    a = np.asarray(a, float)
    e_active = np.where(np.asarray(s) == 1, e_by_trial[1], e_by_trial.get(0, np.nan))
    return np.where(a == 0, 1 - e_active, e_active)


def odds_weights(p_hat):
    """(1 - p)/p after clipping p into [1e-6, 1 - 1e-6]; also returns the clip count."""
    p = np.asarray(p_hat, float)
    clipped = int(np.sum((p < P_CLIP) | (p > 1 - P_CLIP)))
    p = np.clip(p, P_CLIP, 1 - P_CLIP)
    return (1 - p) / p, clipped


def _m_at(m_hat, trial, arm, n):
    if (trial, arm) not in m_hat:
        raise ValueError(f"no outcome model for trial {trial}, arm {arm}")
    return np.asarray(m_hat[(trial, arm)], float).reshape(n)


def dr_transport_standard(ds: Dataset, m_hat: dict, p_hat, pi_hat, e_by_trial: dict,
                          estimand: str = "psi_standard") -> EstimateReport:
    """Doubly robust transport of the source-trial effect of A=1 vs A=0 to the target.

    ``m_hat[(1, a)]``: full-length predictions of E(Y | delta=1, A=a, X, S=1);
    ``p_hat``: P(S=1|X) per row; ``pi_hat``: P(delta=1 | A, S) at each row's own arm.
    """
    alpha = _alpha(ds)
    n = ds.n
    src = ds.source
    a = np.where(src, ds.a, 0.0)
    odds, clipped = odds_weights(p_hat)
    e = arm_propensity(a, ds.s, e_by_trial)
    pi = np.asarray(pi_hat, float)
    if np.any(~(pi[src] > 0)):
        raise ValueError("nonpositive pi")
    m1, m0 = _m_at(m_hat, 1, 1, n), _m_at(m_hat, 1, 0, n)
    m_a = np.where(a == 1, m1, m0)
    obs = src & (ds.delta == 1)
    aug = np.zeros(n)
    aug[obs] = ((2 * a - 1) / (e * pi) * odds * (ds.y - m_a))[obs]
    terms = aug + _tgt(m1 - m0, ds)
    point = np.mean(terms) / alpha
    phi = (terms - (ds.s == 0) * point) / alpha
    return EstimateReport.from_influence(estimand, point, phi, {"p_clipped": clipped})


def dr_ate_standard(ds: Dataset, trial: int, contrast: tuple[int, int], m_hat: dict, pi_hat,
                    e_by_trial: dict, estimand: str | None = None) -> EstimateReport:
    """Within-trial augmented IPW estimate of E{Y(a1) - Y(a0) | S=trial}."""
    a1, a0 = contrast
    in_trial = ds.s == trial
    n = ds.n
    a = np.where(in_trial, ds.a, np.nan)
    for arm in (a1, a0):
        if not np.any(a == arm):
            raise ValueError(f"empty arm {arm} in trial {trial}")
    share = np.mean(in_trial)
    e = arm_propensity(np.nan_to_num(a, nan=0.0), ds.s, e_by_trial)
    pi = np.asarray(pi_hat, float)
    sign = np.where(a == a1, 1.0, np.where(a == a0, -1.0, 0.0))
    m_own = np.zeros(n)
    for arm in (a1, a0):
        m_own = np.where(a == arm, _m_at(m_hat, trial, arm, n), m_own)
    obs = in_trial & (ds.delta == 1) & (sign != 0)
    aug = np.zeros(n)
    aug[obs] = (sign / (e * pi) * (ds.y - m_own))[obs]
    contrast_m = _m_at(m_hat, trial, a1, n) - _m_at(m_hat, trial, a0, n)
    terms = aug + np.where(in_trial, contrast_m, 0.0)
    point = np.mean(terms) / share
    phi = (terms - in_trial * point) / share
    label = estimand or f"ate_trial{trial}_{a1}_vs_{a0}"
    return EstimateReport.from_influence(label, point, phi)


def theta_indirect(ate_target: EstimateReport, psi: EstimateReport, cov_term: float | None = None,
                   estimand: str = "theta") -> EstimateReport:
    """theta = ATE(-1 vs 0 | S=0) - psi, i.e. E{Y(-1) - Y(1) | S=0}.

    Without ``cov_term`` the covariance is taken from the two stored influence functions.
    """
    point = ate_target.point - psi.point
    diag = {"convention": "E{Y(-1)-Y(1)|S=0}; negate for E{Y(1)-Y(-1)|S=0}"}
    if cov_term is None and ate_target.influence is not None and psi.influence is not None:
        phi = ate_target.influence - psi.influence
        return EstimateReport(estimand, point, se_from_influence(phi), len(phi), diag, phi)
    if not cov_term:
        se = float(np.hypot(ate_target.se, psi.se))
    else:
        se = float(np.sqrt(max(ate_target.se ** 2 + psi.se ** 2 - 2 * cov_term, 0.0)))
    return EstimateReport(estimand, point, se,
                          max(ate_target.n_used, psi.n_used), diag)

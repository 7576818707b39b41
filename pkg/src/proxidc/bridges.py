"""Outcome bridge h(W,X) and trial bridge q(Z,X) fitted by (ridge-penalized) GMM."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import BasisSpec, Dataset, build_basis, fit_basis
from .regression import MarNuisance, solve_ridge_normal

LINEAR = "linear"
EXP_LINEAR = "exp"
EXP_CLIP = 50.0


@dataclass(frozen=True, eq=False)
class BridgeModel:
    """A fitted bridge: ``coef'basis(row)`` (linear) or ``exp(coef'basis(row))`` (exp)."""

    form: str
    coef: np.ndarray
    basis: BasisSpec
    target: str  # "h" or "q"
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", True))


def default_mask(k: int, intercept: bool = True) -> np.ndarray:
    mask = np.ones(k)
    if intercept:
        mask[0] = 0.0
    return mask


def _link(form, lin):
    if form == LINEAR:
        return lin, 0
    clipped = int(np.sum(np.abs(lin) > EXP_CLIP))
    return np.exp(np.clip(lin, -EXP_CLIP, EXP_CLIP)), clipped


def _block_present(ds: Dataset, spec: BasisSpec) -> np.ndarray:
    block = spec.proxy_block
    if block == "z":
        if ds.z is None:
            return np.zeros(ds.n, bool)
        return ~np.isnan(ds.z).any(axis=1)
    return np.ones(ds.n, bool)


def eval_bridge(model: BridgeModel, ds: Dataset, rows=None, return_clipped: bool = False):
    """Evaluate a bridge.

    With ``rows`` omitted, returns a full-length vector that is NaN on rows lacking the
    basis inputs (z on target rows for a trial bridge).
    """
    if rows is None:
        present = _block_present(ds, model.basis)
        out = np.full(ds.n, np.nan)
        vals, clipped = _link(model.form, build_basis(ds, model.basis, present) @ model.coef)
        out[present] = vals
    else:
        out, clipped = _link(model.form, build_basis(ds, model.basis, rows) @ model.coef)
    if clipped:
        warnings.warn(f"{clipped} bridge evaluations clipped at |exponent| = {EXP_CLIP}",
                      RuntimeWarning, stacklevel=2)
    return (out, clipped) if return_clipped else out


# ---------------------------------------------------------------------------
# linear GMM

def solve_linear_gmm(instr: np.ndarray, design: np.ndarray, response: np.ndarray,
                     lam: float = 0.0, mask=None, norm: float | None = None) -> np.ndarray:
    """argmin_b || (1/norm) sum_i instr_i (response_i - design_i'b) ||^2 + lam b'Db."""
    norm = len(response) if norm is None else norm
    if instr.shape[1] < design.shape[1]:
        raise ValueError("fewer instruments than parameters")
    return solve_linear_gmm_from_moments(instr.T @ design / norm, instr.T @ response / norm,
                                         lam, mask)


def pseudo_outcome(ds: Dataset, mar: MarNuisance | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows and per-row response used by the outcome-bridge moments.

    Complete data: observed source rows and the transformed outcome. MAR: all source
    rows and (2A-1)/e(A) * delta/pi * (Y - mu_A) + mu_1 - mu_0.
    """
    if mar is None:
        rows = np.flatnonzero(ds.observed)
        return rows, ds.ytilde[rows]
    rows = np.flatnonzero(ds.source)
    a = ds.a[rows]
    e = np.where(a == 1, ds.e1[rows], 1 - ds.e1[rows])
    pi = mar.pi[rows]
    if np.any(~(pi > 0)):
        raise ValueError("nonpositive pi")
    d = ds.delta[rows] == 1
    mu_a = np.where(a == 1, mar.mu1[rows], mar.mu0[rows])
    resid = np.where(d, ds.y[rows] - mu_a, 0.0)
    val = (2 * a - 1) / e * d / pi * resid + mar.mu1[rows] - mar.mu0[rows]
    return rows, val


def h_moments(ds: Dataset, eta, h_basis: BasisSpec, instrument: BasisSpec,
              mar: MarNuisance | None = None) -> np.ndarray:
    """Average of b(Z,X) * (response - h_eta(W,X)) over source rows."""
    rows, resp = pseudo_outcome(ds, mar)
    b = build_basis(ds, instrument, rows)
    c = build_basis(ds, h_basis, rows)
    return b.T @ (resp - c @ np.asarray(eta, float)) / len(rows)


def fit_outcome_bridge(ds: Dataset, h_basis: BasisSpec, instrument: BasisSpec,
                       lam: float = 0.0, mask=None, mar: MarNuisance | None = None,
                       rows=None) -> BridgeModel:
    """Linear outcome bridge by GMM (closed form); MAR mode uses the doubly robust residual.

    ``rows`` optionally restricts fitting to a subset of dataset rows (used by CV).
    """
    h_basis = fit_basis(ds, h_basis)
    instrument = fit_basis(ds, instrument)
    use, resp = pseudo_outcome(ds, mar)
    if rows is not None:
        keep = np.isin(use, rows)
        use, resp = use[keep], resp[keep]
    b = build_basis(ds, instrument, use)
    c = build_basis(ds, h_basis, use)
    mask = default_mask(c.shape[1], h_basis.intercept) if mask is None else mask
    coef = solve_linear_gmm(b, c, resp, lam, mask)
    diag = {"converged": True, "lam": lam, "cond": float(np.linalg.cond(b.T @ c))}
    return BridgeModel(LINEAR, coef, h_basis, "h", diag)


# ---------------------------------------------------------------------------
# trial bridge

class TrialBridgeProblem:
    """Penalized GMM objective ||P_n c (S q_xi - (1-S))||^2 + lam xi'D xi.

    Rows lacking z must be target rows; only source rows enter through q.
    """

    def __init__(self, ds: Dataset, q_basis: BasisSpec, instrument: BasisSpec,
                 form: str = EXP_LINEAR, lam: float = 0.0, mask=None, rows=None):
        rows = np.arange(ds.n) if rows is None else np.asarray(rows)
        s = ds.s[rows]
        self.form = form
        self.n = len(rows)
        c = build_basis(ds, instrument, rows)
        self.c_src = c[s == 1]
        self.c_tgt_sum = c[s == 0].sum(axis=0)
        self.b_src = build_basis(ds, q_basis, rows[s == 1])
        self.k = self.b_src.shape[1]
        if c.shape[1] < self.k:
            raise ValueError("fewer instruments than parameters")
        self.lam = lam
        self.mask = default_mask(self.k, q_basis.intercept) if mask is None else np.asarray(mask)
        self.clipped = 0

    def q_src(self, xi):
        vals, self.clipped = _link(self.form, self.b_src @ xi)
        return vals

    def residuals(self, xi) -> np.ndarray:
        return (self.c_src.T @ self.q_src(xi) - self.c_tgt_sum) / self.n

    def jacobian(self, xi) -> np.ndarray:
        if self.form == LINEAR:
            return self.c_src.T @ self.b_src / self.n
        q = self.q_src(xi)
        lin = self.b_src @ xi
        q = np.where(np.abs(lin) > EXP_CLIP, 0.0, q)
        return self.c_src.T @ (self.b_src * q[:, None]) / self.n

    def objective(self, xi) -> float:
        r = self.residuals(xi)
        return float(r @ r + self.lam * xi @ (self.mask * xi))

    def gradient(self, xi) -> np.ndarray:
        return 2 * (self.jacobian(xi).T @ self.residuals(xi) + self.lam * self.mask * xi)


@dataclass
class LMResult:
    x: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    objective: float
    trace: list


def levenberg_marquardt(problem, x0, nu0: float = 1e-3, max_iter: int = 500,
                        gtol: float = 1e-10) -> LMResult:
    """Damped Gauss-Newton on ``problem.residuals`` plus a ridge term.

    Damping is scaled by the diagonal of the Gauss-Newton matrix; nu is multiplied by 10
    on rejected steps and divided by 10 on accepted ones.
    """
    x = np.asarray(x0, float).copy()
    pen = problem.lam * problem.mask
    r = problem.residuals(x)
    f = float(r @ r + x @ (pen * x))
    trace = [f]
    nu = nu0
    it = 0
    grad = np.full_like(x, np.inf)
    while it < max_iter:
        jac = problem.jacobian(x)
        half_grad = jac.T @ r + pen * x
        grad = 2 * half_grad
        if np.max(np.abs(grad)) < gtol:
            break
        it += 1
        gn = jac.T @ jac + np.diag(pen)
        scale = np.maximum(np.diag(gn), 1e-12 * max(np.max(np.diag(gn)), 1e-300))
        accepted = False
        while nu < 1e30:
            try:
                step = np.linalg.solve(gn + nu * np.diag(scale), -half_grad)
            except np.linalg.LinAlgError:
                nu *= 10
                continue
            x_new = x + step
            r_new = problem.residuals(x_new)
            f_new = float(r_new @ r_new + x_new @ (pen * x_new))
            if np.isfinite(f_new) and f_new <= f:
                accepted = True
                break
            nu *= 10
        if not accepted:
            break
        stalled = f - f_new <= 1e-15 * f and np.max(np.abs(step)) <= 1e-14 * (1 + np.max(np.abs(x)))
        x, r, f = x_new, r_new, f_new
        trace.append(f)
        nu = max(nu / 10, 1e-15)
        if stalled:
            jac = problem.jacobian(x)
            grad = 2 * (jac.T @ r + pen * x)
            break
    else:
        jac = problem.jacobian(x)
        grad = 2 * (jac.T @ r + pen * x)
    gnorm = float(np.max(np.abs(grad)))
    return LMResult(x=x, converged=gnorm < gtol, iterations=it, grad_norm=gnorm,
                    objective=f, trace=trace)


def q_moments(ds: Dataset, xi, q_basis: BasisSpec, instrument: BasisSpec,
              form: str = EXP_LINEAR) -> np.ndarray:
    """P_n instrument(W,X) * (S q_xi(Z,X) - (1-S))."""
    prob = TrialBridgeProblem(ds, fit_basis(ds, q_basis), fit_basis(ds, instrument), form)
    return prob.residuals(np.asarray(xi, float))


def fit_trial_bridge(ds: Dataset, q_basis: BasisSpec, instrument: BasisSpec,
                     form: str = EXP_LINEAR, lam: float = 0.0, mask=None, init=None,
                     rows=None, max_iter: int = 500, gtol: float = 1e-10) -> BridgeModel:
    """Trial bridge by GMM: one linear solve for the linear form, LM for the exp form."""
    q_basis = fit_basis(ds, q_basis)
    instrument = fit_basis(ds, instrument)
    prob = TrialBridgeProblem(ds, q_basis, instrument, form, lam, mask, rows)
    if form == LINEAR:
        g_mat = prob.jacobian(None)
        g_vec = prob.c_tgt_sum / prob.n
        coef = solve_linear_gmm_from_moments(g_mat, g_vec, lam, prob.mask)
        gnorm = float(np.max(np.abs(prob.gradient(coef))))
        diag = {"converged": True, "iterations": 1, "grad_norm": gnorm, "clipped": 0,
                "cond": float(np.linalg.cond(g_mat)), "lam": lam}
        return BridgeModel(LINEAR, coef, q_basis, "q", diag)
    x0 = np.zeros(prob.k) if init is None else np.asarray(init, float)
    res = levenberg_marquardt(prob, x0, max_iter=max_iter, gtol=gtol)
    prob.q_src(res.x)
    jac = prob.jacobian(res.x)
    cond = float(np.linalg.cond(jac)) if np.all(np.isfinite(jac)) else np.inf
    diag = {"converged": res.converged, "iterations": res.iterations,
            "grad_norm": res.grad_norm, "objective": res.objective, "clipped": prob.clipped,
            "cond": cond, "near_singular": cond > 1e8, "lam": lam, "trace": res.trace}
    return BridgeModel(EXP_LINEAR, res.x, q_basis, "q", diag)


def solve_linear_gmm_from_moments(g_mat, g_vec, lam=0.0, mask=None) -> np.ndarray:
    """argmin_b ||g_mat b - g_vec||^2 + lam b'Db."""
    k = g_mat.shape[1]
    if lam == 0 and g_mat.shape[0] == k:
        solve_ridge_normal(g_mat.T @ g_mat, g_mat.T @ g_vec)
        return np.linalg.solve(g_mat, g_vec)
    lhs = g_mat.T @ g_mat + lam * np.diag(default_mask(k) if mask is None else mask)
    return solve_ridge_normal(lhs, g_mat.T @ g_vec)

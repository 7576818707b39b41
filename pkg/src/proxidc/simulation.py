"""Simulation harness: data-generating process, bridge oracle, Monte-Carlo truth,
experiment catalog, replication runner and summary tables."""
from __future__ import annotations

import dataclasses
import functools
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from .bridges import EXP_LINEAR, eval_bridge, fit_outcome_bridge, fit_trial_bridge
from .data import BasisSpec, Dataset, misspecify_proxies
from .estimators import (influence_psi_dr, psi_dr, psi_h, psi_mar, psi_q, se_from_influence,
                         se_psi_mar, se_psi_parametric)
from .regression import fit_mar_nuisances

H_BASIS = BasisSpec("linear_wc")
H_INSTRUMENT = BasisSpec("linear_zb")
Q_BASIS = BasisSpec("linear_zb")
Q_INSTRUMENT = BasisSpec("cubed_wc")

COMPLETE_ESTIMATORS = ("psi_h", "psi_q", "psi_dr")
MAR_ESTIMATORS = ("psi_mar",)

# variable-block ids for the counter-based streams
_BLOCKS = {"x": 0, "u": 1, "s": 2, "a": 3, "z": 4, "w": 5, "y": 6, "delta": 7,
           "site": 8, "miss": 9}


# proxy noise has standard deviation 0.25 per coordinate
PROXY_NOISE_VAR = 0.0625


class NoClosedFormError(ValueError):
    pass


def _ones(k, v=1.0):
    return [float(v)] * k


def _eye(k, v=1.0):
    return (np.eye(k) * v).tolist()


@dataclass
class DgpParams:
    """Coefficients of the sequential Gaussian/logistic data-generating process.

    Vectors and matrices are stored as nested lists so the object serializes to JSON.
    ``u_law`` is ``"uniform"`` (box [-1, 0]^dim_u) or ``"zero"``.
    """

    dim_x: int = 3
    dim_u: int = 3
    copula_rho: float = 0.25
    u_law: str = "uniform"
    b_s: float = -0.625
    beta_sx: list = field(default_factory=lambda: _ones(3, 0.5))
    beta_su: list = field(default_factory=lambda: _ones(3, 0.5))
    b_a: float = 0.5
    beta_z: list = field(default_factory=lambda: _ones(3, 0.0))
    B_zu: list = field(default_factory=lambda: _eye(3))
    B_zx: list = field(default_factory=lambda: _eye(3))
    Sigma_z: list = field(default_factory=lambda: _eye(3, PROXY_NOISE_VAR))
    beta_w: list = field(default_factory=lambda: _ones(3, 0.0))
    B_wu: list = field(default_factory=lambda: _eye(3))
    B_wx: list = field(default_factory=lambda: _eye(3))
    Sigma_w: list = field(default_factory=lambda: _eye(3, PROXY_NOISE_VAR))
    w_shift_source: float = 0.0
    b_y: float = 0.5
    b_ya: float = -1.0
    beta_yu: list = field(default_factory=lambda: _ones(3))
    beta_yau: list = field(default_factory=lambda: _ones(3))
    beta_yx: list = field(default_factory=lambda: _ones(3))
    beta_yw: list = field(default_factory=lambda: _ones(3))
    beta_yaw: list = field(default_factory=lambda: _ones(3))
    beta_yz: list = field(default_factory=lambda: _ones(3, 0.0))
    beta_yaz: list = field(default_factory=lambda: _ones(3, 0.0))
    sigma_y: float = 0.5
    miss_intercept: float = 0.0
    miss_z: float = 0.1
    miss_w: float = 0.1
    miss_a: float = 0.7
    miss_x: float = 0.3

    def __post_init__(self):
        if not 0 < self.b_a < 1:
            raise ValueError("b_a must lie in (0, 1)")
        if self.u_law not in ("uniform", "zero"):
            raise ValueError("u_law must be 'uniform' or 'zero'")

    def arr(self, name) -> np.ndarray:
        return np.asarray(getattr(self, name), float)

    def copula_cov(self) -> np.ndarray:
        k = self.dim_x
        return np.full((k, k), self.copula_rho) + (1 - self.copula_rho) * np.eye(k)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class ExperimentConfig:
    id: int
    dgp: DgpParams = field(default_factory=DgpParams)
    misspecify_h: bool = False
    misspecify_q: bool = False
    misspecify_pi: bool = False
    misspecify_mu: bool = False
    mar_enabled: bool = False
    ridge: tuple | None = None
    n: int = 1000
    reps: int = 1000
    base_seed: int = 20240611

    @property
    def estimators(self) -> tuple[str, ...]:
        return MAR_ESTIMATORS if self.mar_enabled else COMPLETE_ESTIMATORS

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ridge"] = None if self.ridge is None else list(self.ridge)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["dgp"] = DgpParams(**d.get("dgp", {}))
        if d.get("ridge") is not None:
            d["ridge"] = tuple(float(v) for v in d["ridge"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


N_EXPERIMENTS = 19
_MAR_FLAGS = {5: "", 6: "q pi", 7: "q mu", 8: "h pi", 9: "h mu", 10: "h q pi mu"}


def experiment_config(exp_id: int, n: int = 1000, reps: int = 1000,
                      base_seed: int = 20240611) -> ExperimentConfig:
    """Catalog entry for experiments 1-19."""
    if not 1 <= exp_id <= N_EXPERIMENTS:
        raise ValueError(f"experiment id must be in 1..{N_EXPERIMENTS}")
    dgp = DgpParams()
    cfg = ExperimentConfig(id=exp_id, dgp=dgp, n=n, reps=reps, base_seed=base_seed)
    if exp_id in (2, 4):
        cfg.misspecify_q = True
    if exp_id in (3, 4):
        cfg.misspecify_h = True
    if exp_id in _MAR_FLAGS:
        cfg.mar_enabled = True
        flags = _MAR_FLAGS[exp_id].split()
        cfg.misspecify_h, cfg.misspecify_q = "h" in flags, "q" in flags
        cfg.misspecify_pi, cfg.misspecify_mu = "pi" in flags, "mu" in flags
    if exp_id in (11, 12):
        dgp.u_law = "zero"
    if exp_id == 13:
        dgp.beta_yz, dgp.beta_yaz = _ones(3), _ones(3)
    if exp_id == 14:
        dgp.w_shift_source = 1.0
    if exp_id in (15, 16):
        dgp.dim_u = 1
        dgp.beta_su = [0.5]
        dgp.B_zu = [[1.0]] * 3
        dgp.B_wu = [[1.0]] * 3
        dgp.beta_yu = [1.0]
        dgp.beta_yau = [1.0]
    if exp_id in (12, 16):
        cfg.ridge = (1e-4, 1e-4)
    if exp_id == 17:
        dgp.B_zu = _eye(3, 0.05)
    if exp_id == 18:
        dgp.B_wu = _eye(3, 0.05)
    if exp_id == 19:
        dgp.b_s = -0.675
        dgp.beta_su = _ones(3, 2.5)
    return cfg


# ---------------------------------------------------------------------------
# data generation

def _stream(base_seed: int, rep_index: int, block: str) -> np.random.Generator:
    seq = np.random.SeedSequence([int(base_seed), int(rep_index), _BLOCKS[block]])
    return np.random.Generator(np.random.Philox(seq))


def _mvn(rng, mean, cov):
    chol = np.linalg.cholesky(np.asarray(cov, float))
    return mean + rng.standard_normal(mean.shape) @ chol.T


def draw_covariates(p: DgpParams, n: int, rng_x, rng_u):
    """X from the Gaussian copula and the latent U."""
    try:
        chol = np.linalg.cholesky(p.copula_cov())
    except np.linalg.LinAlgError as exc:
        raise ValueError("copula covariance is not positive definite") from exc
    x = ndtr(rng_x.standard_normal((n, p.dim_x)) @ chol.T)
    if p.u_law == "zero":
        u = np.zeros((n, p.dim_u))
    else:
        u = -rng_u.random((n, p.dim_u))
    return x, u


def w_mean(p: DgpParams, x, u, s):
    return p.arr("beta_w") + u @ p.arr("B_wu").T + x @ p.arr("B_wx").T + \
        p.w_shift_source * np.asarray(s, float)[:, None]


def z_mean(p: DgpParams, x, u):
    return p.arr("beta_z") + u @ p.arr("B_zu").T + x @ p.arr("B_zx").T


def y_mean(p: DgpParams, a, x, u, w, z):
    a = np.asarray(a, float)[:, None]
    lin = (p.b_y + p.b_ya * a[:, 0] + u @ p.arr("beta_yu") + (a * u) @ p.arr("beta_yau")
           + x @ p.arr("beta_yx") + w @ p.arr("beta_yw") + (a * w) @ p.arr("beta_yaw"))
    zz = np.nan_to_num(z)
    return lin + zz @ p.arr("beta_yz") + (a * zz) @ p.arr("beta_yaz")


@dataclass(frozen=True)
class FullData:
    dataset: Dataset
    u: np.ndarray


def generate_full_data(cfg: ExperimentConfig, rep_index: int) -> FullData:
    """One simulated two-trial sample; target rows carry only (S, X, W)."""
    p, n, seed = cfg.dgp, cfg.n, cfg.base_seed
    if n < 50:
        raise ValueError("n must be at least 50")
    x, u = draw_covariates(p, n, _stream(seed, rep_index, "x"), _stream(seed, rep_index, "u"))
    s = (_stream(seed, rep_index, "s").random(n)
         < expit(p.b_s + x @ p.arr("beta_sx") + u @ p.arr("beta_su"))).astype(float)
    src = s == 1
    a = (_stream(seed, rep_index, "a").random(n) < p.b_a).astype(float)
    z = _mvn(_stream(seed, rep_index, "z"), z_mean(p, x, u), p.Sigma_z)
    w = _mvn(_stream(seed, rep_index, "w"), w_mean(p, x, u, s), p.Sigma_w)
    y = y_mean(p, a, x, u, w, z) + p.sigma_y * _stream(seed, rep_index, "y").standard_normal(n)
    if cfg.mar_enabled:
        lin = (p.miss_intercept + p.miss_z * z.sum(1) + p.miss_w * w.sum(1) + p.miss_a * a
               + p.miss_x * x.sum(1))
        delta = (_stream(seed, rep_index, "delta").random(n) < expit(lin)).astype(float)
    else:
        delta = np.ones(n)
    delta = np.where(src, delta, 1.0)
    y = np.where(src & (delta == 1), y, np.nan)
    ds = Dataset(s=s, a=np.where(src, a, np.nan), delta=delta, y=y, x=x, w=w,
                 z=np.where(src[:, None], z, np.nan), e1=np.where(src, p.b_a, np.nan))
    return FullData(ds, u)


# ---------------------------------------------------------------------------
# oracles

def closed_form_bridges(p: DgpParams) -> tuple[np.ndarray, np.ndarray]:
    """Parameters of the linear outcome bridge and the log-linear trial bridge.

    eta is ordered (1, W, X) and xi (1, Z, X). Raises NoClosedFormError unless both
    loading matrices of U are square and invertible.
    """
    b_wu, b_zu = p.arr("B_wu"), p.arr("B_zu")
    for mat in (b_wu, b_zu):
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or \
                np.linalg.matrix_rank(mat) < mat.shape[0]:
            raise NoClosedFormError("bridge not uniquely identified by closed form")
    g_y = np.linalg.solve(b_wu.T, p.arr("beta_yau"))
    eta0 = p.b_ya - p.arr("beta_w") @ g_y
    eta_x = -p.arr("B_wx").T @ g_y
    eta_w = g_y + p.arr("beta_yaw")
    g_s = np.linalg.solve(b_zu.T, p.arr("beta_su"))
    xi0 = -p.b_s + p.arr("beta_z") @ g_s - 0.5 * g_s @ p.arr("Sigma_z") @ g_s
    xi_x = -p.arr("beta_sx") + p.arr("B_zx").T @ g_s
    xi_z = -g_s
    return np.concatenate([[eta0], eta_w, eta_x]), np.concatenate([[xi0], xi_z, xi_x])


def conditional_effect(p: DgpParams, x, u, s=0):
    """E{Y(1) - Y(0) | X, U, S=s} after integrating W and Z given (X, U)."""
    n = len(x)
    s_arr = np.full(n, float(s))
    ew = w_mean(p, x, u, s_arr)
    ez = z_mean(p, x, u)
    return p.b_ya + u @ p.arr("beta_yau") + ew @ p.arr("beta_yaw") + ez @ p.arr("beta_yaz")


@functools.lru_cache(maxsize=64)
def _truth_cached(params_json: str, n_mc: int, seed: int, chunk: int):
    p = DgpParams(**json.loads(params_json))
    sw = swc = 0.0
    done, block = 0, 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        x, u = draw_covariates(p, m, _stream(seed, block, "x"), _stream(seed, block, "u"))
        wt = 1 - expit(p.b_s + x @ p.arr("beta_sx") + u @ p.arr("beta_su"))
        sw += wt.sum()
        swc += (wt * conditional_effect(p, x, u, 0)).sum()
        done += m
        block += 1
    psi = swc / sw
    # second pass for the delta-method variance of the ratio estimator
    acc, done, block = 0.0, 0, 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        x, u = draw_covariates(p, m, _stream(seed, block, "x"), _stream(seed, block, "u"))
        wt = 1 - expit(p.b_s + x @ p.arr("beta_sx") + u @ p.arr("beta_su"))
        acc += np.sum((wt * (conditional_effect(p, x, u, 0) - psi)) ** 2)
        done += m
        block += 1
    mean_w = sw / n_mc
    se = np.sqrt(acc / n_mc / n_mc) / mean_w
    return float(psi), float(se)


def monte_carlo_truth(p: DgpParams, n_mc: int = 2_000_000, seed: int = 314159,
                      chunk: int = 500_000) -> tuple[float, float]:
    """E{Y(1) - Y(0) | S=0} and its Monte-Carlo standard error.

    (X, U) are drawn from their joint law and weighted by P(S=0 | X, U); W, Z and Y are
    integrated analytically through the conditional effect. Results are cached.
    """
    if n_mc < 1000:
        raise ValueError("n_mc too small")
    return _truth_cached(p.to_json(), int(n_mc), int(seed), int(chunk))


# ---------------------------------------------------------------------------
# replications

@dataclass(frozen=True)
class RepResult:
    rep: int
    estimator: str
    point: float
    se: float
    converged: bool
    note: str = ""


def _fit_all(cfg: ExperimentConfig, ds: Dataset):
    lam_h, lam_q = cfg.ridge if cfg.ridge is not None else (0.0, 0.0)
    wrong = misspecify_proxies(ds)
    ds_h = wrong if cfg.misspecify_h else ds
    ds_q = wrong if cfg.misspecify_q else ds
    mar = None
    if cfg.mar_enabled:
        mar = fit_mar_nuisances(ds, pi_ds=wrong if cfg.misspecify_pi else None,
                                mu_ds=wrong if cfg.misspecify_mu else None)
    h = fit_outcome_bridge(ds_h, H_BASIS, H_INSTRUMENT, lam=lam_h, mar=mar)
    q = fit_trial_bridge(ds_q, Q_BASIS, Q_INSTRUMENT, EXP_LINEAR, lam=lam_q)
    return ds_h, ds_q, mar, h, q


def run_replication(cfg: ExperimentConfig, rep_index: int) -> list[RepResult]:
    """Fit all nuisances on one generated sample and evaluate the experiment's estimators.

    Failures are recorded as non-converged rows rather than raised.
    """
    ds = generate_full_data(cfg, rep_index).dataset
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            ds_h, ds_q, mar, h, q = _fit_all(cfg, ds)
        except (np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            return [RepResult(rep_index, e, np.nan, np.nan, False, type(exc).__name__)
                    for e in cfg.estimators]
        hv, qv = eval_bridge(h, ds_h), eval_bridge(q, ds_q)
        q_ok = q.converged and bool(np.all(np.isfinite(qv[ds.source])))

        def record(name, fn, ok=True):
            try:
                point, se = fn()
                good = ok and np.isfinite(point) and np.isfinite(se)
                out.append(RepResult(rep_index, name, float(point), float(se), bool(good)))
            except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
                out.append(RepResult(rep_index, name, np.nan, np.nan, False, type(exc).__name__))

        if cfg.mar_enabled:
            def mar_est():
                point = psi_mar(ds, hv, qv, mar)
                return point, se_psi_mar(ds, hv, qv, mar, point)
            record("psi_mar", mar_est, q_ok)
            return out

        def h_est():
            point = psi_h(ds, hv)
            return point, se_psi_parametric(ds_h, "h", h, H_INSTRUMENT, point)

        def q_est():
            point = psi_q(ds, qv)
            return point, se_psi_parametric(ds_q, "q", q, Q_INSTRUMENT, point)

        def dr_est():
            point = psi_dr(ds, hv, qv)
            return point, se_from_influence(influence_psi_dr(ds, hv, qv, point))

        record("psi_h", h_est)
        record("psi_q", q_est, q_ok)
        record("psi_dr", dr_est, q_ok)
    return out


def _rep_worker(args):
    cfg_dict, rep = args
    return run_replication(ExperimentConfig.from_dict(cfg_dict), rep)


def worker_count(reps: int, threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("PROXIDC_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(threads), reps))


def run_replications(cfg: ExperimentConfig, threads: int | None = None) -> list[RepResult]:
    """All replications of ``cfg``, flattened in rep order regardless of worker count."""
    workers = worker_count(cfg.reps, threads)
    if workers == 1:
        per_rep = [run_replication(cfg, r) for r in range(cfg.reps)]
    else:
        jobs = [(cfg.to_dict(), r) for r in range(cfg.reps)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_rep = list(pool.map(_rep_worker, jobs, chunksize=max(1, cfg.reps // (8 * workers))))
    return [r for rows in per_rep for r in rows]


# ---------------------------------------------------------------------------
# summaries

@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    mean: float
    bias: float
    rmse: float
    mean_se: float
    coverage: float
    converged: int
    total: int

    def scaled(self) -> dict:
        """Table units: bias x 1e3, RMSE and SE x 10, coverage in percent."""
        return {"estimator": self.estimator, "mean": self.mean, "bias_e3": 1e3 * self.bias,
                "rmse_e1": 10 * self.rmse, "se_e1": 10 * self.mean_se,
                "coverage_pct": 100 * self.coverage, "converged": self.converged,
                "total": self.total}


def summarize_estimator(name: str, points, ses, converged, truth: float) -> EstimatorSummary:
    points, ses = np.asarray(points, float), np.asarray(ses, float)
    ok = np.asarray(converged, bool)
    if not ok.any():
        raise ValueError(f"no converged replications for {name}")
    p, s = points[ok], ses[ok]
    err = p - truth
    cover = np.abs(err) <= 1.96 * s
    return EstimatorSummary(name, float(p.mean()), float(err.mean()),
                            float(np.sqrt(np.mean(err ** 2))), float(s.mean()),
                            float(cover.mean()), int(ok.sum()), len(points))


def aggregate_summary(results: list[RepResult], truth: float) -> dict[str, EstimatorSummary]:
    """Per-estimator Monte-Carlo summary over converged replications."""
    names = list(dict.fromkeys(r.estimator for r in results))
    out = {}
    for name in names:
        rows = sorted((r for r in results if r.estimator == name), key=lambda r: r.rep)
        out[name] = summarize_estimator(name, [r.point for r in rows], [r.se for r in rows],
                                        [r.converged for r in rows], truth)
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    truth: float
    truth_se: float
    reps: list[RepResult]
    summary: dict[str, EstimatorSummary]


def run_experiment(cfg: ExperimentConfig, threads: int | None = None,
                   n_mc: int = 2_000_000) -> ExperimentResult:
    truth, truth_se = monte_carlo_truth(cfg.dgp, n_mc)
    reps = run_replications(cfg, threads)
    summary = {}
    for name in cfg.estimators:
        try:
            summary[name] = aggregate_summary([r for r in reps if r.estimator == name],
                                              truth)[name]
        except ValueError:
            summary[name] = EstimatorSummary(name, *([np.nan] * 5), 0, cfg.reps)
    return ExperimentResult(cfg, truth, truth_se, reps, summary)


def format_summary_table(result: ExperimentResult) -> str:
    header = f"{'n':>6} {'exp':>4} {'estimator':<10} {'mean':>8} {'bias':>9} {'rmse':>7} " \
             f"{'se':>7} {'cover':>7} {'conv':>9}"
    lines = [header]
    for s in result.summary.values():
        d = s.scaled()
        lines.append(f"{result.config.n:>6} {result.config.id:>4} {s.estimator:<10} "
                     f"{d['mean']:>8.2f} {d['bias_e3']:>9.2f} {d['rmse_e1']:>7.2f} "
                     f"{d['se_e1']:>7.2f} {d['coverage_pct']:>7.2f} "
                     f"{s.converged:>4}/{s.total:<4}")
    lines.append(f"truth = {result.truth:.6f} (MC se {result.truth_se:.2e}); "
                 "bias x1e3, rmse/se x10, coverage %")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic two-trial fixture with outcomes in both trials

@dataclass
class FixtureParams:
    dgp: DgpParams = field(default_factory=DgpParams)
    e_source: float = 0.5
    e_target: float = 0.6
    b_t: float = -2.0            # effect of A=-1 vs 0 in the target trial
    beta_tu: float = 1.0
    beta_tw: float = 0.5
    site_levels: tuple = ("north", "south", "west")
    site_effect: tuple = (0.0, 0.3, -0.2)
    observed_prob: dict = field(default_factory=lambda: {(1, 1): 0.85, (1, 0): 0.9,
                                                         (0, -1): 0.88, (0, 0): 0.92})


def generate_fixture(fp: FixtureParams, n: int, seed: int) -> Dataset:
    """Two trials (arms {1,0} and {-1,0}) with outcomes in both and arm-wise MCAR missingness.

    X carries a categorical ``x_site`` column that shifts the outcome level in both trials.
    """
    p = fp.dgp
    x, u = draw_covariates(p, n, _stream(seed, 0, "x"), _stream(seed, 0, "u"))
    s = (_stream(seed, 0, "s").random(n)
         < expit(p.b_s + x @ p.arr("beta_sx") + u @ p.arr("beta_su"))).astype(float)
    src = s == 1
    draw_a = _stream(seed, 0, "a").random(n)
    a = np.where(src, np.where(draw_a < fp.e_source, 1.0, 0.0),
                 np.where(draw_a < fp.e_target, -1.0, 0.0))
    site = _stream(seed, 0, "site").integers(0, len(fp.site_levels), n).astype(float)
    z = _mvn(_stream(seed, 0, "z"), z_mean(p, x, u), p.Sigma_z)
    w = _mvn(_stream(seed, 0, "w"), w_mean(p, x, u, s), p.Sigma_w)
    noise = p.sigma_y * _stream(seed, 0, "y").standard_normal(n)
    base = np.asarray(fp.site_effect)[site.astype(int)] + noise
    y_src = y_mean(p, np.where(src, a, 0.0), x, u, w, z)
    t = (a == -1).astype(float)
    y_tgt = y_mean(p, np.zeros(n), x, u, w, z) + t * (fp.b_t + fp.beta_tu * u.sum(1)
                                                      + fp.beta_tw * w.sum(1))
    y = np.where(src, y_src, y_tgt) + base
    prob = np.array([fp.observed_prob[(int(si), int(ai))] for si, ai in zip(s, a)])
    delta = (_stream(seed, 0, "miss").random(n) < prob).astype(float)
    y = np.where(delta == 1, y, np.nan)
    e1 = np.where(src, fp.e_source, np.nan)
    names = tuple(f"x_{j + 1}" for j in range(p.dim_x)) + ("x_site",)
    return Dataset(s=s, a=a, delta=delta, y=y, x=np.column_stack([x, site]), w=w,
                   z=np.where(src[:, None], z, np.nan), e1=e1, x_names=names,
                   levels={"x_site": tuple(fp.site_levels)})

import json

import numpy as np
import pytest
from scipy.special import expit, ndtr

from proxidc.simulation import (DgpParams, ExperimentConfig, NoClosedFormError, RepResult,
                                aggregate_summary, closed_form_bridges, conditional_effect,
                                draw_covariates, experiment_config, generate_full_data,
                                monte_carlo_truth, run_experiment, run_replication,
                                run_replications, summarize_estimator, w_mean, z_mean)


def test_closed_form_default_by_hand():
    eta, xi = closed_form_bridges(DgpParams())
    np.testing.assert_allclose(eta, [-1, 2, 2, 2, -1, -1, -1], atol=1e-15)
    # xi0 = 0.625 - 0.5 * (0.5^2 * 3) * 0.0625
    np.testing.assert_allclose(xi, [0.6015625, -0.5, -0.5, -0.5, 0, 0, 0], atol=1e-15)


def test_closed_form_intercept_with_unit_quarter_noise():
    p = DgpParams(Sigma_z=(np.eye(3) * 0.25).tolist())
    assert closed_form_bridges(p)[1][0] == pytest.approx(0.53125, abs=1e-15)


def test_closed_form_bridges_solve_their_moment_restrictions():
    # E[h*(W,X) | X, U, S=0] equals the CATE, and P(S=1|X,U) E[q*|X,U] = P(S=0|X,U)
    p = DgpParams(B_wu=[[1.0, 0.2, 0], [0, 1.0, 0.1], [0.3, 0, 1.0]], beta_w=[0.1, -0.2, 0.3],
                  beta_z=[0.2, 0.0, -0.1], Sigma_z=[[0.1, 0.02, 0], [0.02, 0.1, 0], [0, 0, 0.1]])
    eta, xi = closed_form_bridges(p)
    rng = np.random.default_rng(2)
    x, u = rng.random((40, 3)), -rng.random((40, 3))
    ew = w_mean(p, x, u, np.zeros(40))
    np.testing.assert_allclose(eta[0] + ew @ eta[1:4] + x @ eta[4:], conditional_effect(p, x, u),
                               atol=1e-12)
    ez = z_mean(p, x, u)
    mgf = np.exp(xi[0] + ez @ xi[1:4] + 0.5 * xi[1:4] @ np.asarray(p.Sigma_z) @ xi[1:4]
                 + x @ xi[4:])
    ps1 = expit(p.b_s + x @ p.arr("beta_sx") + u @ p.arr("beta_su"))
    np.testing.assert_allclose(ps1 * mgf, 1 - ps1, rtol=1e-12)


def test_scalar_latent_has_no_closed_form():
    with pytest.raises(NoClosedFormError):
        closed_form_bridges(experiment_config(15).dgp)


def test_generation_is_deterministic_and_rep_dependent():
    cfg = experiment_config(5, n=500)
    a, b = generate_full_data(cfg, 3), generate_full_data(cfg, 3)
    for name in ("s", "a", "delta", "y", "x", "w", "z", "e1"):
        assert np.array_equal(getattr(a.dataset, name), getattr(b.dataset, name), equal_nan=True)
    assert np.array_equal(a.u, b.u)
    assert not np.array_equal(generate_full_data(cfg, 4).dataset.x, a.dataset.x)


def test_observed_data_model_blanks_target_rows():
    ds = generate_full_data(experiment_config(5, n=2000), 0).dataset
    tgt = ds.s == 0
    assert np.isnan(ds.a[tgt]).all() and np.isnan(ds.y[tgt]).all() and np.isnan(ds.z[tgt]).all()
    assert not np.isnan(ds.w).any() and not np.isnan(ds.x).any()
    assert np.isnan(ds.y[(ds.s == 1) & (ds.delta == 0)]).all()


def test_marginal_rates():
    ds = generate_full_data(experiment_config(1, n=100_000), 0).dataset
    assert 0.60 < np.mean(ds.s == 0) < 0.70
    mar = generate_full_data(experiment_config(5, n=100_000), 0).dataset
    assert 0.25 < np.mean(mar.delta[mar.s == 1] == 0) < 0.35


def test_default_truth():
    truth, se = monte_carlo_truth(DgpParams())
    assert truth == pytest.approx(-2.645, abs=0.01)
    assert se < 2e-3


def test_truth_without_latent_against_direct_oracle():
    # with U = 0 the effect is -1 + sum(X); reweight X draws by P(S=0|X) directly
    truth, _ = monte_carlo_truth(experiment_config(11).dgp)
    rng = np.random.default_rng(99)
    k = 3
    cov = np.full((k, k), 0.25) + 0.75 * np.eye(k)
    x = ndtr(rng.multivariate_normal(np.zeros(k), cov, size=2_000_000))
    wt = 1 - expit(-0.625 + 0.5 * x.sum(1))
    direct = np.sum(wt * (-1 + x.sum(1))) / wt.sum()
    assert truth == pytest.approx(0.40, abs=0.01)
    assert truth == pytest.approx(direct, abs=3e-3)


def test_truth_mc_error_scales_as_root_n():
    p = DgpParams()
    _, se1 = monte_carlo_truth(p, 100_000, seed=5)
    _, se4 = monte_carlo_truth(p, 400_000, seed=5)
    assert se1 / se4 == pytest.approx(2.0, rel=0.05)


def test_copula_rejects_invalid_correlation():
    p = DgpParams(copula_rho=-0.9)
    with pytest.raises(ValueError, match="positive definite"):
        draw_covariates(p, 10, np.random.default_rng(0), np.random.default_rng(1))


def test_summary_of_exact_estimates():
    s = summarize_estimator("e", [1.0, 1.0], [0.1, 0.1], [True, True], 1.0)
    assert (s.bias, s.rmse, s.coverage, s.converged) == (0.0, 0.0, 1.0, 2)
    # |err| exactly on the 1.96 se boundary counts as covered
    s = summarize_estimator("e", [1.196, 0.0], [0.1, 0.1], [True, False], 1.0)
    assert s.coverage == 1.0 and s.total == 2 and s.converged == 1
    with pytest.raises(ValueError, match="no converged"):
        summarize_estimator("e", [1.0], [1.0], [False], 0.0)


def test_aggregate_ignores_nonconverged_rows():
    rows = [RepResult(0, "a", 1.0, 0.5, True), RepResult(1, "a", 99.0, 0.5, False),
            RepResult(0, "b", 2.0, 0.1, True)]
    out = aggregate_summary(rows, 1.0)
    assert out["a"].mean == 1.0 and out["a"].total == 2
    assert out["b"].bias == pytest.approx(1.0) and out["b"].coverage == 0.0


def test_config_round_trip():
    cfg = experiment_config(12, n=300, reps=7, base_seed=9)
    back = ExperimentConfig.from_dict(json.loads(cfg.dumps()))
    assert back == cfg


def test_catalog_flags():
    c = {i: experiment_config(i) for i in range(1, 20)}
    assert (c[2].misspecify_q, c[2].misspecify_h) == (True, False)
    assert (c[3].misspecify_q, c[3].misspecify_h) == (False, True)
    assert c[4].misspecify_q and c[4].misspecify_h
    assert all(c[i].mar_enabled for i in range(5, 11))
    assert not any(c[i].mar_enabled for i in (1, 2, 3, 4, 11, 12))
    assert c[10].misspecify_h and c[10].misspecify_q and c[10].misspecify_pi and c[10].misspecify_mu
    assert c[11].dgp.u_law == "zero" and c[11].ridge is None
    assert c[12].ridge is not None and c[16].ridge is not None
    assert c[15].dgp.dim_u == 1
    with pytest.raises(ValueError):
        experiment_config(20)


def test_replication_uses_transformed_proxies_only_where_asked():
    # exp 2 changes only the trial bridge, so psi_h is identical to exp 1
    r1 = {r.estimator: r for r in run_replication(experiment_config(1, n=800), 0)}
    r2 = {r.estimator: r for r in run_replication(experiment_config(2, n=800), 0)}
    assert r1["psi_h"].point == r2["psi_h"].point
    assert r1["psi_q"].point != r2["psi_q"].point


def test_runs_are_identical_across_thread_counts():
    cfg = experiment_config(1, n=300, reps=6, base_seed=123)
    one = run_replications(cfg, threads=1)
    three = run_replications(cfg, threads=3)
    assert [(r.rep, r.estimator) for r in one] == [(r.rep, r.estimator) for r in three]
    for a, b in zip(one, three):
        assert np.array_equal([a.point, a.se], [b.point, b.se], equal_nan=True)
        assert a.converged == b.converged


def test_run_experiment_shapes():
    res = run_experiment(experiment_config(5, n=400, reps=4), threads=1, n_mc=100_000)
    assert set(res.summary) == {"psi_mar"}
    assert len(res.reps) == 4

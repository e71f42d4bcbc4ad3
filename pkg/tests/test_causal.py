import numpy as np
import pytest

from netbandit import causal, graph, rewards, runner
from netbandit.causal import (CausalError, EstimandTriple, estimate_from_posterior,
                              estimate_ols, graph_point_estimate,
                              randomized_phase, rmse, true_estimands)
from netbandit.posterior import History
from netbandit.rewards import Environment, RewardSpec, dimension


def test_zero_theta_zero_effects():
    spec = RewardSpec("pairwise_nia", 5)
    a = graph.erdos_renyi(5, 0.5, np.random.default_rng(0))
    t = true_estimands(spec, np.zeros(dimension(spec)), a)
    assert t.as_array().tolist() == [0.0, 0.0, 0.0]


def test_count_based_single_neighbor_effect():
    # max degree <= d_max: tau_I(1) is exactly gamma_1, tau_D exactly mu
    spec = RewardSpec("count_based_shared", 6, 4)
    theta = np.array([1.0, 1.0, 2.0, 3.0, 4.0])
    a = np.zeros((6, 6), dtype=np.int8)
    a[0, 1] = a[1, 0] = a[2, 3] = a[3, 2] = a[3, 4] = a[4, 3] = 1
    t = true_estimands(spec, theta, a)
    assert t.tau_i1 == pytest.approx(1.0)
    assert t.tau_d == pytest.approx(1.0)
    # tau_TTE = mu + mean_i gamma[min(deg_i, 4)] over all nodes
    deg = graph.degrees(a)
    gam = np.concatenate(([0.0], theta[1:]))
    want = 1.0 + np.mean(gam[np.minimum(deg, 4)])
    assert t.tau_tte == pytest.approx(want)


def test_village_population_means():
    # per-node mu_i, beta_i ~ U[0,1]: E[tau_D] = 0.5 and E[tau_TTE] = 1.0 on
    # graphs without isolates
    rng = np.random.default_rng(1)
    spec = RewardSpec("linear_in_means_per_node", 40)
    a = graph.erdos_renyi(40, 0.15, rng)
    for i in range(40):  # remove isolates so every node has the beta term
        if a[i].sum() == 0:
            j = (i + 1) % 40
            a[i, j] = a[j, i] = 1
    vals = []
    for _ in range(300):
        theta = rewards.sample_params(spec, rewards.named_protocol("village"), rng)
        t = true_estimands(spec, theta, a)
        vals.append([t.tau_d, t.tau_tte])
    means = np.mean(vals, axis=0)
    assert abs(means[0] - 0.5) < 0.01
    assert abs(means[1] - 1.0) < 0.015


def test_linmeans_tau_i1_closed_form():
    # averaging over single treated neighbors equals mean of beta_i / deg_i
    rng = np.random.default_rng(2)
    spec = RewardSpec("linear_in_means_per_node", 10)
    a = graph.erdos_renyi(10, 0.4, rng)
    theta = rng.uniform(0, 1, dimension(spec))
    t = true_estimands(spec, theta, a)
    deg = graph.degrees(a)
    live = deg > 0
    want = np.mean(theta[10:][live] / deg[live])
    assert t.tau_i1 == pytest.approx(want, rel=1e-12)


def test_indirect_mass_bookkeeping():
    # n*(tau_TTE - tau_D) equals the total spillover mass sum_ij eta_ij for
    # collapsible kinds
    rng = np.random.default_rng(3)
    for kind in rewards.COLLAPSIBLE_KINDS:
        for n in (4, 6, 8):
            spec = RewardSpec(kind, n)
            a = graph.erdos_renyi(n, 0.5, rng)
            theta = rng.uniform(0, 1, dimension(spec))
            t = true_estimands(spec, theta, a)
            if kind == "additive_pairs":
                gmat = rewards.pair_matrix(theta[n:], n) * a
                mass = gmat.sum()
            else:
                deg = graph.degrees(a)
                live = deg > 0
                mass = theta[n:][live].sum()
            assert n * (t.tau_tte - t.tau_d) == pytest.approx(mass, abs=1e-10), kind


def test_graph_point_estimate_rules():
    m = np.zeros((3, 3))
    assert not graph_point_estimate(m).any()
    m[0, 1] = m[1, 0] = 0.5
    assert not graph_point_estimate(m, 0.5).any()  # strict inequality
    m[0, 1] = m[1, 0] = 0.51
    assert graph_point_estimate(m, 0.5)[0, 1] == 1
    with pytest.raises(CausalError):
        graph_point_estimate(m, 1.5)


def test_graph_point_estimate_from_oracle_marginals():
    from netbandit.posterior import exact_edge_marginals, isotropic_prior
    rng = np.random.default_rng(4)
    spec = RewardSpec("count_based_shared", 4, 3)
    d = dimension(spec)
    pr = isotropic_prior(d, 10.0, 0.0625, 0.3)
    a_true = graph.erdos_renyi(4, 0.5, rng)
    theta = rewards.sample_params(spec, rewards.named_protocol("count_shared"), rng)
    env = Environment(spec, theta, a_true, 0.25)
    h = History(4)
    for _ in range(60):
        z = (rng.random(4) < 0.5).astype(np.int8)
        h.append(z, env.sample(z, rng))
    marg = exact_edge_marginals(h, spec, pr, 4)
    assert np.array_equal(graph_point_estimate(marg, 0.5), a_true)


def test_randomized_phase():
    rng = np.random.default_rng(5)
    spec = RewardSpec("count_based_shared", 10, 3)
    env = Environment(spec, np.array([1.0, 1.0, 2.0, 3.0]),
                      graph.erdos_renyi(10, 0.3, rng), 1.0)
    h = randomized_phase(env, 500, 0.3, np.random.default_rng(6))
    z = h.z_matrix()
    rate = z.mean()
    se = np.sqrt(0.3 * 0.7 / z.size)
    assert abs(rate - 0.3) < 3 * se
    h0 = randomized_phase(env, 20, 0.0, rng)
    assert not h0.z_matrix().any()
    h1 = randomized_phase(env, 20, 0.4, np.random.default_rng(7))
    h2 = randomized_phase(env, 20, 0.4, np.random.default_rng(7))
    assert np.array_equal(h1.r_matrix(), h2.r_matrix())


def test_ols_noiseless_recovery():
    rng = np.random.default_rng(8)
    spec = RewardSpec("count_based_shared", 8, 3)
    a = graph.erdos_renyi(8, 0.4, rng)
    theta = np.array([1.0, 0.7, 1.4, 2.1])
    env = Environment(spec, theta, a, 1e-300)
    h = History(8)
    for _ in range(50):
        z = (rng.random(8) < 0.4).astype(np.int8)
        h.append(z, rewards.expected_rewards(spec, theta, a, z))
    fit = estimate_ols(h, spec, a)
    assert not fit.ridge_used
    assert np.max(np.abs(fit.theta - theta)) < 1e-8


def test_ols_consistency():
    rng = np.random.default_rng(9)
    spec = RewardSpec("count_based_shared", 20, 4)
    a = graph.erdos_renyi(20, 0.25, rng)
    theta = rewards.sample_params(spec, rewards.named_protocol("count_shared"),
                                  rng)
    env = Environment(spec, theta, a, 1.0)
    h = randomized_phase(env, 10_000, 0.3, rng)
    fit = estimate_ols(h, spec, a)
    assert np.max(np.abs(fit.theta - theta)) < 0.05


def test_ols_ridge_fallback_on_rank_deficiency():
    # a gamma bucket that never occurs leaves X'X singular
    rng = np.random.default_rng(10)
    spec = RewardSpec("count_based_shared", 4, 3)
    a = np.zeros((4, 4), dtype=np.int8)
    a[0, 1] = a[1, 0] = 1  # max attainable count is 1, buckets 2,3 unseen
    theta = np.array([1.0, 0.5, 0.0, 0.0])
    env = Environment(spec, theta, a, 0.1)
    h = randomized_phase(env, 60, 0.4, rng)
    fit = estimate_ols(h, spec, a)
    assert fit.ridge_used
    with pytest.raises(CausalError):
        estimate_ols(History(4), spec, a)


def test_estimate_from_posterior_exact_case():
    rng = np.random.default_rng(11)
    spec = RewardSpec("count_based_shared", 6, 3)
    a = graph.erdos_renyi(6, 0.5, rng)
    theta = rewards.sample_params(spec, rewards.named_protocol("count_shared"), rng)
    truth = true_estimands(spec, theta, a)
    est = estimate_from_posterior(theta, spec, a)
    assert np.allclose(est.as_array(), truth.as_array())


def test_empty_graph_has_no_indirect_effect():
    spec = RewardSpec("linear_in_means_per_node", 5)
    theta = np.arange(10.0)
    est = estimate_from_posterior(theta, spec, np.zeros((5, 5), dtype=np.int8))
    assert est.tau_i1 == 0.0


def test_rmse():
    a = [EstimandTriple(1.0, 2.0, 3.0)] * 3
    assert rmse(a, a).as_array().tolist() == [0.0, 0.0, 0.0]
    est = [EstimandTriple(1.3, 2.4, 3.0)]
    tru = [EstimandTriple(1.0, 2.0, 3.0)]
    assert np.allclose(rmse(est, tru).as_array(), [0.3, 0.4, 0.0])
    biased = [EstimandTriple(1.2, 2.2, 3.2)] * 4
    base = [EstimandTriple(1.0, 2.0, 3.0)] * 4
    assert np.allclose(rmse(biased, base).as_array(), [0.2, 0.2, 0.2])
    with pytest.raises(CausalError):
        rmse(est, base)


def test_estimation_pipeline_small(tmp_path):
    doc = {
        "name": "est_small",
        "environment": {
            "n": 8,
            "graph": {"family": "erdos_renyi", "p": 0.3},
            "reward": {"kind": "count_based_shared", "d_max": 3},
            "protocol": "count_shared",
            "sigma": 0.5,
        },
        "policy": {"kind": "gibbs_ts", "prior": {"sigma0_scale": 10.0, "rho": 0.3},
                   "sweeps_k": 5, "warmup_rounds": 5},
        "horizon": 150,
        "budget": 3,
        "replications": {"count": 2, "base_seed": 5},
        "marginal_sweeps": 30,
    }
    cfg = runner.parse_config(doc)
    out = causal.run_estimation(cfg, t_eval=300, out_dir=tmp_path)
    assert set(out["rmse"]) == {"gibbs_ahat", "ols_ahat", "ols_atrue"}
    for est in out["rmse"].values():
        assert set(est) == {"tau_d", "tau_i1", "tau_tte"}
        assert all(np.isfinite(v) for v in est.values())
    assert (tmp_path / "estimation_rmse.csv").exists()
    assert (tmp_path / "estimation_per_rep.csv").exists()
    assert (tmp_path / "estimation_summary.json").exists()

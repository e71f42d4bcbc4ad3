import math

import numpy as np
import pytest

from netbandit import engine, graph, posterior, rewards
from netbandit.posterior import (History, PosteriorState, Prior,
                                 PosteriorError, edge_logit,
                                 exact_edge_marginals, gibbs_sweep,
                                 graph_posterior_weights, initial_graph_sample,
                                 isotropic_prior, sample_theta, theta_posterior)
from netbandit.rewards import RewardSpec, dimension

ALL_KINDS = [("pairwise_nia", None), ("additive_pairs", None),
             ("linear_in_means_per_node", None), ("count_based_shared", 3),
             ("count_based_per_node", 2), ("saturation_spec_a", None),
             ("interaction_spec_b", None), ("paired_indicator", None)]


def _random_history(spec, a_true, theta_true, sigma, rounds, rng, p_treat=0.4):
    h = History(spec.n)
    for _ in range(rounds):
        z = (rng.random(spec.n) < p_treat).astype(np.int8)
        r = rewards.expected_rewards(spec, theta_true, a_true, z) \
            + sigma * rng.standard_normal(spec.n)
        h.append(z, r)
    return h


def test_prior_validation():
    with pytest.raises(PosteriorError):
        Prior(np.zeros(2), np.eye(2), 1.0, rho=0.0)
    with pytest.raises(PosteriorError):
        Prior(np.zeros(2), np.eye(2), 1.0, rho=1.0)
    with pytest.raises(PosteriorError):
        Prior(np.zeros(2), -np.eye(2), 1.0, rho=0.5)
    with pytest.raises(PosteriorError):
        Prior(np.zeros(2), np.eye(2), 0.0, rho=0.5)


def test_empty_history_recovers_prior():
    spec = RewardSpec("count_based_shared", 4, 3)
    pr = isotropic_prior(dimension(spec), 10.0, 0.25, 0.3)
    h = History(4)
    a = np.zeros((4, 4), dtype=np.int8)
    mean, cov = theta_posterior(h, a, spec, pr)
    assert np.allclose(mean, pr.mu0)
    assert np.allclose(cov, pr.sigma0)
    lg = edge_logit(0, 1, a, np.zeros(dimension(spec)), h, spec, pr)
    assert lg == pytest.approx(math.log(0.3 / 0.7))


def test_scalar_conjugate_by_hand():
    # D=1, one observation with feature 1, r=2, sigma2=1, mu0=0, Sigma0=10:
    # cov = 1/(1 + 0.1) = 0.909090..., mean = 2/1.1 = 1.818181...
    pr = Prior(np.zeros(1), np.array([[10.0]]), 1.0, 0.3)
    mean, cov = posterior.theta_posterior_from_stats(
        np.array([[1.0]]), np.array([2.0]), pr)
    assert cov[0, 0] == pytest.approx(1 / 1.1, rel=1e-9)
    assert mean[0] == pytest.approx(2 / 1.1, rel=1e-9)


def test_flat_prior_approaches_ols():
    rng = np.random.default_rng(0)
    spec = RewardSpec("count_based_shared", 5, 3)
    d = dimension(spec)
    a = graph.erdos_renyi(5, 0.6, rng)
    theta_true = rng.uniform(0.5, 1.5, d)
    h = _random_history(spec, a, theta_true, 0.3, 60, rng)
    pr = isotropic_prior(d, 1e6, 0.09, 0.3)
    mean, _ = theta_posterior(h, a, spec, pr)
    hmat = posterior.stacked_design(h, a, spec)
    ols, *_ = np.linalg.lstsq(hmat, h.r_matrix().reshape(-1), rcond=None)
    assert np.max(np.abs(mean - ols)) / np.max(np.abs(ols)) < 1e-4


def test_conjugacy_chaining():
    # posterior(h1 then h2) == posterior(h2) with posterior(h1) as the prior
    rng = np.random.default_rng(1)
    spec = RewardSpec("count_based_shared", 4, 2)
    d = dimension(spec)
    a = graph.erdos_renyi(4, 0.5, rng)
    theta_true = rng.uniform(0.5, 1.5, d)
    h_all = _random_history(spec, a, theta_true, 0.5, 14, rng)
    zs = h_all.z_matrix()
    rs = h_all.r_matrix()
    h1, h2 = History(4), History(4)
    for t in range(7):
        h1.append(zs[t], rs[t])
    for t in range(7, 14):
        h2.append(zs[t], rs[t])
    pr = isotropic_prior(d, 10.0, 0.25, 0.3)
    m1, c1 = theta_posterior(h1, a, spec, pr)
    m12, c12 = theta_posterior(h2, a, spec, Prior(m1, c1, 0.25, 0.3))
    m_all, c_all = theta_posterior(h_all, a, spec, pr)
    assert np.allclose(m12, m_all, rtol=1e-8)
    assert np.allclose(c12, c_all, rtol=1e-8)


def test_sample_theta_moments():
    rng = np.random.default_rng(2)
    mean = np.array([1.0, -2.0, 0.5])
    b = rng.standard_normal((3, 3))
    cov = b @ b.T + 0.5 * np.eye(3)
    draws = np.stack([sample_theta(mean, cov, rng) for _ in range(100_000)])
    emp = np.cov(draws.T)
    rel = np.linalg.norm(emp - cov) / np.linalg.norm(cov)
    assert rel < 0.05
    assert np.allclose(draws.mean(axis=0), mean, atol=0.05)


def test_sample_theta_determinism_and_degenerate():
    mean = np.array([3.0, -1.0])
    cov = np.eye(2)
    t1 = sample_theta(mean, cov, np.random.default_rng(5))
    t2 = sample_theta(mean, cov, np.random.default_rng(5))
    assert np.array_equal(t1, t2)
    # zero covariance repaired by jitter: draw collapses onto the mean
    t3 = sample_theta(mean, np.zeros((2, 2)), np.random.default_rng(5))
    assert np.allclose(t3, mean, atol=1e-3)


def test_edge_logit_synthetic_quadratic():
    # hypothesis b=1 predicts both endpoint streams exactly; b=0 misses by
    # delta each round: logit = prior log-odds + T * 2 * delta^2 / (2 sigma^2)
    spec = RewardSpec("count_based_shared", 2, 1)
    pr = isotropic_prior(2, 10.0, 0.5, 0.4)
    theta = np.array([0.0, 0.7])  # mu=0, gamma1=0.7 (the per-round miss)
    a = np.zeros((2, 2), dtype=np.int8)
    a[0, 1] = a[1, 0] = 1
    h = History(2)
    rounds = 5
    for _ in range(rounds):
        # treat node 0 alone; edge-present predicts r_1 = 0.7, edge-absent 0
        h.append(np.array([1, 0], dtype=np.int8), np.array([0.0, 0.7]))
    lg = edge_logit(0, 1, a, theta, h, spec, pr)
    want = math.log(0.4 / 0.6) + rounds * 0.7 ** 2 / (2 * 0.5)
    assert lg == pytest.approx(want, rel=1e-12)


def test_edge_logit_uninformative_when_features_untouched():
    # both endpoints untreated all rounds under a count-based spec: the edge
    # cannot change either stream, so the logit equals the prior log-odds
    spec = RewardSpec("count_based_shared", 4, 2)
    pr = isotropic_prior(3, 10.0, 0.25, 0.3)
    theta = np.array([1.0, 0.5, 0.9])
    a = np.zeros((4, 4), dtype=np.int8)
    h = History(4)
    for _ in range(6):
        h.append(np.array([0, 0, 1, 1], dtype=np.int8),
                 np.array([0.1, -0.2, 1.0, 1.3]))
    lg = edge_logit(0, 1, a, theta, h, spec, pr)
    assert lg == pytest.approx(pr.log_odds())


def test_edge_logit_endpoint_locality():
    # rewriting reward streams of nodes outside {i,j} leaves the logit alone
    rng = np.random.default_rng(3)
    spec = RewardSpec("additive_pairs", 5)
    d = dimension(spec)
    pr = isotropic_prior(d, 10.0, 0.25, 0.3)
    a = graph.erdos_renyi(5, 0.5, rng)
    theta = rng.standard_normal(d)
    h = _random_history(spec, a, theta, 0.5, 8, rng)
    lg = edge_logit(1, 3, a, theta, h, spec, pr)
    h2 = History(5)
    for z, r in h.rounds():
        r2 = r.copy()
        for ell in (0, 2, 4):
            r2[ell] = rng.standard_normal() * 10
        h2.append(z, r2)
    assert edge_logit(1, 3, a, theta, h2, spec, pr) == pytest.approx(lg, rel=1e-12)


def test_edge_logit_rejects_self_edge():
    spec = RewardSpec("count_based_shared", 3, 2)
    pr = isotropic_prior(3, 10.0, 0.25, 0.3)
    with pytest.raises(PosteriorError):
        edge_logit(1, 1, np.zeros((3, 3), dtype=np.int8), np.zeros(3),
                   History(3), spec, pr)


def test_gibbs_sweep_k0_identity():
    spec = RewardSpec("count_based_shared", 4, 2)
    pr = isotropic_prior(3, 10.0, 0.25, 0.3)
    st = PosteriorState(np.arange(3.0), initial_graph_sample(4, 0.3, np.random.default_rng(0)),
                        pr, sweep_count_k=0)
    out = gibbs_sweep(st, History(4), spec, np.random.default_rng(1))
    assert np.array_equal(out.theta_sample, st.theta_sample)
    assert np.array_equal(out.a_sample, st.a_sample)


def test_gibbs_empty_history_matches_prior():
    spec = RewardSpec("count_based_shared", 4, 2)
    d = dimension(spec)
    pr = isotropic_prior(d, 10.0, 0.25, 0.3)
    eng = engine.GibbsEngine(spec, pr, initial_graph_sample(4, 0.3, np.random.default_rng(0)),
                             sweeps_k=1)
    rng = np.random.default_rng(1)
    thetas, edges = [], []
    iu = np.triu_indices(4, 1)
    for _ in range(10_000):
        th, a = eng.run_sweeps(rng)
        thetas.append(th)
        edges.append(a[iu])
    edges = np.asarray(edges, dtype=float)
    assert np.all(np.abs(edges.mean(axis=0) - 0.3) < 0.02)
    thetas = np.stack(thetas)
    assert np.all(np.abs(thetas.mean(axis=0)) < 4 * math.sqrt(10.0) / math.sqrt(10_000) + 0.05)
    assert abs(thetas.var() - 10.0) / 10.0 < 0.1


def test_gibbs_sweep_preserves_symmetry():
    rng = np.random.default_rng(4)
    spec = RewardSpec("additive_pairs", 5)
    d = dimension(spec)
    pr = isotropic_prior(d, 10.0, 0.25, 0.3)
    a = graph.erdos_renyi(5, 0.5, rng)
    theta = rng.standard_normal(d)
    h = _random_history(spec, a, theta, 0.5, 10, rng)
    st = PosteriorState(pr.mu0.copy(), initial_graph_sample(5, 0.3, rng), pr, 3)
    out = gibbs_sweep(st, h, spec, rng)
    graph.validate_adjacency(out.a_sample)


def test_exact_marginals_empty_history():
    spec = RewardSpec("count_based_shared", 4, 3)
    pr = isotropic_prior(dimension(spec), 10.0, 0.25, 0.3)
    marg = exact_edge_marginals(History(4), spec, pr, 4)
    iu = np.triu_indices(4, 1)
    assert np.allclose(marg[iu], 0.3, atol=1e-12)


def test_exact_marginals_normalization():
    rng = np.random.default_rng(5)
    spec = RewardSpec("count_based_shared", 4, 3)
    d = dimension(spec)
    pr = isotropic_prior(d, 10.0, 0.25, 0.3)
    a = graph.erdos_renyi(4, 0.5, rng)
    theta = rng.uniform(0.5, 1.5, d)
    h = _random_history(spec, a, theta, 0.5, 10, rng)
    w = graph_posterior_weights(h, spec, pr, 4)
    assert abs(w.sum() - 1.0) < 1e-10


def test_exact_marginals_informative_round():
    # near-noiseless single round pins the edge: P(A_01) > 0.999
    spec = RewardSpec("paired_indicator", 2)
    pr = Prior(np.array([0.0, 1.0]), np.diag([1e-8, 1e-8]), 1e-4, 0.3)
    h = History(2)
    h.append(np.array([1, 0], dtype=np.int8), np.array([0.0, 1.0]))
    marg = exact_edge_marginals(h, spec, pr, 2)
    assert marg[0, 1] > 0.999


def test_exact_marginals_size_guard():
    spec = RewardSpec("count_based_shared", 7, 2)
    pr = isotropic_prior(3, 10.0, 0.25, 0.3)
    with pytest.raises(PosteriorError):
        exact_edge_marginals(History(7), spec, pr, 7)


def test_log_evidence_against_multivariate_normal():
    # theta-space evidence identity vs a direct density evaluation
    from scipy.stats import multivariate_normal
    rng = np.random.default_rng(6)
    spec = RewardSpec("count_based_shared", 3, 2)
    d = dimension(spec)
    pr = isotropic_prior(d, 5.0, 0.3, 0.4)
    a = graph.erdos_renyi(3, 0.7, rng)
    theta = rng.uniform(0.5, 1.5, d)
    h = _random_history(spec, a, theta, 0.6, 4, rng)
    got = posterior.log_evidence(h, a, spec, pr)
    hmat = posterior.stacked_design(h, a, spec)
    r = h.r_matrix().reshape(-1)
    cov = pr.sigma2 * np.eye(len(r)) + hmat @ pr.sigma0 @ hmat.T
    want = multivariate_normal.logpdf(r, mean=hmat @ pr.mu0, cov=cov)
    assert got == pytest.approx(want, rel=1e-10)


def test_gibbs_matches_exact_marginals_small():
    # short version of the acceptance oracle check
    rng = np.random.default_rng(7)
    spec = RewardSpec("count_based_shared", 4, 3)
    d = dimension(spec)
    pr = isotropic_prior(d, 10.0, 0.25, 0.3)
    a_true = graph.erdos_renyi(4, 0.5, rng)
    theta_true = rewards.sample_params(spec, rewards.named_protocol("count_shared"), rng)
    h = _random_history(spec, a_true, theta_true, 0.5, 15, rng)
    exact = exact_edge_marginals(h, spec, pr, 4)
    eng = engine.GibbsEngine(spec, pr, initial_graph_sample(4, 0.3, rng), sweeps_k=1)
    for z, r in h.rounds():
        eng.append_round(z, r)
    grng = np.random.default_rng(8)
    for _ in range(300):
        eng.run_sweeps(grng)
    acc = np.zeros((4, 4))
    keep = 3000
    for _ in range(keep):
        _, a = eng.run_sweeps(grng)
        acc += a
    gap = np.abs(acc / keep - exact)[np.triu_indices(4, 1)].max()
    assert gap < 0.05


def test_engine_matches_reference_all_kinds():
    # identical rng streams must give identical (theta, A) trajectories and
    # matching posterior statistics, for every reward kind and both engines
    rng_master = np.random.default_rng(42)
    for kind, dm in ALL_KINDS:
        spec = RewardSpec(kind, 5, dm)
        d = dimension(spec)
        pr = isotropic_prior(d, 10.0, 0.25, 0.3)
        envrng = np.random.default_rng(7)
        a_true = graph.erdos_renyi(5, 0.4, envrng)
        theta_true = envrng.standard_normal(d)
        h = _random_history(spec, a_true, theta_true, 0.5, 12, envrng)
        a0 = initial_graph_sample(5, 0.3, np.random.default_rng(3))

        st = PosteriorState(pr.mu0.copy(), a0.copy(), pr, 4)
        out_ref = gibbs_sweep(st, h, spec, np.random.default_rng(99))

        eng = engine.make_engine(spec, pr, a0, sweeps_k=4)
        for z, r in h.rounds():
            eng.append_round(z, r)
        th, a = eng.run_sweeps(np.random.default_rng(99))
        assert np.array_equal(out_ref.a_sample, a), kind
        assert np.allclose(out_ref.theta_sample, th, rtol=1e-7, atol=1e-9), kind

        if isinstance(eng, engine.GibbsEngine):
            prec_ref, b_ref = posterior.theta_precision(h, a, spec, pr)
            prec_eng, b_eng = eng._precision()
            assert np.allclose(prec_ref, prec_eng, rtol=1e-8), kind
            assert np.allclose(b_ref, b_eng, rtol=1e-8, atol=1e-12), kind
        mean_ref, _ = theta_posterior(h, a, spec, pr)
        assert np.allclose(eng.posterior_mean(), mean_ref, rtol=1e-7), kind
        rng_master.random()


def test_linmeans_engine_requires_diagonal_prior():
    spec = RewardSpec("linear_in_means_per_node", 4)
    s0 = np.eye(8)
    s0[0, 1] = s0[1, 0] = 0.2
    pr = Prior(np.zeros(8), s0, 1.0, 0.3)
    with pytest.raises(ValueError):
        engine.LinearMeansEngine(spec, pr, np.zeros((4, 4), dtype=np.int8))
    # the factory falls back to the generic engine
    eng = engine.make_engine(spec, pr, np.zeros((4, 4), dtype=np.int8))
    assert isinstance(eng, engine.GibbsEngine)


def test_random_scan_consumes_same_stream_shape():
    spec = RewardSpec("count_based_shared", 4, 2)
    d = dimension(spec)
    pr = isotropic_prior(d, 10.0, 0.25, 0.3)
    a0 = initial_graph_sample(4, 0.3, np.random.default_rng(0))
    st = PosteriorState(pr.mu0.copy(), a0.copy(), pr, 2)
    out = gibbs_sweep(st, History(4), spec, np.random.default_rng(1),
                      random_scan=True)
    graph.validate_adjacency(out.a_sample)

"""Downstream causal quantities: direct, single-neighbor indirect, and total
treatment effects under a (graph, parameters) pair, plus the estimators that
recover them from a finished adaptive run or a separate randomized phase.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rewards
from .graph import degrees
from .posterior import History
from .rewards import Environment, RewardSpec, design_matrix, design_row


class CausalError(ValueError):
    pass


@dataclass(frozen=True)
class EstimandTriple:
    tau_d: float
    tau_i1: float
    tau_tte: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tau_d, self.tau_i1, self.tau_tte])


ESTIMAND_NAMES = ("tau_d", "tau_i1", "tau_tte")


def true_estimands(spec: RewardSpec, theta: np.ndarray,
                   a: np.ndarray) -> EstimandTriple:
    """Population effects under (theta, a).

    tau_d: average over nodes of treating the node alone vs nobody.
    tau_i1: average over non-isolated nodes of having exactly one treated
    neighbor (uniform over which one) vs nobody; isolated nodes are excluded
    from the average.
    tau_tte: average of treating everyone vs nobody.
    """
    n = spec.n
    z0 = np.zeros(n, dtype=np.int8)
    base = np.array([design_row(spec, z0, a, i) @ theta for i in range(n)])

    tau_d = 0.0
    for i in range(n):
        zi = z0.copy()
        zi[i] = 1
        tau_d += design_row(spec, zi, a, i) @ theta - base[i]
    tau_d /= n

    deg = degrees(a)
    live = np.nonzero(deg > 0)[0]
    tau_i1 = 0.0
    if len(live):
        for i in live:
            nbrs = np.nonzero(a[i])[0]
            acc = 0.0
            for j in nbrs:
                zj = z0.copy()
                zj[j] = 1
                acc += design_row(spec, zj, a, i) @ theta - base[i]
            tau_i1 += acc / len(nbrs)
        tau_i1 /= len(live)

    z1 = np.ones(n, dtype=np.int8)
    full = np.array([design_row(spec, z1, a, i) @ theta for i in range(n)])
    tau_tte = float(np.mean(full - base))
    return EstimandTriple(float(tau_d), float(tau_i1), tau_tte)


def graph_point_estimate(marginals: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold posterior edge marginals into a 0/1 graph (strict >)."""
    if not (0.0 < threshold < 1.0):
        raise CausalError(f"threshold must be in (0,1), got {threshold}")
    m = np.asarray(marginals)
    a = (m > threshold).astype(np.int8)
    np.fill_diagonal(a, 0)
    return a


def randomized_phase(env: Environment, t_eval: int, treat_prob: float,
                     rng: np.random.Generator) -> History:
    """iid Bernoulli designs with outcomes from the true environment; no
    budget constraint applies in this phase."""
    if not (0.0 <= treat_prob < 1.0):
        raise CausalError(f"treat_prob must be in [0,1), got {treat_prob}")
    h = History(env.spec.n)
    for _ in range(t_eval):
        z = (rng.random(env.spec.n) < treat_prob).astype(np.int8)
        h.append(z, env.sample(z, rng))
    return h


@dataclass
class OlsFit:
    theta: np.ndarray
    ridge_used: bool


_COND_LIMIT = 1e10


def estimate_ols(history: History, spec_fit: RewardSpec, a_hat: np.ndarray,
                 ridge_fallback: float = 0.01) -> OlsFit:
    """Least squares on the stacked design under a_hat; falls back to ridge
    when the normal equations are ill-conditioned and flags that it did."""
    if len(history) == 0:
        raise CausalError("estimate_ols needs a non-empty history")
    h = np.concatenate([design_matrix(spec_fit, z, a_hat)
                        for z, _ in history.rounds()], axis=0)
    y = history.r_matrix().reshape(-1)
    xtx = h.T @ h
    xty = h.T @ y
    cond = np.linalg.cond(xtx)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        theta = np.linalg.solve(xtx + ridge_fallback * np.eye(len(xtx)), xty)
        return OlsFit(theta, True)
    return OlsFit(np.linalg.solve(xtx, xty), False)


def estimate_from_posterior(theta_hat: np.ndarray, spec: RewardSpec,
                            a_hat: np.ndarray) -> EstimandTriple:
    """Plug a point estimate (posterior mean or OLS fit) into the estimand
    formulas under the working graph."""
    return true_estimands(spec, theta_hat, a_hat)


def rmse(estimates: list[EstimandTriple],
         truths: list[EstimandTriple]) -> EstimandTriple:
    if len(estimates) != len(truths) or not estimates:
        raise CausalError("rmse needs equal-length, non-empty estimate/truth lists")
    err = np.stack([e.as_array() - t.as_array()
                    for e, t in zip(estimates, truths)])
    vals = np.sqrt(np.mean(err ** 2, axis=0))
    return EstimandTriple(*map(float, vals))


# ---------------------------------------------------------------------------
# Full estimation pipeline (adaptive design -> recovered graph -> estimators)
# ---------------------------------------------------------------------------

ESTIMATOR_NAMES = ("gibbs_ahat", "ols_ahat", "ols_atrue")


def run_estimation(cfg, t_eval: int | None = None, workers: int = 1,
                   out_dir: str | Path | None = None) -> dict:
    """For each replication: run the adaptive phase, threshold the posterior
    marginals into a graph estimate, then compare the three estimators
    against the true estimands. Returns RMSE per (estimand, estimator)."""
    from . import runner as runner_mod

    t_eval = cfg.horizon if t_eval is None else t_eval
    truths, per_estimator = [], {k: [] for k in ESTIMATOR_NAMES}
    rows = []
    ridge_flags = []
    for rep in range(cfg.replications):
        res = runner_mod.run_replication(cfg, rep, keep_history=True)
        env = runner_mod.build_environment(cfg, rep)
        truth = true_estimands(env.spec, env.theta_true, env.graph_true)
        truths.append(truth)
        if res.marginals is None:
            raise CausalError("estimation pipeline needs a policy that yields edge marginals")
        a_hat = graph_point_estimate(res.marginals, 0.5)

        # (i) conjugate posterior mean over the adaptive-phase data, graph
        # pinned at a_hat
        theta_mean = _refit_posterior_mean(cfg, a_hat, res.z_hist, res.r_hist)
        est_gibbs = estimate_from_posterior(theta_mean, cfg.policy.fit_spec, a_hat)

        # (ii)/(iii) OLS on a fresh randomized phase, under a_hat and true A
        inf_rng = runner_mod.stream(runner_mod.rep_seed(cfg.base_seed, rep) + 7, 3)
        hist = randomized_phase(env, t_eval, cfg.budget / cfg.n, inf_rng)
        fit_hat = estimate_ols(hist, cfg.policy.fit_spec, a_hat)
        fit_true = estimate_ols(hist, cfg.policy.fit_spec, env.graph_true)
        ridge_flags.append({"ols_ahat": fit_hat.ridge_used,
                            "ols_atrue": fit_true.ridge_used})
        est_ols_hat = estimate_from_posterior(fit_hat.theta, cfg.policy.fit_spec, a_hat)
        est_ols_true = estimate_from_posterior(fit_true.theta, cfg.policy.fit_spec,
                                               env.graph_true)
        per_estimator["gibbs_ahat"].append(est_gibbs)
        per_estimator["ols_ahat"].append(est_ols_hat)
        per_estimator["ols_atrue"].append(est_ols_true)
        rows.append({"rep": rep, "truth": truth,
                     "gibbs_ahat": est_gibbs, "ols_ahat": est_ols_hat,
                     "ols_atrue": est_ols_true})

    table = {est: rmse(per_estimator[est], truths) for est in ESTIMATOR_NAMES}
    out = {
        "name": cfg.name,
        "t_eval": t_eval,
        "truth_means": {nm: float(np.mean([t.as_array()[k] for t in truths]))
                        for k, nm in enumerate(ESTIMAND_NAMES)},
        "rmse": {est: dict(zip(ESTIMAND_NAMES, table[est].as_array().tolist()))
                 for est in ESTIMATOR_NAMES},
        "ridge_fallbacks": ridge_flags,
    }
    if out_dir is not None:
        outp = Path(out_dir)
        outp.mkdir(parents=True, exist_ok=True)
        with open(outp / "estimation_summary.json", "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
        with open(outp / "estimation_rmse.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["estimand"] + list(ESTIMATOR_NAMES))
            for k, nm in enumerate(ESTIMAND_NAMES):
                w.writerow([nm] + [f"{table[est].as_array()[k]:.10g}"
                                   for est in ESTIMATOR_NAMES])
        with open(outp / "estimation_per_rep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rep", "quantity"] + list(ESTIMAND_NAMES))
            for row in rows:
                for key in ("truth",) + ESTIMATOR_NAMES:
                    w.writerow([row["rep"], key]
                               + [f"{v:.10g}" for v in row[key].as_array()])
    return out


def _refit_posterior_mean(cfg, a_hat: np.ndarray, z_hist: np.ndarray,
                          r_hist: np.ndarray) -> np.ndarray:
    from .engine import make_engine

    eng = make_engine(cfg.policy.fit_spec, cfg.policy.prior, a_hat,
                      sample_graph=False)
    for z, r in zip(z_hist, r_hist):
        eng.append_round(z, r)
    return eng.posterior_mean()

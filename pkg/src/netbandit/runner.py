"""Experiment orchestration: config parsing and validation, environment
construction, the sequential allocation loop with regret accounting against
the exact optimum, seed-matched replications, sweeps, and persistence.

Seed scheme: replication seed = base_seed + 1000 * rep_index, split into three
named substreams via default_rng([rep_seed, k]) with k = 0 environment,
1 policy, 2 noise. Sweep axes only touch the policy, so matched-seed sweeps
hold the environment and noise draws fixed within a replication.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as graph_mod
from . import policies as pol
from . import rewards
from .posterior import Prior
from .rewards import Dist, Environment, RewardSpec

CSV_COLUMNS = ["t", "regret_inst", "regret_cum", "f_opt", "f_chosen",
               "n_treated", "reward_realized", "f1_snapshot", "acc_snapshot"]

ENV_STREAM, POLICY_STREAM, NOISE_STREAM = 0, 1, 2


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    name: str
    n: int
    graph_spec: dict
    reward_spec: RewardSpec
    protocol: dict[str, Dist]
    sigma: float
    policy: pol.PolicyConfig
    horizon: int
    budget: int
    replications: int
    base_seed: int
    snapshot_every: int = 100
    marginal_sweeps: int = 50
    output_dir: str | None = None
    raw: dict = field(default_factory=dict)


def _get(d: dict, key: str, default=None, required=False, path=""):
    full = f"{path}.{key}".lstrip(".")
    if key not in d:
        if required:
            raise ConfigError(f"missing config key: {full}")
        return default
    return d[key]


def _parse_dist(obj, path: str) -> Dist:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{path}: distribution needs a 'kind'")
    return Dist(obj["kind"], float(obj.get("a", 0.0)), float(obj.get("b", 0.0)),
                bool(obj.get("shared", False)))


def _parse_reward(obj: dict, n: int, path: str) -> RewardSpec:
    kind = _get(obj, "kind", required=True, path=path)
    d_max = obj.get("d_max")
    try:
        return RewardSpec(kind, n, d_max if d_max is None else int(d_max))
    except rewards.RewardSpecError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    """Validate a config mapping (already loaded from YAML) into a RunConfig."""
    name = _get(doc, "name", default="run")
    env = _get(doc, "environment", required=True)
    n = int(_get(env, "n", required=True, path="environment"))
    gspec = _get(env, "graph", required=True, path="environment")
    family = _get(gspec, "family", required=True, path="environment.graph")
    if family not in ("erdos_renyi", "sbm", "edge_list"):
        raise ConfigError(f"environment.graph.family: unknown family {family!r}")
    for prob_key in ("p", "p_within", "p_between"):
        if prob_key in gspec and not (0.0 <= float(gspec[prob_key]) <= 1.0):
            raise ConfigError(f"environment.graph.{prob_key}: must be in [0,1]")
    reward_spec = _parse_reward(_get(env, "reward", required=True, path="environment"),
                                n, "environment.reward")
    proto_obj = _get(env, "protocol", required=True, path="environment")
    if isinstance(proto_obj, str):
        try:
            protocol = rewards.named_protocol(proto_obj)
        except rewards.RewardSpecError as exc:
            raise ConfigError(f"environment.protocol: {exc}") from exc
    else:
        protocol = {k: _parse_dist(v, f"environment.protocol.{k}")
                    for k, v in proto_obj.items()}
    if set(protocol) != set(rewards.protocol_blocks(reward_spec)):
        raise ConfigError(
            f"environment.protocol: blocks {sorted(protocol)} do not match "
            f"reward kind {reward_spec.kind} "
            f"(wants {sorted(rewards.protocol_blocks(reward_spec))})")
    sigma = float(_get(env, "sigma", required=True, path="environment"))
    if sigma <= 0:
        raise ConfigError("environment.sigma: must be > 0")

    horizon = int(_get(doc, "horizon", required=True))
    if horizon < 1:
        raise ConfigError("horizon: must be >= 1")
    budget = int(_get(doc, "budget", required=True))
    if not (1 <= budget <= n):
        raise ConfigError(f"budget: must be in [1, n={n}]")

    pdoc = _get(doc, "policy", required=True)
    kind = _get(pdoc, "kind", required=True, path="policy")
    if kind not in ("gibbs_ts", "etc_ts", "known_a_ts", "no_interference_ts"):
        raise ConfigError(f"policy.kind: unknown policy {kind!r}")
    fit_obj = pdoc.get("fit")
    fit_spec = (reward_spec if fit_obj is None
                else _parse_reward(fit_obj, n, "policy.fit"))
    prior_doc = pdoc.get("prior", {})
    scale = float(prior_doc.get("sigma0_scale", 10.0))
    rho = float(prior_doc.get("rho", 0.3))
    if not (0.0 < rho < 1.0):
        raise ConfigError("policy.prior.rho: must lie strictly inside (0,1)")
    sigma2 = prior_doc.get("sigma2")
    sigma2 = sigma ** 2 if sigma2 is None else float(sigma2)
    dim = rewards.dimension(fit_spec)
    prior = Prior(np.zeros(dim), scale * np.eye(dim), sigma2, rho)

    odoc = pdoc.get("optimizer", {})
    optimizer = pol.OptimizerMode(
        mode=odoc.get("mode", "auto"),
        max_candidates=int(odoc.get("max_candidates", 1_000_000)),
        restarts=int(odoc.get("restarts", 20)),
        max_iters=int(odoc.get("max_iters", 200)))
    if optimizer.mode not in ("auto", "exact_enumeration", "top_b", "swap_local_search"):
        raise ConfigError(f"policy.optimizer.mode: unknown mode {optimizer.mode!r}")

    edoc = pdoc.get("etc", {})
    etc_m_val = edoc.get("m", "auto")
    if etc_m_val != "auto":
        etc_m_val = int(etc_m_val)
        if etc_m_val < 1:
            raise ConfigError("policy.etc.m: must be >= 1 (or 'auto')")
    pcfg = pol.PolicyConfig(
        kind=kind, fit_spec=fit_spec, prior=prior, budget=budget,
        optimizer=optimizer,
        sweeps_k=int(pdoc.get("sweeps_k", 10)),
        warmup_rounds=int(pdoc.get("warmup_rounds", 0)),
        random_scan=bool(pdoc.get("random_scan", False)),
        etc_m=etc_m_val,
        etc_delta_gamma=float(edoc.get("delta_gamma", 0.3)),
        etc_threshold_rule=edoc.get("threshold_rule", "theorem"))
    if pcfg.sweeps_k < 0:
        raise ConfigError("policy.sweeps_k: must be >= 0")
    if kind == "etc_ts" and etc_m_val != "auto" and n * etc_m_val > horizon:
        raise ConfigError(f"policy.etc.m: phase 1 needs n*m = {n * etc_m_val} "
                          f"rounds > horizon {horizon}")

    rdoc = _get(doc, "replications", required=True)
    reps = int(_get(rdoc, "count", required=True, path="replications"))
    if reps < 1:
        raise ConfigError("replications.count: must be >= 1")
    base_seed = int(rdoc.get("base_seed", 0))

    return RunConfig(
        name=name, n=n, graph_spec=dict(gspec), reward_spec=reward_spec,
        protocol=protocol, sigma=sigma, policy=pcfg, horizon=horizon,
        budget=budget, replications=reps, base_seed=base_seed,
        snapshot_every=int(doc.get("snapshot_every", 100)),
        marginal_sweeps=int(doc.get("marginal_sweeps", 50)),
        output_dir=doc.get("output_dir"), raw=copy.deepcopy(doc))


def load_config(path) -> RunConfig:
    import yaml
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return parse_config(doc)


# ---------------------------------------------------------------------------
# Environment construction and the true optimum
# ---------------------------------------------------------------------------

def rep_seed(base_seed: int, rep_index: int) -> int:
    return base_seed + 1000 * rep_index

def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


def build_environment(cfg: RunConfig, rep_index: int) -> Environment:
    rng = stream(rep_seed(cfg.base_seed, rep_index), ENV_STREAM)
    g = cfg.graph_spec
    if g["family"] == "erdos_renyi":
        a = graph_mod.erdos_renyi(cfg.n, float(g["p"]), rng)
    elif g["family"] == "sbm":
        a = graph_mod.sbm(cfg.n, int(g["k_groups"]), float(g["p_within"]),
                          float(g["p_between"]), rng)
    else:
        a = graph_mod.load_edge_list(g["path"])
        if a.shape[0] != cfg.n:
            raise ConfigError(
                f"environment.n: edge list has {a.shape[0]} nodes, config says {cfg.n}")
    theta = rewards.sample_params(cfg.reward_spec, cfg.protocol, rng)
    return Environment(cfg.reward_spec, theta, a, cfg.sigma)


def environment_hash(env: Environment) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(env.graph_true, dtype=np.int8).tobytes())
    h.update(np.ascontiguousarray(env.theta_true, dtype=np.float64).tobytes())
    h.update(f"{env.sigma:.17g}".encode())
    return h.hexdigest()[:16]


def true_optimum(env: Environment, budget: int,
                 max_candidates: int = 2_000_000) -> tuple[np.ndarray, float]:
    """Exact argmax of expected total reward under the true (A, theta)."""
    spec = env.spec
    if spec.kind in rewards.COLLAPSIBLE_KINDS:
        _, s = rewards.modular_scores(spec, env.theta_true, env.graph_true)
        z = pol.top_b_from_scores(s, budget)
        return z, env.total(z)
    if pol._n_candidates(spec.n, budget) > max_candidates:
        raise ConfigError(
            "environment: exact optimum is intractable for this (n, budget, reward kind)")
    z = pol._exact_enumeration(spec, env.theta_true, env.graph_true, budget,
                               max_candidates)
    return z, env.total(z)


# ---------------------------------------------------------------------------
# Replication loop
# ---------------------------------------------------------------------------

@dataclass
class RepResult:
    rep_index: int
    seed: int
    env_hash: str
    records: dict[str, np.ndarray]
    final_regret: float
    f1_final: float | None
    acc_final: float | None
    marginals: np.ndarray | None
    a_hat: np.ndarray | None
    theta_post_mean: np.ndarray | None
    z_star: np.ndarray
    f_star: float
    runtime_s: float
    z_hist: np.ndarray | None = None
    r_hist: np.ndarray | None = None


def run_replication(cfg: RunConfig, rep_index: int,
                    keep_history: bool = False) -> RepResult:
    t0 = time.time()
    seed = rep_seed(cfg.base_seed, rep_index)
    env = build_environment(cfg, rep_index)
    z_star, f_star = true_optimum(env, cfg.budget)
    policy_rng = stream(seed, POLICY_STREAM)
    noise_rng = stream(seed, NOISE_STREAM)
    policy = pol.build_policy(cfg.policy, cfg.n, cfg.horizon,
                              env.graph_true, cfg.sigma, policy_rng)

    horizon = cfg.horizon
    regret_inst = np.zeros(horizon)
    f_chosen = np.zeros(horizon)
    n_treated = np.zeros(horizon, dtype=np.int64)
    realized = np.zeros(horizon)
    f1_snap = np.full(horizon, np.nan)
    acc_snap = np.full(horizon, np.nan)
    z_hist = np.zeros((horizon, cfg.n), dtype=np.int8) if keep_history else None
    r_hist = np.zeros((horizon, cfg.n)) if keep_history else None

    for t in range(horizon):
        z = policy.act(policy_rng)
        if int(z.sum()) > cfg.budget:
            raise pol.PolicyError(f"round {t + 1}: policy exceeded the budget")
        r = env.sample(z, noise_rng)
        policy.observe(z, r)
        ft = env.total(z)
        f_chosen[t] = ft
        regret_inst[t] = max(f_star - ft, 0.0)
        n_treated[t] = int(z.sum())
        realized[t] = float(r.sum())
        if keep_history:
            z_hist[t] = z
            r_hist[t] = r
        if (t + 1) % cfg.snapshot_every == 0 or t == horizon - 1:
            a_est = policy.graph_estimate()
            if a_est is not None:
                f1_snap[t] = graph_mod.edge_f1(a_est, env.graph_true)
                acc_snap[t] = graph_mod.edge_accuracy(a_est, env.graph_true)

    marginals = policy.edge_marginals(policy_rng, cfg.marginal_sweeps)
    a_hat = None
    if marginals is not None:
        a_hat = (marginals > 0.5).astype(np.int8)
    elif policy.graph_estimate() is not None:
        a_hat = policy.graph_estimate()
    f1_final = acc_final = None
    if a_hat is not None:
        f1_final = graph_mod.edge_f1(a_hat, env.graph_true)
        acc_final = graph_mod.edge_accuracy(a_hat, env.graph_true)

    records = {
        "t": np.arange(1, horizon + 1),
        "regret_inst": regret_inst,
        "regret_cum": np.cumsum(regret_inst),
        "f_opt": np.full(horizon, f_star),
        "f_chosen": f_chosen,
        "n_treated": n_treated,
        "reward_realized": realized,
        "f1_snapshot": f1_snap,
        "acc_snapshot": acc_snap,
    }
    return RepResult(
        rep_index=rep_index, seed=seed, env_hash=environment_hash(env),
        records=records, final_regret=float(records["regret_cum"][-1]),
        f1_final=f1_final, acc_final=acc_final, marginals=marginals,
        a_hat=a_hat, theta_post_mean=policy.posterior_mean_theta(),
        z_star=z_star, f_star=f_star, runtime_s=time.time() - t0,
        z_hist=z_hist, r_hist=r_hist)


def cumulative_regret(records: dict[str, np.ndarray]) -> np.ndarray:
    """Prefix sums of the per-round expected-reward gap (guarded at zero)."""
    return np.cumsum(np.maximum(records["regret_inst"], 0.0))


# ---------------------------------------------------------------------------
# Multi-replication experiments and sweeps
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return f"{x:.10g}"
    return str(x)


def write_rep_csv(path: Path, records: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        horizon = len(records["t"])
        for t in range(horizon):
            w.writerow([_fmt(records[c][t] if not isinstance(records[c][t], np.generic)
                             else records[c][t].item()) for c in CSV_COLUMNS])


def write_marginals_csv(path: Path, marginals: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = marginals.shape[0]
        w.writerow([f"node_{j}" for j in range(n)])
        for i in range(n):
            w.writerow([_fmt(float(marginals[i, j])) for j in range(n)])


def summarize_finals(finals: list[float]) -> dict:
    arr = np.asarray(finals, dtype=np.float64)
    q25, q75 = np.percentile(arr, [25, 75])
    k = int(0.1 * len(arr))
    trimmed = np.sort(arr)[k:len(arr) - k] if len(arr) > 2 * k else arr
    return {"median": float(np.median(arr)), "iqr25": float(q25),
            "iqr75": float(q75), "mean": float(arr.mean()),
            "trimmed_mean": float(trimmed.mean()), "values": arr.tolist()}


def _rep_worker(args):
    cfg, rep = args
    return run_replication(cfg, rep)


def run_experiment(cfg: RunConfig, workers: int = 1,
                   out_dir: str | Path | None = None) -> dict:
    """Run all replications; writes per-rep CSVs, graph estimates, and a JSON
    summary when an output directory is configured. Returns the summary."""
    t0 = time.time()
    reps = list(range(cfg.replications))
    if workers > 1 and len(reps) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_rep_worker, [(cfg, r) for r in reps]))
    else:
        results = [run_replication(cfg, r) for r in reps]
    results.sort(key=lambda r: r.rep_index)

    out = Path(out_dir) if out_dir is not None else (
        Path(cfg.output_dir) if cfg.output_dir else None)
    files = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for res in results:
            stem = f"rep{res.rep_index:03d}"
            write_rep_csv(out / f"{stem}.csv", res.records)
            files.append(f"{stem}.csv")
            if res.a_hat is not None:
                graph_mod.save_edge_list(res.a_hat, out / f"{stem}_ahat.edges")
                files.append(f"{stem}_ahat.edges")
            if res.marginals is not None:
                write_marginals_csv(out / f"{stem}_marginals.csv", res.marginals)
                files.append(f"{stem}_marginals.csv")

    summary = {
        "name": cfg.name,
        "config": cfg.raw,
        "regret_convention": "expected-reward regret (noise-free gap to the exact optimum); "
                             "realized rewards logged in reward_realized",
        "seed_scheme": "rep_seed = base_seed + 1000*rep; substreams [seed, k] "
                       "with k=0 env, 1 policy, 2 noise",
        "seed_ledger": {str(r.rep_index): r.seed for r in results},
        "env_hashes": {str(r.rep_index): r.env_hash for r in results},
        "final_regret": summarize_finals([r.final_regret for r in results]),
        "recovery": {
            "f1": [r.f1_final for r in results],
            "accuracy": [r.acc_final for r in results],
            "f1_median": _median_or_none([r.f1_final for r in results]),
            "accuracy_median": _median_or_none([r.acc_final for r in results]),
        },
        "f_star": {str(r.rep_index): r.f_star for r in results},
        "runtime_s": time.time() - t0,
    }
    if out is not None:
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        files.append("summary.json")
        summary["files"] = files
    return summary


def _median_or_none(vals):
    xs = [v for v in vals if v is not None]
    return float(np.median(xs)) if xs else None


def set_config_key(doc: dict, dotted: str, value) -> None:
    """Assign a (possibly nested) config key, creating maps as needed."""
    parts = dotted.split(".")
    cur = doc
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value


KNOWN_SWEEP_AXES = {
    "rho": "policy.prior.rho",
    "sweeps_k": "policy.sweeps_k",
    "etc_m": "policy.etc.m",
}

SWEEPABLE_KEYS = {
    "policy.prior.rho", "policy.prior.sigma0_scale", "policy.prior.sigma2",
    "policy.sweeps_k", "policy.warmup_rounds", "policy.kind",
    "policy.etc.m", "policy.etc.delta_gamma", "policy.etc.threshold_rule",
    "policy.optimizer.restarts", "policy.optimizer.max_iters",
    "horizon", "budget", "environment.sigma",
    "environment.graph.p", "environment.graph.p_within",
    "environment.graph.p_between",
}


def _key_exists(doc: dict, dotted: str) -> bool:
    cur = doc
    for p in dotted.split("."):
        if not isinstance(cur, dict) or p not in cur:
            return False
        cur = cur[p]
    return True


def run_sweep(base_doc: dict, axis: str, grid: list, workers: int = 1,
              out_dir: str | Path | None = None) -> dict:
    """Re-run the experiment once per grid value of one config key.

    The base seed is shared across cells, so environments are matched; the
    axis may be a shorthand name or a dotted config path.
    """
    dotted = KNOWN_SWEEP_AXES.get(axis, axis)
    if dotted not in SWEEPABLE_KEYS and not _key_exists(base_doc, dotted):
        raise ConfigError(f"sweep axis {axis!r}: not a recognized config key")
    if not grid:
        raise ConfigError("sweep grid: must be non-empty")
    # validate the axis value range by applying it to a copy
    probe = copy.deepcopy(base_doc)
    set_config_key(probe, dotted, grid[0])
    parse_config(probe)

    cells = []
    out = Path(out_dir) if out_dir is not None else None
    for value in grid:
        doc = copy.deepcopy(base_doc)
        set_config_key(doc, dotted, value)
        doc["name"] = f"{base_doc.get('name', 'run')}_{axis}={value}"
        cfg = parse_config(doc)
        cell_out = out / f"{axis}={value}" if out is not None else None
        summary = run_experiment(cfg, workers=workers, out_dir=cell_out)
        cells.append({"axis": axis, "value": value,
                      "final_regret": summary["final_regret"],
                      "recovery": summary["recovery"],
                      "env_hashes": summary["env_hashes"]})
    table = {
        "axis": axis, "grid": list(grid), "cells": cells,
        "argmin_median": min(cells, key=lambda c: c["final_regret"]["median"])["value"],
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep_summary.json", "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
        with open(out / "sweep_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([axis, "median", "iqr25", "iqr75", "mean", "trimmed_mean",
                        "f1_median", "accuracy_median"])
            for c in cells:
                fr = c["final_regret"]
                w.writerow([c["value"], _fmt(fr["median"]), _fmt(fr["iqr25"]),
                            _fmt(fr["iqr75"]), _fmt(fr["mean"]),
                            _fmt(fr["trimmed_mean"]),
                            _fmt(c["recovery"]["f1_median"] if c["recovery"]["f1_median"] is not None else float("nan")),
                            _fmt(c["recovery"]["accuracy_median"] if c["recovery"]["accuracy_median"] is not None else float("nan"))])
    return table

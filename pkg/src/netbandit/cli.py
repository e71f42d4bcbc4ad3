"""Command-line entry point.

Subcommands: run (single experiment), sweep (one config key over a grid),
oracle-check (Gibbs vs exact enumeration marginals), recover (emit the graph
estimate and posterior marginals only), estimate (downstream effect RMSE
table), describe-config (print or validate the config schema).

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

CONFIG_SCHEMA = """\
Config schema (YAML). Keys marked * are required.

name: str                        experiment label
environment:                     *
  n: int                         * node count
  graph:                         * {family: erdos_renyi, p} |
                                   {family: sbm, k_groups, p_within, p_between} |
                                   {family: edge_list, path}
  reward: {kind, [d_max]}        * reward parameterization; kinds:
                                   linear_in_means_per_node, count_based_shared,
                                   count_based_per_node, pairwise_nia,
                                   additive_pairs, saturation_spec_a,
                                   interaction_spec_b, paired_indicator
  protocol: name | {block: {kind, a, b, [shared]}}
                                 * parameter-sampling table; named protocols:
                                   head_to_head_small_xi, head_to_head_large_xi,
                                   spec_a, spec_b, additive, count_shared,
                                   village, linmeans_shared, paired_unit
  sigma: float                   * noise standard deviation
policy:                          *
  kind: gibbs_ts | etc_ts | known_a_ts | no_interference_ts   *
  fit: {kind, [d_max]}           fitted reward model (default: environment reward)
  prior: {sigma0_scale, rho, [sigma2]}   theta prior scale, edge prior, noise var
  sweeps_k: int                  Gibbs sweeps per round (default 10)
  warmup_rounds: int             random-exploration rounds before TS (default 0)
  random_scan: bool              randomize edge visitation order (default false)
  optimizer: {mode, max_candidates, restarts, max_iters}
                                 mode: auto | exact_enumeration | top_b |
                                 swap_local_search
  etc: {m: auto|int, delta_gamma, threshold_rule: theorem|adaptive}
horizon: int                     * rounds T
budget: int                      * max simultaneous treatments B
replications: {count, base_seed} * rep count and seed origin
snapshot_every: int              graph-recovery metric cadence (default 100)
marginal_sweeps: int             extra sweeps for final edge marginals (default 50)
output_dir: str                  where CSV/JSON artifacts go
"""


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("NETBANDIT_WORKERS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _load(args):
    from .runner import load_config

    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg.base_seed = args.seed_override
        cfg.raw.setdefault("replications", {})["base_seed"] = args.seed_override
    if args.out is not None:
        cfg.output_dir = args.out
        cfg.raw["output_dir"] = args.out
    return cfg


def _config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_manifest(out_dir: Path, summary: dict, raw: dict) -> None:
    manifest = {
        "config_hash": _config_hash(raw),
        "files": sorted(str(p.relative_to(out_dir))
                        for p in out_dir.rglob("*") if p.is_file()
                        and p.name != "manifest.json"),
        "seed_ledger": summary.get("seed_ledger"),
        "written_at_unix": int(time.time()),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def cmd_run(args) -> int:
    from .runner import run_experiment

    cfg = _load(args)
    out_dir = cfg.output_dir or f"out/{cfg.name}"
    summary = run_experiment(cfg, workers=_workers(args), out_dir=out_dir)
    _write_manifest(Path(out_dir), summary, cfg.raw)
    fr = summary["final_regret"]
    print(f"{cfg.name}: {cfg.replications} reps, median final regret "
          f"{fr['median']:.2f} [IQR {fr['iqr25']:.2f}, {fr['iqr75']:.2f}] "
          f"({summary['runtime_s']:.1f}s)")
    print(f"outputs in {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    import yaml

    from .runner import parse_config, run_sweep

    with open(args.config) as fh:
        doc = yaml.safe_load(fh)
    parse_config(doc)  # validate the base before touching the axis
    grid = [_parse_scalar(v) for v in args.grid.split(",")]
    out_dir = args.out or f"out/{doc.get('name', 'run')}_sweep_{args.axis}"
    if args.seed_override is not None:
        doc.setdefault("replications", {})["base_seed"] = args.seed_override
    table = run_sweep(doc, args.axis, grid, workers=_workers(args), out_dir=out_dir)
    for cell in table["cells"]:
        fr = cell["final_regret"]
        print(f"{args.axis}={cell['value']}: median {fr['median']:.2f} "
              f"[{fr['iqr25']:.2f}, {fr['iqr75']:.2f}]")
    print(f"argmin median at {args.axis}={table['argmin_median']}")
    print(f"outputs in {out_dir}")
    return 0


def _parse_scalar(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            continue
    return s


def cmd_oracle_check(args) -> int:
    from . import graph, rewards
    from .engine import GibbsEngine
    from .posterior import History, exact_edge_marginals, initial_graph_sample, isotropic_prior
    from .rewards import RewardSpec

    n, rounds, seed = args.n, args.rounds, args.seed
    spec = RewardSpec("count_based_shared", n, d_max=min(3, n - 1))
    prior = isotropic_prior(rewards.dimension(spec), 10.0, args.sigma ** 2, 0.3)
    rng = np.random.default_rng(seed)
    a_true = graph.erdos_renyi(n, 0.4, rng)
    theta = rewards.sample_params(spec, rewards.named_protocol("count_shared"), rng)
    env = rewards.Environment(spec, theta, a_true, args.sigma)
    hist = History(n)
    for _ in range(rounds):
        z = (rng.random(n) < 0.4).astype(np.int8)
        hist.append(z, env.sample(z, rng))

    exact = exact_edge_marginals(hist, spec, prior, n)
    eng = GibbsEngine(spec, prior, initial_graph_sample(n, prior.rho, rng), sweeps_k=1)
    for z, r in hist.rounds():
        eng.append_round(z, r)
    grng = np.random.default_rng(seed + 1)
    for _ in range(args.burn_in):
        eng.run_sweeps(grng)
    acc = np.zeros((n, n))
    for _ in range(args.sweeps):
        _, a = eng.run_sweeps(grng)
        acc += a
    gibbs = acc / args.sweeps
    gap = float(np.abs(gibbs - exact)[np.triu_indices(n, 1)].max())
    ok = gap <= args.tolerance
    print(f"max |gibbs - exact| edge-marginal gap: {gap:.4f} "
          f"({args.sweeps} sweeps after {args.burn_in} burn-in)")
    print("PASS" if ok else "FAIL", f"at tolerance {args.tolerance}")
    return 0 if ok else 1


def cmd_recover(args) -> int:
    from . import graph as graph_mod
    from .runner import run_replication, write_marginals_csv

    cfg = _load(args)
    out_dir = Path(cfg.output_dir or f"out/{cfg.name}_recover")
    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in range(cfg.replications):
        res = run_replication(cfg, rep)
        stem = f"rep{rep:03d}"
        if res.marginals is not None:
            write_marginals_csv(out_dir / f"{stem}_marginals.csv", res.marginals)
        if res.a_hat is not None:
            graph_mod.save_edge_list(res.a_hat, out_dir / f"{stem}_ahat.edges")
        print(f"rep {rep}: recovery f1={res.f1_final} acc={res.acc_final}")
    print(f"outputs in {out_dir}")
    return 0


def cmd_estimate(args) -> int:
    from .causal import run_estimation

    cfg = _load(args)
    out_dir = cfg.output_dir or f"out/{cfg.name}_estimate"
    out = run_estimation(cfg, t_eval=args.t_eval, workers=_workers(args),
                         out_dir=out_dir)
    print(json.dumps(out["rmse"], indent=2, sort_keys=True))
    print(f"outputs in {out_dir}")
    return 0


def cmd_describe_config(args) -> int:
    if args.config is not None:
        from .runner import load_config

        cfg = load_config(args.config)
        print(f"{args.config}: valid ({cfg.name}; n={cfg.n}, "
              f"policy={cfg.policy.kind}, T={cfg.horizon}, B={cfg.budget}, "
              f"reps={cfg.replications})")
        return 0
    print(CONFIG_SCHEMA)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="netbandit",
        description="Adaptive treatment allocation on networks with unknown "
                    "interference: simulator, algorithms, and experiment harness.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML config path")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--workers", type=int, default=None,
                       help="replication worker processes "
                            "(default: NETBANDIT_WORKERS or all cores)")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace replications.base_seed")

    p = sub.add_parser("run", help="run one experiment config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one config key over a grid")
    common(p)
    p.add_argument("--axis", required=True,
                   help="config key (dotted path, or shorthand rho/sweeps_k/etc_m)")
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check",
                       help="compare Gibbs edge marginals against exact enumeration")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--rounds", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--sweeps", type=int, default=5000)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("recover", help="emit graph estimate and marginals only")
    common(p)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("estimate", help="downstream effect-estimation RMSE table")
    common(p)
    p.add_argument("--t-eval", type=int, default=None,
                   help="randomized inference-phase length (default: horizon)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("describe-config", help="print the config schema, or "
                                               "validate a config file")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_describe_config)
    return ap


def main(argv=None) -> int:
    from .graph import EdgeListParseError, GraphParameterError
    from .runner import ConfigError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GraphParameterError, EdgeListParseError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface as runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

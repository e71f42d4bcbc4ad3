"""Treatment-selection policies: joint Gibbs Thompson sampling, the
explore-then-commit two-phase scheme, known-graph Thompson sampling, the
no-interference baseline, and the budgeted treatment optimizers they share.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as engine_mod
from . import rewards
from .posterior import Prior, initial_graph_sample
from .rewards import RewardSpec, modular_scores, total_reward


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerMode:
    """How the per-round argmax over budgeted treatment vectors is solved."""

    mode: str = "auto"  # auto | exact_enumeration | top_b | swap_local_search
    max_candidates: int = 1_000_000
    restarts: int = 20
    max_iters: int = 200


def _n_candidates(n: int, budget: int) -> int:
    return sum(math.comb(n, k) for k in range(budget + 1))


def _resolve_mode(spec: RewardSpec, budget: int, opt: OptimizerMode) -> str:
    if opt.mode != "auto":
        return opt.mode
    if spec.kind in rewards.COLLAPSIBLE_KINDS:
        return "top_b"
    if _n_candidates(spec.n, budget) <= opt.max_candidates:
        return "exact_enumeration"
    return "swap_local_search"


def top_b_from_scores(s: np.ndarray, budget: int) -> np.ndarray:
    """Indicator of the largest strictly-positive scores, at most `budget` of
    them; ties broken toward lower index."""
    n = len(s)
    order = np.lexsort((np.arange(n), -s))  # score desc, index asc
    z = np.zeros(n, dtype=np.int8)
    for idx in order[:budget]:
        if s[idx] > 0:
            z[idx] = 1
    return z


def total_rewards_batch(spec, theta, a, z_batch: np.ndarray) -> np.ndarray:
    """Total expected reward of each candidate row of z_batch."""
    if spec.kind == "count_based_shared":
        # direct closed form; the generic row-stacking path is the per-round
        # bottleneck for the large candidate sets at n >= 20
        zb = z_batch.astype(np.float64)
        bucket = np.minimum((zb @ a.astype(np.float64)).astype(np.int64),
                            spec.d_max)
        gam = np.concatenate(([0.0], theta[1:]))
        return theta[0] * zb.sum(axis=1) + np.take(gam, bucket).sum(axis=1)
    return rewards.predict_history(spec, theta, z_batch, a).sum(axis=1)


_CANDIDATE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _candidate_matrix(n: int, budget: int) -> np.ndarray:
    """All 0/1 vectors with at most `budget` ones, sizes ascending then
    lexicographic; row 0 is the empty set."""
    key = (n, budget)
    if key not in _CANDIDATE_CACHE:
        out = [np.zeros(n, dtype=np.int8)]
        for k in range(1, budget + 1):
            for combo in itertools.combinations(range(n), k):
                z = np.zeros(n, dtype=np.int8)
                z[list(combo)] = 1
                out.append(z)
        _CANDIDATE_CACHE[key] = np.stack(out)
    return _CANDIDATE_CACHE[key]


def _exact_enumeration(spec, theta, a, budget, max_candidates):
    n = spec.n
    if _n_candidates(n, budget) > max_candidates:
        raise PolicyError(
            f"enumeration over {_n_candidates(n, budget)} candidates exceeds "
            f"max_candidates={max_candidates}; use swap_local_search")
    cands = _candidate_matrix(n, budget)
    vals = total_rewards_batch(spec, theta, a, cands)
    # first index attaining the max: smallest set, lowest indices
    return cands[int(np.argmax(np.round(vals, 12)))].copy()


class FixedGraphEnumCache:
    """Per-candidate summed design rows under a fixed graph, so each round's
    exact argmax is a single matrix-vector product."""

    _GENERIC_LIMIT = 5000  # row-by-row build cap for kinds without a fast path

    def __init__(self, spec: RewardSpec, a: np.ndarray, budget: int):
        self.cands = _candidate_matrix(spec.n, budget)
        if spec.kind == "count_based_shared":
            d1 = self.cands.astype(np.float64) @ a.astype(np.float64)
            bucket = np.minimum(d1.astype(np.int64), spec.d_max)
            s = np.zeros((len(self.cands), 1 + spec.d_max))
            s[:, 0] = self.cands.sum(axis=1)
            for k in range(1, spec.d_max + 1):
                s[:, k] = (bucket == k).sum(axis=1)
            self.summed = s
        else:
            self.summed = np.stack([
                rewards.design_matrix(spec, z, a).sum(axis=0)
                for z in self.cands])

    @classmethod
    def usable(cls, spec: RewardSpec, budget: int, max_candidates: int) -> bool:
        count = _n_candidates(spec.n, budget)
        if count > max_candidates:
            return False
        return spec.kind == "count_based_shared" or count <= cls._GENERIC_LIMIT

    def argmax(self, theta: np.ndarray) -> np.ndarray:
        vals = self.summed @ theta
        return self.cands[int(np.argmax(np.round(vals, 12)))].copy()


def _swap_local_search(spec, theta, a, budget, restarts, max_iters,
                       rng: np.random.Generator):
    n = spec.n
    best_z = np.zeros(n, dtype=np.int8)
    best_val = total_reward(spec, theta, a, best_z)
    for _ in range(restarts):
        size = int(rng.integers(0, budget + 1))
        z = np.zeros(n, dtype=np.int8)
        if size:
            z[rng.choice(n, size=size, replace=False)] = 1
        val = total_reward(spec, theta, a, z)
        for _ in range(max_iters):
            members = np.nonzero(z)[0]
            outsiders = np.nonzero(z == 0)[0]
            moves = []
            for m in members:          # drop one
                z2 = z.copy(); z2[m] = 0; moves.append(z2)
            if len(members) < budget:  # add one
                for o in outsiders:
                    z2 = z.copy(); z2[o] = 1; moves.append(z2)
            for m in members:          # swap one
                for o in outsiders:
                    z2 = z.copy(); z2[m] = 0; z2[o] = 1; moves.append(z2)
            if not moves:
                break
            vals = total_rewards_batch(spec, theta, a, np.stack(moves))
            k = int(np.argmax(vals))
            if vals[k] > val + 1e-12:
                z, val = moves[k], float(vals[k])
            else:
                break
        if val > best_val + 1e-12:
            best_val, best_z = val, z
    return best_z


def optimize_treatment(spec: RewardSpec, theta: np.ndarray, a: np.ndarray,
                       budget: int, opt: OptimizerMode = OptimizerMode(),
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """argmax of total expected reward over ||Z||_1 <= budget.

    The budget is an inequality: entries with nonpositive marginal value are
    left untreated.
    """
    mode = _resolve_mode(spec, budget, opt)
    if mode == "top_b":
        collapsed = modular_scores(spec, theta, a)
        if collapsed is None:
            raise PolicyError(f"top_b requires a collapsible reward kind, got {spec.kind}")
        return top_b_from_scores(collapsed[1], budget)
    if mode == "exact_enumeration":
        return _exact_enumeration(spec, theta, a, budget, opt.max_candidates)
    if mode == "swap_local_search":
        if rng is None:
            rng = np.random.default_rng(0)
        return _swap_local_search(spec, theta, a, budget, opt.restarts,
                                  opt.max_iters, rng)
    raise PolicyError(f"unknown optimizer mode {mode!r}")


# ---------------------------------------------------------------------------
# ETC helpers
# ---------------------------------------------------------------------------

def etc_m(sigma: float, delta_gamma: float, n: int, horizon: int) -> int:
    """Isolation rounds per node needed for the graph-recovery error bound."""
    if sigma < 0 or delta_gamma <= 0 or n < 2 or horizon < 1:
        raise PolicyError("etc_m requires sigma >= 0, delta_gamma > 0, n >= 2, T >= 1")
    m = math.ceil(8.0 * sigma ** 2 * math.log(n * n * horizon) / delta_gamma ** 2)
    return max(1, m)


def block_means(z_hist: np.ndarray, r_hist: np.ndarray, n: int, m: int) -> np.ndarray:
    """bar[i, j]: mean reward of node i over node j's isolation block."""
    bar = np.zeros((n, n))
    for j in range(n):
        block = r_hist[j * m:(j + 1) * m]
        bar[:, j] = block.mean(axis=0)
    return bar


def threshold_graph_theorem(bar: np.ndarray, delta_gamma: float) -> np.ndarray:
    """Edge (i,j) present if either endpoint's block mean clears delta/2."""
    n = bar.shape[0]
    a = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(i + 1, n):
            if bar[i, j] > delta_gamma / 2 or bar[j, i] > delta_gamma / 2:
                a[i, j] = a[j, i] = 1
    return a


def threshold_graph_adaptive(bar: np.ndarray, m: int, sigma: float) -> np.ndarray:
    """Mean-difference rule: compare bar[i,j] - bar[i,i] against 3*sigma*sqrt(2/m),
    max-symmetrized."""
    n = bar.shape[0]
    tau = 3.0 * sigma * math.sqrt(2.0 / m)
    stat = bar - np.diag(bar)[:, None]
    a = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(i + 1, n):
            if max(stat[i, j], stat[j, i]) > tau:
                a[i, j] = a[j, i] = 1
    return a


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass
class PolicyConfig:
    kind: str  # gibbs_ts | etc_ts | known_a_ts | no_interference_ts
    fit_spec: RewardSpec
    prior: Prior
    budget: int
    optimizer: OptimizerMode = field(default_factory=OptimizerMode)
    sweeps_k: int = 10
    warmup_rounds: int = 0
    random_scan: bool = False
    etc_m: int | str = "auto"
    etc_delta_gamma: float = 0.3
    etc_threshold_rule: str = "theorem"  # theorem | adaptive


class BasePolicy:
    """One policy instance drives one replication; single-owner state."""

    def __init__(self, cfg: PolicyConfig, n: int):
        if cfg.budget > n:
            raise PolicyError(f"budget {cfg.budget} exceeds n={n}")
        self.cfg = cfg
        self.n = n
        self.t = 0

    def act(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def observe(self, z: np.ndarray, r: np.ndarray) -> None:
        self.t += 1

    def graph_estimate(self) -> np.ndarray | None:
        """Current working graph (sample or point estimate), if any."""
        return None

    def edge_marginals(self, rng: np.random.Generator,
                       extra_sweeps: int = 50) -> np.ndarray | None:
        return None

    def posterior_mean_theta(self) -> np.ndarray | None:
        return None

    def _random_subset(self, rng: np.random.Generator) -> np.ndarray:
        z = np.zeros(self.n, dtype=np.int8)
        z[rng.choice(self.n, size=self.cfg.budget, replace=False)] = 1
        return z


class GibbsTsPolicy(BasePolicy):
    """Joint Thompson sampling: K Gibbs sweeps over (theta, A), then the
    budgeted argmax under the sampled pair; the chain warm-starts each round."""

    def __init__(self, cfg: PolicyConfig, n: int, rng: np.random.Generator):
        super().__init__(cfg, n)
        a0 = initial_graph_sample(n, cfg.prior.rho, rng)
        self.engine = engine_mod.make_engine(cfg.fit_spec, cfg.prior, a0,
                                             sweeps_k=cfg.sweeps_k,
                                             random_scan=cfg.random_scan)

    def act(self, rng: np.random.Generator) -> np.ndarray:
        if self.t < self.cfg.warmup_rounds:
            return self._random_subset(rng)
        theta, a = self.engine.run_sweeps(rng)
        return optimize_treatment(self.cfg.fit_spec, theta, a,
                                  self.cfg.budget, self.cfg.optimizer, rng)

    def observe(self, z, r):
        self.engine.append_round(z, r)
        super().observe(z, r)

    def graph_estimate(self):
        return self.engine.graph()

    def edge_marginals(self, rng, extra_sweeps=50):
        return self.engine.marginals(rng, extra_sweeps)

    def posterior_mean_theta(self):
        return self.engine.posterior_mean()


class KnownGraphTsPolicy(BasePolicy):
    """Conjugate Thompson sampling with the graph held fixed (true graph,
    recovered graph, or the empty graph for the no-interference baseline)."""

    def __init__(self, cfg: PolicyConfig, n: int, graph_fixed: np.ndarray):
        super().__init__(cfg, n)
        self.graph_fixed = graph_fixed.astype(np.int8)
        self.engine = engine_mod.make_engine(cfg.fit_spec, cfg.prior,
                                             self.graph_fixed,
                                             sweeps_k=1, sample_graph=False)
        self._enum_cache = None
        if (_resolve_mode(cfg.fit_spec, cfg.budget, cfg.optimizer)
                == "exact_enumeration"
                and FixedGraphEnumCache.usable(cfg.fit_spec, cfg.budget,
                                               cfg.optimizer.max_candidates)):
            self._enum_cache = FixedGraphEnumCache(cfg.fit_spec,
                                                   self.graph_fixed, cfg.budget)

    def act(self, rng: np.random.Generator) -> np.ndarray:
        if self.t < self.cfg.warmup_rounds:
            return self._random_subset(rng)
        theta, _ = self.engine.run_sweeps(rng, k=1)
        if self._enum_cache is not None:
            return self._enum_cache.argmax(theta)
        return optimize_treatment(self.cfg.fit_spec, theta, self.graph_fixed,
                                  self.cfg.budget, self.cfg.optimizer, rng)

    def observe(self, z, r):
        self.engine.append_round(z, r)
        super().observe(z, r)

    def graph_estimate(self):
        return self.graph_fixed.copy()

    def posterior_mean_theta(self):
        return self.engine.posterior_mean()


class EtcTsPolicy(BasePolicy):
    """Phase 1 isolates each node for m rounds and thresholds the block means
    into a graph estimate; phase 2 is known-graph Thompson sampling under it."""

    def __init__(self, cfg: PolicyConfig, n: int, horizon: int,
                 env_sigma: float | None = None):
        super().__init__(cfg, n)
        sigma = env_sigma if env_sigma is not None else math.sqrt(cfg.prior.sigma2)
        if cfg.etc_m == "auto":
            self.m = etc_m(sigma, cfg.etc_delta_gamma, n, horizon)
        else:
            self.m = int(cfg.etc_m)
        if self.m < 1:
            raise PolicyError("etc isolation budget m must be >= 1")
        if n * self.m > horizon:
            raise PolicyError(f"phase 1 needs n*m = {n * self.m} rounds "
                              f"but the horizon is {horizon}")
        self.sigma = sigma
        self._phase1_z: list[np.ndarray] = []
        self._phase1_r: list[np.ndarray] = []
        self.a_hat: np.ndarray | None = None
        self._phase2: KnownGraphTsPolicy | None = None

    @property
    def phase1_rounds(self) -> int:
        return self.n * self.m

    def act(self, rng: np.random.Generator) -> np.ndarray:
        if self.t < self.phase1_rounds:
            z = np.zeros(self.n, dtype=np.int8)
            z[self.t // self.m] = 1
            return z
        return self._phase2.act(rng)

    def observe(self, z, r):
        if self.t < self.phase1_rounds:
            self._phase1_z.append(np.asarray(z, dtype=np.int8))
            self._phase1_r.append(np.asarray(r, dtype=np.float64))
            if self.t == self.phase1_rounds - 1:
                self._commit(np.stack(self._phase1_z), np.stack(self._phase1_r))
        else:
            self._phase2.observe(z, r)
        self.t += 1

    def _commit(self, z_hist, r_hist):
        bar = block_means(z_hist, r_hist, self.n, self.m)
        if self.cfg.etc_threshold_rule == "theorem":
            self.a_hat = threshold_graph_theorem(bar, self.cfg.etc_delta_gamma)
        elif self.cfg.etc_threshold_rule == "adaptive":
            self.a_hat = threshold_graph_adaptive(bar, self.m, self.sigma)
        else:
            raise PolicyError(f"unknown threshold rule {self.cfg.etc_threshold_rule!r}")
        self._phase2 = KnownGraphTsPolicy(self.cfg, self.n, self.a_hat)
        # phase 2 fits on everything observed so far, under the committed graph
        for z, r in zip(z_hist, r_hist):
            self._phase2.engine.append_round(z, r)
            self._phase2.t += 1

    def graph_estimate(self):
        return None if self.a_hat is None else self.a_hat.copy()

    def posterior_mean_theta(self):
        return None if self._phase2 is None else self._phase2.posterior_mean_theta()


def build_policy(cfg: PolicyConfig, n: int, horizon: int,
                 a_true: np.ndarray | None, env_sigma: float,
                 rng: np.random.Generator) -> BasePolicy:
    if cfg.kind == "gibbs_ts":
        return GibbsTsPolicy(cfg, n, rng)
    if cfg.kind == "known_a_ts":
        if a_true is None:
            raise PolicyError("known_a_ts needs the true graph")
        return KnownGraphTsPolicy(cfg, n, a_true)
    if cfg.kind == "no_interference_ts":
        return KnownGraphTsPolicy(cfg, n, np.zeros((n, n), dtype=np.int8))
    if cfg.kind == "etc_ts":
        return EtcTsPolicy(cfg, n, horizon, env_sigma)
    raise PolicyError(f"unknown policy kind {cfg.kind!r}")

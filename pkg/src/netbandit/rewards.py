"""Reward parameterizations over (treatment vector, network).

Every kind maps (Z, A, node) to a fixed-length design row h so that the
expected reward of node i is h·theta. Kinds:

  linear_in_means_per_node   r_i = mu_i Z_i + beta_i * (treated fraction of N_i)
  count_based_shared         r_i = mu Z_i + gamma_k at k = min(#treated nbrs, d_max)
  count_based_per_node       as above with per-node (mu_i, gamma_{i,k})
  pairwise_nia               r_i = mu_i Z_i + sum_{j in N_i} gamma_{ij} Z_j
                                   + sum_{j<k in N_i} xi_{ijk} Z_j Z_k
  additive_pairs             pairwise_nia without the xi block
  saturation_spec_a          direct effect gated on having no treated neighbor
  interaction_spec_b         adds lambda_i Z_i * (#treated nbrs)
  paired_indicator           (Z_i, 1{#treated nbrs == 1}) with shared (mu, gamma1)

Pair effects gamma are indexed by unordered pair {i,j} and shared between the
two endpoints; triple effects xi are indexed by (center i, unordered {j,k}).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import degrees

KINDS = (
    "linear_in_means_per_node",
    "count_based_shared",
    "count_based_per_node",
    "pairwise_nia",
    "additive_pairs",
    "saturation_spec_a",
    "interaction_spec_b",
    "paired_indicator",
)

# kinds whose total reward is affine in Z (modular collapse)
COLLAPSIBLE_KINDS = ("linear_in_means_per_node", "additive_pairs")


class RewardSpecError(ValueError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    kind: str
    n: int
    d_max: int | None = None  # count_based kinds only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RewardSpecError(f"unknown reward kind {self.kind!r}")
        if self.kind.startswith("count_based"):
            if self.d_max is None or self.d_max < 1:
                raise RewardSpecError(f"{self.kind} requires d_max >= 1")
        if self.n < 2:
            raise RewardSpecError(f"need n >= 2, got {self.n}")


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def pair_index(i: int, j: int, n: int) -> int:
    """Linear index of unordered pair {i,j} in lexicographic upper-triangle order."""
    if i == j:
        raise RewardSpecError("pair requires i != j")
    if i > j:
        i, j = j, i
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def triple_index(center: int, j: int, k: int, n: int) -> int:
    """Index of (center, {j,k}) in the xi block: per-center pairs over nodes != center."""
    if j > k:
        j, k = k, j
    if j == k or j == center or k == center:
        raise RewardSpecError("xi triple requires three distinct nodes")
    jj = j - (j > center)
    kk = k - (k > center)
    return center * n_pairs(n - 1) + pair_index(jj, kk, n - 1)


def dimension(spec: RewardSpec) -> int:
    n = spec.n
    if spec.kind == "linear_in_means_per_node":
        return 2 * n
    if spec.kind == "count_based_shared":
        return 1 + spec.d_max
    if spec.kind == "count_based_per_node":
        return n * (1 + spec.d_max)
    if spec.kind == "pairwise_nia":
        return n + n_pairs(n) + n * n_pairs(n - 1)
    if spec.kind in ("additive_pairs", "saturation_spec_a"):
        return n + n_pairs(n)
    if spec.kind == "interaction_spec_b":
        return n + n_pairs(n) + n
    if spec.kind == "paired_indicator":
        return 2
    raise RewardSpecError(spec.kind)


def block_slices(spec: RewardSpec) -> dict[str, slice]:
    """Named parameter blocks within a flat theta vector."""
    n = spec.n
    if spec.kind == "linear_in_means_per_node":
        return {"mu": slice(0, n), "beta": slice(n, 2 * n)}
    if spec.kind == "count_based_shared":
        return {"mu": slice(0, 1), "gamma": slice(1, 1 + spec.d_max)}
    if spec.kind == "count_based_per_node":
        # per-node contiguous blocks (mu_i, gamma_{i,1..d_max})
        return {"all": slice(0, dimension(spec))}
    if spec.kind in ("pairwise_nia", "additive_pairs", "saturation_spec_a",
                     "interaction_spec_b"):
        p = n_pairs(n)
        out = {"mu": slice(0, n), "gamma": slice(n, n + p)}
        if spec.kind == "pairwise_nia":
            out["xi"] = slice(n + p, n + p + n * n_pairs(n - 1))
        elif spec.kind == "interaction_spec_b":
            out["lam"] = slice(n + p, n + p + n)
        return out
    if spec.kind == "paired_indicator":
        return {"mu": slice(0, 1), "gamma1": slice(1, 2)}
    raise RewardSpecError(spec.kind)


def treated_neighbor_count(z: np.ndarray, a: np.ndarray, i: int) -> int:
    return int(a[i] @ z)


def design_row(spec: RewardSpec, z: np.ndarray, a: np.ndarray, i: int) -> np.ndarray:
    """Feature row of node i for treatment vector z under adjacency a."""
    n = spec.n
    if not (0 <= i < n):
        raise RewardSpecError(f"node {i} out of range for n={n}")
    z = np.asarray(z)
    if z.shape != (n,):
        raise RewardSpecError(f"treatment vector must have length {n}")
    row = np.zeros(dimension(spec))
    d1 = treated_neighbor_count(z, a, i)

    if spec.kind == "linear_in_means_per_node":
        row[i] = z[i]
        deg = int(a[i].sum())
        if deg > 0:
            row[n + i] = d1 / deg
        return row

    if spec.kind == "count_based_shared":
        row[0] = z[i]
        if d1 > 0:
            row[min(d1, spec.d_max)] = 1.0
        return row

    if spec.kind == "count_based_per_node":
        base = i * (1 + spec.d_max)
        row[base] = z[i]
        if d1 > 0:
            row[base + min(d1, spec.d_max)] = 1.0
        return row

    if spec.kind == "paired_indicator":
        row[0] = z[i]
        row[1] = 1.0 if d1 == 1 else 0.0
        return row

    # pair-effect family
    if spec.kind == "saturation_spec_a":
        row[i] = z[i] if d1 == 0 else 0.0
    else:
        row[i] = z[i]
    treated_nbrs = [j for j in range(n) if a[i, j] and z[j]]
    for j in treated_nbrs:
        row[n + pair_index(i, j, n)] = 1.0
    if spec.kind == "pairwise_nia":
        off = n + n_pairs(n)
        for jj in range(len(treated_nbrs)):
            for kk in range(jj + 1, len(treated_nbrs)):
                row[off + triple_index(i, treated_nbrs[jj], treated_nbrs[kk], n)] = 1.0
    elif spec.kind == "interaction_spec_b":
        row[n + n_pairs(n) + i] = z[i] * d1
    return row


def design_matrix(spec: RewardSpec, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.stack([design_row(spec, z, a, i) for i in range(spec.n)])


def expected_rewards(spec: RewardSpec, theta: np.ndarray, a: np.ndarray,
                     z: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta)
    if theta.shape != (dimension(spec),):
        raise RewardSpecError(
            f"theta has length {theta.shape}, spec requires {dimension(spec)}")
    z = np.asarray(z)
    if z.shape != (spec.n,):
        raise RewardSpecError(f"treatment vector must have length {spec.n}")
    return predict_history(spec, theta, z[None, :], a)[0]


def total_reward(spec: RewardSpec, theta: np.ndarray, a: np.ndarray,
                 z: np.ndarray) -> float:
    return float(expected_rewards(spec, theta, a, z).sum())


def predict_history(spec: RewardSpec, theta: np.ndarray, z_hist: np.ndarray,
                    a: np.ndarray) -> np.ndarray:
    """Expected rewards for every (round, node) pair; vectorized over rounds.

    z_hist has shape (t, n); returns (t, n). Matches stacking design_matrix
    per round.
    """
    z = np.asarray(z_hist, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != spec.n:
        raise RewardSpecError(f"z_hist must be (t, {spec.n})")
    d1 = z @ a.astype(np.float64)  # treated-neighbor counts, (t, n)
    return predict_from_counts(spec, theta, z, a, d1)


def predict_from_counts(spec: RewardSpec, theta: np.ndarray, z: np.ndarray,
                        a: np.ndarray, d1: np.ndarray) -> np.ndarray:
    """predict_history with the treated-neighbor counts already available."""
    n = spec.n
    theta = np.asarray(theta)

    if spec.kind == "linear_in_means_per_node":
        mu, beta = theta[:n], theta[n:]
        deg = degrees(a).astype(np.float64)
        zbar = np.divide(d1, deg, out=np.zeros_like(d1), where=deg > 0)
        return z * mu + zbar * beta

    if spec.kind == "count_based_shared":
        gam = np.concatenate(([0.0], theta[1:]))
        bucket = np.minimum(d1.astype(np.int64), spec.d_max)
        return theta[0] * z + gam[bucket]

    if spec.kind == "count_based_per_node":
        width = 1 + spec.d_max
        mu = theta[::width]
        gam = theta.reshape(n, width).T.copy()  # (width, n); row 0 is mu
        gam[0] = 0.0
        bucket = np.minimum(d1.astype(np.int64), spec.d_max)
        return z * mu + np.take_along_axis(gam, bucket, axis=0)

    if spec.kind == "paired_indicator":
        return theta[0] * z + theta[1] * (d1 == 1)

    # pair-effect family: shared-gamma term via the masked pair matrix
    mu = theta[:n]
    gmat = pair_matrix(theta[n:n + n_pairs(n)], n) * a
    pair_term = z @ gmat  # row s, node i: sum_j gamma_{ij} A_ij z_sj
    if spec.kind == "additive_pairs":
        return z * mu + pair_term
    if spec.kind == "saturation_spec_a":
        return z * mu * (d1 == 0) + pair_term
    if spec.kind == "interaction_spec_b":
        lam = theta[n + n_pairs(n):]
        return z * mu + pair_term + lam * z * d1
    if spec.kind == "pairwise_nia":
        out = z * mu + pair_term
        off = n + n_pairs(n)
        pm1 = n_pairs(n - 1)
        for i in range(n):
            nbrs = np.nonzero(a[i])[0]
            if len(nbrs) < 2:
                continue
            xi_block = theta[off + i * pm1: off + (i + 1) * pm1]
            xmat = _center_xi_matrix(xi_block, i, nbrs, n)
            w = z[:, nbrs]
            out[:, i] += 0.5 * np.einsum("tp,pq,tq->t", w, xmat, w)
        return out
    raise RewardSpecError(spec.kind)


_TRIU_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _triu(n: int):
    if n not in _TRIU_CACHE:
        _TRIU_CACHE[n] = np.triu_indices(n, k=1)
    return _TRIU_CACHE[n]


def pair_matrix(gamma_block: np.ndarray, n: int) -> np.ndarray:
    """Symmetric n x n matrix of unordered-pair parameters, zero diagonal."""
    m = np.zeros((n, n))
    m[_triu(n)] = gamma_block
    return m + m.T


def _center_xi_matrix(xi_block: np.ndarray, center: int, nbrs: np.ndarray,
                      n: int) -> np.ndarray:
    """Symmetric (|nbrs| x |nbrs|) matrix of xi_{center,{j,k}} over neighbor pairs."""
    d = len(nbrs)
    m = np.zeros((d, d))
    base = center * n_pairs(n - 1)
    for p in range(d):
        for q in range(p + 1, d):
            v = xi_block[triple_index(center, int(nbrs[p]), int(nbrs[q]), n) - base]
            m[p, q] = v
            m[q, p] = v
    return m


def edge_prediction_delta(spec: RewardSpec, theta: np.ndarray, z: np.ndarray,
                          a: np.ndarray, d1: np.ndarray, deg: np.ndarray,
                          i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Change in node i's per-round predictions if edge (i,j) were present
    versus absent, holding everything else at its current value.

    Returns (rows, delta) where rows indexes the history rounds whose
    prediction can change and delta = eta(edge=1) - eta(edge=0) on those
    rounds. d1 and deg reflect the current adjacency a.
    """
    n = spec.n
    theta = np.asarray(theta)
    b = int(a[i, j])
    zj = z[:, j]

    if spec.kind == "linear_in_means_per_node":
        # the beta feature's denominator shifts, so untreated-j rounds with
        # any treated neighbor are affected too
        beta_i = theta[n + i]
        c0 = d1[:, i] - b * zj
        deg0 = deg[i] - b
        eta0 = beta_i * c0 / deg0 if deg0 > 0 else np.zeros(len(c0))
        eta1 = beta_i * (c0 + zj) / (deg0 + 1)
        rows = np.nonzero((c0 > 0) | (zj > 0))[0]
        return rows, (eta1 - eta0)[rows]

    rows = np.nonzero(zj)[0]
    c0 = d1[rows, i].astype(np.int64) - b

    if spec.kind in ("count_based_shared", "count_based_per_node"):
        if spec.kind == "count_based_shared":
            gam = np.concatenate(([0.0], theta[1:1 + spec.d_max]))
        else:
            base = i * (1 + spec.d_max)
            gam = np.concatenate(([0.0], theta[base + 1: base + 1 + spec.d_max]))
        delta = gam[np.minimum(c0 + 1, spec.d_max)] - gam[np.minimum(c0, spec.d_max)]
        return rows, delta

    if spec.kind == "paired_indicator":
        return rows, theta[1] * ((c0 == 0).astype(np.float64) - (c0 == 1))

    # pair-effect family
    gamma_ij = theta[n + pair_index(i, j, n)]
    delta = np.full(len(rows), gamma_ij)
    if spec.kind == "pairwise_nia":
        off = n + n_pairs(n)
        others = [k for k in np.nonzero(a[i])[0] if k != j]
        if others:
            xi_vals = np.array([theta[off + triple_index(i, int(k), j, n)]
                                for k in others])
            delta = delta + z[np.ix_(rows, others)] @ xi_vals
    elif spec.kind == "saturation_spec_a":
        delta = delta - theta[i] * z[rows, i] * (c0 == 0)
    elif spec.kind == "interaction_spec_b":
        delta = delta + theta[n + n_pairs(n) + i] * z[rows, i]
    return rows, delta


@dataclass(frozen=True)
class Environment:
    """Ground-truth reward process: (spec, theta, graph, noise sd)."""

    spec: RewardSpec
    theta_true: np.ndarray
    graph_true: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise RewardSpecError(f"sigma must be > 0, got {self.sigma}")

    def expected(self, z: np.ndarray) -> np.ndarray:
        return expected_rewards(self.spec, self.theta_true, self.graph_true, z)

    def total(self, z: np.ndarray) -> float:
        return float(self.expected(z).sum())

    def sample(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.expected(z) + self.sigma * rng.standard_normal(self.spec.n)


def sample_rewards(env: Environment, z: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    return env.sample(z, rng)


# ---------------------------------------------------------------------------
# Parameter sampling protocols
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dist:
    """One marginal: uniform(a,b) | normal(a,b) [b = sd] | point(a) |
    normal_bucket(b) [mean = bucket index]. shared draws one value for the
    whole block."""

    kind: str
    a: float = 0.0
    b: float = 0.0
    shared: bool = False


def _draw(dist: Dist, size: int, rng: np.random.Generator,
          bucket_means: np.ndarray | None = None) -> np.ndarray:
    m = 1 if dist.shared else size
    if dist.kind == "uniform":
        vals = rng.uniform(dist.a, dist.b, size=m)
    elif dist.kind == "normal":
        vals = rng.normal(dist.a, dist.b, size=m)
    elif dist.kind == "point":
        vals = np.full(m, dist.a)
    elif dist.kind == "normal_bucket":
        if bucket_means is None:
            raise RewardSpecError("normal_bucket only valid for gamma blocks with bucket index")
        vals = rng.normal(bucket_means, dist.b)
        return vals
    else:
        raise RewardSpecError(f"unknown distribution kind {dist.kind!r}")
    if dist.shared:
        vals = np.full(size, vals[0])
    return vals


def protocol_blocks(spec: RewardSpec) -> dict[str, int]:
    """Block name -> number of entries drawn by a protocol for this spec."""
    n = spec.n
    if spec.kind == "linear_in_means_per_node":
        return {"mu": n, "beta": n}
    if spec.kind == "count_based_shared":
        return {"mu": 1, "gamma": spec.d_max}
    if spec.kind == "count_based_per_node":
        return {"mu": n, "gamma": n * spec.d_max}
    if spec.kind == "pairwise_nia":
        return {"mu": n, "gamma": n_pairs(n), "xi": n * n_pairs(n - 1)}
    if spec.kind in ("additive_pairs", "saturation_spec_a"):
        return {"mu": n, "gamma": n_pairs(n)}
    if spec.kind == "interaction_spec_b":
        return {"mu": n, "gamma": n_pairs(n), "lam": n}
    if spec.kind == "paired_indicator":
        return {"mu": 1, "gamma1": 1}
    raise RewardSpecError(spec.kind)


def sample_params(spec: RewardSpec, protocol: dict[str, Dist],
                  rng: np.random.Generator) -> np.ndarray:
    """Draw theta blockwise per the protocol table; deterministic given rng."""
    blocks = protocol_blocks(spec)
    if set(protocol) != set(blocks):
        raise RewardSpecError(
            f"protocol blocks {sorted(protocol)} do not match spec blocks {sorted(blocks)}")
    parts = []
    for name, size in blocks.items():
        dist = protocol[name]
        bucket_means = None
        if dist.kind == "normal_bucket":
            if name != "gamma" or not spec.kind.startswith("count_based"):
                raise RewardSpecError("normal_bucket only applies to count-based gamma blocks")
            per_node = np.arange(1, spec.d_max + 1, dtype=np.float64)
            reps = size // spec.d_max
            bucket_means = np.tile(per_node, reps)
        parts.append(_draw(dist, size, rng, bucket_means))
    flat = np.concatenate(parts)
    if spec.kind == "count_based_per_node":
        # protocol order is (all mu, all gamma); storage interleaves per node
        n, w = spec.n, 1 + spec.d_max
        theta = np.zeros(n * w)
        theta[::w] = flat[:n]
        gam = flat[n:].reshape(n, spec.d_max)
        for i in range(n):
            theta[i * w + 1:(i + 1) * w] = gam[i]
        return theta
    return flat


PROTOCOLS: dict[str, dict[str, Dist]] = {
    # n=8 head-to-head pairwise-interaction environments
    "head_to_head_small_xi": {"mu": Dist("uniform", 0.5, 1.5),
                              "gamma": Dist("uniform", 0.3, 1.0),
                              "xi": Dist("uniform", -0.4, 0.4)},
    "head_to_head_large_xi": {"mu": Dist("uniform", 0.5, 1.5),
                              "gamma": Dist("uniform", 0.3, 1.0),
                              "xi": Dist("uniform", -3.0, 3.0)},
    # saturation / interaction variants
    "spec_a": {"mu": Dist("uniform", 0.5, 1.5), "gamma": Dist("uniform", 0.3, 1.0)},
    "spec_b": {"mu": Dist("uniform", 0.5, 1.5), "gamma": Dist("uniform", 0.3, 1.0),
               "lam": Dist("uniform", -0.3, 0.3)},
    "additive": {"mu": Dist("uniform", 0.5, 1.5), "gamma": Dist("uniform", 0.3, 1.0)},
    # count-based with shared parameters; gamma_k centered at its bucket index
    "count_shared": {"mu": Dist("normal", 1.0, 0.2),
                     "gamma": Dist("normal_bucket", 0.0, 0.5)},
    # real-network style per-node linear-in-means
    "village": {"mu": Dist("uniform", 0.0, 1.0), "beta": Dist("uniform", 0.0, 1.0)},
    # large-n scaling: one (mu, beta) shared across nodes
    "linmeans_shared": {"mu": Dist("normal", 2.0, 1.0, shared=True),
                        "beta": Dist("normal", 1.0, 0.5, shared=True)},
    # hard paired instance: zero direct effect, unit single-neighbor spillover
    "paired_unit": {"mu": Dist("point", 0.0), "gamma1": Dist("point", 1.0)},
}


def named_protocol(name: str) -> dict[str, Dist]:
    try:
        return PROTOCOLS[name]
    except KeyError:
        raise RewardSpecError(f"unknown protocol {name!r}") from None


# ---------------------------------------------------------------------------
# Modular collapse
# ---------------------------------------------------------------------------

def modular_scores(spec: RewardSpec, theta: np.ndarray,
                   a: np.ndarray) -> tuple[float, np.ndarray] | None:
    """(c, s) with total reward = c + Z·s for every Z, or None if the kind
    does not collapse.

    s_j is node j's direct effect plus the sum of spillovers it exerts.
    """
    if spec.kind not in COLLAPSIBLE_KINDS:
        return None
    n = spec.n
    theta = np.asarray(theta)
    if spec.kind == "linear_in_means_per_node":
        mu, beta = theta[:n], theta[n:]
        deg = degrees(a).astype(np.float64)
        w = np.divide(beta, deg, out=np.zeros_like(beta, dtype=np.float64),
                      where=deg > 0)
        s = mu + a.astype(np.float64).T @ w  # s_j = mu_j + sum_i beta_i A_ij / deg_i
        return 0.0, s
    # additive_pairs: eta_ij = gamma_{ij} A_ij, shared unordered
    gmat = pair_matrix(theta[n:], n) * a
    s = theta[:n] + gmat.sum(axis=0)
    return 0.0, s

"""Joint posterior over (theta, A): conjugate Gaussian update for theta given
the graph, edge-wise Gibbs full conditionals for the graph given theta, full
sweeps with warm start, and an exact enumeration oracle for small n.

The functions here are the readable reference path; `engine` holds the
incremental implementation used inside the bandit loop. The two are required
to agree (see tests).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import rewards
from .rewards import RewardSpec, design_matrix, design_row, dimension


class PosteriorError(ValueError):
    pass


class FactorizationError(RuntimeError):
    """Covariance factorization failed even after the jitter schedule."""


@dataclass(frozen=True)
class Prior:
    """Gaussian prior on theta plus iid Bernoulli(rho) prior on edges."""

    mu0: np.ndarray
    sigma0: np.ndarray
    sigma2: float
    rho: float

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise PosteriorError(f"rho must lie strictly inside (0,1), got {self.rho}")
        if self.sigma2 <= 0:
            raise PosteriorError(f"sigma2 must be > 0, got {self.sigma2}")
        s0 = np.asarray(self.sigma0)
        if not np.allclose(s0, s0.T):
            raise PosteriorError("sigma0 must be symmetric")
        try:
            np.linalg.cholesky(s0)
        except np.linalg.LinAlgError:
            raise PosteriorError("sigma0 must be positive definite") from None

    @property
    def dim(self) -> int:
        return len(self.mu0)

    def sigma0_inv(self) -> np.ndarray:
        return np.linalg.inv(np.asarray(self.sigma0))

    def log_odds(self) -> float:
        return math.log(self.rho / (1.0 - self.rho))


def isotropic_prior(dim: int, scale: float, sigma2: float, rho: float) -> Prior:
    return Prior(np.zeros(dim), scale * np.eye(dim), sigma2, rho)


class History:
    """Append-only log of (treatment vector, noisy reward vector) rounds."""

    def __init__(self, n: int):
        self.n = n
        self._z: list[np.ndarray] = []
        self._r: list[np.ndarray] = []

    def append(self, z: np.ndarray, r: np.ndarray) -> None:
        z = np.asarray(z)
        r = np.asarray(r, dtype=np.float64)
        if z.shape != (self.n,) or r.shape != (self.n,):
            raise PosteriorError(f"round vectors must have length {self.n}")
        self._z.append(z.astype(np.int8))
        self._r.append(r)

    def __len__(self) -> int:
        return len(self._z)

    def z_matrix(self) -> np.ndarray:
        if not self._z:
            return np.zeros((0, self.n), dtype=np.int8)
        return np.stack(self._z)

    def r_matrix(self) -> np.ndarray:
        if not self._r:
            return np.zeros((0, self.n))
        return np.stack(self._r)

    def rounds(self):
        return zip(self._z, self._r)


@dataclass
class PosteriorState:
    """Gibbs chain state carried across bandit rounds (warm start)."""

    theta_sample: np.ndarray
    a_sample: np.ndarray
    prior: Prior
    sweep_count_k: int = 10


# ---------------------------------------------------------------------------
# Conjugate theta update
# ---------------------------------------------------------------------------

_JITTER0 = 1e-9
_MAX_JITTER_DOUBLINGS = 8


def _chol_with_jitter(m: np.ndarray):
    """Cholesky of a nominally-PD matrix, repairing with scaled jitter."""
    try:
        return np.linalg.cholesky(m), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(m) / len(m)
    for attempt in range(_MAX_JITTER_DOUBLINGS + 1):
        jitter = _JITTER0 * scale * (2 ** attempt) if scale > 0 else _JITTER0 * (2 ** attempt)
        try:
            return np.linalg.cholesky(m + jitter * np.eye(len(m))), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(f"factorization failed after max jitter {jitter:g}")


def stacked_design(history: History, a: np.ndarray, spec: RewardSpec) -> np.ndarray:
    rows = [design_matrix(spec, z, a) for z, _ in history.rounds()]
    if not rows:
        return np.zeros((0, dimension(spec)))
    return np.concatenate(rows, axis=0)


def theta_posterior(history: History, a: np.ndarray, spec: RewardSpec,
                    prior: Prior) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate Gaussian posterior (mean, cov) of theta given the graph."""
    h = stacked_design(history, a, spec)
    r = history.r_matrix().reshape(-1)
    return theta_posterior_from_stats(h.T @ h, h.T @ r, prior)


def theta_precision(history: History, a: np.ndarray, spec: RewardSpec,
                    prior: Prior) -> tuple[np.ndarray, np.ndarray]:
    """Posterior in precision form: (precision matrix, linear term)."""
    h = stacked_design(history, a, spec)
    r = history.r_matrix().reshape(-1)
    s0inv = prior.sigma0_inv()
    prec = h.T @ h / prior.sigma2 + s0inv
    b = h.T @ r / prior.sigma2 + s0inv @ prior.mu0
    return prec, b


def theta_posterior_from_stats(hth: np.ndarray, htr: np.ndarray,
                               prior: Prior) -> tuple[np.ndarray, np.ndarray]:
    s0inv = prior.sigma0_inv()
    prec = hth / prior.sigma2 + s0inv
    b = htr / prior.sigma2 + s0inv @ prior.mu0
    el, _ = _chol_with_jitter(prec)
    cov = scipy.linalg.cho_solve((el, True), np.eye(len(b)))
    cov = 0.5 * (cov + cov.T)
    mean = scipy.linalg.cho_solve((el, True), b)
    return mean, cov


def sample_theta(mean: np.ndarray, cov: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Exact Gaussian draw via triangular factorization."""
    el, _ = _chol_with_jitter(np.asarray(cov))
    return np.asarray(mean) + el @ rng.standard_normal(len(mean))


def _sample_theta_precision(prec: np.ndarray, b: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
    """Draw from N(prec^-1 b, prec^-1) without forming the covariance."""
    el, _ = _chol_with_jitter(prec)
    mean = scipy.linalg.cho_solve((el, True), b, check_finite=False)
    z = rng.standard_normal(len(b))
    return mean + scipy.linalg.solve_triangular(el, z, lower=True, trans="T",
                                                check_finite=False)


# ---------------------------------------------------------------------------
# Edge full conditional
# ---------------------------------------------------------------------------

def edge_logit(i: int, j: int, a_current: np.ndarray, theta: np.ndarray,
               history: History, spec: RewardSpec, prior: Prior) -> float:
    """Log-odds of edge (i,j) given theta, all other edges, and the data.

    Only the reward streams at the two endpoints enter: the quadratic term
    compares predictions under the edge-absent and edge-present hypotheses.
    """
    if i == j:
        raise PosteriorError("edge requires i != j")
    if i > j:
        i, j = j, i
    a0 = a_current.copy()
    a1 = a_current.copy()
    a0[i, j] = a0[j, i] = 0
    a1[i, j] = a1[j, i] = 1
    quad = 0.0
    for z, r in history.rounds():
        for ell in (i, j):
            eta0 = float(design_row(spec, z, a0, ell) @ theta)
            eta1 = float(design_row(spec, z, a1, ell) @ theta)
            quad += (r[ell] - eta0) ** 2 - (r[ell] - eta1) ** 2
    return prior.log_odds() + quad / (2.0 * prior.sigma2)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def gibbs_sweep(state: PosteriorState, history: History, spec: RewardSpec,
                rng: np.random.Generator, random_scan: bool = False) -> PosteriorState:
    """K alternations of (theta draw given A, full pass over edges given theta).

    Edge pass visits pairs i<j in lexicographic order (or a fresh random
    permutation per sweep when random_scan is set). Reference implementation;
    the engine module provides the incremental equivalent.
    """
    a = state.a_sample.copy()
    theta = state.theta_sample
    n = spec.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for _ in range(state.sweep_count_k):
        prec, b = theta_precision(history, a, spec, state.prior)
        theta = _sample_theta_precision(prec, b, rng)
        u = rng.random(len(pairs))
        order = pairs
        if random_scan:
            order = [pairs[k] for k in rng.permutation(len(pairs))]
        for u_p, (i, j) in zip(u, order):
            logit = edge_logit(i, j, a, theta, history, spec, state.prior)
            val = 1 if u_p < _sigmoid(logit) else 0
            a[i, j] = a[j, i] = val
    return PosteriorState(theta, a, state.prior, state.sweep_count_k)


def initial_graph_sample(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    a = np.zeros((n, n), dtype=np.int8)
    iu = np.triu_indices(n, k=1)
    a[iu] = (rng.random(len(iu[0])) < rho).astype(np.int8)
    return a + a.T


# ---------------------------------------------------------------------------
# Exact enumeration oracle
# ---------------------------------------------------------------------------

_ENUM_MAX_PAIRS = 15


def log_evidence(history: History, a: np.ndarray, spec: RewardSpec,
                 prior: Prior) -> float:
    """log p(data | A) with theta integrated out analytically.

    Uses the conjugate identity: the marginal of the stacked rewards is
    N(H mu0, sigma2 I + H Sigma0 H^T), evaluated in theta-space for
    stability.
    """
    h = stacked_design(history, a, spec)
    r = history.r_matrix().reshape(-1)
    nobs = len(r)
    if nobs == 0:
        return 0.0
    s0inv = prior.sigma0_inv()
    prec = h.T @ h / prior.sigma2 + s0inv
    b = h.T @ r / prior.sigma2 + s0inv @ prior.mu0
    el, _ = _chol_with_jitter(prec)
    mean = scipy.linalg.cho_solve((el, True), b)
    logdet_prec = 2.0 * np.sum(np.log(np.diag(el)))
    sign, logdet_s0 = np.linalg.slogdet(prior.sigma0)
    const = r @ r / prior.sigma2 + prior.mu0 @ s0inv @ prior.mu0
    return float(-0.5 * nobs * math.log(2 * math.pi * prior.sigma2)
                 - 0.5 * logdet_s0 - 0.5 * logdet_prec
                 - 0.5 * (const - mean @ prec @ mean))


def enumerate_graphs(n: int):
    """All symmetric zero-diagonal 0/1 graphs on n nodes, lexicographic in the
    upper-triangle bit pattern."""
    iu = np.triu_indices(n, k=1)
    npairs = len(iu[0])
    for bits in itertools.product((0, 1), repeat=npairs):
        a = np.zeros((n, n), dtype=np.int8)
        a[iu] = bits
        yield a + a.T


def exact_edge_marginals(history: History, spec: RewardSpec, prior: Prior,
                         n: int) -> np.ndarray:
    """P(A_ij = 1 | data) by exhaustive graph enumeration (C(n,2) <= 15)."""
    npairs = n * (n - 1) // 2
    if npairs > _ENUM_MAX_PAIRS:
        raise PosteriorError(f"enumeration over {npairs} pairs exceeds the 2^{_ENUM_MAX_PAIRS} bound")
    log_rho = math.log(prior.rho)
    log_1mrho = math.log(1.0 - prior.rho)
    logw = np.empty(2 ** npairs)
    graphs = []
    for g_idx, a in enumerate(enumerate_graphs(n)):
        edges = int(np.triu(a, 1).sum())
        log_prior = edges * log_rho + (npairs - edges) * log_1mrho
        logw[g_idx] = log_prior + log_evidence(history, a, spec, prior)
        graphs.append(a)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    marg = np.zeros((n, n))
    for a, wt in zip(graphs, w):
        marg += wt * a
    return marg


def graph_posterior_weights(history: History, spec: RewardSpec, prior: Prior,
                            n: int) -> np.ndarray:
    """Normalized posterior probability of every graph, enumeration order."""
    npairs = n * (n - 1) // 2
    if npairs > _ENUM_MAX_PAIRS:
        raise PosteriorError(f"enumeration over {npairs} pairs exceeds the 2^{_ENUM_MAX_PAIRS} bound")
    log_rho = math.log(prior.rho)
    log_1mrho = math.log(1.0 - prior.rho)
    logw = np.empty(2 ** npairs)
    for g_idx, a in enumerate(enumerate_graphs(n)):
        edges = int(np.triu(a, 1).sum())
        logw[g_idx] = edges * log_rho + (npairs - edges) * log_1mrho \
            + log_evidence(history, a, spec, prior)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()

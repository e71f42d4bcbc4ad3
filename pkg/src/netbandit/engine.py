"""Incremental joint-sampler state carried across bandit rounds.

Maintains H^T H and H^T r per node so the conjugate theta draw never rebuilds
the stacked design, caches per-round predictions and treated-neighbor counts,
and rebuilds only the two affected nodes' statistics when an edge flips. The
reference path in `posterior` recomputes everything from scratch; the two are
required to agree to 1e-8 (tested).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import _kernels, rewards
from .posterior import Prior, _chol_with_jitter, _sample_theta_precision, _sigmoid as _sigmoid_np
from .rewards import RewardSpec, dimension, n_pairs, triple_index

_PAIR_FAMILY = ("pairwise_nia", "additive_pairs", "saturation_spec_a",
                "interaction_spec_b")
_COUNT_FAMILY = ("count_based_shared", "count_based_per_node", "paired_indicator")

_KIND_CODES = {
    "count_based_shared": _kernels.KIND_COUNT_SHARED,
    "count_based_per_node": _kernels.KIND_COUNT_PER_NODE,
    "paired_indicator": _kernels.KIND_PAIRED_INDICATOR,
    "additive_pairs": _kernels.KIND_ADDITIVE,
    "saturation_spec_a": _kernels.KIND_SPEC_A,
    "interaction_spec_b": _kernels.KIND_SPEC_B,
    "pairwise_nia": _kernels.KIND_PAIRWISE,
    "linear_in_means_per_node": _kernels.KIND_LINMEANS,
}


def _grow(arr: np.ndarray, axis: int = 0) -> np.ndarray:
    shape = list(arr.shape)
    shape[axis] = max(8, 2 * shape[axis])
    out = np.zeros(shape, dtype=arr.dtype)
    sl = tuple(slice(0, s) for s in arr.shape)
    out[sl] = arr
    return out


def _lex_pair_codes(n: int) -> np.ndarray:
    return np.array([i * n + j for i in range(n) for j in range(i + 1, n)],
                    dtype=np.int64)


class GibbsEngine:
    """Warm-started Gibbs chain over (theta, A) with incremental statistics."""

    def __init__(self, spec: RewardSpec, prior: Prior, a_init: np.ndarray,
                 sweeps_k: int = 10, sample_graph: bool = True,
                 random_scan: bool = False):
        if len(prior.mu0) != dimension(spec):
            raise ValueError("prior dimension does not match reward spec")
        self.spec = spec
        self.prior = prior
        self.n = spec.n
        self.d = dimension(spec)
        self.sweeps_k = sweeps_k
        self.sample_graph = sample_graph
        self.random_scan = random_scan
        self.a = a_init.astype(np.int8).copy()
        self.deg = self.a.sum(axis=1).astype(np.int64)
        self.theta = prior.mu0.copy()
        self.t = 0
        n = self.n
        self._z = np.zeros((8, n), dtype=np.int8)
        self._r = np.zeros((8, n))
        self._d1 = np.zeros((8, n), dtype=np.int64)
        self._w_list = np.zeros((8, n), dtype=np.int64)
        self._w_cnt = np.zeros(8, dtype=np.int64)
        self._tr_rounds = np.zeros((n, 8), dtype=np.int64)
        self._tr_n = np.zeros(n, dtype=np.int64)
        self._m = np.zeros((n, self.d, self.d))
        self._v = np.zeros((n, self.d))
        self._m_total = np.zeros((self.d, self.d))
        self._v_total = np.zeros(self.d)
        self._s0inv = prior.sigma0_inv()
        self._b0 = self._s0inv @ prior.mu0
        self._pair_codes = _lex_pair_codes(n)
        self._kind_code = _KIND_CODES[spec.kind]
        self._dmax = spec.d_max if spec.kind.startswith("count_based") else 0
        nbuf = 2 + n + n * (n - 1) // 2
        self._cols_buf = np.empty(nbuf, dtype=np.int64)
        self._vals_buf = np.empty(nbuf)
        self._setup_kind()

    def _setup_kind(self):
        spec = self.spec
        self._fam = None
        if spec.kind in _COUNT_FAMILY:
            self._fam = _kernels.FAM_COUNT
            self._exact_one = spec.kind == "paired_indicator"
            self._dmax_eff = 1 if self._exact_one else spec.d_max
        elif spec.kind in _PAIR_FAMILY:
            self._fam = _kernels.FAM_PAIR
            self._has_xi = spec.kind == "pairwise_nia"
            self._gate_mu = spec.kind == "saturation_spec_a"
            self._has_lam = spec.kind == "interaction_spec_b"
            n = self.n
            if self._has_xi:
                idx = np.zeros((n, n, n), dtype=np.int64)
                for i in range(n):
                    for j in range(n):
                        for k in range(n):
                            if len({i, j, k}) == 3:
                                idx[i, j, k] = triple_index(i, j, k, n)
                self._xi_index = idx
                self._xi_off = n + n_pairs(n)

    # -- data ---------------------------------------------------------------

    def append_round(self, z: np.ndarray, r: np.ndarray) -> None:
        z = np.asarray(z).astype(np.int8)
        r = np.asarray(r, dtype=np.float64)
        t = self.t
        if t == len(self._z):
            self._z = _grow(self._z)
            self._r = _grow(self._r)
            self._d1 = _grow(self._d1)
            self._w_list = _grow(self._w_list)
            self._w_cnt = _grow(self._w_cnt)
        if self._tr_rounds.shape[1] == t:
            self._tr_rounds = _grow(self._tr_rounds, axis=1)
        self._z[t] = z
        self._r[t] = r
        self._d1[t] = self.a @ z.astype(np.int64)
        treated = np.nonzero(z)[0]
        self._w_list[t, :len(treated)] = treated
        self._w_cnt[t] = len(treated)
        for j in treated:
            self._tr_rounds[j, self._tr_n[j]] = t
            self._tr_n[j] += 1
        _kernels.append_stats_kernel(
            self._kind_code, self.n, self._dmax, self._z[t], self._d1[t],
            self._w_list[t], self._w_cnt[t], self.a, self.deg, self._r[t],
            self._m, self._v, self._m_total, self._v_total,
            self._cols_buf, self._vals_buf)
        self.t += 1

    # -- posterior over theta given the current graph ------------------------

    def _precision(self) -> tuple[np.ndarray, np.ndarray]:
        prec = self._m_total / self.prior.sigma2 + self._s0inv
        b = self._v_total / self.prior.sigma2 + self._b0
        return prec, b

    def posterior_mean(self) -> np.ndarray:
        prec, b = self._precision()
        el, _ = _chol_with_jitter(prec)
        return scipy.linalg.cho_solve((el, True), b)

    # -- sweeps ---------------------------------------------------------------

    def run_sweeps(self, rng: np.random.Generator, k: int | None = None):
        """K alternations of theta draw and sequential edge pass; returns the
        final (theta, A) and warm-starts the next call."""
        k = self.sweeps_k if k is None else k
        for _ in range(k):
            prec, b = self._precision()
            self.theta = _sample_theta_precision(prec, b, rng)
            if self.sample_graph:
                self._edge_pass(rng)
        return self.theta.copy(), self.a.copy()

    def _edge_pass(self, rng: np.random.Generator) -> None:
        t, n = self.t, self.n
        u = rng.random(len(self._pair_codes))
        order = self._pair_codes
        if self.random_scan:
            order = order[rng.permutation(len(order))]
        flipped = np.zeros(n, dtype=np.bool_)
        if self._fam is None:
            eta = rewards.predict_from_counts(
                self.spec, self.theta, self._z[:t].astype(np.float64),
                self.a, self._d1[:t].astype(np.float64)) if t else np.zeros((0, n))
            self._edge_pass_numpy(np.ascontiguousarray(eta), u, order, flipped)
        else:
            mu, gamma_node, gmat, xi, lam = self._pack_params()
            fam = self._fam
            d_max = self._dmax_eff if fam == _kernels.FAM_COUNT else 0
            exact_one = fam == _kernels.FAM_COUNT and self._exact_one
            has_xi = fam == _kernels.FAM_PAIR and self._has_xi
            gate_mu = fam == _kernels.FAM_PAIR and self._gate_mu
            has_lam = fam == _kernels.FAM_PAIR and self._has_lam
            eta = np.empty((t, n))
            _kernels.predict_kernel(
                self._z[:t], self._d1[:t], self._w_list[:t], self._w_cnt[:t],
                self.a, mu, gamma_node, d_max, exact_one, gmat, xi, lam,
                fam, has_xi, gate_mu, has_lam, eta)
            _kernels.edge_pass_generic(
                self.a, self._d1[:t], eta, self._z[:t], self._r[:t],
                self._w_list[:t], self._w_cnt[:t], self._tr_rounds, self._tr_n,
                mu, gamma_node, d_max, exact_one,
                gmat, xi, lam, fam, has_xi, gate_mu, has_lam,
                self.prior.log_odds(), 1.0 / (2.0 * self.prior.sigma2),
                u, order, flipped,
                np.empty(max(t, 1)), np.empty(max(t, 1)))
            self.deg = self.a.sum(axis=1).astype(np.int64)
        for ell in np.nonzero(flipped)[0]:
            self._rebuild_node(int(ell))

    def _edge_pass_numpy(self, eta, u, order, flipped) -> None:
        """Vectorized-per-pair fallback for kinds without a compiled kernel."""
        t, n = self.t, self.n
        log_odds = self.prior.log_odds()
        inv2s2 = 1.0 / (2.0 * self.prior.sigma2)
        zf = self._z[:t].astype(np.float64)
        d1f = self._d1[:t].astype(np.float64)
        r = self._r[:t]
        for p_ord, code in enumerate(order):
            i, j = divmod(int(code), n)
            b = int(self.a[i, j])
            quad = 0.0
            sides = []
            for (x, y) in ((i, j), (j, i)):
                rows, delta = rewards.edge_prediction_delta(
                    self.spec, self.theta, zf, self.a, d1f, self.deg, x, y)
                sides.append((x, rows, delta))
                if len(rows):
                    ec = eta[rows, x]
                    rr = r[rows, x]
                    if b == 1:
                        quad += float(np.sum(delta * (2 * rr - 2 * ec + delta)))
                    else:
                        quad += float(np.sum(delta * (2 * rr - 2 * ec - delta)))
            logit = log_odds + quad * inv2s2
            new = 1 if u[p_ord] < _sigmoid_np(logit) else 0
            if new != b:
                sign = 1 if new else -1
                self.a[i, j] = self.a[j, i] = new
                self.deg[i] += sign
                self.deg[j] += sign
                for (x, rows, delta) in sides:
                    if len(rows):
                        eta[rows, x] += sign * delta
                y_of = {i: j, j: i}
                for x in (i, j):
                    self._d1[:t, x] += sign * self._z[:t, y_of[x]]
                    d1f[:, x] = self._d1[:t, x]
                flipped[i] = flipped[j] = True

    def _pack_params(self):
        n, theta = self.n, self.theta
        dummy3 = np.zeros((1, 1, 1))
        dummy1 = np.zeros(1)
        if self._fam == _kernels.FAM_COUNT:
            if self.spec.kind == "count_based_shared":
                mu = np.full(n, theta[0])
                row = np.concatenate(([0.0], theta[1:]))
                gamma_node = np.repeat(row[None, :], n, axis=0)
            elif self.spec.kind == "count_based_per_node":
                w = 1 + self.spec.d_max
                mu = theta[::w].copy()
                gamma_node = theta.reshape(n, w).copy()
                gamma_node[:, 0] = 0.0
            else:  # paired_indicator
                mu = np.full(n, theta[0])
                gamma_node = np.repeat(np.array([[0.0, theta[1]]]), n, axis=0)
            return mu, gamma_node, np.zeros((1, 1)), dummy3, dummy1
        mu = theta[:n].copy()
        gmat = rewards.pair_matrix(theta[n:n + n_pairs(n)], n)
        xi = theta[self._xi_off:][self._xi_index] if self._has_xi else dummy3
        lam = theta[n + n_pairs(n):].copy() if self._has_lam else dummy1
        return mu, np.zeros((1, 2)), gmat, np.ascontiguousarray(xi), lam

    def _rebuild_node(self, ell: int) -> None:
        t = self.t
        m_new = np.empty((self.d, self.d))
        v_new = np.empty(self.d)
        _kernels.node_stats_kernel(
            self._kind_code, ell, self.n, self._dmax, self._z[:t], self._d1[:t],
            self._w_list[:t], self._w_cnt[:t], self.a, self.deg[ell],
            self._r[:t, ell].copy(), m_new, v_new,
            self._cols_buf, self._vals_buf)
        self._m_total += m_new - self._m[ell]
        self._v_total += v_new - self._v[ell]
        self._m[ell] = m_new
        self._v[ell] = v_new

    # -- outputs ---------------------------------------------------------------

    def graph(self) -> np.ndarray:
        return self.a.copy()

    def marginals(self, rng: np.random.Generator, extra_sweeps: int = 50) -> np.ndarray:
        """Posterior edge-marginal estimate: average the A sample over extra
        sweeps continued from the current chain state."""
        acc = np.zeros((self.n, self.n))
        for _ in range(extra_sweeps):
            _, a = self.run_sweeps(rng, k=1)
            acc += a
        return acc / max(extra_sweeps, 1)


class LinearMeansEngine:
    """Closed-form engine for per-node linear-in-means with a diagonal prior.

    All posterior and edge-conditional quantities reduce to O(n^2) sufficient
    statistics, so memory and per-sweep cost are independent of the horizon.
    """

    def __init__(self, spec: RewardSpec, prior: Prior, a_init: np.ndarray,
                 sweeps_k: int = 10, sample_graph: bool = True,
                 random_scan: bool = False):
        if spec.kind != "linear_in_means_per_node":
            raise ValueError("LinearMeansEngine requires the linear-in-means kind")
        s0 = np.asarray(prior.sigma0)
        if np.count_nonzero(s0 - np.diag(np.diag(s0))):
            raise ValueError("LinearMeansEngine requires a diagonal prior covariance")
        self.spec = spec
        self.prior = prior
        self.n = n = spec.n
        self.sweeps_k = sweeps_k
        self.sample_graph = sample_graph
        self.random_scan = random_scan
        self.a = a_init.astype(np.int8).copy()
        self.deg = self.a.sum(axis=1).astype(np.int64)
        self.t = 0
        self.theta = prior.mu0.copy()
        d0 = np.diag(s0)
        self._prec0_mu = 1.0 / d0[:n]
        self._prec0_beta = 1.0 / d0[n:]
        self._mu0_mu = prior.mu0[:n]
        self._mu0_beta = prior.mu0[n:]
        # sufficient statistics (see kernel for roles)
        self._c = np.zeros((n, n))    # co-treatment counts
        self._rs = np.zeros((n, n))   # rs[i,k] = sum_s Z_sk r_si
        self._rs_t = np.zeros((n, n))
        self._u = np.zeros((n, n))    # u[i,k]  = sum_s d1_si Z_sk
        self._u_t = np.zeros((n, n))
        self._q = np.zeros(n)         # sum d1^2
        self._y = np.zeros(n)         # sum d1 r
        self._w = np.zeros(n)         # sum d1 Z_i
        self._tc = np.zeros(n)        # treatment counts
        self._sz = np.zeros(n)        # sum Z_i (= tc)
        self._sr1 = np.zeros(n)       # sum Z_i r_i
        self._pair_codes = _lex_pair_codes(n)

    def append_round(self, z: np.ndarray, r: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        d1 = self.a.astype(np.float64) @ z
        self._c += np.outer(z, z)
        self._rs += np.outer(r, z)
        self._rs_t += np.outer(z, r)
        self._u += np.outer(d1, z)
        self._u_t += np.outer(z, d1)
        self._q += d1 * d1
        self._y += d1 * r
        self._w += d1 * z
        self._tc += z
        self._sz += z
        self._sr1 += r * z
        self.t += 1

    def _blocks(self):
        """Per-node 2x2 posterior precision and rhs from the statistics."""
        n = self.n
        s2 = self.prior.sigma2
        deg = np.maximum(self.deg, 1).astype(np.float64)
        live = self.deg > 0
        p11 = self._prec0_mu + self._sz / s2
        p12 = np.where(live, (self._w / deg) / s2, 0.0)
        p22 = self._prec0_beta + np.where(live, (self._q / deg ** 2) / s2, 0.0)
        b1 = self._prec0_mu * self._mu0_mu + self._sr1 / s2
        b2 = self._prec0_beta * self._mu0_beta + np.where(live, (self._y / deg) / s2, 0.0)
        return p11, p12, p22, b1, b2

    def _draw_theta(self, rng: np.random.Generator) -> np.ndarray:
        n = self.n
        p11, p12, p22, b1, b2 = self._blocks()
        l11 = np.sqrt(p11)
        l21 = p12 / l11
        l22sq = p22 - l21 ** 2
        if np.any(l22sq <= 0):
            l22sq = np.maximum(l22sq, 1e-12 * p22)
        l22 = np.sqrt(l22sq)
        det = p11 * p22 - p12 ** 2
        m1 = (p22 * b1 - p12 * b2) / det
        m2 = (p11 * b2 - p12 * b1) / det
        z = rng.standard_normal(2 * n)
        x_beta = z[n:] / l22
        x_mu = (z[:n] - l21 * x_beta) / l11
        theta = np.empty(2 * n)
        theta[:n] = m1 + x_mu
        theta[n:] = m2 + x_beta
        return theta

    def posterior_mean(self) -> np.ndarray:
        n = self.n
        p11, p12, p22, b1, b2 = self._blocks()
        det = p11 * p22 - p12 ** 2
        mean = np.empty(2 * n)
        mean[:n] = (p22 * b1 - p12 * b2) / det
        mean[n:] = (p11 * b2 - p12 * b1) / det
        return mean

    def run_sweeps(self, rng: np.random.Generator, k: int | None = None):
        k = self.sweeps_k if k is None else k
        n = self.n
        for _ in range(k):
            self.theta = self._draw_theta(rng)
            if not self.sample_graph:
                continue
            u = rng.random(len(self._pair_codes))
            order = self._pair_codes
            if self.random_scan:
                order = order[rng.permutation(len(order))]
            _kernels.edge_pass_linmeans(
                self.a, self.deg, self._c, self._rs, self._rs_t, self._u,
                self._u_t, self._q, self._y, self._w, self._tc,
                self.theta[:n], self.theta[n:],
                self.prior.log_odds(), 1.0 / (2.0 * self.prior.sigma2),
                u, order)
        return self.theta.copy(), self.a.copy()

    def graph(self) -> np.ndarray:
        return self.a.copy()

    def marginals(self, rng: np.random.Generator, extra_sweeps: int = 50) -> np.ndarray:
        acc = np.zeros((self.n, self.n))
        for _ in range(extra_sweeps):
            _, a = self.run_sweeps(rng, k=1)
            acc += a
        return acc / max(extra_sweeps, 1)


def make_engine(spec: RewardSpec, prior: Prior, a_init: np.ndarray,
                sweeps_k: int = 10, sample_graph: bool = True,
                random_scan: bool = False):
    """Pick the fastest engine that matches the spec and prior structure."""
    if spec.kind == "linear_in_means_per_node":
        s0 = np.asarray(prior.sigma0)
        if not np.count_nonzero(s0 - np.diag(np.diag(s0))):
            return LinearMeansEngine(spec, prior, a_init, sweeps_k,
                                     sample_graph, random_scan)
    return GibbsEngine(spec, prior, a_init, sweeps_k, sample_graph, random_scan)

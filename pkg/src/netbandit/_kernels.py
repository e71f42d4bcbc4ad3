"""Numba inner loops for the edge-wise Gibbs pass.

Two kernels: a generic one that scans, for each pair (i,j), only the history
rounds where the counterpart endpoint was treated (valid for every reward
kind whose features touch an edge only through treated neighbors), and a
closed-form one for the per-node linear-in-means kind that works entirely on
O(n^2) sufficient statistics so no per-round scan is needed at all.

Edge updates are sequential in lexicographic pair order; each conditional
sees the state left by the previous one.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# reward-family codes for the generic kernel
FAM_COUNT = 0       # count_based_shared / count_based_per_node / paired_indicator
FAM_PAIR = 1        # additive_pairs / saturation_spec_a / interaction_spec_b / pairwise_nia

# reward-kind codes for the design-row statistics kernels
KIND_COUNT_SHARED = 0
KIND_COUNT_PER_NODE = 1
KIND_PAIRED_INDICATOR = 2
KIND_ADDITIVE = 3
KIND_SPEC_A = 4
KIND_SPEC_B = 5
KIND_PAIRWISE = 6
KIND_LINMEANS = 7


@njit(inline="always")
def _pair_idx(i, j, n):
    if i > j:
        i, j = j, i
    return i * n - i * (i + 1) // 2 + (j - i - 1)


@njit(inline="always")
def _triple_idx(x, j, k, n):
    jj = j - 1 if j > x else j
    kk = k - 1 if k > x else k
    return x * ((n - 1) * (n - 2) // 2) + _pair_idx(jj, kk, n - 1)


@njit(inline="always")
def _design_entries(kind, x, n, dmax, zx, cx, w_row, w_cnt_s, a, deg_x,
                    cols, vals):
    """Nonzero (column, value) entries of node x's design row; returns the
    entry count. cols/vals must be large enough for the worst case."""
    k = 0
    if kind == KIND_COUNT_SHARED:
        if zx == 1:
            cols[k] = 0; vals[k] = 1.0; k += 1
        if cx > 0:
            cols[k] = cx if cx < dmax else dmax; vals[k] = 1.0; k += 1
    elif kind == KIND_COUNT_PER_NODE:
        base = x * (1 + dmax)
        if zx == 1:
            cols[k] = base; vals[k] = 1.0; k += 1
        if cx > 0:
            cols[k] = base + (cx if cx < dmax else dmax); vals[k] = 1.0; k += 1
    elif kind == KIND_PAIRED_INDICATOR:
        if zx == 1:
            cols[k] = 0; vals[k] = 1.0; k += 1
        if cx == 1:
            cols[k] = 1; vals[k] = 1.0; k += 1
    elif kind == KIND_LINMEANS:
        if zx == 1:
            cols[k] = x; vals[k] = 1.0; k += 1
        if cx > 0 and deg_x > 0:
            cols[k] = n + x; vals[k] = cx / deg_x; k += 1
    else:
        if zx == 1 and (kind != KIND_SPEC_A or cx == 0):
            cols[k] = x; vals[k] = 1.0; k += 1
        npairs = n * (n - 1) // 2
        for kk in range(w_cnt_s):
            u_node = w_row[kk]
            if u_node != x and a[x, u_node] == 1:
                cols[k] = n + _pair_idx(x, u_node, n); vals[k] = 1.0; k += 1
                if kind == KIND_PAIRWISE:
                    for ll in range(kk + 1, w_cnt_s):
                        v_node = w_row[ll]
                        if v_node != x and a[x, v_node] == 1:
                            cols[k] = n + npairs + _triple_idx(x, u_node, v_node, n)
                            vals[k] = 1.0; k += 1
        if kind == KIND_SPEC_B and zx == 1 and cx > 0:
            cols[k] = n + npairs + x; vals[k] = float(cx); k += 1
    return k


@njit(cache=True)
def node_stats_kernel(kind, x, n, dmax, z, d1, w_list, w_cnt, a, deg_x,
                      r_col, m_out, v_out, cols, vals):
    """Rebuild sum g g^T and sum g r for one node's design rows over the
    whole history under the current adjacency."""
    m_out[:, :] = 0.0
    v_out[:] = 0.0
    for s in range(z.shape[0]):
        k = _design_entries(kind, x, n, dmax, z[s, x], d1[s, x],
                            w_list[s], w_cnt[s], a, deg_x, cols, vals)
        rv = r_col[s]
        for e1 in range(k):
            c1 = cols[e1]
            v1 = vals[e1]
            v_out[c1] += v1 * rv
            for e2 in range(k):
                m_out[c1, cols[e2]] += v1 * vals[e2]


@njit(cache=True)
def append_stats_kernel(kind, n, dmax, z_row, d1_row, w_row, w_cnt_s, a, deg,
                        r_row, m_all, v_all, m_total, v_total, cols, vals):
    """Fold one new round into every node's design-row statistics."""
    for x in range(n):
        k = _design_entries(kind, x, n, dmax, z_row[x], d1_row[x],
                            w_row, w_cnt_s, a, deg[x], cols, vals)
        rv = r_row[x]
        for e1 in range(k):
            c1 = cols[e1]
            v1 = vals[e1]
            v_all[x, c1] += v1 * rv
            v_total[c1] += v1 * rv
            for e2 in range(k):
                prod = v1 * vals[e2]
                m_all[x, c1, cols[e2]] += prod
                m_total[c1, cols[e2]] += prod


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def predict_kernel(z, d1, w_list, w_cnt, a,
                   mu, gamma_node, d_max, exact_one,
                   gmat, xi, lam, fam, has_xi, gate_mu, has_lam, out):
    """Per-(round, node) expected rewards under the current (theta, A).

    Equivalent to stacking design rows times theta; treated-node lists keep
    the pair/triple terms O(B^2) per node."""
    t, n = z.shape
    for s in range(t):
        for i in range(n):
            if fam == FAM_COUNT:
                c = d1[s, i]
                v = mu[i] * z[s, i]
                if exact_one:
                    if c == 1:
                        v += gamma_node[i, 1]
                elif c > 0:
                    v += gamma_node[i, c if c < d_max else d_max]
            else:
                if gate_mu:
                    v = mu[i] * z[s, i] if d1[s, i] == 0 else 0.0
                else:
                    v = mu[i] * z[s, i]
                for kk in range(w_cnt[s]):
                    k = w_list[s, kk]
                    if k != i and a[i, k] == 1:
                        v += gmat[i, k]
                        if has_xi:
                            for ll in range(kk + 1, w_cnt[s]):
                                m2 = w_list[s, ll]
                                if m2 != i and a[i, m2] == 1:
                                    v += xi[i, k, m2]
                if has_lam:
                    v += lam[i] * z[s, i] * d1[s, i]
            out[s, i] = v


@njit(cache=True)
def edge_pass_generic(a, d1, eta, z, r, w_list, w_cnt, tr_rounds, tr_n,
                      mu, gamma_node, d_max, exact_one,
                      gmat, xi, lam, fam, has_xi, gate_mu, has_lam,
                      log_odds, inv_two_sigma2, u, pair_order, flipped,
                      scratch_i, scratch_j):
    """One full sequential pass over all node pairs; mutates a, d1, eta.

    Per pair (i,j), only history rounds where the counterpart endpoint was
    treated can change a prediction; the delta between the edge-present and
    edge-absent hypotheses is accumulated into the quadratic term of the
    conditional log-odds. Returns the number of flipped edges; flipped[node]
    marks nodes whose design rows changed.
    """
    n = a.shape[0]
    nflips = 0
    for p_ord in range(pair_order.shape[0]):
        pcode = pair_order[p_ord]
        i = pcode // n
        j = pcode % n
        b = a[i, j]
        quad = 0.0
        for side in range(2):
            x = i if side == 0 else j         # whose reward stream
            yn = j if side == 0 else i        # whose treatments gate the rounds
            scratch = scratch_i if side == 0 else scratch_j
            g_xy = gmat[x, yn] if fam == FAM_PAIR else 0.0
            for idx in range(tr_n[yn]):
                s = tr_rounds[yn, idx]
                if fam == FAM_COUNT:
                    c0 = d1[s, x] - b
                    if exact_one:
                        d = ((gamma_node[x, 1] if c0 == 0 else 0.0)
                             - (gamma_node[x, 1] if c0 == 1 else 0.0))
                    else:
                        b1 = c0 + 1
                        if b1 > d_max:
                            b1 = d_max
                        b0 = c0
                        if b0 > d_max:
                            b0 = d_max
                        d = gamma_node[x, b1] - gamma_node[x, b0]
                else:
                    d = g_xy
                    if has_xi:
                        for kk in range(w_cnt[s]):
                            k = w_list[s, kk]
                            if k != x and k != yn and a[x, k] == 1:
                                d += xi[x, yn, k]
                    if gate_mu and z[s, x] == 1 and d1[s, x] - b == 0:
                        d -= mu[x]
                    if has_lam and z[s, x] == 1:
                        d += lam[x]
                scratch[idx] = d
                if d != 0.0:
                    if b == 1:
                        quad += d * (2.0 * r[s, x] - 2.0 * eta[s, x] + d)
                    else:
                        quad += d * (2.0 * r[s, x] - 2.0 * eta[s, x] - d)
        logit = log_odds + quad * inv_two_sigma2
        new = 1 if u[p_ord] < _sigmoid(logit) else 0
        if new != b:
            sign = 1 if new == 1 else -1
            nflips += 1
            a[i, j] = new
            a[j, i] = new
            for idx in range(tr_n[j]):
                s = tr_rounds[j, idx]
                d1[s, i] += sign
                eta[s, i] += sign * scratch_i[idx]
            for idx in range(tr_n[i]):
                s = tr_rounds[i, idx]
                d1[s, j] += sign
                eta[s, j] += sign * scratch_j[idx]
            flipped[i] = True
            flipped[j] = True
    return nflips


@njit(inline="always")
def _linmeans_side(b, mu_x, beta_x, deg_x, u_xy, rs_xy, c_xy, q_x, y_x, w_x, tc_y):
    """Quadratic-term contribution of one endpoint's stream to an edge logit,
    in closed form from sufficient statistics (x = stream node, y = the
    counterpart whose treatments drive the toggle)."""
    deg0 = deg_x - b
    a0 = beta_x / deg0 if deg0 > 0 else 0.0
    a1 = beta_x / (deg0 + 1)
    if b == 1:
        scy = (y_x - mu_x * w_x) - (rs_xy - mu_x * c_xy)
        sc2 = q_x - 2.0 * u_xy + tc_y
        scz = u_xy - tc_y
    else:
        scy = y_x - mu_x * w_x
        sc2 = q_x
        scz = u_xy
    szy = rs_xy - mu_x * c_xy
    return (2.0 * (a1 - a0) * scy + 2.0 * a1 * szy
            - (a1 * a1 - a0 * a0) * sc2 - 2.0 * a1 * a1 * scz - a1 * a1 * tc_y)


@njit(cache=True)
def edge_pass_linmeans(a, deg, c_mat, rs, rs_t, u_mat, u_t, q, y, w, tc,
                       mu, beta, log_odds, inv_two_sigma2, u_draws, pair_order):
    """Sequential edge pass for per-node linear-in-means; O(1) per pair.

    rs_t/u_t are maintained transposes so both endpoints' statistics are read
    from row i. Mutates a, deg and the d1-dependent statistics on flips.
    """
    n = a.shape[0]
    nflips = 0
    for p_ord in range(pair_order.shape[0]):
        pcode = pair_order[p_ord]
        i = pcode // n
        j = pcode % n
        b = a[i, j]
        u_ij = u_mat[i, j]
        u_ji = u_t[i, j]
        c_ij = c_mat[i, j]
        quad = _linmeans_side(b, mu[i], beta[i], deg[i], u_ij, rs[i, j],
                              c_ij, q[i], y[i], w[i], tc[j]) \
            + _linmeans_side(b, mu[j], beta[j], deg[j], u_ji, rs_t[i, j],
                             c_ij, q[j], y[j], w[j], tc[i])
        logit = log_odds + quad * inv_two_sigma2
        new = 1 if u_draws[p_ord] < _sigmoid(logit) else 0
        if new != b:
            sign = 1.0 if new == 1 else -1.0
            nflips += 1
            q[i] += sign * 2.0 * u_ij + tc[j]
            q[j] += sign * 2.0 * u_ji + tc[i]
            y[i] += sign * rs[i, j]
            y[j] += sign * rs_t[i, j]
            w[i] += sign * c_ij
            w[j] += sign * c_ij
            for k in range(n):
                u_mat[i, k] += sign * c_mat[j, k]
                u_mat[j, k] += sign * c_mat[i, k]
                u_t[k, i] = u_mat[i, k]
                u_t[k, j] = u_mat[j, k]
            deg[i] += 1 if new == 1 else -1
            deg[j] += 1 if new == 1 else -1
            a[i, j] = new
            a[j, i] = new
    return nflips

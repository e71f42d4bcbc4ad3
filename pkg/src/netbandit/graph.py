"""Undirected binary networks: generators, edge-list I/O, and recovery metrics.

Graphs are plain symmetric 0/1 numpy arrays with a zero diagonal. They are
treated as immutable after construction and are safe to share across
replications.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GraphParameterError(ValueError):
    """Invalid generator parameters or incompatible graph shapes."""


class EdgeListParseError(ValueError):
    """Malformed edge-list file."""


def validate_adjacency(a: np.ndarray) -> np.ndarray:
    """Check symmetry, zero diagonal, and 0/1 entries; returns the array."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphParameterError(f"adjacency must be square, got shape {a.shape}")
    if np.any(np.diag(a) != 0):
        raise GraphParameterError("adjacency has nonzero diagonal")
    if not np.array_equal(a, a.T):
        raise GraphParameterError("adjacency is not symmetric")
    if not np.isin(a, (0, 1)).all():
        raise GraphParameterError("adjacency entries must be 0 or 1")
    return a


@dataclass(frozen=True)
class GraphGenSpec:
    """Named random-graph family plus its parameters and a seed."""

    family: str  # "erdos_renyi" | "sbm" | "edge_list"
    seed: int = 0
    p: float | None = None                 # erdos_renyi
    k_groups: int | None = None            # sbm
    p_within: float | None = None          # sbm
    p_between: float | None = None         # sbm
    path: str | None = None                # edge_list
    params: dict = field(default_factory=dict)


def _check_prob(name: str, value) -> float:
    if value is None or not (0.0 <= float(value) <= 1.0):
        raise GraphParameterError(f"{name} must be a probability in [0,1], got {value!r}")
    return float(value)


def erdos_renyi(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """G(n, p): each of the C(n,2) pairs is an edge independently."""
    p = _check_prob("p", p)
    iu = np.triu_indices(n, k=1)
    a = np.zeros((n, n), dtype=np.int8)
    draws = rng.random(len(iu[0])) < p
    a[iu] = draws.astype(np.int8)
    a += a.T
    return a


def sbm_blocks(n: int, k_groups: int) -> np.ndarray:
    """Contiguous balanced block labels; remainder nodes go to the last block."""
    if k_groups < 1 or k_groups > n:
        raise GraphParameterError(f"k_groups must be in [1, n], got {k_groups}")
    size = n // k_groups
    labels = np.minimum(np.arange(n) // size, k_groups - 1)
    return labels


def sbm(n: int, k_groups: int, p_within: float, p_between: float,
        rng: np.random.Generator) -> np.ndarray:
    """Stochastic block model over contiguous balanced blocks."""
    p_within = _check_prob("p_within", p_within)
    p_between = _check_prob("p_between", p_between)
    labels = sbm_blocks(n, k_groups)
    iu = np.triu_indices(n, k=1)
    same = labels[iu[0]] == labels[iu[1]]
    probs = np.where(same, p_within, p_between)
    a = np.zeros((n, n), dtype=np.int8)
    a[iu] = (rng.random(len(iu[0])) < probs).astype(np.int8)
    a += a.T
    return a


def generate(spec: GraphGenSpec, n: int) -> np.ndarray:
    """Draw an adjacency matrix from the named family, deterministic in the seed."""
    if n < 2:
        raise GraphParameterError(f"need n >= 2 nodes, got {n}")
    rng = np.random.default_rng(spec.seed)
    if spec.family == "erdos_renyi":
        return erdos_renyi(n, spec.p, rng)
    if spec.family == "sbm":
        return sbm(n, int(spec.k_groups), spec.p_within, spec.p_between, rng)
    if spec.family == "edge_list":
        return load_edge_list(spec.path)
    raise GraphParameterError(f"unknown graph family {spec.family!r}")


def load_edge_list(path) -> np.ndarray:
    """Load whitespace-separated node-id pairs, one edge per line.

    Symmetrizes (OR over directions), drops self-loops and duplicates, drops
    isolated nodes, and relabels survivors 0..n-1 in ascending original-id
    order.
    """
    edges = set()
    nodes = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise EdgeListParseError(f"{path}:{lineno}: expected two node ids, got {line.rstrip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise EdgeListParseError(f"{path}:{lineno}: non-integer node id in {line.rstrip()!r}") from exc
            if u == v:
                continue
            edges.add((min(u, v), max(u, v)))
            nodes.add(u)
            nodes.add(v)
    surviving = sorted({u for e in edges for u in e})
    if len(surviving) < 2:
        raise GraphParameterError(f"{path}: fewer than 2 non-isolated nodes")
    relabel = {orig: i for i, orig in enumerate(surviving)}
    n = len(surviving)
    a = np.zeros((n, n), dtype=np.int8)
    for u, v in edges:
        a[relabel[u], relabel[v]] = 1
        a[relabel[v], relabel[u]] = 1
    return a


def save_edge_list(a: np.ndarray, path) -> None:
    """Write the upper-triangle edges in the load_edge_list text format."""
    iu, ju = np.nonzero(np.triu(a, k=1))
    with open(path, "w") as fh:
        for u, v in zip(iu.tolist(), ju.tolist()):
            fh.write(f"{u} {v}\n")


def _upper(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    return np.asarray(a)[np.triu_indices(n, k=1)]


def edge_f1(estimate: np.ndarray, truth: np.ndarray) -> float:
    """F1 over upper-triangle entries, edge-present as the positive class.

    Both graphs empty counts as perfect recovery (1.0); exactly one empty
    scores 0.
    """
    if estimate.shape != truth.shape:
        raise GraphParameterError(f"size mismatch: {estimate.shape} vs {truth.shape}")
    e, t = _upper(estimate), _upper(truth)
    tp = int(np.sum((e == 1) & (t == 1)))
    fp = int(np.sum((e == 1) & (t == 0)))
    fn = int(np.sum((e == 0) & (t == 1)))
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def edge_accuracy(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of upper-triangle entries on which the two graphs agree."""
    if estimate.shape != truth.shape:
        raise GraphParameterError(f"size mismatch: {estimate.shape} vs {truth.shape}")
    e, t = _upper(estimate), _upper(truth)
    if len(e) == 0:
        return 1.0
    return float(np.mean(e == t))


def degrees(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).sum(axis=1)


def density(a: np.ndarray) -> float:
    n = a.shape[0]
    return float(_upper(a).sum()) / math.comb(n, 2)

import math

import numpy as np
import pytest

from netbandit import graph
from netbandit.graph import (EdgeListParseError, GraphGenSpec,
                             GraphParameterError, edge_accuracy, edge_f1,
                             generate, load_edge_list, save_edge_list)


def test_erdos_renyi_extremes():
    rng = np.random.default_rng(0)
    empty = graph.erdos_renyi(5, 0.0, rng)
    assert empty.sum() == 0
    full = graph.erdos_renyi(4, 1.0, rng)
    assert np.triu(full, 1).sum() == 6


def test_er_seed_reproducible():
    spec = GraphGenSpec("erdos_renyi", seed=42, p=0.3)
    a1 = generate(spec, 30)
    a2 = generate(spec, 30)
    assert np.array_equal(a1, a2)


def test_generated_graphs_are_valid():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = graph.erdos_renyi(12, rng.random(), rng)
        graph.validate_adjacency(a)
        b = graph.sbm(13, 3, rng.random(), rng.random(), rng)
        graph.validate_adjacency(b)


def test_sbm_expected_edge_count():
    # 2 blocks of 10: 2*C(10,2)*0.25 + 100*0.05 = 27.5 expected edges
    counts = []
    for seed in range(1000):
        a = generate(GraphGenSpec("sbm", seed=seed, k_groups=2,
                                  p_within=0.25, p_between=0.05), 20)
        counts.append(np.triu(a, 1).sum())
    assert abs(np.mean(counts) - 27.5) < 1.5


def test_sbm_block_remainder():
    labels = graph.sbm_blocks(7, 3)
    # blocks of 2 with the remainder node in the last block
    assert labels.tolist() == [0, 0, 1, 1, 2, 2, 2]


def test_invalid_probability():
    with pytest.raises(GraphParameterError):
        generate(GraphGenSpec("erdos_renyi", p=1.5), 5)


def test_load_edge_list_dedup_and_isolates(tmp_path):
    p = tmp_path / "edges.txt"
    p.write_text("1 2\n2 1\n3 3\n")
    a = load_edge_list(p)
    assert a.shape == (2, 2)
    assert a[0, 1] == 1 and a[1, 0] == 1


def test_load_edge_list_errors(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    with pytest.raises(GraphParameterError):
        load_edge_list(empty)
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2 3\n")
    with pytest.raises(EdgeListParseError):
        load_edge_list(bad)
    nonint = tmp_path / "nonint.txt"
    nonint.write_text("a b\n")
    with pytest.raises(EdgeListParseError):
        load_edge_list(nonint)


def test_village_scale_density(tmp_path):
    # 63 nodes, 114 edges, no isolates: density 114 / C(63,2) = 0.0584
    rng = np.random.default_rng(9)
    n, m = 63, 114
    edges = set((i, i + 1) for i in range(n - 1))  # spanning path, no isolates
    while len(edges) < m:
        i, j = sorted(rng.choice(n, 2, replace=False).tolist())
        if i != j:
            edges.add((i, j))
    p = tmp_path / "village.txt"
    p.write_text("".join(f"{i} {j}\n" for i, j in sorted(edges)))
    a = load_edge_list(p)
    assert a.shape == (63, 63)
    assert abs(graph.density(a) - 114 / math.comb(63, 2)) < 1e-12
    assert abs(graph.density(a) - 0.0584) < 1e-3


def test_edge_list_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    a = graph.erdos_renyi(15, 0.3, rng)
    # ensure no isolates so the reload preserves labels
    for i in range(15):
        if a[i].sum() == 0:
            j = (i + 1) % 15
            a[i, j] = a[j, i] = 1
    p1 = tmp_path / "g1.txt"
    save_edge_list(a, p1)
    b = load_edge_list(p1)
    assert np.array_equal(a, b)
    p2 = tmp_path / "g2.txt"
    save_edge_list(b, p2)
    assert p1.read_text() == p2.read_text()


def test_edge_f1_cases():
    t = np.zeros((3, 3), dtype=np.int8)
    t[0, 1] = t[1, 0] = 1
    t[1, 2] = t[2, 1] = 1
    e = np.zeros((3, 3), dtype=np.int8)
    e[0, 1] = e[1, 0] = 1
    assert edge_f1(t, t) == 1.0
    # precision 1, recall 0.5 -> F1 = 2/3
    assert abs(edge_f1(e, t) - 2 / 3) < 1e-12
    empty = np.zeros((3, 3), dtype=np.int8)
    ones = 1 - np.eye(3, dtype=np.int8)
    assert edge_f1(ones, empty) == 0.0
    assert edge_f1(empty, ones) == 0.0
    assert edge_f1(empty, empty) == 1.0


def test_edge_accuracy_cases():
    rng = np.random.default_rng(1)
    g = graph.erdos_renyi(6, 0.5, rng)
    assert edge_accuracy(g, g) == 1.0
    t = np.zeros((4, 4), dtype=np.int8)
    t[0, 1] = t[1, 0] = 1
    t[2, 3] = t[3, 2] = 1
    e = t.copy()
    e[0, 1] = e[1, 0] = 0  # one pair disagrees out of C(4,2)=6
    assert abs(edge_accuracy(e, t) - 5 / 6) < 1e-12
    comp = (1 - t - np.eye(4, dtype=np.int8)).astype(np.int8)
    assert edge_accuracy(comp, t) == 0.0


def test_size_mismatch_errors():
    with pytest.raises(GraphParameterError):
        edge_f1(np.zeros((3, 3)), np.zeros((4, 4)))
    with pytest.raises(GraphParameterError):
        edge_accuracy(np.zeros((3, 3)), np.zeros((4, 4)))


def test_degrees():
    assert graph.degrees(np.zeros((4, 4), dtype=np.int8)).tolist() == [0] * 4
    path = np.zeros((3, 3), dtype=np.int8)
    path[0, 1] = path[1, 0] = path[1, 2] = path[2, 1] = 1
    assert graph.degrees(path).tolist() == [1, 2, 1]
    full = (1 - np.eye(5)).astype(np.int8)
    assert graph.degrees(full).tolist() == [4] * 5

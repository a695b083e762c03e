"""
Tests for graph construction, normalization, generators and dataset files
"""

import numpy as np
import pytest

from psnr_lab.errors import ConfigError, MalformedInputError, RangeError
from psnr_lab.graph import (
    DENSE_LIMIT,
    build_graph,
    degree_groups,
    gen_ring,
    gen_sbm,
    load_dataset,
    load_dataset_dir,
    normalize,
    write_dataset,
)


def test_build_graph_symmetrizes_and_merges():
    """Directed duplicates collapse into one undirected edge"""
    graph = build_graph([(1, 0), (0, 1), (1, 2), (2, 1)], 3)
    assert graph.edges.tolist() == [[0, 1], [1, 2]]
    assert graph.degree.tolist() == [1, 2, 1]
    dense = graph.adjacency.toarray()
    np.testing.assert_array_equal(dense, dense.T)


def test_build_graph_drops_self_loops_with_warning(caplog):
    """Self-loops are dropped and counted in a warning"""
    with caplog.at_level("WARNING"):
        graph = build_graph([(0, 0), (0, 1), (2, 2)], 3)
    assert graph.num_edges == 1
    assert "dropped 2 self-loop" in caplog.text


def test_build_graph_rejects_out_of_range_endpoint():
    with pytest.raises(MalformedInputError):
        build_graph([(0, 3)], 3)
    with pytest.raises(MalformedInputError):
        build_graph([(-1, 0)], 3)


def test_normalize_single_node_and_path():
    """Isolated node → [[1]]; 2-node path → all-0.5 operator"""
    single = normalize(build_graph([], 1))
    np.testing.assert_array_equal(single.dense(), [[1.0]])

    path = build_graph([(0, 1)], 2)
    for kind in ("symmetric", "random-walk"):
        np.testing.assert_allclose(normalize(path, kind).dense(), np.full((2, 2), 0.5), atol=1e-15)


def test_normalize_matches_dense_formula():
    """Random graph against the dense D̃^-1/2 Ã D̃^-1/2 and D̃^-1 Ã formulas"""
    rng = np.random.default_rng(0)
    n = 12
    upper = np.triu(rng.random((n, n)) < 0.3, k=1)
    graph = build_graph(zip(*np.nonzero(upper)), n)

    augmented = graph.adjacency.toarray() + np.eye(n)
    degree = augmented.sum(axis=1)
    expected_sym = augmented / np.sqrt(np.outer(degree, degree))
    expected_rw = augmented / degree[:, None]

    sym = normalize(graph, "symmetric").dense()
    rw = normalize(graph, "random-walk").dense()
    np.testing.assert_allclose(sym, expected_sym, atol=1e-12)
    np.testing.assert_allclose(sym, sym.T, atol=1e-15)
    np.testing.assert_allclose(rw, expected_rw, atol=1e-12)
    np.testing.assert_allclose(rw.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize(
    "graph",
    [gen_ring(9), gen_sbm(2, 20, 0.3, 0.05, 2, 1.0, seed=3).graph, build_graph([(0, 1), (1, 2)], 5)],
    ids=["ring", "sbm", "isolated"],
)
def test_operator_spectral_bounds(graph):
    """Symmetric N has spectral radius ≤ 1 and Rayleigh quotients in (−1, 1]; random-walk N fixes constants"""
    rng = np.random.default_rng(11)
    sym = normalize(graph, "symmetric").matrix

    v = rng.standard_normal(graph.n)
    for _ in range(200):
        w = sym @ v
        assert np.linalg.norm(w) <= (1.0 + 1e-9) * np.linalg.norm(v)
        v = w / np.linalg.norm(w)

    for _ in range(100):
        x = rng.standard_normal(graph.n)
        quotient = x @ (sym @ x) / (x @ x)
        assert -1.0 < quotient <= 1.0 + 1e-12

    rw = normalize(graph, "random-walk").matrix
    np.testing.assert_allclose(rw @ np.full(graph.n, 3.5), 3.5, atol=1e-12)


def test_normalize_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        normalize(gen_ring(4), "laplacian")


def test_dense_refuses_large_graphs():
    graph = build_graph([], DENSE_LIMIT + 1)
    with pytest.raises(RangeError):
        normalize(graph).dense()


def test_degree_groups():
    """Degrees 0, 1, 2, 3, 4 land in groups -1, 0, 1, 1, 2"""
    # star center 0 with 4 leaves, plus a chain 5-6-7-8 and an isolated node 9
    graph = build_graph([(0, 1), (0, 2), (0, 3), (0, 4), (5, 6), (6, 7), (7, 8), (1, 2), (1, 3)], 10)
    groups = degree_groups(graph)
    for node in range(10):
        d = graph.degree[node]
        expected = -1 if d == 0 else int(np.floor(np.log2(d)))
        assert groups[node] == expected, f"node {node} with degree {d}"


def test_gen_sbm_is_deterministic():
    first = gen_sbm(2, 30, 0.3, 0.02, 8, 1.0, seed=5)
    second = gen_sbm(2, 30, 0.3, 0.02, 8, 1.0, seed=5)
    assert first.graph.same_as(second.graph)
    np.testing.assert_array_equal(first.features, second.features)
    np.testing.assert_array_equal(first.labels, np.repeat([0, 1], 30))


def test_gen_sbm_extreme_probabilities():
    """p_in=1, p_out=0 gives two disjoint cliques"""
    dataset = gen_sbm(2, 5, 1.0, 0.0, 4, 1.0, seed=0)
    assert dataset.graph.num_edges == 2 * 10
    assert (dataset.graph.degree == 4).all()
    assert not dataset.graph.is_connected()


def test_gen_sbm_edge_densities_match_binomial_expectation():
    """Within- and between-block edge counts stay within 3σ of their binomial means"""
    dataset = gen_sbm(2, 50, 0.2, 0.02, 8, 1.0, seed=7)
    labels = dataset.labels
    edges = dataset.graph.edges
    within = int((labels[edges[:, 0]] == labels[edges[:, 1]]).sum())
    between = dataset.graph.num_edges - within
    for count, pairs, p in [(within, 2 * 50 * 49 // 2, 0.2), (between, 50 * 50, 0.02)]:
        assert abs(count - pairs * p) <= 3.0 * np.sqrt(pairs * p * (1.0 - p)), (count, pairs, p)


def test_gen_sbm_with_zero_probabilities_is_edgeless():
    dataset = gen_sbm(3, 4, 0.0, 0.0, 2, 1.0, seed=0)
    assert dataset.graph.num_edges == 0
    assert (dataset.graph.degree == 0).all()


def test_build_graph_degrees_match_dense_row_sums():
    rng = np.random.default_rng(9)
    edge_list = [tuple(rng.choice(15, size=2, replace=False).tolist()) for _ in range(20)]
    graph = build_graph(edge_list, 15)
    dense = np.zeros((15, 15))
    for i, j in edge_list:
        dense[i, j] = dense[j, i] = 1.0
    np.testing.assert_array_equal(graph.degree, dense.sum(axis=1))
    np.testing.assert_array_equal(graph.adjacency.toarray(), dense)
    assert graph.num_edges == int(np.triu(dense).sum())


def test_gen_sbm_rejects_bad_probabilities():
    with pytest.raises(ConfigError):
        gen_sbm(2, 5, 0.1, 0.2, 4, 1.0, seed=0)


def test_gen_ring_is_connected():
    ring = gen_ring(10)
    assert ring.num_edges == 10
    assert ring.is_connected()
    assert (ring.degree == 2).all()


def test_dataset_round_trip(tmp_path):
    """write_dataset → load_dataset_dir reproduces the dataset exactly"""
    dataset = gen_sbm(3, 10, 0.4, 0.05, 5, 1.5, seed=2)
    write_dataset(dataset, tmp_path)
    loaded = load_dataset_dir(tmp_path)
    assert loaded.graph.same_as(dataset.graph)
    np.testing.assert_array_equal(loaded.features, dataset.features)
    np.testing.assert_array_equal(loaded.labels, dataset.labels)
    assert loaded.num_classes == 3


def test_load_dataset_reports_feature_row_mismatch(tmp_path):
    (tmp_path / "edges.tsv").write_text("0\t1\n")
    (tmp_path / "features.csv").write_text("1.0,2.0\n3.0,4.0\n")
    (tmp_path / "labels.txt").write_text("0\n1\n0\n")
    with pytest.raises(MalformedInputError) as info:
        load_dataset_dir(tmp_path)
    assert "features.csv" in str(info.value)


def test_load_dataset_reports_unknown_node(tmp_path):
    edges = tmp_path / "e.tsv"
    edges.write_text("0\t1\n1\t7\n")
    features = tmp_path / "f.csv"
    features.write_text("1.0\n2.0\n")
    labels = tmp_path / "l.txt"
    labels.write_text("0\n1\n")
    with pytest.raises(MalformedInputError) as info:
        load_dataset(edges, features, labels)
    assert info.value.line == 2
    assert "e.tsv" in str(info.value)


def test_load_dataset_reports_invalid_utf8_with_line(tmp_path):
    (tmp_path / "edges.tsv").write_text("0\t1\n")
    (tmp_path / "features.csv").write_bytes(b"1.0,2.0\n\xff\xfe,4.0\n")
    (tmp_path / "labels.txt").write_text("0\n1\n")
    with pytest.raises(MalformedInputError) as info:
        load_dataset_dir(tmp_path)
    assert info.value.line == 2
    assert "features.csv" in str(info.value)

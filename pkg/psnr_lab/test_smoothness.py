"""
Tests for SMV, oscillation and the random-product convergence experiment
"""

import numpy as np
import pytest

from psnr_lab.errors import ConfigError, ExperimentError, UndefinedMetricError
from psnr_lab.graph import build_graph, gen_ring, gen_sbm, normalize
from psnr_lab.smoothness import (
    SMOOTH_HEADER,
    classification_accuracy,
    contraction_factors,
    degree_smoothness_study,
    geometric_mean_contraction,
    group_smv,
    layer_smoothness,
    lazy_family,
    oscillation,
    oscillation_trace,
    pair_distance,
    prop1_experiment,
    smv,
)


def _brute_force_smv(X):
    n = X.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                xi = X[i] / np.linalg.norm(X[i])
                xj = X[j] / np.linalg.norm(X[j])
                total += 0.5 * np.sqrt(np.sum((xi - xj) ** 2))
    return total / (n * (n - 1))


def test_pair_distance_examples():
    assert pair_distance(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.0
    assert pair_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(np.sqrt(2.0) / 2.0, abs=1e-15)
    assert pair_distance(np.array([1.0, 0.0]), np.array([-3.0, 0.0])) == pytest.approx(1.0)
    with pytest.raises(UndefinedMetricError):
        pair_distance(np.zeros(2), np.ones(2))


def test_pair_distance_is_symmetric_and_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.standard_normal(4), rng.standard_normal(4)
        a, b = rng.uniform(0.1, 10.0, size=2)
        d = pair_distance(x, y)
        assert 0.0 <= d <= 1.0
        assert d == pytest.approx(pair_distance(y, x), abs=1e-15)
        assert d == pytest.approx(pair_distance(a * x, b * y), abs=1e-12)


def test_smv_examples():
    assert smv(np.tile([[2.0, -1.0, 3.0]], (4, 1))) == 0.0
    assert smv(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(0.7071067811865476, abs=1e-15)


def test_smv_matches_double_loop():
    rng = np.random.default_rng(1)
    for draw in range(20):
        X = rng.standard_normal((int(rng.integers(2, 9)), 3))
        assert smv(X) == pytest.approx(_brute_force_smv(X), abs=1e-12), f"draw {draw}"


def test_smv_is_invariant_to_row_scaling():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((7, 4))
    scales = rng.uniform(0.01, 100.0, size=(7, 1))
    assert smv(scales * X) == pytest.approx(smv(X), abs=1e-12)


def test_smv_skips_zero_rows_with_warning(caplog):
    X = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    with caplog.at_level("WARNING"):
        value = smv(X)
    assert value == pytest.approx(np.sqrt(2.0) / 2.0)
    assert "skipped 2 zero rows" in caplog.text


def test_smv_needs_two_rows():
    with pytest.raises(UndefinedMetricError):
        smv(np.ones((1, 3)))
    with pytest.raises(UndefinedMetricError):
        smv(np.array([[1.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(UndefinedMetricError):
        smv(np.random.default_rng(0).standard_normal((5, 2)), np.array([3]))


def test_group_smv():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((10, 3))
    assert group_smv(X, np.zeros(10, dtype=int)) == {0: smv(X)}
    assert group_smv(X[:2], np.array([0, 1])) == {}

    groups = rng.integers(0, 3, size=10)
    values = group_smv(X, groups)
    for group, value in values.items():
        assert value == smv(X, np.flatnonzero(groups == group)), f"group {group}"


def test_layer_smoothness_marks_undefined_layers():
    report = layer_smoothness([np.eye(3), np.zeros((3, 2)), np.ones((3, 2))], groups=np.array([0, 0, 1]))
    assert report.layers == [1, 2, 3]
    assert report.overall[1] == pytest.approx(np.sqrt(2.0) / 2.0)
    assert np.isnan(report.overall[2])
    assert report.final() == 0.0
    assert report.group_sizes == {0: 2, 1: 1}
    assert set(report.groups[1]) == {0}


def test_oscillation_examples():
    assert oscillation(np.tile([[1.0, 4.0]], (3, 1))) == 0.0
    assert oscillation(np.array([[0.0], [1.0]])) == 1.0


def test_row_stochastic_matrices_contract_oscillation():
    rng = np.random.default_rng(4)
    for draw in range(100):
        n = int(rng.integers(2, 8))
        S = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
        S[np.arange(n), np.arange(n)] += 0.1
        S = S / S.sum(axis=1, keepdims=True)
        X = rng.standard_normal((n, 3))
        assert oscillation(S @ X) <= oscillation(X) + 1e-12, f"draw {draw}"


def test_contraction_helpers():
    trace = np.array([8.0, 4.0, 1.0, 0.0])
    np.testing.assert_allclose(contraction_factors(trace)[:2], [0.5, 0.25])
    assert contraction_factors(trace)[2] == 0.0
    assert geometric_mean_contraction(np.array([8.0, 4.0, 2.0, 1.0])) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetricError):
        geometric_mean_contraction(np.array([1.0]))


def test_lazy_family_is_row_stochastic_on_the_augmented_support():
    graph = gen_ring(8, chords=[(0, 4)])
    walk = normalize(graph, "random-walk").matrix
    rng = np.random.default_rng(5)
    for S in lazy_family(walk, [rng.uniform(0.5, 1.0, size=8) for _ in range(5)]):
        dense = S.toarray()
        np.testing.assert_allclose(dense.sum(axis=1), 1.0, atol=1e-14)
        assert ((dense > 0) == (graph.augmented.toarray() > 0)).all()


def test_identity_lambdas_reproduce_plain_powers_bitwise():
    graph = gen_ring(10)
    walk = normalize(graph, "random-walk").matrix
    X = np.random.default_rng(6).standard_normal((10, 4))
    lazy = oscillation_trace(lazy_family(walk, [np.ones(10)] * 12), X)
    plain = oscillation_trace([walk] * 12, X)
    np.testing.assert_array_equal(lazy, plain)


def test_prop1_traces_contract_and_products_converge_slower():
    """10-node ring, 20 seeds, k up to 30, Λ entries in [0.5, 1)"""
    traces = prop1_experiment(gen_ring(10), k_max=30, eps_low=0.5, seeds=range(20))
    assert len(traces) == 20

    slower = 0
    for result in traces:
        for family in ("product", "power"):
            trace = result.traces[family]
            assert trace.shape == (31,)
            assert (np.diff(trace) <= 1e-12).all(), f"seed {result.seed} {family} increased"
            assert trace[-1] < trace[0], f"seed {result.seed} {family} did not contract"
        if result.geometric_mean("product") >= result.geometric_mean("power") - 0.02:
            slower += 1
    assert slower >= 14, f"only {slower} of 20 seeds converged slower under random products"


def test_prop1_rows():
    (result,) = prop1_experiment(gen_ring(6), k_max=3, eps_low=0.5, seeds=[2])
    rows = result.rows()
    assert len(rows) == 3 * 4
    assert rows[0] == ("prop1", 2, 0, "product", result.traces["product"][0], None)
    assert rows[1][5] == pytest.approx(result.contraction("product")[0])


def test_prop1_rejects_bad_inputs():
    with pytest.raises(ExperimentError):
        prop1_experiment(build_graph([(0, 1), (2, 3)], 4), k_max=5, eps_low=0.5, seeds=[0])
    with pytest.raises(ConfigError):
        prop1_experiment(gen_ring(5), k_max=5, eps_low=1.0, seeds=[0])
    with pytest.raises(ConfigError):
        prop1_experiment(gen_ring(5), k_max=0, eps_low=0.5, seeds=[0])


def test_classification_accuracy():
    labels = np.array([0, 2, 1, 2])
    assert classification_accuracy(np.eye(3)[labels], labels, np.ones(4, dtype=bool)) == 1.0
    # all-zero logits predict class 0 everywhere
    assert classification_accuracy(np.zeros((4, 3)), labels, np.ones(4, dtype=bool)) == 0.25
    assert classification_accuracy(np.eye(3)[labels], labels, np.array([1, 3])) == 1.0

    rng = np.random.default_rng(7)
    logits = rng.standard_normal((30, 4))
    targets = rng.integers(0, 4, size=30)
    mask = rng.random(30) < 0.5
    expected = np.mean([np.argmax(logits[i]) == targets[i] for i in range(30) if mask[i]])
    assert classification_accuracy(logits, targets, mask) == pytest.approx(expected)

    with pytest.raises(UndefinedMetricError):
        classification_accuracy(logits, targets, np.zeros(30, dtype=bool))


def test_degree_smoothness_study_rows():
    dataset = gen_sbm(2, 15, 0.3, 0.05, 4, 1.0, seed=0)
    rows = degree_smoothness_study(dataset, [1, 3], hidden=8)
    assert all(len(row) == len(SMOOTH_HEADER) for row in rows)
    overall = [row for row in rows if row[2] == "all"]
    assert [row[0] for row in overall] == [1, 3]
    assert all(row[3] == 30 for row in overall)
    assert sum(row[3] for row in rows if row[0] == 1 and row[2] != "all") <= 30


def test_degree_smoothness_study_rejects_unknown_backbone():
    dataset = gen_sbm(2, 5, 0.3, 0.05, 4, 1.0, seed=0)
    with pytest.raises(ConfigError):
        degree_smoothness_study(dataset, [1], backbone="gin")

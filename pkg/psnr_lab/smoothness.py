"""
Smoothness and convergence measurements of node representations.

SMV is the mean normalized Euclidean distance between representation rows: 0
when every row points the same way, up to 1 for opposite rows. Oscillation
(largest column range) measures how far a matrix is from having identical
rows, and drives the experiment comparing products of random row-stochastic
matrices with plain powers of the random-walk operator.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp
from pydantic import ValidationError
from scipy.spatial.distance import pdist

from psnr_lab.errors import ConfigError, ExperimentError, UndefinedMetricError
from psnr_lab.graph import Graph, LabeledDataset, degree_groups, normalize
from psnr_lab.model import ModelConfig, build_model
from psnr_lab.tensor import Tensor
from psnr_lab.utils import substream

logger = logging.getLogger(__name__)

Family = Literal["product", "power", "raw"]
FAMILIES: tuple[Family, ...] = ("product", "power", "raw")

CONVERGE_HEADER = ("experiment", "seed", "k", "family", "oscillation", "contraction")
SMOOTH_HEADER = ("layers", "backbone", "group", "size", "smv")


def pair_distance(x: np.ndarray, y: np.ndarray) -> float:
    """D(x, y) = ½ ‖x/‖x‖ - y/‖y‖‖₂."""
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise UndefinedMetricError("distance to a zero vector is undefined")
    return float(0.5 * np.linalg.norm(x / nx - y / ny))


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0.0
    if zero.any():
        logger.warning("skipped %d zero rows in smoothness computation", int(zero.sum()))
    return X[~zero] / norms[~zero, None]


def smv(X: np.ndarray, subset: np.ndarray | None = None) -> float:
    """
    Mean pairwise normalized distance over the rows of `X` in `subset`.

    Zero rows are skipped with a warning.

    Args:
        X: n×d representation matrix.
        subset: Row indices or boolean mask; all rows when None.

    Raises:
        UndefinedMetricError: If fewer than two nonzero rows remain.
    """
    rows = np.asarray(X, dtype=np.float64)
    if subset is not None:
        rows = rows[subset]
    units = _unit_rows(rows)
    if units.shape[0] < 2:
        raise UndefinedMetricError(f"SMV needs at least two nonzero rows, got {units.shape[0]}")
    # every unordered pair stands for both ordered pairs, so the mean is unchanged
    return float(np.clip(0.5 * pdist(units, "euclidean").mean(), 0.0, 1.0))


def group_smv(X: np.ndarray, groups: np.ndarray) -> dict[int, float]:
    """SMV per group label; groups with fewer than two usable rows are left out."""
    values = {}
    for group in np.unique(groups):
        members = np.flatnonzero(groups == group)
        if members.size < 2:
            continue
        try:
            values[int(group)] = smv(X, members)
        except UndefinedMetricError:
            logger.debug("group %d has fewer than two nonzero rows", group)
    return values


@dataclass
class SmoothnessReport:
    """
    SMV per layer, overall and per node group.

    Attributes:
        layers: Layer indices, in order.
        overall: layer → SMV over all nodes.
        groups: layer → {group → SMV}.
        group_sizes: group → number of nodes.
    """

    layers: list[int] = field(default_factory=list)
    overall: dict[int, float] = field(default_factory=dict)
    groups: dict[int, dict[int, float]] = field(default_factory=dict)
    group_sizes: dict[int, int] = field(default_factory=dict)

    def final(self) -> float | None:
        return self.overall.get(self.layers[-1]) if self.layers else None


def layer_smoothness(hidden: Sequence[np.ndarray], groups: np.ndarray | None = None) -> SmoothnessReport:
    """SMV of every layer output H_1..H_K, optionally split by node group."""
    report = SmoothnessReport()
    if groups is not None:
        labels, counts = np.unique(groups, return_counts=True)
        report.group_sizes = {int(g): int(c) for g, c in zip(labels, counts)}
    for layer, X in enumerate(hidden, start=1):
        report.layers.append(layer)
        try:
            report.overall[layer] = smv(X)
        except UndefinedMetricError:
            report.overall[layer] = float("nan")
        if groups is not None:
            report.groups[layer] = group_smv(X, groups)
    return report


def oscillation(X: np.ndarray) -> float:
    """max_j (max_i X_ij - min_i X_ij); 0 exactly when all rows are equal."""
    X = np.asarray(X)
    if X.shape[0] == 0:
        return 0.0
    return float((X.max(axis=0) - X.min(axis=0)).max())


def classification_accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """
    Fraction of masked nodes whose argmax logit equals their label.

    Ties go to the lower class index.

    Raises:
        UndefinedMetricError: If the mask selects no node.
    """
    index = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    if index.size == 0:
        raise UndefinedMetricError("accuracy over an empty node set")
    predictions = np.argmax(np.asarray(logits)[index], axis=1)
    return float(np.mean(predictions == np.asarray(labels)[index]))


def lazy_family(operator: sp.csr_matrix, lambdas: Sequence[np.ndarray]) -> list[sp.csr_matrix]:
    """
    Row-stochastic operators S_j = Λ_j N + (I - Λ_j) for a row-stochastic N.

    Each S_j keeps the support of N (which already contains the diagonal) and
    reduces to N when Λ_j = I.
    """
    n = operator.shape[0]
    family = []
    for lam in lambdas:
        if lam.shape != (n,):
            raise ConfigError(f"Λ diagonal must have length {n}, got {lam.shape}")
        S = (sp.diags(lam) @ operator + sp.diags(1.0 - lam)).tocsr()
        S.sort_indices()
        family.append(S)
    return family


def oscillation_trace(operators: Sequence[sp.spmatrix], X: np.ndarray) -> np.ndarray:
    """osc(X), osc(S_1 X), osc(S_2 S_1 X), … for k = 0..len(operators)."""
    values = [oscillation(X)]
    current = X
    for S in operators:
        current = np.asarray(S @ current)
        values.append(oscillation(current))
    return np.asarray(values)


def contraction_factors(trace: np.ndarray) -> np.ndarray:
    """osc_k / osc_{k-1} for k ≥ 1 (NaN once the trace hits zero)."""
    previous = trace[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(previous > 0, trace[1:] / np.where(previous > 0, previous, 1.0), np.nan)


def geometric_mean_contraction(trace: np.ndarray) -> float:
    """(osc_K / osc_0)^(1/K)."""
    steps = trace.shape[0] - 1
    if steps < 1 or trace[0] == 0.0:
        raise UndefinedMetricError("contraction needs at least one step and a nonzero start")
    return float((trace[-1] / trace[0]) ** (1.0 / steps))


@dataclass
class ConvergenceTrace:
    """
    Oscillation traces of one seed, indexed by k = 0..k_max.

    Attributes:
        seed: Seed of the Λ draws and of X.
        traces: family → oscillation values. "product" multiplies the lazy
            random operators, "power" repeats the random-walk operator, and
            "raw" multiplies the sub-stochastic Λ_j N.
    """

    seed: int
    traces: dict[str, np.ndarray]

    def contraction(self, family: Family) -> np.ndarray:
        return contraction_factors(self.traces[family])

    def geometric_mean(self, family: Family) -> float:
        return geometric_mean_contraction(self.traces[family])

    def rows(self) -> list[tuple]:
        out = []
        for family in FAMILIES:
            trace = self.traces[family]
            factors = contraction_factors(trace)
            for k, value in enumerate(trace):
                out.append(("prop1", self.seed, k, family, value, None if k == 0 else factors[k - 1]))
        return out


def prop1_experiment(
    graph: Graph,
    k_max: int,
    eps_low: float,
    seeds: Sequence[int],
    feat_dim: int = 4,
) -> list[ConvergenceTrace]:
    """
    Compare products of random row-stochastic operators with powers of N_rw.

    For each seed, draws X (n×feat_dim, standard normal) and Λ_1..Λ_{k_max}
    with diagonal entries in [eps_low, 1), then records the oscillation of
    ∏ S_j X, of N_rw^k X and of ∏ (Λ_j N_rw) X for k = 0..k_max.

    Raises:
        ConfigError: If eps_low is not in (0, 1) or k_max < 1.
        ExperimentError: If the graph is disconnected.
    """
    if not (0.0 < eps_low < 1.0):
        raise ConfigError(f"eps_low must lie in (0, 1), got {eps_low}")
    if k_max < 1:
        raise ConfigError(f"k_max must be at least 1, got {k_max}")
    if not graph.is_connected():
        raise ExperimentError("graph is disconnected; the product limit is not rank-one")

    walk = normalize(graph, "random-walk").matrix
    results = []
    for seed in seeds:
        X = substream(seed, "x").standard_normal((graph.n, feat_dim))
        lam_rng = substream(seed, "lambda")
        lambdas = [lam_rng.uniform(eps_low, 1.0, size=graph.n) for _ in range(k_max)]
        traces = {
            "product": oscillation_trace(lazy_family(walk, lambdas), X),
            "power": oscillation_trace([walk] * k_max, X),
            "raw": oscillation_trace([(sp.diags(lam) @ walk).tocsr() for lam in lambdas], X),
        }
        results.append(ConvergenceTrace(seed=seed, traces=traces))
        logger.debug(
            "seed %d: product %.4f power %.4f",
            seed,
            geometric_mean_contraction(traces["product"]),
            geometric_mean_contraction(traces["power"]),
        )
    return results


def degree_smoothness_study(
    dataset: LabeledDataset,
    layers_grid: Sequence[int],
    backbone: Literal["gcn", "gat"] = "gcn",
    seed: int = 0,
    hidden: int = 64,
) -> list[tuple]:
    """
    SMV of the final representation per degree group, for untrained models of
    increasing depth.

    Returns:
        Rows matching `SMOOTH_HEADER`; group "all" covers every node.
    """
    groups = degree_groups(dataset.graph)
    rows = []
    for layers in layers_grid:
        try:
            config = ModelConfig(
                backbone=backbone,
                depth=layers,
                hidden=hidden,
                classes=dataset.num_classes,
                dropout=0.0,
                seed=seed,
            )
        except ValidationError as e:
            raise ConfigError(f"invalid model config: {e}") from e
        model = build_model(config, dataset.graph, dataset.feat_dim)
        final = model.forward(Tensor(dataset.features)).hidden[-1].values
        report = layer_smoothness([final], groups)
        rows.append((layers, backbone, "all", dataset.graph.n, report.overall[1]))
        for group, value in sorted(report.groups[1].items()):
            rows.append((layers, backbone, group, report.group_sizes[group], value))
    return rows

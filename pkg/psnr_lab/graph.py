import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from psnr_lab.errors import ConfigError, MalformedInputError, RangeError
from psnr_lab.utils import substream

logger = logging.getLogger(__name__)

DENSE_LIMIT = 4096

EDGE_FILE = "edges.tsv"
FEATURE_FILE = "features.csv"
LABEL_FILE = "labels.txt"

OperatorKind = Literal["symmetric", "random-walk"]


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Immutable undirected graph without self-loops.

    Attributes:
        n: Number of nodes.
        edges: (m, 2) array of undirected edges with `i < j`, sorted, unique.
        degree: Per-node number of incident edges.
        adjacency: Symmetric 0/1 CSR adjacency matrix A (no self-loops).
    """

    n: int
    edges: np.ndarray
    degree: np.ndarray
    adjacency: sp.csr_matrix

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @cached_property
    def augmented(self) -> sp.csr_matrix:
        """Ã = A + I."""
        return (self.adjacency + sp.eye(self.n, format="csr")).tocsr()

    @cached_property
    def closed_mask(self) -> np.ndarray:
        """Dense boolean support of Ã (closed neighborhoods), n ≤ 4096."""
        if self.n > DENSE_LIMIT:
            raise RangeError(f"dense mask requested for n={self.n} > {DENSE_LIMIT}")
        return self.augmented.toarray() > 0

    @cached_property
    def mean_operator(self) -> sp.csr_matrix:
        """D⁻¹A with zero rows for isolated nodes (neighbor mean, self excluded)."""
        inv = np.zeros(self.n)
        nonzero = self.degree > 0
        inv[nonzero] = 1.0 / self.degree[nonzero]
        return (sp.diags(inv) @ self.adjacency).tocsr()

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        count, _ = connected_components(self.adjacency, directed=False)
        return count == 1

    def same_as(self, other: "Graph") -> bool:
        return self.n == other.n and np.array_equal(self.edges, other.edges)


@dataclass(frozen=True, eq=False)
class PropagationOperator:
    """
    Normalized propagation matrix built from Ã.

    Attributes:
        kind: "symmetric" (D̃^-1/2 Ã D̃^-1/2) or "random-walk" (D̃^-1 Ã).
        matrix: n×n CSR matrix.
    """

    kind: OperatorKind
    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        if self.n > DENSE_LIMIT:
            raise RangeError(f"dense conversion requested for n={self.n} > {DENSE_LIMIT}")
        return self.matrix.toarray()


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    A graph with node features and class labels.

    Attributes:
        graph: The graph.
        features: n×d float64 feature matrix, row i belongs to node i.
        labels: Per-node class index in [0, num_classes).
        num_classes: Number of classes C.
    """

    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.graph.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise MalformedInputError(
                f"feature matrix has shape {self.features.shape}, expected ({n}, d)"
            )
        if not np.all(np.isfinite(self.features)):
            raise MalformedInputError("feature matrix contains non-finite entries")
        if self.labels.shape != (n,):
            raise MalformedInputError(f"expected {n} labels, got {self.labels.shape[0]}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise MalformedInputError(f"labels must lie in [0, {self.num_classes})")

    @property
    def feat_dim(self) -> int:
        return int(self.features.shape[1])


def build_graph(edge_list: Iterable[tuple[int, int]], n: int) -> Graph:
    """
    Build an undirected graph from an edge list.

    Directed pairs are symmetrized, duplicates are merged and self-loops are
    dropped (with a warning giving their count).

    Args:
        edge_list: Iterable of (i, j) node pairs, 0-based.
        n: Number of nodes.

    Returns:
        The graph.

    Raises:
        MalformedInputError: If an endpoint is negative or ≥ n.
    """
    if n < 0:
        raise MalformedInputError(f"node count must be non-negative, got {n}")
    pairs = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
        raise MalformedInputError(f"edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {n})")

    loops = pairs[:, 0] == pairs[:, 1]
    if loops.any():
        logger.warning("dropped %d self-loop entries", int(loops.sum()))
        pairs = pairs[~loops]

    canonical = np.sort(pairs, axis=1)
    edges = np.unique(canonical, axis=0) if canonical.size else np.zeros((0, 2), np.int64)

    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adjacency = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
    adjacency.sort_indices()
    degree = np.asarray(adjacency.sum(axis=1)).ravel().astype(np.int64)

    return Graph(n=n, edges=_freeze(edges), degree=_freeze(degree), adjacency=adjacency)


def normalize(graph: Graph, kind: OperatorKind = "symmetric") -> PropagationOperator:
    """
    Self-loop-augmented normalization of the adjacency matrix.

    Isolated nodes only carry their self-loop, so their row is the identity row.

    Args:
        graph: The graph.
        kind: "symmetric" for D̃^-1/2 Ã D̃^-1/2, "random-walk" for D̃^-1 Ã.

    Returns:
        The propagation operator.
    """
    augmented = graph.augmented
    degree = graph.degree.astype(np.float64) + 1.0
    if kind == "symmetric":
        scale = sp.diags(1.0 / np.sqrt(degree))
        matrix = scale @ augmented @ scale
    elif kind == "random-walk":
        matrix = sp.diags(1.0 / degree) @ augmented
    else:
        raise ConfigError(f"unknown operator kind: {kind}")
    matrix = sp.csr_matrix(matrix)
    matrix.sort_indices()
    return PropagationOperator(kind=kind, matrix=matrix)


def degree_groups(graph: Graph) -> np.ndarray:
    """
    Group nodes by degree: degree in [2^i, 2^(i+1)) → group i, degree 0 → -1.

    Args:
        graph: The graph.

    Returns:
        Integer array of per-node group indices.
    """
    degree = graph.degree
    # frexp gives degree = m * 2**e with m in [0.5, 1), so floor(log2) = e - 1 exactly
    _, exponent = np.frexp(degree.astype(np.float64))
    return np.where(degree > 0, exponent - 1, -1).astype(np.int64)


def gen_sbm(
    blocks: int,
    per_block: int,
    p_in: float,
    p_out: float,
    feat_dim: int,
    feat_shift: float,
    seed: int,
) -> LabeledDataset:
    """
    Sample a stochastic block model with class-shifted Gaussian features.

    Node `v` belongs to block `v // per_block`, which is also its label. Every
    unordered pair is an edge independently with probability `p_in` inside a
    block and `p_out` across blocks. Features are standard normal with
    `feat_shift` added on axis `label % feat_dim`.

    Args:
        blocks: Number of blocks (classes).
        per_block: Nodes per block.
        p_in: Intra-block edge probability.
        p_out: Inter-block edge probability.
        feat_dim: Feature width.
        feat_shift: Class mean shift.
        seed: Seed; the graph and features use the "sbm" sub-stream.

    Returns:
        The sampled dataset.

    Raises:
        ConfigError: If the probabilities violate 0 ≤ p_out ≤ p_in ≤ 1 or a size is invalid.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ConfigError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if blocks < 1 or per_block < 1 or feat_dim < 1:
        raise ConfigError("blocks, per_block and feat_dim must be positive")

    rng = substream(seed, "sbm")
    n = blocks * per_block
    labels = np.repeat(np.arange(blocks, dtype=np.int64), per_block)

    rows, cols = np.triu_indices(n, k=1)
    same = labels[rows] == labels[cols]
    probability = np.where(same, p_in, p_out)
    keep = rng.random(rows.shape[0]) < probability
    graph = build_graph(zip(rows[keep].tolist(), cols[keep].tolist()), n)

    features = rng.standard_normal((n, feat_dim))
    features[np.arange(n), labels % feat_dim] += feat_shift
    return LabeledDataset(graph=graph, features=features, labels=labels, num_classes=blocks)


def gen_ring(n: int, chords: Iterable[tuple[int, int]] = ()) -> Graph:
    """A cycle over `n` nodes plus optional chords; connected for n ≥ 2."""
    ring = [(i, (i + 1) % n) for i in range(n)] if n > 1 else []
    return build_graph([*ring, *chords], n)


def _read_lines(path: Path) -> list[str]:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise MalformedInputError(f"cannot read file: {e}", str(path)) from e
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedInputError(f"invalid UTF-8: {e.reason}", str(path), data.count(b"\n", 0, e.start) + 1) from e
    return text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")


def load_dataset(edge_path: str | Path, feature_path: str | Path, label_path: str | Path) -> LabeledDataset:
    """
    Read a dataset from the three-file text format.

    The label file fixes the node count n; the feature file must have exactly n
    rows and every edge endpoint must be < n.

    Args:
        edge_path: "i<TAB>j" per line, 0-based ids.
        feature_path: Comma-separated floats, one row per node.
        label_path: One integer class per line.

    Returns:
        The dataset.

    Raises:
        MalformedInputError: Naming the file and line of the first problem.
    """
    edge_path, feature_path, label_path = Path(edge_path), Path(feature_path), Path(label_path)

    labels = []
    for number, line in enumerate(_read_lines(label_path), start=1):
        try:
            labels.append(int(line.strip()))
        except ValueError:
            raise MalformedInputError(f"non-integer label {line!r}", str(label_path), number)
    n = len(labels)
    label_array = np.asarray(labels, dtype=np.int64)
    if n and label_array.min() < 0:
        raise MalformedInputError("negative class label", str(label_path))

    rows = []
    width = None
    for number, line in enumerate(_read_lines(feature_path), start=1):
        try:
            row = [float(cell) for cell in line.split(",")]
        except ValueError:
            raise MalformedInputError(f"non-numeric cell in {line!r}", str(feature_path), number)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise MalformedInputError(
                f"row has {len(row)} cells, expected {width}", str(feature_path), number
            )
        rows.append(row)
    if len(rows) != n:
        raise MalformedInputError(
            f"{len(rows)} feature rows but {n} labels in {label_path}", str(feature_path), len(rows)
        )

    pairs = []
    for number, line in enumerate(_read_lines(edge_path), start=1):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != 2:
            raise MalformedInputError(f"expected 'i<TAB>j', got {line!r}", str(edge_path), number)
        try:
            i, j = int(cells[0]), int(cells[1])
        except ValueError:
            raise MalformedInputError(f"non-integer node id in {line!r}", str(edge_path), number)
        if not (0 <= i < n and 0 <= j < n):
            raise MalformedInputError(f"unknown node id in {line!r} (n={n})", str(edge_path), number)
        pairs.append((i, j))

    features = np.asarray(rows, dtype=np.float64).reshape(n, width or 0)
    num_classes = int(label_array.max()) + 1 if n else 0
    return LabeledDataset(
        graph=build_graph(pairs, n),
        features=features,
        labels=label_array,
        num_classes=num_classes,
    )


def load_dataset_dir(directory: str | Path) -> LabeledDataset:
    """Load `edges.tsv`, `features.csv` and `labels.txt` from one directory."""
    directory = Path(directory)
    return load_dataset(directory / EDGE_FILE, directory / FEATURE_FILE, directory / LABEL_FILE)


def write_dataset(dataset: LabeledDataset, directory: str | Path) -> None:
    """
    Write a dataset in the three-file format understood by `load_dataset`.

    Floats are written with `repr`, which round-trips doubles exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    edge_lines = "".join(f"{i}\t{j}\n" for i, j in dataset.graph.edges.tolist())
    feature_lines = "".join(
        ",".join(repr(float(value)) for value in row) + "\n" for row in dataset.features
    )
    label_lines = "".join(f"{int(label)}\n" for label in dataset.labels)
    (directory / EDGE_FILE).write_text(edge_lines, encoding="utf-8", newline="\n")
    (directory / FEATURE_FILE).write_text(feature_lines, encoding="utf-8", newline="\n")
    (directory / LABEL_FILE).write_text(label_lines, encoding="utf-8", newline="\n")

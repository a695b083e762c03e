"""
Dense reverse-mode automatic differentiation over float64 matrices.

Every primitive returns a new `Tensor` that remembers its parents and a closure
mapping the output gradient to the parent gradients. `backward` orders the
recorded nodes with Kahn's algorithm (a node is processed only after every
consumer of its value has pushed its gradient) and then releases the tape.
"""

import itertools
from collections import defaultdict, deque
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from psnr_lab.errors import ConfigError, ContractError, NumericError, ShapeError

_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """
    A dense 2-D matrix that can take part in a differentiation tape.

    Args:
        values: Anything convertible to a 2-D float64 array.
        requires_grad: Whether gradients should flow to this tensor. Leaves with
            `requires_grad=True` are parameters and receive `.grad` on backward.
        name: Optional label, used for parameters.

    Attributes:
        values: The float64 matrix.
        grad: Accumulated gradient for parameter leaves, or None.
        node_id: Identifier unique over the process lifetime.
    """

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        array = np.array(values, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        if array.ndim != 2:
            raise ShapeError("tensor", array.shape)
        self.values = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple["Tensor", ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @classmethod
    def parameter(cls, values, name: str | None = None) -> "Tensor":
        return cls(values, requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError("item", self.shape)
        return float(self.values[0, 0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _record(op: str, values: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{op}: non-finite output")
    out = Tensor(values)
    out.op = op
    out._parents = tuple(parents)
    out._backward = backward
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(matrix: sp.spmatrix | np.ndarray, x: Tensor) -> Tensor:
    """Constant (sparse or dense) matrix times a tensor; no gradient to the matrix."""
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError("spmm", matrix.shape, x.shape)
    values = np.asarray(matrix @ x.values)
    transposed = matrix.T
    return _record("spmm", values, (x,), lambda g: (np.asarray(transposed @ g),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.values + b.values, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _record("subtract", a.values - b.values, (a, b), lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record("scale", a.values * factor, (a,), lambda g: (g * factor,))


def shift(a: Tensor, constant: float) -> Tensor:
    constant = float(constant)
    return _record("shift", a.values + constant, (a,), lambda g: (g,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    av, bv = a.values, b.values
    return _record("hadamard", av * bv, (a, b), lambda g: (g * bv, g * av))


def row_broadcast_add(x: Tensor, row: Tensor) -> Tensor:
    """x (n×d) plus a 1×d row added to every row."""
    if row.shape != (1, x.shape[1]):
        raise ShapeError("row-broadcast-add", x.shape, row.shape)
    return _record(
        "row-broadcast-add",
        x.values + row.values,
        (x, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def diag_matmul(s: Tensor, x: Tensor) -> Tensor:
    """diag(s) · x for an n×1 column s and an n×d matrix x."""
    if s.shape != (x.shape[0], 1):
        raise ShapeError("diag-matmul", s.shape, x.shape)
    sv, xv = s.values, x.values
    return _record(
        "diag-matmul",
        sv * xv,
        (s, x),
        lambda g: ((g * xv).sum(axis=1, keepdims=True), sv * g),
    )


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.values)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    positive = x.values > 0
    return _record("relu", np.where(positive, x.values, 0.0), (x,), lambda g: (g * positive,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.values > 0
    factor = np.where(positive, 1.0, slope)
    return _record("leaky-relu", x.values * factor, (x,), lambda g: (g * factor,))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    xv = x.values
    negative_part = alpha * np.expm1(np.minimum(xv, 0.0))
    values = np.where(xv > 0, xv, negative_part)
    slope = np.where(xv > 0, 1.0, negative_part + alpha)
    return _record("elu", values, (x,), lambda g: (g * slope,))


def softplus(x: Tensor) -> Tensor:
    xv = x.values
    return _record("softplus", np.logaddexp(0.0, xv), (x,), lambda g: (g * expit(xv),))


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probabilities = np.exp(y)
    return _record(
        "log-softmax-rows",
        y,
        (x,),
        lambda g: (g - probabilities * g.sum(axis=1, keepdims=True),),
    )


def masked_row_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to `mask`; entries outside the mask are exactly 0."""
    if mask.shape != x.shape:
        raise ShapeError("masked-row-softmax", x.shape, mask.shape)
    if not mask.any(axis=1).all():
        raise ShapeError("masked-row-softmax: empty mask row", mask.shape)
    logits = np.where(mask, x.values, -np.inf)
    exp = np.exp(logits - logits.max(axis=1, keepdims=True))
    y = exp / exp.sum(axis=1, keepdims=True)
    return _record(
        "masked-row-softmax",
        y,
        (x,),
        lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),),
    )


def outer_add(u: Tensor, v: Tensor) -> Tensor:
    """u·1ᵀ + 1·vᵀ for n×1 columns u and v."""
    if u.shape[1] != 1 or v.shape[1] != 1:
        raise ShapeError("outer-add", u.shape, v.shape)
    return _record(
        "outer-add",
        u.values + v.values.T,
        (u, v),
        lambda g: (g.sum(axis=1, keepdims=True), g.sum(axis=0).reshape(-1, 1)),
    )


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat-cols", ())
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise ShapeError("concat-cols", *(t.shape for t in tensors))
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _record("concat-cols", np.concatenate([t.values for t in tensors], axis=1), tensors, backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice-cols[{start}:{stop}]", x.shape)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("slice-cols", x.values[:, start:stop], (x,), backward)


def row_select(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("row-select", x.shape, index.shape)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("row-select", x.values[index], (x,), backward)


def gather(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick x[rows[i], cols[i]] into a k×1 column."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape:
        raise ShapeError("gather", rows.shape, cols.shape)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g[:, 0])
        return (full,)

    return _record("gather", x.values[rows, cols].reshape(-1, 1), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(
        "sum",
        np.array([[x.values.sum()]]),
        (x,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def max_stack(tensors: Sequence[Tensor]) -> Tensor:
    """Entrywise maximum; ties send the gradient to the earliest tensor."""
    if not tensors or any(t.shape != tensors[0].shape for t in tensors):
        raise ShapeError("max-stack", *(t.shape for t in tensors))
    stacked = np.stack([t.values for t in tensors])
    winner = stacked.argmax(axis=0)

    def backward(g):
        return tuple(np.where(winner == i, g, 0.0) for i in range(len(tensors)))

    return _record("max-stack", stacked.max(axis=0), tensors, backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. With `train=False` (or p=0) the input tensor itself is returned."""
    if not train or p == 0.0:
        return x
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record("dropout", x.values * keep, (x,), lambda g: (g * keep,))


def gaussian_noise_inject(mu: Tensor, sigma: Tensor, zeta: np.ndarray) -> Tensor:
    """
    Reparameterized Gaussian sample mu + zeta·sigma.

    `zeta` is a constant standard-normal draw; gradients flow to `mu` and
    `sigma` only.
    """
    _same_shape("gaussian-noise-inject", mu, sigma)
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.shape != mu.shape:
        raise ShapeError("gaussian-noise-inject", mu.shape, zeta.shape)
    return _record(
        "gaussian-noise-inject",
        mu.values + zeta * sigma.values,
        (mu, sigma),
        lambda g: (g, g * zeta),
    )


def cross_entropy(logits: Tensor, labels: np.ndarray, index: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `labels[index]` over the rows in `index`."""
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0:
        raise ContractError("cross_entropy over an empty node set")
    log_probs = log_softmax_rows(logits)
    picked = gather(log_probs, index, np.asarray(labels)[index])
    return scale(sum_all(picked), -1.0 / index.size)


def backward(loss: Tensor) -> None:
    """
    Back-propagate from a 1×1 loss into every parameter leaf on its tape.

    Gradients are accumulated into `.grad` of leaves created with
    `requires_grad=True`; constant leaves are skipped. The tape is released
    afterwards, so calling `backward` twice on the same loss is an error.

    Args:
        loss: Scalar (1×1) tensor.

    Raises:
        ContractError: If the loss is not 1×1, was already back-propagated, or
            the tape contains a cycle.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("computation tape already consumed")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        tensor = stack.pop()
        if tensor.node_id in nodes or not tensor.requires_grad:
            continue
        nodes[tensor.node_id] = tensor
        stack.extend(tensor._parents)

    # number of not-yet-processed consumers of each node
    pending = defaultdict(int)
    for tensor in nodes.values():
        for parent in tensor._parents:
            if parent.node_id in nodes:
                pending[parent.node_id] += 1

    queue = deque([loss])
    order = []
    while queue:
        tensor = queue.popleft()
        order.append(tensor)
        for parent in tensor._parents:
            if parent.node_id not in nodes:
                continue
            pending[parent.node_id] -= 1
            if pending[parent.node_id] == 0:
                queue.append(parent)

    if len(order) != len(nodes):
        raise ContractError("computation tape contains a cycle")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for tensor in order:
        grad = grads.pop(tensor.node_id, None)
        if grad is None:
            continue
        if tensor._backward is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        for parent, parent_grad in zip(tensor._parents, tensor._backward(grad)):
            if parent_grad is None or parent.node_id not in nodes:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + parent_grad
            else:
                grads[parent.node_id] = parent_grad

    for tensor in order:
        if not tensor.is_leaf:
            tensor._parents = ()
            tensor._backward = None
            tensor._consumed = True

"""
Graph convolution layers, residual connections and the posterior-sampled residual.

Layers are plain callables over `Tensor` values. Parameters live on small conv
objects (`GCNConv`, `GATConv`, `SAGEConv`) that expose them through
`parameters()`, so the model can hand them to the optimizer.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal, Protocol

import numpy as np
from scipy.special import expit

from psnr_lab.errors import ConfigError, ContractError, NumericError, ShapeError
from psnr_lab.graph import Graph, PropagationOperator, normalize
from psnr_lab.tensor import (
    Tensor,
    add,
    concat_cols,
    diag_matmul,
    gaussian_noise_inject,
    leaky_relu,
    masked_row_softmax,
    matmul,
    max_stack,
    outer_add,
    relu,
    row_broadcast_add,
    scale,
    shift,
    sigmoid,
    slice_cols,
    softplus,
    spmm,
    subtract,
)

LayerKind = Literal["gcn", "gat", "sage"]
Activation = Callable[[Tensor], Tensor]

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class GraphContext:
    """The graph together with the operators every layer needs."""

    graph: Graph
    operator: PropagationOperator

    @classmethod
    def from_graph(cls, graph: Graph) -> "GraphContext":
        return cls(graph=graph, operator=normalize(graph, "symmetric"))

    @cached_property
    def mask(self) -> np.ndarray:
        return self.graph.closed_mask

    @property
    def n(self) -> int:
        return self.graph.n


def gcn_layer(h: Tensor, operator: PropagationOperator, weight: Tensor, activation: Activation | None = relu) -> Tensor:
    """
    One graph convolution N · H · W, optionally followed by an activation.

    Args:
        h: n×d node representations.
        operator: Propagation operator N (n×n).
        weight: d×d' projection.
        activation: Applied to the output; None keeps the layer linear.

    Returns:
        n×d' tensor.
    """
    if operator.n != h.shape[0]:
        raise ShapeError("gcn-layer", (operator.n, operator.n), h.shape)
    out = spmm(operator.matrix, matmul(h, weight))
    return activation(out) if activation is not None else out


def gat_layer(
    h: Tensor,
    mask: np.ndarray,
    weight: Tensor,
    att_dst: Tensor,
    att_src: Tensor,
    heads: int = 1,
    activation: Activation | None = None,
) -> tuple[Tensor, np.ndarray]:
    """
    Single-head graph attention over closed neighborhoods.

    Row i of the attention matrix is a softmax over j ∈ N(i) ∪ {i} of
    LeakyReLU(a_dst·Wh_i + a_src·Wh_j); entries outside the neighborhood are 0.

    Returns:
        The n×d' output and the dense attention matrix (for inspection).
    """
    if heads != 1:
        raise ConfigError(f"only single-head attention is supported, got heads={heads}")
    if mask.shape != (h.shape[0], h.shape[0]):
        raise ShapeError("gat-layer", mask.shape, h.shape)
    projected = matmul(h, weight)
    scores = leaky_relu(outer_add(matmul(projected, att_dst), matmul(projected, att_src)), 0.2)
    attention = masked_row_softmax(scores, mask)
    out = matmul(attention, projected)
    out = activation(out) if activation is not None else out
    return out, attention.values


def sage_layer(
    h: Tensor,
    graph: Graph,
    weight_self: Tensor,
    weight_neigh: Tensor,
    activation: Activation | None = None,
) -> Tensor:
    """H · W_self + mean_{j ∈ N(i)} H_j · W_neigh; isolated nodes get a zero neighbor mean."""
    if graph.n != h.shape[0]:
        raise ShapeError("sage-layer", (graph.n,), h.shape)
    out = add(matmul(h, weight_self), matmul(spmm(graph.mean_operator, h), weight_neigh))
    return activation(out) if activation is not None else out


def layer_emb(k: int, dim: int) -> np.ndarray:
    """
    Sinusoidal embedding of a layer index.

    Entry 2i is sin(k / 10000^(2i/dim)) and entry 2i+1 is cos of the same angle.
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"layer embedding width must be a positive even number, got {dim}")
    exponents = np.arange(0, dim, 2, dtype=np.float64) / dim
    angles = k / np.power(10000.0, exponents)
    emb = np.empty(dim)
    emb[0::2] = np.sin(angles)
    emb[1::2] = np.cos(angles)
    return emb


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name=name)


class Conv(Protocol):
    in_dim: int
    out_dim: int

    def parameters(self) -> dict[str, Tensor]: ...

    def __call__(self, h: Tensor, ctx: GraphContext, activation: Activation | None = relu) -> Tensor: ...


class GCNConv:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = xavier(rng, in_dim, out_dim, f"{name}.weight")

    def parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight}

    def __call__(self, h: Tensor, ctx: GraphContext, activation: Activation | None = relu) -> Tensor:
        return gcn_layer(h, ctx.operator, self.weight, activation)


class GATConv:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = xavier(rng, in_dim, out_dim, f"{name}.weight")
        self.att_dst = xavier(rng, out_dim, 1, f"{name}.att_dst")
        self.att_src = xavier(rng, out_dim, 1, f"{name}.att_src")
        self.last_attention: np.ndarray | None = None

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in (self.weight, self.att_dst, self.att_src)}

    def __call__(self, h: Tensor, ctx: GraphContext, activation: Activation | None = relu) -> Tensor:
        out, self.last_attention = gat_layer(h, ctx.mask, self.weight, self.att_dst, self.att_src, 1, activation)
        return out


class SAGEConv:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight_self = xavier(rng, in_dim, out_dim, f"{name}.weight_self")
        self.weight_neigh = xavier(rng, in_dim, out_dim, f"{name}.weight_neigh")

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in (self.weight_self, self.weight_neigh)}

    def __call__(self, h: Tensor, ctx: GraphContext, activation: Activation | None = relu) -> Tensor:
        return sage_layer(h, ctx.graph, self.weight_self, self.weight_neigh, activation)


CONV_TYPES: dict[str, type] = {"gcn": GCNConv, "gat": GATConv, "sage": SAGEConv}


def make_conv(kind: LayerKind, in_dim: int, out_dim: int, rng: np.random.Generator, name: str) -> Conv:
    if kind not in CONV_TYPES:
        raise ConfigError(f"unknown layer kind: {kind}")
    return CONV_TYPES[kind](in_dim, out_dim, rng, name)


class NoiseSource:
    """
    Standard-normal draws for the reparameterized coefficient sample.

    A frozen source returns the same draw every time a layer asks again, which
    makes the forward pass a deterministic function of the parameters. A
    disabled source returns zeros, so the coefficient logit is the posterior
    mean.
    """

    def __init__(self, rng: np.random.Generator | None = None, *, enabled: bool = True, frozen: bool = False):
        if enabled and rng is None:
            raise ContractError("an enabled noise source needs a random generator")
        self.rng = rng
        self.enabled = enabled
        self.frozen = frozen
        self._cache: dict[int, np.ndarray] = {}

    @classmethod
    def seeded(cls, seed: int, frozen: bool = False) -> "NoiseSource":
        return cls(np.random.default_rng(seed), frozen=frozen)

    @classmethod
    def disabled(cls) -> "NoiseSource":
        return cls(enabled=False)

    def draw(self, layer: int, n: int) -> np.ndarray:
        if not self.enabled:
            return np.zeros((n, 1))
        if self.frozen and layer in self._cache:
            return self._cache[layer]
        zeta = self.rng.standard_normal((n, 1))
        if self.frozen:
            self._cache[layer] = zeta
        return zeta


class PosteriorEncoder:
    """
    Maps residual information to per-node (μ, σ) of the coefficient logit.

    A single graph layer of the chosen kind with a 2-wide output head; column 0
    is μ and column 1 goes through softplus (+1e-6) to give σ. Head weights and
    bias start at zero, so an untrained encoder predicts μ = 0 and the same σ
    for every node.
    """

    def __init__(self, kind: LayerKind, hidden: int, rng: np.random.Generator, name: str = "encoder"):
        self.kind = kind
        self.conv = make_conv(kind, hidden, 2, rng, name)
        for param in self.conv.parameters().values():
            if not param.name.endswith(("att_dst", "att_src")):
                param.values[...] = 0.0
        self.bias = Tensor.parameter(np.zeros((1, 2)), name=f"{name}.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {**self.conv.parameters(), self.bias.name: self.bias}

    def __call__(self, x: Tensor, ctx: GraphContext) -> tuple[Tensor, Tensor]:
        out = row_broadcast_add(self.conv(x, ctx, activation=None), self.bias)
        mu = slice_cols(out, 0, 1)
        sigma = shift(softplus(slice_cols(out, 1, 2)), SIGMA_FLOOR)
        return mu, sigma


@dataclass
class PsnrLayerTrace:
    """Per-layer record of the posterior-sampled coefficient (all arrays length n)."""

    layer: int
    mu: np.ndarray
    sigma: np.ndarray
    eta: np.ndarray
    gamma: float
    embedding: np.ndarray

    @property
    def coefficient(self) -> np.ndarray:
        return expit(self.eta)


def psnr_step(
    h1: Tensor,
    h_prev: Tensor,
    k: int,
    conv: Callable[[Tensor], Tensor],
    encoder: Callable[[Tensor], tuple[Tensor, Tensor]],
    gamma: Tensor,
    noise: NoiseSource,
) -> tuple[Tensor, PsnrLayerTrace]:
    """
    Compute layer k ≥ 2 of a posterior-sampled residual stack.

    H'  = conv(H_{k-1})
    (μ, σ) = encoder(H_1 - H' + γ · layer_emb(k-1))
    η   = μ + ζ·σ,  ζ ~ N(0, 1) per node
    H_k = H_1 + diag(sigmoid(η)) · (H_1 - H')

    Sampling happens in both training and evaluation; pass a disabled noise
    source to use the posterior mean.

    Args:
        h1: Output of the first layer, n×d.
        h_prev: H_{k-1}, n×d.
        k: Layer index, at least 2.
        conv: The layer-k graph convolution (n×d → n×d).
        encoder: Returns (μ, σ), both n×1.
        gamma: 1×1 trainable weight of the layer embedding.
        noise: Source of ζ.

    Returns:
        H_k and the layer trace.

    Raises:
        ContractError: If k < 2.
        NumericError: If (μ, σ) or η are non-finite; the error names the layer.
    """
    if k < 2:
        raise ContractError(f"posterior-sampled residual starts at layer 2, got k={k}")
    if h1.shape != h_prev.shape:
        raise ShapeError("psnr-step", h1.shape, h_prev.shape)
    n, dim = h1.shape

    h_conv = conv(h_prev)
    if h_conv.shape != h1.shape:
        raise ShapeError("psnr-step", h1.shape, h_conv.shape)
    residual = subtract(h1, h_conv)
    embedding = layer_emb(k - 1, dim)
    try:
        encoder_input = row_broadcast_add(residual, matmul(gamma, Tensor(embedding[None, :])))
        mu, sigma = encoder(encoder_input)
        eta = gaussian_noise_inject(mu, sigma, noise.draw(k, n))
    except NumericError as e:
        raise NumericError(str(e), layer=k) from e

    h_k = add(h1, diag_matmul(sigmoid(eta), residual))
    trace = PsnrLayerTrace(
        layer=k,
        mu=mu.values[:, 0].copy(),
        sigma=sigma.values[:, 0].copy(),
        eta=eta.values[:, 0].copy(),
        gamma=gamma.item(),
        embedding=embedding,
    )
    return h_k, trace


ResidualVariant = Literal["none", "res", "initial-res", "dense", "jk", "psnr"]


@dataclass
class ResidualState:
    """
    What the residual connections may look back at.

    Attributes:
        initial: H_1, used by the initial residual.
        previous: H_{k-1}, used by the plain residual.
        history: Outputs H_1..H_{k-1}, used by dense connections and JK.
    """

    initial: Tensor | None = None
    previous: Tensor | None = None
    history: list[Tensor] = field(default_factory=list)


def residual_step(variant: ResidualVariant, state: ResidualState, h_conv: Tensor, alpha: float = 0.1) -> Tensor:
    """
    Combine the layer-k convolution output with earlier layers.

    none → H';  res → H' + H_{k-1};  initial-res → (1-α)·H' + α·H_1;
    dense → [H_1 ‖ … ‖ H_{k-1} ‖ H'] (the next layer's input);
    jk → H' (aggregation happens once, after the last layer).

    Raises:
        ContractError: If the required history is missing, or for the
            posterior-sampled variant (use `psnr_step`).
    """
    if variant == "none" or variant == "jk":
        return h_conv
    if variant == "res":
        if state.previous is None:
            raise ContractError("residual connection needs the previous layer output")
        return add(h_conv, state.previous)
    if variant == "initial-res":
        if state.initial is None:
            raise ContractError("initial residual needs the first layer output")
        return add(scale(h_conv, 1.0 - alpha), scale(state.initial, alpha))
    if variant == "dense":
        if not state.history:
            raise ContractError("dense connection needs at least one stored layer")
        return concat_cols([*state.history, h_conv])
    if variant == "psnr":
        raise ContractError("posterior-sampled residual layers are computed by psnr_step")
    raise ConfigError(f"unknown residual variant: {variant}")


def jk_aggregate(outputs: list[Tensor], mode: Literal["concat", "maxpool"] = "concat") -> Tensor:
    """Jumping-knowledge aggregation of all layer outputs."""
    if not outputs:
        raise ContractError("jumping knowledge needs at least one layer output")
    if mode == "concat":
        return concat_cols(outputs)
    if mode == "maxpool":
        return max_stack(outputs)
    raise ConfigError(f"unknown jumping-knowledge mode: {mode}")

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from psnr_lab.errors import ConfigError, ContractError
from psnr_lab.graph import Graph
from psnr_lab.layers import (
    Conv,
    GraphContext,
    NoiseSource,
    PosteriorEncoder,
    PsnrLayerTrace,
    ResidualState,
    ResidualVariant,
    jk_aggregate,
    make_conv,
    psnr_step,
    residual_step,
)
from psnr_lab.tensor import Tensor, dropout, elu, matmul, relu, row_broadcast_add
from psnr_lab.utils import substream

logger = logging.getLogger(__name__)

ACTIVATIONS = {"relu": relu, "elu": elu}


class ResidualKind(BaseModel):
    """
    Which residual connection joins consecutive layers.

    `alpha` is read by the initial residual, `jk_agg` by jumping knowledge and
    `encoder` by the posterior-sampled residual; other variants ignore them.
    """

    model_config = ConfigDict(frozen=True)

    variant: ResidualVariant = "none"
    alpha: float = 0.1
    jk_agg: Literal["concat", "maxpool"] = "concat"
    encoder: Literal["gcn", "gat", "sage"] = "sage"

    @field_validator("variant", mode="before")
    @classmethod
    def _accept_short_names(cls, value):
        return {"init-res": "initial-res", "initres": "initial-res"}.get(value, value)

    @model_validator(mode="after")
    def _check_alpha(self):
        if self.variant == "initial-res" and not (0.0 < self.alpha < 1.0):
            raise ValueError(f"initial residual alpha must lie in (0, 1), got {self.alpha}")
        return self

    @property
    def label(self) -> str:
        if self.variant == "initial-res":
            return f"initial-res({self.alpha:g})"
        if self.variant == "jk":
            return f"jk-{self.jk_agg}"
        if self.variant == "psnr":
            return f"psnr-{self.encoder}"
        return self.variant


class ModelConfig(BaseModel):
    """
    Declarative description of a stacked GNN.

    Attributes:
        backbone: Graph layer used for every hidden layer.
        depth: Number of graph layers K.
        hidden: Width of every hidden layer.
        classes: Number of output classes C.
        residual: Residual connection between layers.
        dropout: Dropout probability on backbone layer inputs.
        seed: Seed of the parameter initialization.
        activation: Nonlinearity after every graph layer.
    """

    model_config = ConfigDict(frozen=True)

    backbone: Literal["gcn", "gat"] = "gcn"
    depth: int = Field(2, ge=1)
    hidden: int = Field(128, ge=1)
    classes: int = Field(ge=1)
    residual: ResidualKind = ResidualKind()
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    seed: int = 0
    activation: Literal["relu", "elu"] = "relu"

    @model_validator(mode="after")
    def _check_psnr_width(self):
        if self.residual.variant == "psnr" and self.hidden % 2:
            raise ValueError(f"posterior-sampled residual needs an even hidden width, got {self.hidden}")
        return self


class Linear:
    """Classifier head with standard-normal weights and zero bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "classifier"):
        self.weight = Tensor.parameter(rng.standard_normal((in_dim, out_dim)), name=f"{name}.weight")
        self.bias = Tensor.parameter(np.zeros((1, out_dim)), name=f"{name}.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, h: Tensor) -> Tensor:
        return row_broadcast_add(matmul(h, self.weight), self.bias)


@dataclass
class ForwardPass:
    """Logits plus the per-layer representations H_1..H_K and PSNR traces."""

    logits: Tensor
    hidden: list[Tensor]
    traces: list[PsnrLayerTrace] = field(default_factory=list)


class Model:
    """
    A depth-K GNN over one fixed graph.

    Layer 1 maps features to the hidden width; layers 2..K combine through the
    configured residual connection; a linear classifier maps the final
    representation (or the JK aggregate) to class logits. A posterior-sampled
    residual model owns one encoder and one γ shared by all layers.
    """

    def __init__(self, config: ModelConfig, ctx: GraphContext, feat_dim: int):
        self.config = config
        self.ctx = ctx
        self.feat_dim = feat_dim
        self.activation = ACTIVATIONS[config.activation]
        rng = substream(config.seed, "init")
        variant = config.residual.variant
        hidden = config.hidden

        self.convs: list[Conv] = []
        for k in range(1, config.depth + 1):
            if k == 1:
                in_dim = feat_dim
            elif variant == "dense":
                in_dim = (k - 1) * hidden
            else:
                in_dim = hidden
            self.convs.append(make_conv(config.backbone, in_dim, hidden, rng, f"conv{k}"))

        head_in = hidden
        if variant == "jk" and config.residual.jk_agg == "concat":
            head_in = config.depth * hidden
        self.classifier = Linear(head_in, config.classes, rng)

        self.encoder: PosteriorEncoder | None = None
        self.gamma: Tensor | None = None
        if variant == "psnr":
            self.encoder = PosteriorEncoder(config.residual.encoder, hidden, rng)
            self.gamma = Tensor.parameter(np.ones((1, 1)), name="gamma")

    @property
    def is_psnr(self) -> bool:
        return self.encoder is not None

    def conv_input_widths(self) -> list[int]:
        return [conv.in_dim for conv in self.convs]

    def encoder_parameters(self) -> dict[str, Tensor]:
        if not self.is_psnr:
            return {}
        return {**self.encoder.parameters(), self.gamma.name: self.gamma}

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for conv in self.convs:
            params.update(conv.parameters())
        params.update(self.encoder_parameters())
        params.update(self.classifier.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.parameters().values())

    def encoder_parameter_count(self) -> int:
        return sum(p.values.size for p in self.encoder_parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.parameters().items()}

    def restore(self, snapshot: dict[str, np.ndarray]):
        for name, param in self.parameters().items():
            param.values[...] = snapshot[name]

    def forward(
        self,
        features: Tensor,
        train: bool = False,
        noise: NoiseSource | None = None,
        dropout_rng: np.random.Generator | None = None,
    ) -> ForwardPass:
        """
        Run the model on the full graph.

        Args:
            features: n×feat_dim input features.
            train: Enables dropout.
            noise: Coefficient noise, required by posterior-sampled residual models.
            dropout_rng: Generator for dropout masks, required when training with dropout.

        Returns:
            The forward pass.
        """
        config = self.config
        variant = config.residual.variant
        if self.is_psnr and noise is None:
            raise ContractError("posterior-sampled residual models need a noise source")
        if train and config.dropout > 0.0 and dropout_rng is None:
            raise ContractError("training with dropout needs a dropout generator")

        def drop(x: Tensor) -> Tensor:
            return dropout(x, config.dropout, train, dropout_rng)

        h1 = self.convs[0](drop(features), self.ctx, self.activation)
        hidden = [h1]
        traces: list[PsnrLayerTrace] = []
        state = ResidualState(initial=h1, previous=h1, history=[h1])
        layer_input = h1

        for k in range(2, config.depth + 1):
            conv = self.convs[k - 1]
            if self.is_psnr:
                h_k, trace = psnr_step(
                    h1,
                    hidden[-1],
                    k,
                    lambda x, conv=conv: conv(drop(x), self.ctx, self.activation),
                    lambda x: self.encoder(x, self.ctx),
                    self.gamma,
                    noise,
                )
                traces.append(trace)
                layer_input = h_k
            else:
                h_conv = conv(drop(layer_input), self.ctx, self.activation)
                combined = residual_step(variant, state, h_conv, config.residual.alpha)
                h_k = h_conv if variant == "dense" else combined
                layer_input = combined
            hidden.append(h_k)
            state.previous = h_k
            state.history.append(h_k)

        if variant == "jk":
            final = jk_aggregate(hidden, config.residual.jk_agg)
        else:
            final = hidden[-1]
        return ForwardPass(logits=self.classifier(final), hidden=hidden, traces=traces)


def build_model(config: ModelConfig, graph: Graph, feat_dim: int) -> Model:
    """
    Validate `config` and initialize a model for `graph`.

    Graph layers use Xavier-uniform weights, the classifier standard-normal
    weights, all from the `init` sub-stream of `config.seed`.

    Raises:
        ConfigError: If a config field is invalid or feat_dim < 1.
    """
    try:
        config = ModelConfig.model_validate(config.model_dump())
    except ValidationError as e:
        raise ConfigError(f"invalid model config: {e}") from e
    if feat_dim < 1:
        raise ConfigError(f"feature width must be positive, got {feat_dim}")
    model = Model(config, GraphContext.from_graph(graph), feat_dim)
    logger.debug(
        "built %s/%s depth=%d with %d parameters",
        config.backbone,
        config.residual.label,
        config.depth,
        model.parameter_count(),
    )
    return model

"""
Splits, training, depth sweeps and residual-coefficient logging.

Everything here is deterministic for fixed seeds: the split, the initialization,
the dropout masks and the coefficient noise all come from separate named
sub-streams of the seed (see `psnr_lab.utils.substream`).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.stats import spearmanr

from psnr_lab.errors import ConfigError, ContractError, LabError, MalformedInputError, NumericError, SplitError
from psnr_lab.graph import LabeledDataset
from psnr_lab.layers import NoiseSource
from psnr_lab.model import Model, ModelConfig, ResidualKind, build_model
from psnr_lab.optim import Adam
from psnr_lab.progress import ProgressReporter
from psnr_lab.smoothness import SmoothnessReport, classification_accuracy, layer_smoothness
from psnr_lab.tensor import Tensor, backward, cross_entropy
from psnr_lab.utils import parse_float_list, parse_int_list, substream

logger = logging.getLogger(__name__)

SWEEP_HEADER = (
    "kind",
    "backbone",
    "depth",
    "seed",
    "lr",
    "best_epoch",
    "val_accuracy",
    "test_accuracy",
    "final_smv",
    "error",
)
AGGREGATE_HEADER = ("kind", "backbone", "depth", "runs", "mean_accuracy", "std_accuracy", "mean_smv")
EPOCH_HEADER = ("lr", "epoch", "train_loss", "val_accuracy")
SUMMARY_HEADER = ("lr", "epochs_run", "best_epoch", "val_accuracy", "test_accuracy", "final_smv")
LAYER_SMV_HEADER = ("layer", "smv")
COEFFICIENT_HEADER = ("layer", "group", "size", "mean_mu", "std_mu", "mean_sigma", "std_sigma")


class SplitPolicy(BaseModel):
    """
    How nodes are divided into train/validation/test.

    `per-class` takes `sizes` as node counts drawn from every class;
    `fractional` takes them as fractions of all nodes.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["per-class", "fractional"] = "per-class"
    sizes: tuple[float, float, float] = (20, 30, 100)
    missing_features: bool = False

    @model_validator(mode="after")
    def _check_sizes(self):
        train, val, test = self.sizes
        if min(self.sizes) < 0 or train <= 0:
            raise ValueError(f"split sizes must be non-negative with a nonempty train part, got {self.sizes}")
        if self.kind == "per-class" and any(float(s) != int(s) for s in self.sizes):
            raise ValueError(f"per-class split sizes must be integers, got {self.sizes}")
        if self.kind == "fractional" and train + val + test > 1.0 + 1e-9:
            raise ValueError(f"split fractions sum to more than 1: {self.sizes}")
        return self

    @classmethod
    def parse(cls, text: str, missing_features: bool = False) -> "SplitPolicy":
        """Parse "per-class:20,30,100" or "fractional:0.6,0.2,0.2"."""
        kind, _, values = text.partition(":")
        sizes = parse_float_list(values)
        if len(sizes) != 3:
            raise ConfigError(f"split policy needs three sizes, got {text!r}")
        try:
            return cls(kind=kind.strip(), sizes=tuple(sizes), missing_features=missing_features)
        except ValidationError as e:
            raise ConfigError(f"invalid split policy {text!r}: {e}") from e


@dataclass(frozen=True, eq=False)
class Split:
    """Disjoint boolean train/val/test masks."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    policy: SplitPolicy

    @property
    def missing_features(self) -> bool:
        return self.policy.missing_features

    @property
    def train_index(self) -> np.ndarray:
        return np.flatnonzero(self.train)


def make_split(labels: np.ndarray, policy: SplitPolicy, seed: int) -> Split:
    """
    Draw a split of the nodes.

    Args:
        labels: Per-node class labels.
        policy: Split policy.
        seed: Seed of the `split` sub-stream.

    Raises:
        SplitError: If a class has too few nodes for a per-class split, or the
            train part would be empty.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    rng = substream(seed, "split")
    train, val, test = (np.zeros(n, dtype=bool) for _ in range(3))

    if policy.kind == "per-class":
        n_train, n_val, n_test = (int(s) for s in policy.sizes)
        for label in np.unique(labels):
            members = rng.permutation(np.flatnonzero(labels == label))
            if members.size < n_train + n_val + n_test:
                raise SplitError(
                    f"has {members.size} nodes, needs {n_train + n_val + n_test}",
                    label=int(label),
                )
            train[members[:n_train]] = True
            val[members[n_train : n_train + n_val]] = True
            test[members[n_train + n_val : n_train + n_val + n_test]] = True
    else:
        order = rng.permutation(n)
        n_train, n_val, n_test = (int(round(f * n)) for f in policy.sizes)
        n_val = min(n_val, n - n_train)
        n_test = min(n_test, n - n_train - n_val)
        train[order[:n_train]] = True
        val[order[n_train : n_train + n_val]] = True
        test[order[n_train + n_val : n_train + n_val + n_test]] = True

    if not train.any():
        raise SplitError("train part is empty")
    return Split(train=train, val=val, test=test, policy=policy)


def apply_missing_features(features: np.ndarray, split: Split) -> np.ndarray:
    """Copy of `features` with the rows of validation and test nodes set to zero."""
    if not split.missing_features:
        raise ContractError("split is not marked for missing features")
    out = np.array(features, dtype=np.float64, copy=True)
    out[split.val | split.test] = 0.0
    return out


class Hyper(BaseModel):
    """
    Training hyperparameters.

    Attributes:
        lrs: Learning-rate grid; the run with the best validation accuracy wins.
        dropout: Dropout on backbone layer inputs.
        weight_decay: Decoupled weight decay of Adam.
        hidden: Hidden width used when the harness builds model configs.
        max_epochs: Upper bound on training epochs.
        patience: Epochs without validation improvement before stopping.
        eval_draws: Coefficient-noise draws averaged at evaluation.
    """

    model_config = ConfigDict(frozen=True)

    lrs: tuple[float, ...] = (0.01, 0.001)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    hidden: int = Field(128, ge=1)
    max_epochs: int = Field(500, ge=1)
    patience: int = Field(100, ge=1)
    eval_draws: int = Field(5, ge=1)

    @field_validator("lrs")
    @classmethod
    def _check_lrs(cls, lrs):
        if not lrs or any(lr <= 0 for lr in lrs):
            raise ValueError(f"learning rates must be positive and non-empty, got {lrs}")
        return lrs

    @model_validator(mode="after")
    def _check_patience(self):
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        return self

    @classmethod
    def defaults(cls, backbone: Literal["gcn", "gat"] = "gcn", missing_features: bool = False) -> "Hyper":
        """Default hyperparameters per backbone and feature setting."""
        hidden = 128 if backbone == "gcn" else (32 if missing_features else 64)
        if missing_features:
            return cls(hidden=hidden, max_epochs=1000, patience=1000)
        return cls(hidden=hidden)


@dataclass
class CoefficientRow:
    layer: int
    group: int
    size: int
    mean_mu: float
    std_mu: float
    mean_sigma: float
    std_sigma: float

    def as_tuple(self) -> tuple:
        return (self.layer, self.group, self.size, self.mean_mu, self.std_mu, self.mean_sigma, self.std_sigma)


@dataclass
class TrainReport:
    """
    Outcome of one training job (the run of the selected learning rate).

    Attributes:
        lr: Selected learning rate.
        losses: Train loss per epoch.
        val_accuracies: Validation accuracy per epoch.
        best_epoch: 1-based epoch whose parameters were kept.
        val_accuracy: Validation accuracy at `best_epoch`.
        test_accuracy: Test accuracy of the kept parameters.
        smoothness: SMV of every layer of the kept model.
        coefficients: Per-layer, per-degree-group posterior statistics
            (posterior-sampled residual models only).
        candidates: lr → best validation accuracy for every lr tried.
        model: The trained model with the kept parameters.
    """

    lr: float
    losses: list[float]
    val_accuracies: list[float]
    best_epoch: int
    val_accuracy: float
    test_accuracy: float
    smoothness: SmoothnessReport
    coefficients: list[CoefficientRow] | None = None
    candidates: dict[float, float] = field(default_factory=dict)
    model: Model | None = field(default=None, repr=False, compare=False)

    @property
    def epochs_run(self) -> int:
        return len(self.losses)

    def epoch_rows(self) -> list[tuple]:
        return [
            (self.lr, epoch, loss, acc)
            for epoch, (loss, acc) in enumerate(zip(self.losses, self.val_accuracies), start=1)
        ]

    def summary_row(self) -> tuple:
        return (
            self.lr,
            self.epochs_run,
            self.best_epoch,
            self.val_accuracy,
            self.test_accuracy,
            self.smoothness.final(),
        )

    def layer_rows(self) -> list[tuple]:
        return [(layer, self.smoothness.overall[layer]) for layer in self.smoothness.layers]


def eval_noises(seed: int, draws: int) -> list[NoiseSource]:
    """Fresh evaluation noise sources; the same seed always gives the same draws."""
    return [NoiseSource(substream(seed, f"eval-{i}")) for i in range(draws)]


def evaluate(model: Model, features: Tensor, labels: np.ndarray, mask: np.ndarray, seed: int, draws: int) -> float:
    """Accuracy on `mask`, averaged over `draws` noise draws for posterior-sampled residual models."""
    if not model.is_psnr:
        return classification_accuracy(model.forward(features).logits.values, labels, mask)
    accuracies = [
        classification_accuracy(model.forward(features, noise=noise).logits.values, labels, mask)
        for noise in eval_noises(seed, draws)
    ]
    return float(np.mean(accuracies))


@dataclass
class _Run:
    lr: float
    model: Model
    losses: list[float]
    val_accuracies: list[float]
    best_epoch: int
    best_val: float


def _fit(
    config: ModelConfig,
    dataset: LabeledDataset,
    features: Tensor,
    split: Split,
    hyper: Hyper,
    lr: float,
    seed: int,
    progress: ProgressReporter,
) -> _Run:
    model = build_model(config, dataset.graph, dataset.feat_dim)
    optimizer = Adam(model.parameters(), lr=lr, weight_decay=hyper.weight_decay)
    noise = NoiseSource(substream(seed, "noise"))
    dropout_rng = substream(seed, "dropout")
    train_index = split.train_index
    eval_mask = split.val if split.val.any() else split.train

    losses, val_accuracies = [], []
    best_epoch, best_val, best_state = 0, -1.0, model.snapshot()
    for epoch in range(1, hyper.max_epochs + 1):
        optimizer.zero_grad()
        try:
            output = model.forward(features, train=True, noise=noise, dropout_rng=dropout_rng)
            loss = cross_entropy(output.logits, dataset.labels, train_index)
            backward(loss)
            optimizer.step()
            val_accuracy = evaluate(model, features, dataset.labels, eval_mask, seed, hyper.eval_draws)
        except NumericError as e:
            raise NumericError(f"training diverged (lr={lr}): {e}", layer=e.layer, epoch=epoch) from e

        losses.append(loss.item())
        val_accuracies.append(val_accuracy)
        if val_accuracy > best_val:
            best_epoch, best_val, best_state = epoch, val_accuracy, model.snapshot()
        progress.update(epoch, hyper.max_epochs, f"lr={lr} epoch {epoch} loss={loss.item():.4f}")
        if epoch - best_epoch >= hyper.patience:
            logger.info("early stop at epoch %d (best epoch %d, lr=%g)", epoch, best_epoch, lr)
            break

    model.restore(best_state)
    return _Run(lr, model, losses, val_accuracies, best_epoch, best_val)


def train(
    config: ModelConfig,
    dataset: LabeledDataset,
    split: Split,
    hyper: Hyper,
    seed: int,
    progress: ProgressReporter | None = None,
) -> TrainReport:
    """
    Full-batch training with early stopping over the learning-rate grid.

    Each lr starts from the same initialization (`config` with `seed`). The lr
    with the best validation accuracy is kept, ties going to the lower lr.
    Posterior-sampled residual models are evaluated by averaging accuracy over
    `hyper.eval_draws` seeded noise draws. Dropout comes from `hyper`, not from
    `config`.

    Raises:
        NumericError: If a forward or backward pass diverges; carries the epoch.
    """
    config = config.model_copy(update={"seed": seed, "dropout": hyper.dropout})
    progress = progress or ProgressReporter()
    features = dataset.features
    if split.missing_features:
        features = apply_missing_features(features, split)
    inputs = Tensor(features)

    runs = [_fit(config, dataset, inputs, split, hyper, lr, seed, progress) for lr in hyper.lrs]
    best = min(runs, key=lambda run: (-run.best_val, run.lr))

    model = best.model
    test_mask = split.test if split.test.any() else split.train
    test_accuracy = evaluate(model, inputs, dataset.labels, test_mask, seed, hyper.eval_draws)
    noise = eval_noises(seed, 1)[0] if model.is_psnr else None
    output = model.forward(inputs, noise=noise)
    smoothness = layer_smoothness([h.values for h in output.hidden])
    coefficients = coefficient_table(output.traces, dataset) if model.is_psnr else None

    return TrainReport(
        lr=best.lr,
        losses=best.losses,
        val_accuracies=best.val_accuracies,
        best_epoch=best.best_epoch,
        val_accuracy=best.best_val,
        test_accuracy=test_accuracy,
        smoothness=smoothness,
        coefficients=coefficients,
        candidates={run.lr: run.best_val for run in runs},
        model=model,
    )


def _sweep_cell(
    base: ModelConfig,
    kind: ResidualKind,
    depth: int,
    seed: int,
    dataset: LabeledDataset,
    policy: SplitPolicy,
    hyper: Hyper,
) -> tuple:
    try:
        config = base.model_copy(update={"residual": kind, "depth": depth})
        report = train(config, dataset, make_split(dataset.labels, policy, seed), hyper, seed)
    except LabError as e:
        logger.warning("sweep cell %s depth=%d seed=%d failed: %s", kind.label, depth, seed, e)
        nan = float("nan")
        return (kind.label, base.backbone, depth, seed, nan, 0, nan, nan, nan, str(e))
    return (
        kind.label,
        base.backbone,
        depth,
        seed,
        report.lr,
        report.best_epoch,
        report.val_accuracy,
        report.test_accuracy,
        report.smoothness.final(),
        "",
    )


def depth_sweep(
    base: ModelConfig,
    depths: Sequence[int],
    seeds: Sequence[int],
    dataset: LabeledDataset,
    policy: SplitPolicy,
    hyper: Hyper,
    kinds: Sequence[ResidualKind] | None = None,
    workers: int = 1,
    progress: ProgressReporter | None = None,
) -> list[tuple]:
    """
    Train every (residual kind, depth, seed) cell.

    Seed s draws split s and initializes from s. Cells may run on `workers`
    threads; rows always come back in (kind, depth, seed) order. A failing
    cell yields a row with NaN metrics and the error text instead of aborting
    the sweep.

    Returns:
        Rows matching `SWEEP_HEADER`.
    """
    kinds = list(kinds) if kinds else [base.residual]
    cells = [(kind, depth, seed) for kind in kinds for depth in depths for seed in seeds]
    progress = progress or ProgressReporter()
    progress.start(len(cells))

    def run(cell):
        kind, depth, seed = cell
        row = _sweep_cell(base, kind, depth, seed, dataset, policy, hyper)
        progress.advance(f"{kind.label} depth={depth} seed={seed}")
        return row

    if workers <= 1:
        return [run(cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, cells))


def aggregate_sweep(rows: Sequence[tuple]) -> list[tuple]:
    """Mean and (population) std of test accuracy per (kind, backbone, depth), skipping failed cells."""
    grouped: dict[tuple, list[tuple[float, float]]] = {}
    for kind, backbone, depth, _seed, _lr, _epoch, _val, test, smv_value, error in rows:
        if error:
            continue
        grouped.setdefault((kind, backbone, depth), []).append((test, smv_value))
    out = []
    for (kind, backbone, depth), values in grouped.items():
        accuracies = np.array([v[0] for v in values])
        smvs = np.array([v[1] for v in values], dtype=np.float64)
        out.append(
            (
                kind,
                backbone,
                depth,
                len(values),
                float(accuracies.mean()),
                float(accuracies.std()),
                float(np.nanmean(smvs)) if np.isfinite(smvs).any() else float("nan"),
            )
        )
    return out


def degree_quartiles(degree: np.ndarray) -> np.ndarray:
    """
    Split nodes into (up to) four groups of similar size by degree.

    Quartile boundaries that coincide collapse their groups, so a regular
    graph yields a single group 0.
    """
    degree = np.asarray(degree, dtype=np.float64)
    boundaries = np.quantile(degree, [0.25, 0.5, 0.75])
    raw = np.searchsorted(boundaries, degree, side="right")
    _, groups = np.unique(raw, return_inverse=True)
    return groups.astype(np.int64)


def coefficient_table(traces, dataset: LabeledDataset) -> list[CoefficientRow]:
    groups = degree_quartiles(dataset.graph.degree)
    rows = []
    for trace in traces:
        for group in np.unique(groups):
            members = groups == group
            rows.append(
                CoefficientRow(
                    layer=trace.layer,
                    group=int(group),
                    size=int(members.sum()),
                    mean_mu=float(trace.mu[members].mean()),
                    std_mu=float(trace.mu[members].std()),
                    mean_sigma=float(trace.sigma[members].mean()),
                    std_sigma=float(trace.sigma[members].std()),
                )
            )
    return rows


def log_coefficients(model: Model, dataset: LabeledDataset, seed: int = 0) -> list[CoefficientRow]:
    """
    Posterior statistics of the residual coefficient per layer and degree quartile.

    Runs one evaluation forward pass with the first evaluation noise draw.

    Raises:
        ContractError: If the model has no posterior-sampled residual.
    """
    if not model.is_psnr:
        raise ContractError("coefficient logging needs a posterior-sampled residual model")
    output = model.forward(Tensor(dataset.features), noise=eval_noises(seed, 1)[0])
    return coefficient_table(output.traces, dataset)


def coefficient_trend(table: Sequence[CoefficientRow]) -> float:
    """Spearman correlation between layer index and the size-weighted mean μ of that layer."""
    layers = sorted({row.layer for row in table})
    if len(layers) < 2:
        return float("nan")
    means = []
    for layer in layers:
        rows = [row for row in table if row.layer == layer]
        sizes = np.array([row.size for row in rows], dtype=np.float64)
        means.append(float(np.dot(sizes, [row.mean_mu for row in rows]) / sizes.sum()))
    if np.ptp(means) == 0.0:
        return float("nan")
    return float(spearmanr(layers, means).statistic)


class ExperimentConfig(BaseModel):
    """An experiment as read from a config file (CLI flags may override fields)."""

    backbone: Literal["gcn", "gat"] = "gcn"
    residual: ResidualKind = ResidualKind()
    depths: list[int] = [2, 4, 8, 16, 32, 64]
    seeds: list[int] = [0]
    dataset: str | None = None
    split: SplitPolicy = SplitPolicy()
    hyper: Hyper = Hyper()

    @field_validator("depths")
    @classmethod
    def _check_depths(cls, depths):
        if not depths or min(depths) < 1:
            raise ValueError(f"depths must be positive and non-empty, got {depths}")
        return depths


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """
    Read a flat `key=value` experiment file.

    Blank lines and lines starting with `#` are ignored. Keys: backbone,
    residual, alpha, encoder, jk, depths, seeds, dataset, split.policy,
    split.missing and hyper.<field>.

    Raises:
        MalformedInputError: For a line without `=`.
        ConfigError: For an unknown key or an invalid value.
    """
    path = Path(path)
    top: dict = {}
    residual: dict = {}
    hyper: dict = {}
    policy_text, missing = None, False
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise MalformedInputError(f"cannot read experiment config: {e}", str(path)) from e
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedInputError("expected key=value", str(path), line_no)
        key, value = key.strip(), value.strip()
        if key == "backbone":
            top["backbone"] = value
        elif key == "residual":
            residual["variant"] = value
        elif key == "alpha":
            residual["alpha"] = value
        elif key == "encoder":
            residual["encoder"] = value
        elif key == "jk":
            residual["jk_agg"] = value
        elif key == "depths":
            top["depths"] = parse_int_list(value)
        elif key == "seeds":
            top["seeds"] = parse_int_list(value)
        elif key == "dataset":
            top["dataset"] = value
        elif key == "split.policy":
            policy_text = value
        elif key == "split.missing":
            missing = value.lower() in ("1", "true", "yes")
        elif key.startswith("hyper.") and key[len("hyper.") :] in Hyper.model_fields:
            name = key[len("hyper.") :]
            hyper[name] = parse_float_list(value) if name == "lrs" else value
        else:
            raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")

    try:
        split = SplitPolicy.parse(policy_text, missing) if policy_text else SplitPolicy(missing_features=missing)
        return ExperimentConfig(**top, residual=ResidualKind(**residual), split=split, hyper=Hyper(**hyper))
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid experiment config: {e}") from e

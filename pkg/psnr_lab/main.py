import logging
from pathlib import Path
from typing import NoReturn, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler

from psnr_lab.errors import ConfigError, LabError
from psnr_lab.graph import LabeledDataset, gen_ring, gen_sbm, load_dataset_dir, write_dataset
from psnr_lab.harness import (
    AGGREGATE_HEADER,
    COEFFICIENT_HEADER,
    EPOCH_HEADER,
    LAYER_SMV_HEADER,
    SUMMARY_HEADER,
    SWEEP_HEADER,
    ExperimentConfig,
    Hyper,
    SplitPolicy,
    aggregate_sweep,
    coefficient_trend,
    depth_sweep,
    load_experiment_config,
    log_coefficients,
    make_split,
    train,
)
from psnr_lab.model import ModelConfig, ResidualKind
from psnr_lab.oracles import VERIFY_HEADER, run_verification
from psnr_lab.progress import ProgressReporter
from psnr_lab.smoothness import CONVERGE_HEADER, SMOOTH_HEADER, degree_smoothness_study, prop1_experiment
from psnr_lab.utils import parse_int_list, write_csv

logger = logging.getLogger(__name__)

DEFAULT_SBM = "2x200"
DEFAULT_P_IN = 0.05
DEFAULT_P_OUT = 0.005

cli = typer.Typer(help="PSNR over-smoothing laboratory", add_completion=False)


@cli.callback(invoke_without_command=True)
def main(
    ctx: typer.Context,
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug messages"),
):
    """
    Experiments on deep GNN residual connections. Every subcommand writes CSV
    files into --out.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )
    if ctx.invoked_subcommand is None:
        typer.echo(ctx.get_help(), err=True)
        raise typer.Exit(code=2)


def _fail(error: LabError) -> NoReturn:
    typer.echo(f"error: {error}", err=True)
    raise typer.Exit(code=1)


def _parse_sbm(text: str) -> tuple[int, int]:
    blocks, sep, per_block = text.lower().partition("x")
    if not sep:
        raise ConfigError(f"--sbm expects BLOCKSxSIZE, got {text!r}")
    try:
        return int(blocks), int(per_block)
    except ValueError as e:
        raise ConfigError(f"--sbm expects BLOCKSxSIZE, got {text!r}") from e


def _dataset(
    dataset: Optional[str],
    sbm: Optional[str],
    p_in: float,
    p_out: float,
    seed: int,
    feat_dim: int = 16,
    feat_shift: float = 1.0,
) -> LabeledDataset:
    if dataset:
        return load_dataset_dir(dataset)
    blocks, per_block = _parse_sbm(sbm or DEFAULT_SBM)
    return gen_sbm(blocks, per_block, p_in, p_out, feat_dim, feat_shift, seed)


def _experiment(
    config_path: Optional[Path],
    *,
    backbone: Optional[str],
    residual: Optional[str],
    alpha: Optional[float],
    encoder: Optional[str],
    jk: Optional[str],
    depths: Optional[str],
    seeds: Optional[str],
    dataset: Optional[str],
    split: Optional[str],
    missing: bool,
    eval_draws: Optional[int],
    max_epochs: Optional[int],
    patience: Optional[int],
) -> ExperimentConfig:
    """Experiment config from an optional file, with command-line flags taking precedence."""
    base = load_experiment_config(config_path) if config_path else ExperimentConfig()
    backbone = backbone or base.backbone
    missing = missing or base.split.missing_features

    residual_fields = base.residual.model_dump()
    for key, value in (("variant", residual), ("alpha", alpha), ("encoder", encoder), ("jk_agg", jk)):
        if value is not None:
            residual_fields[key] = value

    hyper_fields = base.hyper.model_dump() if config_path else Hyper.defaults(backbone, missing).model_dump()
    for key, value in (("eval_draws", eval_draws), ("max_epochs", max_epochs), ("patience", patience)):
        if value is not None:
            hyper_fields[key] = value
    if max_epochs is not None and patience is None:
        hyper_fields["patience"] = min(hyper_fields["patience"], max_epochs)

    policy = SplitPolicy.parse(split, missing) if split else base.split.model_copy(update={"missing_features": missing})
    try:
        return ExperimentConfig(
            backbone=backbone,
            residual=ResidualKind(**residual_fields),
            depths=parse_int_list(depths) if depths else base.depths,
            seeds=parse_int_list(seeds) if seeds else base.seeds,
            dataset=dataset or base.dataset,
            split=SplitPolicy.model_validate(policy.model_dump()),
            hyper=Hyper(**hyper_fields),
        )
    except ValidationError as e:
        raise ConfigError(f"invalid experiment flags: {e}") from e


def _model_config(experiment: ExperimentConfig, depth: int, classes: int, seed: int) -> ModelConfig:
    try:
        return ModelConfig(
            backbone=experiment.backbone,
            depth=depth,
            hidden=experiment.hyper.hidden,
            classes=classes,
            residual=experiment.residual,
            dropout=experiment.hyper.dropout,
            seed=seed,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid model config: {e}") from e


def _progress() -> ProgressReporter:
    return ProgressReporter(lambda fraction, message: logger.debug("[%3.0f%%] %s", 100 * fraction, message))


BackboneOption = typer.Option(None, "--backbone", help="Backbone layer: gcn or gat")
ResidualOption = typer.Option(None, "--residual", help="none, res, init-res, dense, jk or psnr")
AlphaOption = typer.Option(None, "--alpha", help="Initial-residual weight in (0, 1)")
EncoderOption = typer.Option(None, "--encoder", help="Posterior encoder layer: gcn, gat or sage")
JkOption = typer.Option(None, "--jk", help="Jumping-knowledge aggregation: concat or maxpool")
DatasetOption = typer.Option(None, "--dataset", help="Directory with edges.tsv, features.csv, labels.txt")
SbmOption = typer.Option(None, "--sbm", help="Generate a block model BLOCKSxSIZE instead of loading a dataset")
PInOption = typer.Option(DEFAULT_P_IN, "--p-in", help="Intra-block edge probability")
POutOption = typer.Option(DEFAULT_P_OUT, "--p-out", help="Inter-block edge probability")
SplitOption = typer.Option(None, "--split", help="per-class:TRAIN,VAL,TEST or fractional:TRAIN,VAL,TEST")
MissingOption = typer.Option(False, "--missing", help="Remove features of validation and test nodes")
EvalDrawsOption = typer.Option(None, "--eval-draws", help="Noise draws averaged at evaluation")
MaxEpochsOption = typer.Option(None, "--max-epochs", help="Maximum training epochs")
PatienceOption = typer.Option(None, "--patience", help="Early-stopping patience in epochs")
ConfigOption = typer.Option(None, "--config", help="Experiment config file (key=value lines)")
OutOption = typer.Option(Path("results"), "--out", help="Output directory")
SeedOption = typer.Option(0, "--seed", help="Seed of every random sub-stream")


@cli.command()
def verify(
    n: int = typer.Option(8, "--n", help="Nodes per random instance"),
    k: int = typer.Option(6, "--k", help="Order of the dynamics"),
    instances: int = typer.Option(50, "--instances", help="Number of random instances"),
    seed: int = SeedOption,
    out: Path = OutOption,
):
    """
    Check the closed forms against their recursions and run the invertibility lemmas.
    """
    try:
        rows = run_verification(n, k, instances, seed)
    except LabError as e:
        _fail(e)
    write_csv(out / "verify.csv", VERIFY_HEADER, rows)
    failed = [row for row in rows if not row[-1]]
    typer.echo(f"{len(rows) - len(failed)}/{len(rows)} checks passed, max gap {max(row[4] for row in rows):.3e}")
    if failed:
        raise typer.Exit(code=1)


@cli.command("train")
def train_command(
    depth: int = typer.Option(2, "--depth", help="Number of graph layers"),
    backbone: Optional[str] = BackboneOption,
    residual: Optional[str] = ResidualOption,
    alpha: Optional[float] = AlphaOption,
    encoder: Optional[str] = EncoderOption,
    jk: Optional[str] = JkOption,
    dataset: Optional[str] = DatasetOption,
    sbm: Optional[str] = SbmOption,
    p_in: float = PInOption,
    p_out: float = POutOption,
    split: Optional[str] = SplitOption,
    missing: bool = MissingOption,
    eval_draws: Optional[int] = EvalDrawsOption,
    max_epochs: Optional[int] = MaxEpochsOption,
    patience: Optional[int] = PatienceOption,
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Path = OutOption,
):
    """
    Train one model and write its epoch log, summary and per-layer SMV.
    """
    try:
        experiment = _experiment(
            config,
            backbone=backbone,
            residual=residual,
            alpha=alpha,
            encoder=encoder,
            jk=jk,
            depths=None,
            seeds=None,
            dataset=dataset,
            split=split,
            missing=missing,
            eval_draws=eval_draws,
            max_epochs=max_epochs,
            patience=patience,
        )
        data = _dataset(experiment.dataset, sbm, p_in, p_out, seed)
        model_config = _model_config(experiment, depth, data.num_classes, seed)
        split_masks = make_split(data.labels, experiment.split, seed)
        report = train(model_config, data, split_masks, experiment.hyper, seed, _progress())
    except LabError as e:
        _fail(e)

    write_csv(out / "train_epochs.csv", EPOCH_HEADER, report.epoch_rows())
    write_csv(out / "train_summary.csv", SUMMARY_HEADER, [report.summary_row()])
    write_csv(out / "train_layers.csv", LAYER_SMV_HEADER, report.layer_rows())
    if report.coefficients is not None:
        write_csv(out / "coefficients.csv", COEFFICIENT_HEADER, [row.as_tuple() for row in report.coefficients])
    typer.echo(
        f"{experiment.residual.label} depth={depth}: test accuracy {report.test_accuracy:.4f} "
        f"(lr={report.lr:g}, best epoch {report.best_epoch})"
    )


@cli.command()
def sweep(
    depths: Optional[str] = typer.Option(None, "--depths", help="Comma-separated depths"),
    seeds: Optional[str] = typer.Option(None, "--seeds", help="Comma-separated seeds"),
    workers: int = typer.Option(1, "--workers", help="Parallel training threads"),
    backbone: Optional[str] = BackboneOption,
    residual: Optional[str] = ResidualOption,
    alpha: Optional[float] = AlphaOption,
    encoder: Optional[str] = EncoderOption,
    jk: Optional[str] = JkOption,
    dataset: Optional[str] = DatasetOption,
    sbm: Optional[str] = SbmOption,
    p_in: float = PInOption,
    p_out: float = POutOption,
    split: Optional[str] = SplitOption,
    missing: bool = MissingOption,
    eval_draws: Optional[int] = EvalDrawsOption,
    max_epochs: Optional[int] = MaxEpochsOption,
    patience: Optional[int] = PatienceOption,
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Path = OutOption,
):
    """
    Train over a grid of depths and seeds; write per-run rows and their aggregate.
    """
    try:
        experiment = _experiment(
            config,
            backbone=backbone,
            residual=residual,
            alpha=alpha,
            encoder=encoder,
            jk=jk,
            depths=depths,
            seeds=seeds,
            dataset=dataset,
            split=split,
            missing=missing,
            eval_draws=eval_draws,
            max_epochs=max_epochs,
            patience=patience,
        )
        data = _dataset(experiment.dataset, sbm, p_in, p_out, seed)
        base = _model_config(experiment, experiment.depths[0], data.num_classes, seed)
        rows = depth_sweep(
            base,
            experiment.depths,
            experiment.seeds,
            data,
            experiment.split,
            experiment.hyper,
            workers=workers,
            progress=_progress(),
        )
    except LabError as e:
        _fail(e)

    write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    write_csv(out / "sweep_summary.csv", AGGREGATE_HEADER, aggregate_sweep(rows))
    failed = sum(1 for row in rows if row[-1])
    typer.echo(f"{len(rows) - failed}/{len(rows)} runs completed")


@cli.command()
def smooth(
    layers_grid: str = typer.Option("1,2,4,8,16,32", "--layers-grid", help="Comma-separated depths"),
    backbone: str = typer.Option("gcn", "--backbone", help="Backbone layer: gcn or gat"),
    dataset: Optional[str] = DatasetOption,
    sbm: Optional[str] = SbmOption,
    p_in: float = PInOption,
    p_out: float = POutOption,
    seed: int = SeedOption,
    out: Path = OutOption,
):
    """
    SMV of untrained models per degree group over a grid of depths.
    """
    try:
        data = _dataset(dataset, sbm, p_in, p_out, seed)
        rows = degree_smoothness_study(data, parse_int_list(layers_grid), backbone, seed)
    except LabError as e:
        _fail(e)
    write_csv(out / "smooth.csv", SMOOTH_HEADER, rows)
    typer.echo(f"wrote {len(rows)} rows")


@cli.command()
def converge(
    k_max: int = typer.Option(30, "--k-max", help="Number of multiplication steps"),
    eps_low: float = typer.Option(0.5, "--eps-low", help="Lower bound of the random diagonal entries"),
    seeds: str = typer.Option(",".join(str(s) for s in range(20)), "--seeds", help="Comma-separated seeds"),
    ring: int = typer.Option(10, "--ring", help="Cycle size used when no dataset is given"),
    dataset: Optional[str] = DatasetOption,
    out: Path = OutOption,
):
    """
    Oscillation of products of random row-stochastic operators versus powers of the
    random-walk operator. Fails if a row-stochastic trace ever increases.
    """
    try:
        graph = load_dataset_dir(dataset).graph if dataset else gen_ring(ring)
        results = prop1_experiment(graph, k_max, eps_low, parse_int_list(seeds))
    except LabError as e:
        _fail(e)

    write_csv(out / "converge.csv", CONVERGE_HEADER, [row for result in results for row in result.rows()])
    increasing = [
        (result.seed, family)
        for result in results
        for family in ("product", "power")
        if (result.traces[family][1:] > result.traces[family][:-1] + 1e-12).any()
    ]
    slower = sum(result.geometric_mean("product") >= result.geometric_mean("power") - 0.02 for result in results)
    typer.echo(f"product family at least as slow in {slower}/{len(results)} seeds")
    if increasing:
        typer.echo(f"oscillation increased for {increasing}", err=True)
        raise typer.Exit(code=1)


@cli.command()
def coeffs(
    depth: int = typer.Option(8, "--depth", help="Number of graph layers"),
    backbone: Optional[str] = BackboneOption,
    encoder: Optional[str] = EncoderOption,
    dataset: Optional[str] = DatasetOption,
    sbm: Optional[str] = SbmOption,
    p_in: float = PInOption,
    p_out: float = POutOption,
    split: Optional[str] = SplitOption,
    eval_draws: Optional[int] = EvalDrawsOption,
    max_epochs: Optional[int] = MaxEpochsOption,
    patience: Optional[int] = PatienceOption,
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Path = OutOption,
):
    """
    Train a posterior-sampled residual model and log its coefficients per layer and degree quartile.
    """
    try:
        experiment = _experiment(
            config,
            backbone=backbone,
            residual="psnr",
            alpha=None,
            encoder=encoder,
            jk=None,
            depths=None,
            seeds=None,
            dataset=dataset,
            split=split,
            missing=False,
            eval_draws=eval_draws,
            max_epochs=max_epochs,
            patience=patience,
        )
        data = _dataset(experiment.dataset, sbm, p_in, p_out, seed)
        model_config = _model_config(experiment, depth, data.num_classes, seed)
        split_masks = make_split(data.labels, experiment.split, seed)
        report = train(model_config, data, split_masks, experiment.hyper, seed, _progress())
        table = log_coefficients(report.model, data, seed)
    except LabError as e:
        _fail(e)
    write_csv(out / "coefficients.csv", COEFFICIENT_HEADER, [row.as_tuple() for row in table])
    typer.echo(f"layer/mean-mu Spearman correlation: {coefficient_trend(table):.4f}")


@cli.command()
def gen(
    sbm: str = typer.Option("2x50", "--sbm", help="BLOCKSxSIZE"),
    p_in: float = typer.Option(0.2, "--p-in", help="Intra-block edge probability"),
    p_out: float = typer.Option(0.02, "--p-out", help="Inter-block edge probability"),
    feat_dim: int = typer.Option(16, "--feat-dim", help="Feature width"),
    feat_shift: float = typer.Option(1.0, "--feat-shift", help="Class mean shift of the features"),
    seed: int = SeedOption,
    out: Path = typer.Option(Path("dataset"), "--out", help="Output directory"),
):
    """
    Write a synthetic block-model dataset in the three-file format.
    """
    try:
        data = _dataset(None, sbm, p_in, p_out, seed, feat_dim, feat_shift)
    except LabError as e:
        _fail(e)
    write_dataset(data, out)
    typer.echo(f"wrote {data.graph.n} nodes, {data.graph.num_edges} edges to {out}")


def dispatch(argv: list[str] | None = None) -> int:
    """
    Run the command line and return its exit code instead of exiting.

    0 on success, 1 when a check fails or the run raises a lab error, 2 on a
    usage error.
    """
    command = typer.main.get_command(cli)
    try:
        command.main(args=argv, prog_name="psnr-lab", standalone_mode=True)
    except SystemExit as e:
        if e.code is None:
            return 0
        return e.code if isinstance(e.code, int) else 1
    return 0


if __name__ == "__main__":
    cli()

"""
Tests for the psnr-lab command line
"""

import pytest
from typer.testing import CliRunner

from psnr_lab.main import cli, dispatch

runner = CliRunner()


def _header(path):
    return path.read_text(encoding="utf-8").split("\n", 1)[0]


def test_no_subcommand_is_a_usage_error():
    """Running without a subcommand prints help and exits with 2"""
    assert dispatch([]) == 2


def test_unknown_flag_is_a_usage_error(tmp_path):
    assert dispatch(["verify", "--bogus", "--out", str(tmp_path)]) == 2
    assert dispatch(["frobnicate"]) == 2


def test_verify_writes_passing_rows(tmp_path):
    assert dispatch(["verify", "--instances", "5", "--n", "6", "--k", "4", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "verify.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "instance,check,n,k,gap,passed"
    assert len(lines) == 1 + 5 * 6
    assert all(line.endswith(",true") for line in lines[1:])


def test_verify_reports_through_runner(tmp_path):
    result = runner.invoke(cli, ["verify", "--instances", "2", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "checks passed" in result.output


def test_gen_then_train_pipeline(tmp_path):
    data = tmp_path / "data"
    out = tmp_path / "out"
    assert dispatch(["gen", "--sbm", "2x30", "--feat-dim", "4", "--seed", "3", "--out", str(data)]) == 0
    assert {p.name for p in data.iterdir()} == {"edges.tsv", "features.csv", "labels.txt"}

    code = dispatch(
        [
            "train",
            "--dataset",
            str(data),
            "--residual",
            "psnr",
            "--depth",
            "3",
            "--split",
            "per-class:5,5,10",
            "--max-epochs",
            "4",
            "--eval-draws",
            "1",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    assert _header(out / "train_epochs.csv") == "lr,epoch,train_loss,val_accuracy"
    assert _header(out / "train_summary.csv") == "lr,epochs_run,best_epoch,val_accuracy,test_accuracy,final_smv"
    assert len((out / "train_layers.csv").read_text().splitlines()) == 1 + 3
    assert _header(out / "coefficients.csv") == "layer,group,size,mean_mu,std_mu,mean_sigma,std_sigma"


def test_train_on_missing_dataset_fails(tmp_path):
    assert dispatch(["train", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 1


def test_train_rejects_bad_residual(tmp_path):
    assert dispatch(["train", "--residual", "highway", "--sbm", "2x20", "--out", str(tmp_path)]) == 1


def test_sweep_writes_rows_and_summary(tmp_path):
    args = [
        "sweep",
        "--sbm",
        "2x20",
        "--p-in",
        "0.3",
        "--p-out",
        "0.02",
        "--depths",
        "1,2",
        "--seeds",
        "0",
        "--split",
        "per-class:4,4,8",
        "--max-epochs",
        "3",
        "--out",
        str(tmp_path),
    ]
    assert dispatch(args) == 0
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 1 + 2
    assert _header(tmp_path / "sweep_summary.csv") == "kind,backbone,depth,runs,mean_accuracy,std_accuracy,mean_smv"


def test_smooth_writes_degree_groups(tmp_path):
    args = ["smooth", "--sbm", "2x20", "--p-in", "0.3", "--layers-grid", "1,2", "--out", str(tmp_path)]
    assert dispatch(args) == 0
    lines = (tmp_path / "smooth.csv").read_text().splitlines()
    assert lines[0] == "layers,backbone,group,size,smv"
    assert sum(1 for line in lines if ",all," in line) == 2


def test_converge_rerun_is_byte_identical(tmp_path):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert dispatch(["converge", "--k-max", "8", "--seeds", "0,1,2", "--out", str(out)]) == 0
        outputs.append((out / "converge.csv").read_bytes())
    assert outputs[0] == outputs[1]
    assert outputs[0].startswith(b"experiment,seed,k,family,oscillation,contraction\n")
    assert b"\r" not in outputs[0]


def test_converge_rejects_disconnected_graph(tmp_path):
    data = tmp_path / "data"
    assert dispatch(["gen", "--sbm", "2x10", "--p-in", "1.0", "--p-out", "0.0", "--out", str(data)]) == 0
    assert dispatch(["converge", "--dataset", str(data), "--out", str(tmp_path / "out")]) == 1


def test_train_rerun_is_byte_identical(tmp_path):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        args = ["train", "--sbm", "2x20", "--p-in", "0.3", "--split", "per-class:4,4,8", "--max-epochs", "3"]
        assert dispatch(args + ["--seed", "7", "--out", str(out)]) == 0
        files = ("train_epochs.csv", "train_summary.csv", "train_layers.csv")
        outputs.append([(out / csv_name).read_bytes() for csv_name in files])
    assert outputs[0] == outputs[1]


def test_coeffs_writes_table(tmp_path):
    args = [
        "coeffs",
        "--depth",
        "4",
        "--sbm",
        "2x20",
        "--p-in",
        "0.3",
        "--split",
        "per-class:4,4,8",
        "--max-epochs",
        "3",
        "--eval-draws",
        "1",
        "--out",
        str(tmp_path),
    ]
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    assert "Spearman" in result.output
    rows = (tmp_path / "coefficients.csv").read_text().splitlines()[1:]
    assert {row.split(",")[0] for row in rows} == {"2", "3", "4"}


def test_config_file_drives_train(tmp_path):
    config = tmp_path / "exp.cfg"
    config.write_text(
        "residual = res\n"
        "split.policy = per-class:4,4,8\n"
        "hyper.max_epochs = 2\n"
        "hyper.patience = 2\n"
        "hyper.hidden = 8\n"
    )
    out = tmp_path / "out"
    assert dispatch(["train", "--config", str(config), "--sbm", "2x20", "--p-in", "0.3", "--out", str(out)]) == 0
    assert len((out / "train_epochs.csv").read_text().splitlines()) == 1 + 2


SMALL_TRAINING = ["--sbm", "2x20", "--p-in", "0.3", "--split", "per-class:4,4,8", "--max-epochs", "3"]


@pytest.mark.parametrize(
    "args, files",
    [
        (["verify", "--instances", "3"], ["verify.csv"]),
        (["sweep", "--depths", "1,2", "--seeds", "0,1", *SMALL_TRAINING], ["sweep.csv", "sweep_summary.csv"]),
        (["smooth", "--sbm", "2x20", "--p-in", "0.3", "--layers-grid", "1,3"], ["smooth.csv"]),
        (["coeffs", "--depth", "3", "--eval-draws", "1", *SMALL_TRAINING], ["coefficients.csv"]),
        (["gen", "--sbm", "3x10", "--seed", "4"], ["edges.tsv", "features.csv", "labels.txt"]),
    ],
    ids=["verify", "sweep", "smooth", "coeffs", "gen"],
)
def test_rerun_is_byte_identical(tmp_path, args, files):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert dispatch(args + ["--out", str(out)]) == 0
        outputs.append([(out / file_name).read_bytes() for file_name in files])
    assert outputs[0] == outputs[1]


def test_threaded_sweep_matches_sequential(tmp_path):
    args = ["sweep", "--depths", "1,2", "--seeds", "0,1", *SMALL_TRAINING]
    assert dispatch(args + ["--out", str(tmp_path / "one")]) == 0
    assert dispatch(args + ["--workers", "2", "--out", str(tmp_path / "two")]) == 0
    assert (tmp_path / "one" / "sweep.csv").read_bytes() == (tmp_path / "two" / "sweep.csv").read_bytes()


def test_bad_list_value_is_a_lab_error(tmp_path):
    assert dispatch(["sweep", "--depths", "2,x", "--sbm", "2x20", "--out", str(tmp_path)]) == 1
    assert dispatch(["converge", "--seeds", "0,one", "--out", str(tmp_path)]) == 1


def test_smooth_rejects_unknown_backbone(tmp_path):
    assert dispatch(["smooth", "--backbone", "gin", "--sbm", "2x20", "--out", str(tmp_path)]) == 1

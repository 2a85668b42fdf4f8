import json
import math
import re
import subprocess
import sys

import pytest

from tdnets import training
from tdnets.checkpoint import read_checkpoint
from tdnets.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def data_flags(d):
    return ["--data-dir", str(d)]


# --- analyze --------------------------------------------------------------------


def test_analyze_cp_resnet32(capsys):
    code, out, _ = run(capsys, "analyze", "--net", "resnet32", "--format", "cp", "--ranks", "10,10,10,10,10,10,10",
                       "--classes", "10", "--json")
    assert code == 0
    total = json.loads(out)["total"]
    assert abs(total["params"] - 0.03e6) <= 0.2 * 0.03e6
    assert abs(total["cr"] - 18) <= 0.2 * 18


def test_analyze_tr_linear_layer(capsys):
    code, out, _ = run(capsys, "analyze", "--layer", "linear", "--format", "tr", "--in-modes", "20,26,26",
                       "--out-modes", "10", "--ranks", "6,6,6,6", "--json")
    assert code == 0
    rep = json.loads(out)
    assert rep["total"]["format_params"] == 2952
    assert rep["total"]["params"] == 2952 + 10


def test_analyze_table_mentions_count(capsys):
    code, out, _ = run(capsys, "analyze", "--layer", "linear", "--format", "tr", "--in-modes", "20,26,26",
                       "--out-modes", "10", "--ranks", "6,6,6,6")
    assert code == 0 and "2952" in out


def test_analyze_dense_cr_is_one(capsys):
    code, out, _ = run(capsys, "analyze", "--net", "resnet32", "--format", "dense", "--json")
    assert code == 0
    assert json.loads(out)["total"]["cr"] == 1.0


def test_analyze_json_keys(capsys):
    _, out, _ = run(capsys, "analyze", "--net", "lenet5", "--format", "tt", "--ranks", "3,3,3,3", "--json")
    rep = json.loads(out)
    assert set(rep) == {"target", "format", "layers", "total"}
    assert set(rep["total"]) == {"params", "dense_params", "cr", "format_params", "dense_format_params"}
    for row in rep["layers"]:
        assert set(row) == {"name", "kind", "format", "params", "dense_params", "cr"}
    assert sum(row["params"] for row in rep["layers"]) == rep["total"]["params"]


def test_analyze_all_formats(capsys):
    code, out, _ = run(capsys, "analyze", "--net", "resnet32", "--format", "all", "--ranks", "10", "--json")
    assert code == 0
    reps = json.loads(out)
    assert [r["format"] for r in reps] == ["cp", "tucker2", "btt", "tt", "tr"]
    code, out, _ = run(capsys, "analyze", "--net", "resnet32", "--format", "all", "--ranks", "10")
    assert code == 0
    for name in ("cp", "tucker2", "btt", "tt", "tr"):
        assert name in out


def test_analyze_stdout_byte_identical():
    cmd = [sys.executable, "-m", "tdnets", "analyze", "--net", "resnet20", "--format", "tr", "--ranks", "5"]
    a = subprocess.run(cmd, capture_output=True, check=True).stdout
    b = subprocess.run(cmd, capture_output=True, check=True).stdout
    assert a == b and a


@pytest.mark.parametrize(
    "argv, needle",
    [
        (["--layer", "linear", "--format", "tr", "--in-modes", "20,26,26", "--out-modes", "10", "--ranks", "6,6,6"],
         "RankListLengthMismatch"),
        (["--layer", "linear", "--format", "tt", "--in-modes", "4,4", "--out-modes", "4", "--ranks", "2"],
         "ModePairingRequired"),
        (["--layer", "linear", "--format", "cp", "--in-modes", "4,0", "--out-modes", "4", "--ranks", "2"],
         "NonPositiveExtent"),
        (["--net", "resnet32", "--format", "tr", "--ranks", "1,2"], "RankListLengthMismatch"),
    ],
)
def test_analyze_invalid_config_exit_2(capsys, argv, needle):
    code, _, err = run(capsys, "analyze", *argv)
    assert code == 2
    assert needle in err


def test_bad_flag_value_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--format", "nope"])
    assert exc.value.code == 2
    capsys.readouterr()


# --- verify ---------------------------------------------------------------------


def test_verify_fresh_build_passes(capsys):
    code, out, _ = run(capsys, "verify")
    assert code == 0
    assert "all suites passed" in out
    for suite in ("recon", "grad", "count", "roundtrip"):
        assert re.search(rf"^{suite}\s+PASS\s+max error", out, re.M)


def test_verify_fault_fails_recon(capsys):
    code, out, _ = run(capsys, "verify", "--fault", "flip-core-sign")
    assert code == 1
    assert re.search(r"^recon\s+FAIL", out, re.M)
    assert "first failing property: recon" in out


def test_verify_grad_seed_9(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "grad", "--seed", "9")
    assert code == 0
    err = float(re.search(r"max error (\S+)", out).group(1))
    assert err <= 1e-4


def test_verify_unknown_suite(capsys):
    code, _, err = run(capsys, "verify", "--suite", "bogus")
    assert code == 2 and "bogus" in err


def test_seed_env_overrides_flag(capsys, monkeypatch):
    monkeypatch.setenv("TEDNET_SEED", "9")
    _, env_out, _ = run(capsys, "verify", "--suite", "count", "--seed", "3")
    monkeypatch.delenv("TEDNET_SEED")
    _, flag_out, _ = run(capsys, "verify", "--suite", "count", "--seed", "9")
    _, other_out, _ = run(capsys, "verify", "--suite", "count", "--seed", "3")
    assert env_out == flag_out
    assert env_out != other_out or "max error 0.000e+00" in other_out


# --- train / evaluate / inspect ------------------------------------------------------


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
def test_train_zero_epochs_is_chance(capsys, mnist_idx_dir, tmp_path, seed):
    code, out, _ = run(capsys, "train", *data_flags(mnist_idx_dir), "--epochs", "0", "--seed", str(seed),
                       "--out", str(tmp_path / "m.tdnc"))
    assert code == 0
    acc = float(re.search(r"final test_accuracy (\S+)", out).group(1))
    assert abs(acc - 0.1) <= 0.05


def test_train_missing_file_exit_3(capsys, tmp_path):
    out_path = tmp_path / "m.tdnc"
    code, _, err = run(capsys, "train", "--train-images", str(tmp_path / "nope"), "--train-labels",
                       str(tmp_path / "nope2"), "--data-dir", str(tmp_path), "--out", str(out_path))
    assert code == 3 and "nope" in err
    assert not out_path.exists()


def test_train_bad_idx_exit_3(capsys, tmp_path, mnist_idx_dir):
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x08\x01garbage")
    out_path = tmp_path / "m.tdnc"
    code, _, _ = run(capsys, "train", *data_flags(mnist_idx_dir), "--train-images", str(bad), "--train-labels",
                     str(bad), "--out", str(out_path))
    assert code == 3
    assert not out_path.exists()


def test_train_nan_loss_exit_4(capsys, mnist_idx_dir, tmp_path, monkeypatch):
    monkeypatch.setattr(training, "train_step", lambda *a, **k: math.nan)
    out_path = tmp_path / "m.tdnc"
    code, _, err = run(capsys, "train", *data_flags(mnist_idx_dir), "--train-subset", "64", "--epochs", "1",
                       "--out", str(out_path))
    assert code == 4
    assert "epoch 1" in err and "batch 0" in err
    assert not out_path.exists()


def test_train_bad_hyperparameters_exit_2(capsys, mnist_idx_dir):
    code, _, _ = run(capsys, "train", *data_flags(mnist_idx_dir), "--lr", "0")
    assert code == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory, mnist_idx_dir):
    d = tmp_path_factory.mktemp("ck")
    argv = ["train", *data_flags(mnist_idx_dir), "--train-subset", "256", "--test-subset", "200", "--epochs", "1",
            "--seed", "3"]
    outs = []
    for name in ("a.tdnc", "b.tdnc"):
        proc = subprocess.run([sys.executable, "-m", "tdnets", *argv, "--out", str(d / name)], capture_output=True,
                              text=True, check=True)
        outs.append(proc.stdout.replace(name, "X"))
    return d, outs


def test_train_output_and_reproducibility(trained):
    d, outs = trained
    assert outs[0] == outs[1]
    lines = outs[0].splitlines()
    assert lines[0] == "network: DEMO  params: 3666  seed: 3"
    assert lines[1] == "data: 256 train, 200 test"
    assert re.match(r"epoch 1 loss \S+ test_accuracy \S+", lines[2])
    assert re.match(r"final test_accuracy \S+", lines[3])
    assert (d / "a.tdnc").read_bytes() == (d / "b.tdnc").read_bytes()


def test_evaluate_checkpoint(capsys, trained, mnist_idx_dir):
    d, outs = trained
    code, out, _ = run(capsys, "evaluate", str(d / "a.tdnc"), *data_flags(mnist_idx_dir), "--test-subset", "200",
                       "--seed", "3")
    assert code == 0
    final = re.search(r"final test_accuracy (\S+)", outs[0]).group(1)
    assert out.strip() == f"test_accuracy {final} on 200 samples"


def test_evaluate_missing_checkpoint_exit_3(capsys, tmp_path, mnist_idx_dir):
    code, _, _ = run(capsys, "evaluate", str(tmp_path / "none.tdnc"), *data_flags(mnist_idx_dir))
    assert code == 3


def test_inspect(capsys, trained):
    d, _ = trained
    code, out, _ = run(capsys, "inspect", str(d / "a.tdnc"))
    assert code == 0 and "parameters: 3666" in out
    code, out, _ = run(capsys, "inspect", str(d / "a.tdnc"), "--json")
    rep = json.loads(out)
    assert set(rep) == {"network", "tensors"}
    assert rep["tensors"] == {k: list(v.shape) for k, v in read_checkpoint(d / "a.tdnc").params.items()}


def test_inspect_bad_magic_exit_3(capsys, tmp_path):
    p = tmp_path / "x.tdnc"
    p.write_bytes(b"XXXX" + bytes(12))
    code, _, _ = run(capsys, "inspect", str(p))
    assert code == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tdnets", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("analyze", "train", "evaluate", "verify", "inspect"):
        assert cmd in proc.stdout
    proc = subprocess.run(["tdnets", "analyze", "--json"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["total"]["format_params"] == 3636

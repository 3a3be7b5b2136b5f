import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ntt.checkpoint import read_checkpoint
from ntt.cli import main, parse_settings, resolve_config
from ntt.errors import ConfigError


def _base(fake_mnist, out, *extra):
    return ["--data-dir", str(fake_mnist), "--out", str(out), "--reps", "1", "--train-subset", "200",
            "--ntt.iterations", "3", "--ntt.batch_size", "16", "--train.iterations", "6", "--train.batch_size", "16",
            *extra]


def _cfg(argv):
    return resolve_config(parse_settings(argv)[1])


def test_presets_and_defaults():
    cfg = _cfg(["transfer", "--preset", "mnist-mlp"])
    assert (cfg.ntt.epochs, cfg.ntt.batch_size, cfg.ntt.learning_rate, cfg.ntt.gamma_sq, cfg.ntt.weight_decay) == (
        20, 64, 5e-4, 1e-3, 1e-4)
    assert cfg.ntt.density == cfg.density == 0.03
    toy = _cfg(["probe", "--dataset", "toy", "--density", "0.1"])
    assert toy.preset == "toy-mlp" and toy.ntt.iterations == 5000 and toy.ntt.gamma_sq == 1e-5
    assert (toy.train.optimizer, toy.train.learning_rate, toy.train.loss, toy.train.iterations) == (
        "sgd", 0.01, "quadratic", 5000)


def test_flag_spellings_and_precedence(tmp_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("[experiment]\ndensity = 0.05\nseed = 3\n[ntt]\ngamma_sq = 0.5\n[train]\nepochs = 7\n")
    cfg = _cfg(["train", "--config", str(conf)])
    assert (cfg.density, cfg.seed, cfg.ntt.gamma_sq, cfg.train.epochs) == (0.05, 3, 0.5, 7)
    cfg = _cfg(["train", "--config", str(conf), "--density", "0.01", "--ntt.gamma_sq", "0.25", "--train-epochs=9",
                "--mask_update_every", "50", "--ntt-iterations", "none"])
    assert (cfg.density, cfg.ntt.gamma_sq, cfg.train.epochs, cfg.ntt.mask_update_every) == (0.01, 0.25, 9, 50)
    assert cfg.ntt.iterations is None
    with pytest.raises(ConfigError):
        _cfg(["train", "--learning_rate", "0.1"])  # owned by both sections
    with pytest.raises(ConfigError):
        _cfg(["train", "--bogus", "1"])
    with pytest.raises(ConfigError):
        _cfg(["train", "--density", "abc"])


@pytest.mark.parametrize("argv", [
    ["transfer", "--method", "snip"],
    ["prune", "--method", "snip", "--scheme", "layerwise"],
    ["prune", "--method", "layerwise_snip", "--scheme", "global"],
    ["train", "--density", "0"],
    ["train", "--reps", "0"],
    ["train", "--preset", "nope"],
    ["train", "--config", "/nonexistent.cfg"],
    ["probe", "--dataset", "mnist"],
    ["transfer", "--ntt.gamma_sq", "-1"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_data_errors_exit_3(tmp_path, fake_mnist):
    assert main(["transfer", "--data-dir", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3
    assert main(["train"] + _base(fake_mnist, tmp_path / "empty")) == 3  # no checkpoint yet
    assert main(["report", "--out", str(tmp_path / "empty")]) == 3
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "train-images-idx3-ubyte").write_bytes(b"\x00\x00\x08\x01garbage")
    (tmp_path / "bad" / "train-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01")
    assert main(["transfer", "--data-dir", str(tmp_path / "bad"), "--out", str(tmp_path)]) == 3


def test_numerical_failure_exits_4(tmp_path, fake_mnist, capsys):
    argv = ["transfer"] + _base(fake_mnist, tmp_path, "--ntt.optimizer", "sgd", "--ntt.learning_rate", "1e200")
    with np.errstate(all="ignore"):
        assert main(argv) == 4


def test_pipeline_transfer_prune_train_report(tmp_path, fake_mnist):
    out = tmp_path / "runs"
    assert main(["transfer"] + _base(fake_mnist, out)) == 0
    for method, scheme in [("random", "layerwise"), ("scaled_random", "global"), ("snip", "global"),
                           ("layerwise_snip", "layerwise"), ("logit_snip", "global"), ("dense", "layerwise")]:
        assert main(["prune"] + _base(fake_mnist, out, "--method", method, "--scheme", scheme)) == 0
        assert main(["train"] + _base(fake_mnist, out, "--method", method, "--scheme", scheme)) == 0
    assert main(["train"] + _base(fake_mnist, out)) == 0
    assert main(["report", "--out", str(out)]) == 0

    stem = "lenet-300-100_mnist_ntt_layerwise_p0.03_seed0"
    ck = read_checkpoint(out / f"{stem}.ckpt")
    assert ck.arch == "lenet-300-100" and ck.params.size == 266_610
    rows = list(csv.reader((out / f"{stem}_history.csv").open()))
    assert rows[0] == ["iteration", "train_loss", "train_acc", "test_acc"]
    assert [r[0] for r in rows[1:]] == ["0", "6"]
    ntt_rows = list(csv.reader((out / f"{stem}_ntt.csv").open()))
    assert ntt_rows[0][:2] == ["iteration", "objective"] and len(ntt_rows) == 4
    rec = json.loads((out / f"{stem}_record.json").read_text())
    assert rec["kept_per_layer"] == {"0": 7056, "2": 900, "4": 30}
    assert rec["dense_multiply_adds"] == 266_200 and rec["multiply_adds"] == 7986
    assert rec["speedup"] == pytest.approx(266_200 / 7986)
    summary = list(csv.DictReader((out / "summary.csv").open()))
    assert {r["method"] for r in summary} == {"ntt", "random", "scaled_random", "snip", "layerwise_snip",
                                              "logit_snip", "dense"}
    dense = next(r for r in summary if r["method"] == "dense")
    assert float(dense["speedup_mean"]) == 1.0
    speed = list(csv.DictReader((out / "speedup.csv").open()))
    assert all(int(r["multiply_adds"]) == sum(int(r[k]) for k in r if k.startswith("kept_layer")) for r in speed)
    assert (out / "timings.log").exists()


def test_repetitions_use_consecutive_seeds(tmp_path, fake_mnist):
    argv = _base(fake_mnist, tmp_path, "--method", "random", "--seed", "5")
    argv[argv.index("--reps") + 1] = "2"
    assert main(["prune"] + argv) == 0
    seeds = sorted(read_checkpoint(p).seed for p in tmp_path.glob("*.ckpt"))
    assert seeds == [5, 6]


def test_identical_runs_are_byte_identical(tmp_path, fake_mnist):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["transfer"] + _base(fake_mnist, out)) == 0
        assert main(["train"] + _base(fake_mnist, out)) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".ckpt", ".json"))
    assert names
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_probe_writes_curves_and_traces(tmp_path, fake_mnist):
    argv = ["probe", "--dataset", "toy", "--data-dir", str(fake_mnist), "--out", str(tmp_path), "--reps", "1",
            "--density", "0.1", "--ntt.iterations", "2", "--train.iterations", "20", "--train.snapshot_every", "10"]
    assert main(argv) == 0
    loss = list(csv.reader((tmp_path / "probe_lenet-300-100_p0.1_seed0_loss.csv").open()))
    assert loss[0] == ["iteration", "teacher", "student", "random"] and loss[-1][0] == "20"
    trace = list(csv.DictReader((tmp_path / "probe_lenet-300-100_p0.1_seed0_trace.csv").open()))
    assert {r["net"] for r in trace} == {"teacher", "student", "random"}
    assert len(trace) == 3 * 3 * 2  # nets x snapshots x classes


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ntt.cli", "report", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 3

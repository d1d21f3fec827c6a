import csv
import filecmp

import numpy as np
import pytest

from mpcgnet.cli import main, parse_size, UsageError
from mpcgnet.network import MPCGNet, NetConfig, load_checkpoint, save_checkpoint

SMALL_FLAGS = ["--widths", "8,16,24,32", "--decoder-width", "8"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data(tmp_path, capsys):
    root = tmp_path / "data"
    code, _, _ = run(capsys, "synth", "--out", str(root), "--count", "2", "--size", "32x32", "--seed", "4")
    assert code == 0
    return root


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


# ---------------------------------------------------------------- synth


def test_synth_layout(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", str(tmp_path / "d"), "--count", "4")
    assert code == 0
    assert "count = 4" in out
    assert len(list((tmp_path / "d" / "images").glob("*.ppm"))) == 4
    assert len(list((tmp_path / "d" / "masks").glob("*.pgm"))) == 4
    rows = list(csv.DictReader((tmp_path / "d" / "manifest.tsv").open(), delimiter="\t"))
    assert len(rows) == 4


def test_synth_deterministic_trees(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--out", str(tmp_path / name), "--count", "3", "--seed", "9")[0] == 0
    assert tree_equal(tmp_path / "a", tmp_path / "b")


def test_synth_regime_column(tmp_path, capsys):
    run(capsys, "synth", "--out", str(tmp_path / "d"), "--count", "3", "--regime", "small-target")
    rows = list(csv.DictReader((tmp_path / "d" / "manifest.tsv").open(), delimiter="\t"))
    assert {r["regime"] for r in rows} == {"small-target"}


# ---------------------------------------------------------------- usage errors


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["synth"],
        ["synth", "--out", "x", "--size", "50x64"],
        ["synth", "--out", "x", "--regime", "foggy"],
        ["synth", "--out", "x", "--count", "many"],
        ["gradcheck", "--module", "nope"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err


def test_size_error_names_divisor():
    with pytest.raises(UsageError, match="32"):
        parse_size("48x64")
    assert parse_size("64") == (64, 64)
    assert parse_size("64x96") == (64, 96)


def test_config_file_and_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# synth settings\ncount = 3\nregime = small-target  # tiny blobs\n")
    code, out, _ = run(capsys, "synth", "--config", str(cfg), "--out", str(tmp_path / "d"))
    assert code == 0
    assert "count = 3" in out and "regime = small-target" in out
    code, out, _ = run(capsys, "synth", "--config", str(cfg), "--out", str(tmp_path / "e"), "--count", "2")
    assert "count = 2" in out
    cfg.write_text("count = 3\ncolour = red\n")
    code, _, err = run(capsys, "synth", "--config", str(cfg), "--out", str(tmp_path / "f"))
    assert code == 1 and "colour" in err


def test_train_defaults_echo_training_protocol(tmp_path, capsys):
    # missing dataset: the resolved config is printed before the data error
    code, out, _ = run(capsys, "train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o"))
    assert code == 2
    assert "epochs = 150" in out and "batch = 8" in out and "lr = 0.0001" in out


# ---------------------------------------------------------------- train / eval / info


def test_train_one_epoch_then_eval_and_info(tmp_path, data, capsys):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--data", str(data), "--out", str(out_dir), "--epochs", "1",
                       "--batch", "2", "--size", "32x32", "--val-fraction", "0", *SMALL_FLAGS)
    assert code == 0, out
    assert (out_dir / "model.ckpt").exists()
    log = (out_dir / "train_log.tsv").read_text().splitlines()
    assert len(log) == 2
    load_checkpoint(out_dir / "model.ckpt")

    csv_path = tmp_path / "m.csv"
    code, out, _ = run(capsys, "eval", "--data", str(data), "--ckpt", str(out_dir / "model.ckpt"),
                       "--csv", str(csv_path))
    assert code == 0
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["image", "dice", "iou", "fbw", "smeasure", "emeasure", "mae"]
    assert len(rows) == 4 and rows[-1][0] == "MEAN"

    code, out, _ = run(capsys, "info", "--ckpt", str(out_dir / "model.ckpt"), "--size", "32x32")
    assert code == 0 and "params = " in out and "flops@32x32" in out


def test_train_size_mismatch_is_data_error(tmp_path, data, capsys):
    code, _, err = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "o"), "--epochs", "1",
                       "--size", "64x64", *SMALL_FLAGS)
    assert code == 2 and "32x32" in err
    assert not (tmp_path / "o" / "model.ckpt").exists()


def test_train_indivisible_size_is_usage_error(tmp_path, data, capsys):
    code, _, err = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "o"), "--size", "40x40")
    assert code == 1 and "32" in err


def test_no_gates_log_reports_all_ones(tmp_path, data, capsys):
    out_dir = tmp_path / "ng"
    code, _, _ = run(capsys, "train", "--data", str(data), "--out", str(out_dir), "--epochs", "2",
                     "--batch", "2", "--size", "32x32", "--no-gates", *SMALL_FLAGS)
    assert code == 0
    rows = list(csv.DictReader((out_dir / "train_log.tsv").open(), delimiter="\t"))
    for r in rows:
        for key, val in r.items():
            if key.startswith("gates_"):
                assert set(val) == {"1"}, key


def test_info_fresh_checkpoint_gates_closed(tmp_path, capsys):
    path = tmp_path / "fresh.ckpt"
    save_checkpoint(path, MPCGNet(NetConfig(widths=(8, 16, 24, 32), decoder_width=8)))
    code, out, _ = run(capsys, "info", "--ckpt", str(path))
    assert code == 0
    gate_lines = [l for l in out.splitlines() if l.startswith("gates ")]
    assert len(gate_lines) == 7
    assert all(set(l.split("= ")[1]) == {"0"} for l in gate_lines)


def test_eval_missing_checkpoint_is_data_error(tmp_path, data, capsys):
    code, _, err = run(capsys, "eval", "--data", str(data), "--ckpt", str(tmp_path / "x.ckpt"),
                       "--csv", str(tmp_path / "m.csv"))
    assert code == 2


def test_eval_corrupt_checkpoint_is_data_error(tmp_path, data, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE")
    code, _, err = run(capsys, "eval", "--data", str(data), "--ckpt", str(bad), "--csv", str(tmp_path / "m.csv"))
    assert code == 2 and "magic" in err


def test_corrupt_image_is_data_error(tmp_path, data, capsys):
    (data / "images" / "00001.ppm").write_bytes(b"P6\n32 32\n255\n\x00")
    code, _, err = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "o"), "--epochs", "1",
                       "--size", "32x32", *SMALL_FLAGS)
    assert code == 2


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_is_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--module", "is", "--seed", "1")
    assert code == 0
    assert "is\t1\t" in out and "pass" in out


def test_gradcheck_failure_exits_3(monkeypatch, capsys):
    import mpcgnet.verify as verify

    monkeypatch.setitem(verify.CHECKS, "is", (lambda seed: 0.5, 1e-2))
    code, out, err = run(capsys, "gradcheck", "--module", "is")
    assert code == 3 and "FAIL" in out


def test_threads_env_validation(monkeypatch, capsys):
    monkeypatch.setenv("MPCG_THREADS", "zero")
    code, _, err = run(capsys, "gradcheck", "--module", "is")
    assert code == 1 and "MPCG_THREADS" in err


def test_non_finite_training_exits_3(tmp_path, data, capsys, monkeypatch):
    import mpcgnet.cli as cli

    orig = cli.MPCGNet

    def poisoned(cfg):
        net = orig(cfg)
        net.heads[1].weight.data[:] = np.inf
        return net

    monkeypatch.setattr(cli, "MPCGNet", poisoned)
    code, _, err = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "o"), "--epochs", "1",
                       "--size", "32x32", *SMALL_FLAGS)
    assert code == 3 and "dfa_1" in err


def test_ablate_writes_side_by_side_table(tmp_path, data, capsys):
    code, out, _ = run(capsys, "ablate", "--data", str(data), "--val-data", str(data), "--out",
                       str(tmp_path / "ab"), "--epochs", "1", "--batch", "2", "--size", "32x32")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ab" / "ablation.tsv").open(), delimiter="\t"))
    assert [r["variant"] for r in rows] == ["full", "no-dfa"]
    assert int(rows[1]["params"]) < int(rows[0]["params"])

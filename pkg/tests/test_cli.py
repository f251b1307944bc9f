import json
from pathlib import Path

import numpy as np
import pytest

from tfadv import nn
from tfadv.cli import main
from tfadv.render import read_ppm
from tfadv.waveforms import load_dataset

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    """A seeded gen -> train pipeline shared by the attack/report tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--per-class", "8", "--seed", "3", "--out", str(root / "train")]) == 0
    assert main(["gen", "--per-class", "3", "--seed", "3", "--split", "1",
                 "--out", str(root / "test")]) == 0
    assert main(["train", "--arch", "tinyC", "--data", str(root / "train"), "--epochs", "1",
                 "--out", str(root / "c.bin")]) == 0
    return root


def test_gen_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        code, out, err = run(capsys, "gen", "--per-class", 2, "--seed", 7, "--out", tmp_path / d)
        assert code == 0
        assert "effective config" in err
    fa = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    fb = {p.name: p.read_bytes() for p in (tmp_path / "b").iterdir()}
    assert fa == fb and len(fa) == 7


@pytest.mark.parametrize("snr", ["10:-10", "abc", "1:2:3"])
def test_gen_bad_range_is_usage_error(tmp_path, capsys, snr):
    code, _, err = run(capsys, "gen", "--snr", snr, "--out", tmp_path)
    assert code == 2 and "snr" in err


def test_gen_full_size_balanced(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--per-class", 400, "--snr", "-10:10", "--out", tmp_path)
    assert code == 0
    ds = load_dataset(tmp_path)
    assert len(ds) == 1200 and np.bincount(ds.labels).tolist() == [400, 400, 400]
    snrs = [s.snr_db for s in ds.signals]
    assert min(snrs) >= -10 and max(snrs) <= 10


def test_gen_class_subset(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--classes", "lfm,0", "--per-class", 2, "--out", tmp_path)
    assert code == 0
    assert sorted(set(load_dataset(tmp_path).labels.tolist())) == [0, 2]


def test_train_epochs_zero_saves_init_weights(mini, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--arch", "tinyA", "--data", mini / "train",
                       "--test", mini / "test", "--epochs", 0, "--seed", 5,
                       "--out", tmp_path / "w.bin")
    assert code == 0
    saved = nn.load(tmp_path / "w.bin")
    np.testing.assert_array_equal(saved.params.astype(np.float32),
                                  nn.init_model("tinyA", 5).params.astype(np.float32))
    acc = float(out.split("test accuracy ")[1].split("%")[0])
    assert 0 <= acc <= 100


def test_train_same_seed_identical_weights(mini, tmp_path, capsys):
    for name in ("a.bin", "b.bin"):
        assert run(capsys, "train", "--arch", "tinyC", "--data", mini / "train", "--epochs", 1,
                   "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_train_divergence_is_numeric_failure(mini, tmp_path, capsys):
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--arch", "tinyC", "--data", mini / "train",
                           "--epochs", 2, "--batch", 4, "--lr", 1e300, "--out", tmp_path / "x.bin")
    assert code == 4 and "numerical" in err


def test_unknown_method_lists_valid(mini, tmp_path, capsys):
    code, _, err = run(capsys, "attack", "--method", "nope", "--model", mini / "c.bin",
                       "--data", mini / "test", "--out", tmp_path)
    assert code == 2
    for m in ("fgsm", "pgd", "cw", "ditimi", "stds"):
        assert m in err


def test_missing_inputs_are_io_errors(mini, tmp_path, capsys):
    code, _, _ = run(capsys, "attack", "--method", "fgsm", "--model", tmp_path / "none.bin",
                     "--data", mini / "test", "--out", tmp_path / "o")
    assert code == 3
    code, _, _ = run(capsys, "train", "--arch", "tinyA", "--data", tmp_path / "nodata",
                     "--out", tmp_path / "w.bin")
    assert code == 3
    code, _, _ = run(capsys, "report", "--results", tmp_path / "nowhere")
    assert code == 3


def test_attack_summary_and_config_echo(mini, tmp_path, capsys):
    code, out, err = run(capsys, "attack", "--method", "pgd", "--model", mini / "c.bin",
                         "--data", mini / "test", "--iters", 2, "--out", tmp_path,
                         "--format", "png")
    assert code == 0
    assert out.startswith("pgd tinyC->tinyC self success")
    echo = json.loads(err.split("effective config: ", 1)[1].splitlines()[0])
    assert echo["attack"]["iterations"] == 2 and echo["attack"]["epsilon"] == 10.0
    assert list((tmp_path / "figures").glob("*.png"))


def test_stds_emits_waveforms_and_triptychs(mini, tmp_path, capsys):
    code, out, _ = run(capsys, "attack", "--method", "stds", "--model", mini / "c.bin",
                       "--data", mini / "test", "--stds-iters", 10, "--out", tmp_path)
    assert code == 0
    ds = load_dataset(tmp_path / "results/waveforms/stds_tinyC")
    assert len(ds) == 9
    figs = list((tmp_path / "figures").glob("stds_*.ppm"))
    assert figs and read_ppm(figs[0]).shape[1] == 3 * 64 + 4
    assert (tmp_path / "results/samples/stds_tinyC_metrics.csv").is_file()


def test_transfer_and_report_golden(mini, tmp_path, capsys):
    assert main(["train", "--arch", "tinyA", "--data", str(mini / "train"), "--epochs", "1",
                 "--out", str(tmp_path / "a.bin")]) == 0
    code, out, _ = run(capsys, "transfer", "--method", "fgsm", "--source", tmp_path / "a.bin",
                       "--victims", tmp_path / "a.bin", mini / "c.bin", "--data", mini / "test",
                       "--out", tmp_path / "run")
    assert code == 0 and "tinyA->tinyC transfer" in out
    code, out, _ = run(capsys, "report", "--results", tmp_path / "run",
                       "--out", tmp_path / "table.txt")
    assert code == 0
    assert out == (GOLDEN / "report_fgsm.txt").read_text()
    assert (tmp_path / "table.txt").read_text() == out

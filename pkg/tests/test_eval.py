from pathlib import Path

import numpy as np
import pytest

from tfadv import nn
from tfadv.attacks import AttackConfig, AttackOutcome
from tfadv.errors import ConfigError, FormatError
from tfadv.evaluation import (Cell, EligibilityError, ExperimentPlan, TransferMatrix, run_plan,
                              select_samples, success_rate, triptych)
from tfadv.render import TFImage, read_ppm
from tfadv.stds import StdsConfig


def outcome(success, label=0):
    img = np.zeros((64, 64, 3))
    return AttackOutcome(TFImage(img), img, 0.0, 0.0, label, label + int(success), success, 1)


class ConstModel:
    """Predicts a fixed label for clean (all-zero) images and another otherwise."""

    def __init__(self, clean_label, adv_label):
        self.clean_label, self.adv_label = clean_label, adv_label

    def predict(self, x, batch=256):
        x = np.asarray(x)
        flat = np.abs(x).reshape(len(x), -1).max(axis=1) == 0
        return np.where(flat, self.clean_label, self.adv_label)


def shifted(label):
    clean = np.zeros((64, 64, 3))
    adv = clean.copy()
    adv[0, 0, 0] = 0.1
    return AttackOutcome(TFImage(adv), adv - clean, 0.1, 25.5, label, label, False, 1)


def test_success_rate_arithmetic():
    assert success_rate([outcome(True)] * 4) == 100.0
    assert success_rate([outcome(False)] * 4) == 0.0
    assert success_rate([outcome(True), outcome(True), outcome(False)]) == pytest.approx(66.67,
                                                                                        abs=0.01)


def test_success_rate_empty_raises():
    with pytest.raises(EligibilityError):
        success_rate([])


def test_success_rate_with_victim_eligibility():
    outs = [shifted(0), shifted(0), shifted(1)]
    # victim says 0 on clean and 2 on adversarial: label-0 samples are eligible
    # and flipped, the label-1 sample is not eligible
    assert success_rate(outs, ConstModel(0, 2)) == 100.0
    assert success_rate(outs, ConstModel(0, 0)) == 0.0
    with pytest.raises(EligibilityError):
        success_rate(outs, ConstModel(2, 2))


def test_matrix_csv_round_trip(tmp_path):
    m = TransferMatrix()
    m.add("pgd", "tinyA", "tinyA", Cell(100.0, 5, 5, 12.5, 10.0))
    m.add("pgd", "tinyA", "tinyB", Cell(40.0, 2, 5, 11.0, 10.0))
    path = m.write(tmp_path / "m.csv")
    back = TransferMatrix.read(path)
    assert back.entries == m.entries
    assert path.read_text().startswith("# ")


def test_matrix_rejects_bad_rate_and_bad_file(tmp_path):
    with pytest.raises(ValueError):
        TransferMatrix().add("a", "s", "v", Cell(101.0, 1, 1, 0, 0))
    bad = tmp_path / "bad.csv"
    bad.write_text("attack,source\nx,y\n")
    with pytest.raises(FormatError):
        TransferMatrix.read(bad)
    with pytest.raises(FileNotFoundError):
        TransferMatrix.read(tmp_path / "missing.csv")


def test_table_layout():
    m = TransferMatrix()
    m.add("fgsm", "tinyA", "tinyA", Cell(98.0, 49, 50, 1.0, 10.0))
    m.add("fgsm", "tinyA", "tinyC", Cell(30.0, 15, 50, 1.0, 10.0))
    lines = m.table().splitlines()
    assert lines[0].split() == ["attack", "source", "tinyA", "tinyC"]
    assert lines[2].split() == ["fgsm", "tinyA", "98.00*", "30.00"]
    assert TransferMatrix().table() == "(empty matrix)\n"


def test_triptych_range_and_shape(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    t = triptych(a, b)
    assert t.shape == (8, 28, 3) and t.min() >= 0 and t.max() <= 1
    np.testing.assert_array_equal(t[:, :8], a)
    np.testing.assert_allclose(triptych(a, a)[:, -8:], 0.5)


def test_select_samples_balanced():
    labels = np.repeat([0, 1, 2], 10)
    ids = select_samples(30, labels, 6)
    assert np.bincount(labels[ids]).tolist() == [2, 2, 2]
    assert select_samples(30, labels, None).tolist() == list(range(30))


def test_plan_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentPlan(tmp_path, attacks=("bogus",))
    with pytest.raises(ConfigError):
        ExperimentPlan(tmp_path, models=("tinyA",), victims=("tinyB",))
    with pytest.raises(ConfigError):
        ExperimentPlan(tmp_path, image_format="gif")


def mini_plan(out, **kw):
    base = dict(train_per_class=12, test_per_class=3, epochs=2, models=("tinyA", "tinyC"),
                attacks=("fgsm", "pgd", "ditimi", "stds"),
                attack=AttackConfig(iterations=3), stds=StdsConfig(iterations=20, lr=0.01),
                figures_per_cell=2)
    base.update(kw)
    return ExperimentPlan(out, **base)


def csv_bytes(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.suffix in (".csv", ".tfsig", ".ppm", ".bin")}


def test_run_plan_artifacts_and_determinism(tmp_path):
    r1 = run_plan(mini_plan(tmp_path / "a"))
    r2 = run_plan(mini_plan(tmp_path / "b"))
    f1, f2 = csv_bytes(tmp_path / "a"), csv_bytes(tmp_path / "b")
    assert f1.keys() == f2.keys() and f1 == f2
    root = tmp_path / "a"
    for rel in ("results/matrix.csv", "results/training.csv", "models/tinyA.bin",
                "results/samples/pgd_tinyA.csv", "results/samples/stds_tinyC_metrics.csv",
                "datasets/train/manifest.json", "results/waveforms/stds_tinyA/manifest.json"):
        assert (root / rel).is_file(), rel
    figs = sorted((root / "figures").glob("*.ppm"))
    assert len(figs) == 4 * 2 * 2
    assert read_ppm(figs[0]).shape == (64, 64 * 3 + 4, 3)
    for cell in r1.matrix.entries.values():
        assert 0 <= cell.rate <= 100 and cell.eligible > 0
    assert r1.matrix.entries == r2.matrix.entries


def test_stds_waveform_records_replay_to_recorded_flags(tmp_path):
    from tfadv.render import receive
    from tfadv.waveforms import load_dataset

    plan = mini_plan(tmp_path, attacks=("stds",), models=("tinyA",))
    run_plan(plan)
    ds = load_dataset(tmp_path / "results/waveforms/stds_tinyA")
    model = nn.load(tmp_path / "models/tinyA.bin")
    pred = model.predict(receive(ds.samples()))
    rows = (tmp_path / "results/samples/stds_tinyA_metrics.csv").read_text().splitlines()[1:]
    flags = [int(r.split(",")[4]) for r in rows]
    assert flags == [int(p != y) for p, y in zip(pred, ds.labels)]


def test_empty_attack_list_gives_empty_matrix(tmp_path):
    rep = run_plan(mini_plan(tmp_path, attacks=(), models=("tinyC",), epochs=0))
    assert len(rep.matrix) == 0
    assert not (tmp_path / "results" / "matrix.csv").exists()
    assert not (tmp_path / "figures").exists()


def test_missing_model_file_reports_path(tmp_path):
    plan = mini_plan(tmp_path, models=("tinyA",), attacks=(),
                     model_files={"tinyA": tmp_path / "nope.bin"})
    with pytest.raises(FileNotFoundError, match="nope.bin"):
        run_plan(plan)


def test_preloaded_model_is_used(tmp_path):
    m = nn.init_model("tinyC", 42)
    nn.save(m, tmp_path / "c.bin")
    run_plan(mini_plan(tmp_path / "out", models=("tinyC",), attacks=(),
                       model_files={"tinyC": tmp_path / "c.bin"}))
    assert (tmp_path / "out/models/tinyC.bin").read_bytes() == (tmp_path / "c.bin").read_bytes()

import csv
import json

import numpy as np
import pytest

from m3s.cli import main
from m3s.model import M3SModel, fixed_weight_matrix
from m3s.spectra import load_dataset

SMALL = {"counts": {"AMI": 6, "CAD": 6, "AF": 6, "CON": 6}}
FAST = ["--epochs", "2", "--lr", "0.01", "--quiet", "--scales", "32"]


@pytest.fixture()
def data(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "data.csv"
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    return out


def test_synth_is_deterministic(tmp_path, data):
    again = tmp_path / "again.csv"
    cfg = tmp_path / "synth.json"
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(again)]) == 0
    assert again.read_bytes() == data.read_bytes()
    manifest = json.loads((tmp_path / "data.csv.manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["config_hash"]) == 64
    assert set(manifest) >= {"git", "inputs", "outputs", "started", "finished"}
    assert len(load_dataset(data)) == 24


def test_synth_rejects_negative_noise(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"noise": -0.1}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("InvalidConfig:") and "noise" in err
    assert not (tmp_path / "x.csv").exists()


def test_length_mismatch_exits_2(tmp_path, data, capsys):
    assert main(["train", "--data", str(data), "--length", "512", "--out", str(tmp_path / "r")] + FAST) == 2
    assert "columns" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert main(["encode", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "e")]) == 2


def test_divergence_exits_3(tmp_path, data, capsys):
    args = ["train", "--data", str(data), "--out", str(tmp_path / "r"), "--epochs", "2", "--lr", "1e300",
            "--quiet", "--scales", "32"]
    assert main(args) == 3
    assert capsys.readouterr().err.startswith("DivergedLoss:")


def test_encode_csv_rows(tmp_path, data):
    out = tmp_path / "enc"
    assert main(["encode", "--data", str(data), "--scales", "32", "--out", str(out)]) == 0
    with open(out / "gaf_32.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 25 and len(rows[1]) == 2 + 32 * 32
    pix = np.array(rows[1][2:], dtype=float).reshape(32, 32)
    np.testing.assert_allclose(pix, pix.T, atol=1e-15)
    assert np.all(np.abs(pix) <= 1.0)


def test_train_evaluate_report_round_trip(tmp_path, data):
    a, b = tmp_path / "a", tmp_path / "b"
    for run in (a, b):
        assert main(["train", "--data", str(data), "--out", str(run), "--seed", "4"] + FAST) == 0
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    assert (a / "loss_log.csv").read_bytes() == (b / "loss_log.csv").read_bytes()
    split = json.loads((a / "split.json").read_text())
    assert not set(split["train"]) & set(split["test"])

    for run in (a, b):
        assert main(["evaluate", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                     "--out", str(run)]) == 0
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    metrics = json.loads((a / "metrics.json").read_text())
    assert np.asarray(metrics["confusion"]).sum() == len(split["test"])

    assert main(["report", "--run", str(a), "--out", str(tmp_path / "rep")]) == 0
    for name in ("loss.png", "confusion.png", "weight_matrix.png", "summary.csv"):
        assert (tmp_path / "rep" / name).stat().st_size > 0


def test_fixed_weights_flag(tmp_path, data):
    run = tmp_path / "f"
    assert main(["train", "--data", str(data), "--out", str(run), "--weights", "fixed", "--ratio", "0.9"]
                + FAST) == 0
    model = M3SModel.load(run / "checkpoint.json")
    np.testing.assert_array_equal(model.weight.value, fixed_weight_matrix(0.9))


def test_ablate_small_grid(tmp_path, data):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"scale_sets": [[32]], "weights": ["fixed", "adaptive"]}))
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(data), "--grid", str(grid), "--seeds", "1,2", "--out", str(out)]
                + FAST) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["scales"], r["weights"]) for r in rows] == [("32", "fixed"), ("32", "adaptive")]
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 and r["seeds"] == "1 2" for r in rows)
    assert main(["report", "--run", str(out)]) == 0
    assert (out / "ablation.png").exists()


def test_report_on_empty_dir_exits_2(tmp_path):
    assert main(["report", "--run", str(tmp_path)]) == 2


def test_default_synth_round_trips_losslessly(tmp_path):
    from m3s.spectra import SynthConfig, synth_generate

    out = tmp_path / "d.csv"
    assert main(["synth", "--seed", "1", "--out", str(out)]) == 0
    back = load_dataset(out)
    ref = synth_generate(SynthConfig(), 1)
    assert len(back) == 400 and back.ids == ref.ids
    assert back.values().tobytes() == ref.values().tobytes()
    assert back.labels().tolist() == ref.labels().tolist()
    assert back.histories().tolist() == ref.histories().tolist()


def test_evaluate_own_training_set_after_overfit(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"counts": {"AMI": 3, "CAD": 3, "AF": 3, "CON": 3}}))
    data = tmp_path / "tiny.csv"
    assert main(["synth", "--config", str(cfg), "--seed", "7", "--out", str(data)]) == 0
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(run), "--epochs", "60", "--lr", "0.05",
                 "--scales", "32", "--quiet"]) == 0
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                 "--split", "train", "--out", str(run)]) == 0
    assert json.loads((run / "metrics.json").read_text())["accuracy"] == 1.0


def test_ablate_single_cell_is_repeatable(tmp_path, data):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([{"scales": [32], "weights": "adaptive", "fusion": "masked"}]))
    outs = []
    for k in range(2):
        out = tmp_path / f"abl{k}"
        assert main(["ablate", "--data", str(data), "--grid", str(grid), "--seeds", "1", "--out", str(out)]
                    + FAST) == 0
        outs.append((out / "ablation.csv").read_bytes())
    assert outs[0] == outs[1] and len(outs[0].decode().splitlines()) == 2


def test_default_ablation_grid_has_twelve_cells():
    from m3s.experiment import ablation_grid

    cells = ablation_grid()
    assert len(cells) == 12
    assert {tuple(c["scales"]) for c in cells} == {(32,), (64,), (128,), (32, 64), (32, 128), (64, 128)}

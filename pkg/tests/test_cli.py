import json
import warnings

import numpy as np
import pytest
from PIL import Image

from hybridflow.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_OK, flow_to_rgb, main
from hybridflow.events import read_flow

NET = ["--k", "4", "--T", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(["synth", "--scenes", "6", "--res", "16", "--T", "2", "--seed", "3", "-o", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "t"
    args = ["train", "--data", str(dataset), *NET, "--epochs", "1", "--batch-size", "2", "-o", str(out)]
    assert main(args) == EXIT_OK
    return out


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def test_synth_rerun_is_byte_identical(dataset, tmp_path):
    again = tmp_path / "d"
    assert main(["synth", "--scenes", "6", "--res", "16", "--T", "2", "--seed", "3", "-o", str(again)]) == EXIT_OK
    assert _files(again) == _files(dataset)
    assert {"dataset.json", "sample_00000.evt", "sample_00000.flo", "sample_00000_frames.npy"} <= set(_files(dataset))


def test_synth_rejects_zero_resolution(tmp_path):
    assert main(["synth", "--res", "0", "-o", str(tmp_path / "x")]) == EXIT_CONFIG


def test_unknown_family_is_config_error(dataset, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--data", str(dataset), "--family", "lstm", "-o", str(tmp_path)])
    assert e.value.code == EXIT_CONFIG


def test_train_writes_artifacts_and_manifest(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"manifest.json", "model.ckpt", "metrics.csv", "network.json"} <= names
    doc = json.loads((trained / "manifest.json").read_text())
    assert doc["status"] == "ok" and doc["command"] == "train" and doc["seed"] == 0
    assert doc["config"]["spiking"] == "first" and "wall_clock_s" in doc
    assert (trained / "metrics.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,val_aee"


def test_resume_matches_uninterrupted(dataset, tmp_path):
    base = ["train", "--data", str(dataset), *NET, "--batch-size", "2"]
    assert main(base + ["--epochs", "2", "-o", str(tmp_path / "full")]) == EXIT_OK
    assert main(base + ["--epochs", "1", "-o", str(tmp_path / "half")]) == EXIT_OK
    assert main(base + ["--epochs", "2", "--resume", str(tmp_path / "half" / "model.ckpt"),
                        "-o", str(tmp_path / "rest")]) == EXIT_OK
    assert (tmp_path / "rest" / "model.ckpt").read_bytes() == (tmp_path / "full" / "model.ckpt").read_bytes()


def test_divergence_exits_3(dataset, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = main(["train", "--data", str(dataset), *NET, "--epochs", "2", "--batch-size", "2",
                     "--lr", "1e30", "-o", str(tmp_path)])
    assert code == EXIT_DIVERGED
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "diverged"


def test_eval_dumps_flow(trained, dataset, tmp_path):
    assert main(["eval", "--checkpoint", str(trained), "--data", str(dataset), "--split", "all",
                 "--dump-flow", "-o", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "aee.csv").read_text().splitlines()
    assert rows[0] == "sample,aee" and rows[-1].startswith("mean,") and len(rows) == 6 + 2
    per = [float(r.split(",")[1]) for r in rows[1:-1]]
    assert float(rows[-1].split(",")[1]) == pytest.approx(np.mean(per))
    assert read_flow(tmp_path / "flow_00000.flo").shape == (2, 16, 16)
    with Image.open(tmp_path / "flow_00005.png") as im:
        assert im.size == (16, 16) and im.mode == "RGB"


def test_eval_mismatched_dataset_exits_4(trained, tmp_path):
    other = tmp_path / "d3"
    assert main(["synth", "--scenes", "2", "--res", "16", "--T", "3", "-o", str(other)]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(trained), "--data", str(other), "-o", str(tmp_path / "e")]) \
        == EXIT_MISMATCH


def test_eval_corrupt_checkpoint_exits_4(trained, dataset, tmp_path):
    broken = tmp_path / "t"
    broken.mkdir()
    (broken / "network.json").write_bytes((trained / "network.json").read_bytes())
    (broken / "model.ckpt").write_bytes((trained / "model.ckpt").read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(broken), "--data", str(dataset), "-o", str(tmp_path / "e")]) \
        == EXIT_MISMATCH


def test_energy_variants_and_default_table(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["energy", *NET, "--res", "16", "-o", "out"]) == EXIT_OK
    rows = (tmp_path / "out" / "energy.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["full-ann", "full-snn", "hybrid"]
    notes = json.loads((tmp_path / "out" / "manifest.json").read_text())["notes"]
    assert any("built-in default" in n for n in notes)
    assert (tmp_path / "out" / "energy_hybrid.csv").read_text().startswith("layer,compute_pJ")


def test_energy_invalid_table_exits_2(tmp_path):
    table = tmp_path / "t.txt"
    table.write_text("e_mac = -1\n")
    assert main(["energy", *NET, "--res", "16", "--table", str(table), "-o", str(tmp_path / "o")]) == EXIT_CONFIG
    table.write_text("buffer_capacity = 0\n")
    assert main(["energy", *NET, "--res", "16", "--table", str(table), "-o", str(tmp_path / "o")]) == EXIT_CONFIG


def test_ablate_empty_sweep_exits_2(dataset, tmp_path):
    assert main(["ablate", "--data", str(dataset), *NET, "--sweep", " ; ", "-o", str(tmp_path)]) == EXIT_CONFIG


def test_ablate_count_sweep(dataset, tmp_path):
    code = main(["ablate", "--data", str(dataset), "--family", "fireflownet", "--fire-channels", "4", "--T", "2",
                 "--epochs", "1", "--batch-size", "2", "--sweep", "count", "-o", str(tmp_path)])
    assert code == EXIT_OK
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0] == "config,spiking_layers,aee"
    assert [r.split(",")[1] for r in rows[1:]] == ["none", "L1", "L1+L2", "L1+L2+R1", "L1+L2+R1+R2",
                                                    "L1+L2+R1+R2+L3"]


def test_config_file_overrides_flags(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "spiking": "none"}))
    out = tmp_path / "t"
    assert main(["train", "--data", str(dataset), *NET, "--epochs", "1", "--batch-size", "2",
                 "--config", str(cfg), "-o", str(out)]) == EXIT_OK
    assert len((out / "metrics.csv").read_text().splitlines()) == 3
    assert json.loads((out / "network.json").read_text())["spiking"] == []


def test_unknown_config_key_is_rejected(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochz": 2}))
    with pytest.raises(SystemExit) as e:
        main(["train", "--data", str(dataset), "--config", str(cfg), "-o", str(tmp_path)])
    assert e.value.code == EXIT_CONFIG


def test_flow_colours():
    zero = flow_to_rgb(np.zeros((2, 4, 4)))
    assert (zero == 255).all()
    right = flow_to_rgb(np.stack([np.ones((2, 2)), np.zeros((2, 2))]))
    left = flow_to_rgb(np.stack([-np.ones((2, 2)), np.zeros((2, 2))]))
    assert not np.array_equal(right, left)
    assert right.dtype == np.uint8 and right.shape == (2, 2, 3)

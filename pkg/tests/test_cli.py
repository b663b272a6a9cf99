import json

import numpy as np
import pytest

from socprob.cli import run
from socprob.training import load_checkpoint


def test_no_command_is_usage_error(capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["eval", "--grid", "ten"]) == 1


def test_missing_data_dir_is_config_error(monkeypatch, capsys):
    monkeypatch.delenv("SOCPROB_DATA", raising=False)
    assert run(["baseline", "--held-out", "eth"]) == 1
    assert "SOCPROB_DATA" in capsys.readouterr().err


def test_unknown_scene_is_config_error(synthetic_benchmark):
    assert run(["baseline", "--data", str(synthetic_benchmark), "--held-out", "mars"]) == 1


def test_malformed_input_is_data_error(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("0\t1\t2\n")
    assert run(["ingest", str(bad)]) == 2


def test_eval_linear_prints_csv(synthetic_benchmark, capsys):
    assert run(["eval", "--baseline", "linear", "--held-out", "eth", "--data", str(synthetic_benchmark),
                "--quiet"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "scene,ade,fde,k,seed"
    name, a, f, k, seed = out[1].split(",")
    assert name == "eth" and float(a) > 0 and float(f) >= 0 and k == "1" and seed == "0"


def test_baseline_all_scenes_writes_figure_and_manifest(synthetic_benchmark, tmp_path):
    out = tmp_path / "bl.csv"
    assert run(["baseline", "--data", str(synthetic_benchmark), "--held-out", "hotel", "--out", str(out),
                "--quiet"]) == 0
    assert out.read_text().startswith("scene,ade,fde,k,seed\nhotel,")
    assert (tmp_path / "bl.csv.png").stat().st_size > 0
    man = json.loads((tmp_path / "bl.csv.manifest.json").read_text())
    assert man["command"] == "eval" and man["config"]["width"] == 100 and man["seed"] == 0
    assert str(out) in man["outputs"]


def test_ingest_roundtrip(synthetic_benchmark, tmp_path, capsys):
    src = synthetic_benchmark / "zara1.txt"
    out = tmp_path / "z.txt"
    assert run(["ingest", str(src), "--out", str(out), "--quiet"]) == 0
    assert out.read_text() == src.read_text()
    assert capsys.readouterr().out.startswith("scene,pedestrians,points,frame_stride,samples\nzara1,")


def test_encode_outputs(synthetic_benchmark, tmp_path, capsys):
    prefix = tmp_path / "map"
    args = ["encode", "--input", str(synthetic_benchmark / "eth.txt"), "--grid", "30x20", "--out", str(prefix),
            "--quiet"]
    assert run(args) == 0
    vals = np.loadtxt(str(prefix) + ".csv", delimiter=",")
    assert vals.shape == (20, 30) and vals.max() == pytest.approx(1.0, abs=0.5)
    assert (tmp_path / "map.pgm").read_text().startswith("P2\n30 20\n65535\n")
    assert (tmp_path / "map.png").exists()
    assert run(args[:-1] + ["--no-integration", "--out", str(tmp_path / "solo"), "--quiet"]) == 0
    assert np.all(np.loadtxt(tmp_path / "solo.csv", delimiter=",") <= vals)


def test_train_eval_export_predict(synthetic_benchmark, tmp_path, capsys):
    data = ["--data", str(synthetic_benchmark)]
    ck = tmp_path / "m.sprb"
    assert run(["train", *data, "--held-out", "eth", "--grid", "12x12", "--channels", "2", "--epochs", "1",
                "--max-samples", "3", "--out", str(ck), "--quiet"]) == 0
    loaded = load_checkpoint(ck)
    assert loaded.config.width == 12 and loaded.epoch == 1
    assert (tmp_path / "m.sprb.loss.csv").read_text().startswith("epoch,mean_loss\n1,")
    assert (tmp_path / "m.sprb.loss.png").exists()
    assert (tmp_path / "m.sprb.manifest.json").exists()

    # resume to epoch 2 from the saved file
    ck2 = tmp_path / "m2.sprb"
    assert run(["train", *data, "--held-out", "eth", "--grid", "12x12", "--channels", "2", "--epochs", "2",
                "--max-samples", "3", "--checkpoint", str(ck), "--resume", "--out", str(ck2), "--quiet"]) == 0
    assert load_checkpoint(ck2).epoch == 2

    capsys.readouterr()
    assert run(["eval", *data, "--held-out", "eth", "--checkpoint", str(ck), "--k", "2", "--max-samples", "2",
                "--quiet"]) == 0
    row = capsys.readouterr().out.splitlines()[1].split(",")
    assert row[0] == "eth" and row[3] == "2" and np.isfinite(float(row[1]))

    ov = tmp_path / "ov.csv"
    assert run(["export", *data, "--held-out", "eth", "--checkpoint", str(ck), "--max-samples", "2",
                "--out", str(ov), "--quiet"]) == 0
    lines = ov.read_text().splitlines()
    assert lines[0] == "ped_id,step,kind,x,y" and len(lines) == 1 + 2 * 32
    assert (tmp_path / "ov.csv.0.png").exists()

    pr = tmp_path / "pred.csv"
    assert run(["predict", *data, "--held-out", "eth", "--checkpoint", str(ck), "--max-samples", "1", "--k", "2",
                "--out", str(pr), "--quiet"]) == 0
    kinds = [l.split(",")[2] for l in pr.read_text().splitlines()[1:]]
    assert kinds.count("pred") == 12 * 3 and kinds.count("obs") == 8

    # checkpoint grid disagrees with --grid on resume
    assert run(["train", *data, "--held-out", "eth", "--grid", "14x14", "--channels", "2", "--epochs", "2",
                "--checkpoint", str(ck), "--resume", "--out", str(tmp_path / "x.sprb"), "--quiet"]) == 2


def test_corrupt_checkpoint_is_data_error(synthetic_benchmark, tmp_path):
    bad = tmp_path / "bad.sprb"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    assert run(["eval", "--data", str(synthetic_benchmark), "--held-out", "eth", "--checkpoint", str(bad),
                "--quiet"]) == 2


def test_config_file_precedence(synthetic_benchmark, tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("obs_len=6\npred_len=4\n")
    out = tmp_path / "o.csv"
    assert run(["baseline", "--data", str(synthetic_benchmark), "--held-out", "eth", "--config", str(conf),
                "--pred-len", "5", "--out", str(out), "--quiet"]) == 0
    man = json.loads((tmp_path / "o.csv.manifest.json").read_text())
    assert man["config"]["obs_len"] == 6 and man["config"]["pred_len"] == 5


def test_sampling_sweep(synthetic_benchmark, tmp_path):
    out = tmp_path / "sweep.csv"
    assert run(["eval", "--sweep", "sampling", "--data", str(synthetic_benchmark), "--held-out", "zara1",
                "--k", "4", "--max-samples", "5", "--out", str(out), "--quiet"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("size,cell_size,mean_point_error")
    assert (tmp_path / "sweep.csv.png").exists()


def test_ablation_needs_checkpoints(synthetic_benchmark):
    assert run(["eval", "--sweep", "integration", "--data", str(synthetic_benchmark), "--held-out", "eth",
                "--quiet"]) == 1


def test_gradcheck_tiny(capsys):
    assert run(["gradcheck", "--tiny"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].startswith("max_relative_error,")
    assert float(out[-1].split(",")[1]) < 1e-4

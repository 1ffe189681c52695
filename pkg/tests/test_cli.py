import json

import numpy as np
import pytest

from nowcast import nclt
from nowcast.cli import RunManifest, build_parser, main, resolve_threads

MNIST_CFG = {"counts": [12, 4, 4], "canvas": 16, "frames": 6, "n_input": 3, "digits": 1, "digit_size": 8,
             "speed": [1.0, 2.0]}
TRAIN_CFG = {"model": {"frame_height": 16, "frame_width": 16, "patch_size": 2, "hidden": [3],
                       "input_kernel": 3, "state_kernel": 3},
             "schedule": {"epochs": 2, "batch": 4, "lr": 0.01}}
RADAR_CFG = {"synthetic": {"days": 1, "height": 32, "width": 32, "clutter_pixels": 2},
             "pipeline": {"crop": None, "disk_radius": None, "size": None}}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def mnist_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("mn")
    assert run("generate-mnist", "--out", root / "data", "--config", write_json(root / "c.json", MNIST_CFG),
               "--threads", 1) == 0
    return root / "data"


@pytest.fixture(scope="module")
def radar_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("rd")
    assert run("preprocess-radar", "--synthetic", "--out", root / "data", "--seed", 3,
               "--config", write_json(root / "c.json", RADAR_CFG)) == 0
    return root / "data"


def subcommands():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices


def test_help_lists_every_flag(capsys):
    cmds = subcommands()
    assert set(cmds) == {"generate-mnist", "preprocess-radar", "train", "predict", "baseline-rover", "evaluate"}
    for name, sub in cmds.items():
        with pytest.raises(SystemExit) as exc:
            main([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_missing_input_is_usage_error(tmp_path, capsys):
    assert run("evaluate", "--pred", tmp_path / "nope.nclt", "--truth", tmp_path / "x", "--out", tmp_path / "o") == 2
    assert "does not exist" in capsys.readouterr().err
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "o2") == 2
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_even_kernel_rejected_before_work(tmp_path, mnist_dir):
    cfg = json.loads(json.dumps(TRAIN_CFG))
    cfg["model"]["state_kernel"] = 4
    out = tmp_path / "run"
    assert run("train", "--config", write_json(tmp_path / "t.json", cfg), "--data", mnist_dir, "--out", out) == 2
    assert not out.exists()


def test_non_empty_output_dir_refused(tmp_path, mnist_dir):
    out = tmp_path / "run"
    out.mkdir()
    (out / "junk").write_text("x")
    assert run("train", "--config", write_json(tmp_path / "t.json", TRAIN_CFG), "--data", mnist_dir, "--out", out) == 2


def test_threads_env_override(monkeypatch):
    monkeypatch.setenv("NCLT_THREADS", "3")
    assert resolve_threads(7) == 3
    monkeypatch.delenv("NCLT_THREADS")
    assert resolve_threads(7) == 7 and resolve_threads(None) >= 1


def test_generate_is_deterministic(tmp_path, mnist_dir):
    cfg = write_json(tmp_path / "c.json", MNIST_CFG)
    assert run("generate-mnist", "--out", tmp_path / "again", "--config", cfg, "--threads", 4) == 0
    a = RunManifest.read(mnist_dir / "manifest.json")
    b = RunManifest.read(tmp_path / "again" / "manifest.json")
    assert a.outputs == b.outputs and set(a.outputs) >= {"train.nclt", "val.nclt", "test.nclt", "dataset.json"}


def test_train_resume_predict(tmp_path, mnist_dir):
    cfg = write_json(tmp_path / "t.json", TRAIN_CFG)
    assert run("train", "--config", cfg, "--data", mnist_dir, "--out", tmp_path / "a") == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["final_iteration"] == 6
    for f in ("best.ckpt", "last.ckpt", "train_loss.csv", "val_loss.csv", "loss.png", "manifest.json"):
        assert (tmp_path / "a" / f).exists()
    assert run("train", "--config", cfg, "--data", mnist_dir, "--out", tmp_path / "b",
               "--resume", tmp_path / "a" / "last.ckpt") == 0
    lines = (tmp_path / "b" / "train_loss.csv").read_text().splitlines()
    assert lines[1].startswith("7,") and lines[-1].startswith("12,")

    assert run("train", "--config", cfg, "--data", mnist_dir, "--out", tmp_path / "a2") == 0
    same = RunManifest.read(tmp_path / "a" / "manifest.json").outputs
    assert same == RunManifest.read(tmp_path / "a2" / "manifest.json").outputs

    test_store = mnist_dir / "test.nclt"
    for d in ("p1", "p2"):
        assert run("predict", "--checkpoint", tmp_path / "a" / "best.ckpt", "--input", test_store,
                   "--out", tmp_path / d, "--grids", 1) == 0
    pred = nclt.read_tensor(tmp_path / "p1" / "predictions.nclt")
    assert pred.shape == (4, 3, 1, 16, 16) and pred.min() > 0 and pred.max() < 1
    assert (tmp_path / "p1" / "predictions.nclt").read_bytes() == (tmp_path / "p2" / "predictions.nclt").read_bytes()
    assert (tmp_path / "p1" / "sequence_000.png").exists()


def test_predict_shape_mismatch_reports_both(tmp_path, mnist_dir, radar_dir, capsys):
    cfg = write_json(tmp_path / "t.json", TRAIN_CFG)
    assert run("train", "--config", cfg, "--data", mnist_dir, "--out", tmp_path / "a") == 0
    code = run("predict", "--checkpoint", tmp_path / "a" / "best.ckpt", "--input", radar_dir / "test.nclt",
               "--out", tmp_path / "p")
    err = capsys.readouterr().err
    assert code == 2 and "(1, 32, 32)" in err and "(1, 16, 16)" in err


def test_rover_then_evaluate_gives_fifteen_rows(tmp_path, radar_dir):
    params = write_json(tmp_path / "flow.json", {"L_max": 3})
    for d in ("r1", "r2"):
        assert run("baseline-rover", "--scheme", 2, "--steps", 15, "--params", params,
                   "--input", radar_dir / "test.nclt", "--out", tmp_path / d, "--limit", 3) == 0
    assert (tmp_path / "r1" / "predictions.nclt").read_bytes() == (tmp_path / "r2" / "predictions.nclt").read_bytes()
    assert run("evaluate", "--pred", tmp_path / "r1" / "predictions.nclt", "--truth", radar_dir / "test.nclt",
               "--out", tmp_path / "ev") == 0
    lines = (tmp_path / "ev" / "report.csv").read_text().splitlines()
    assert lines[0] == "step,rainfall_mse,csi,far,pod,correlation"
    assert len(lines) == 1 + 15 + 1
    assert (tmp_path / "ev" / "metrics.png").stat().st_size > 0
    assert run("evaluate", "--pred", tmp_path / "r1" / "predictions.nclt", "--truth", radar_dir / "test.nclt",
               "--out", tmp_path / "ev2") == 0
    a = RunManifest.read(tmp_path / "ev" / "manifest.json").outputs
    assert a == RunManifest.read(tmp_path / "ev2" / "manifest.json").outputs


def test_rover_rejects_bad_params(tmp_path, radar_dir):
    params = write_json(tmp_path / "flow.json", {"alpha": -1})
    assert run("baseline-rover", "--params", params, "--input", radar_dir / "test.nclt", "--out", tmp_path / "r") == 2


def test_preprocess_radar_from_directory(tmp_path):
    days = tmp_path / "days"
    days.mkdir()
    rng = np.random.default_rng(0)
    for d in range(2):
        nclt.write_tensor(days / f"day{d}.nclt", rng.uniform(0, 60, size=(240, 24, 24)))
    cfg = write_json(tmp_path / "c.json", {"pipeline": {"crop": 20, "disk_radius": 2, "size": [10, 10]}})
    assert run("preprocess-radar", "--in", days, "--out", tmp_path / "o", "--config", cfg, "--seed", 1) == 0
    meta = json.loads((tmp_path / "o" / "dataset.json").read_text())
    assert meta["counts"] == {"train": 168, "test": 42, "val": 42}
    assert nclt.open_tensor(tmp_path / "o" / "val.nclt").shape == (42, 20, 1, 10, 10)
    manifest = RunManifest.read(tmp_path / "o" / "manifest.json")
    assert len(manifest.inputs) == 2


def test_generate_flags_override_config(tmp_path):
    cfg = write_json(tmp_path / "c.json", MNIST_CFG)
    assert run("generate-mnist", "--out", tmp_path / "o", "--config", cfg, "--digits", 2, "--counts", "3,2,1") == 0
    meta = json.loads((tmp_path / "o" / "dataset.json").read_text())
    assert nclt.open_tensor(tmp_path / "o" / "train.nclt").shape[0] == 3
    assert meta["config"]["digits"] == 2 and meta["config"]["counts"] == [3, 2, 1]
    assert run("generate-mnist", "--out", tmp_path / "bad", "--config", cfg, "--counts", "3,2") == 2

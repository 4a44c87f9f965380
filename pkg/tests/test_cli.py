import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from ngpsr.cli import build_config, main, parse_settings
from ngpsr.data import load_scene, read_image
from ngpsr.evaluate import ABLATION_COLUMNS, METRIC_COLUMNS
from ngpsr.trainer import load_checkpoint

QUICK = ["--set", "steps=4", "--set", "batch_size=64"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--hr-size", "16", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["--deterministic", "train", str(scene_dir), *QUICK, "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------- config


def test_settings_parse_types_and_comments():
    values = parse_settings(["# comment", "", "lr = 0.01", "steps=5  # trailing", "raw_weights = true"], "f")
    assert values == {"lr": 0.01, "steps": 5, "raw_weights": True}


@pytest.mark.parametrize("line, match", [("lrate = 1", "unknown config key"), ("steps = many", "cannot parse"),
                                         ("steps", "key = value")])
def test_settings_errors(line, match):
    with pytest.raises(ValueError, match=match):
        parse_settings([line], "f")


def test_set_overrides_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("steps = 10\nseed = 3\n")
    config = build_config(str(path), ["steps=2"])
    assert (config.steps, config.seed) == (2, 3)


def test_unknown_key_exits_with_validation_code(scene_dir, tmp_path, capsys):
    assert main(["train", str(scene_dir), "--set", "bogus=1", "--out", str(tmp_path)]) == 1
    assert "bogus" in capsys.readouterr().err


# -------------------------------------------------------------------- synth


def test_synth_writes_blender_layout(scene_dir):
    assert (scene_dir / "transforms_train.json").exists()
    assert (scene_dir / "transforms_test.json").exists()
    assert (scene_dir / "test" / "r_0.png").exists()
    ds = load_scene(scene_dir, scale=2)
    assert len(ds.views) == 8 and ds.views[0].lr_image.shape == (8, 8, 3)


def test_synth_rerun_is_byte_identical(scene_dir, tmp_path):
    assert main(["synth", "--hr-size", "16", "--out", str(tmp_path)]) == 0
    for path in scene_dir.rglob("*"):
        if path.is_file():
            assert path.read_bytes() == (tmp_path / path.relative_to(scene_dir)).read_bytes()


def test_synth_to_unwritable_location(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--hr-size", "16", "--out", str(blocker / "scene")]) == 1


# -------------------------------------------------------------------- train


def test_train_outputs(run_dir, scene_dir, capsys):
    assert (run_dir / "checkpoint.ngps").read_bytes()[:4] == b"NGPS"
    assert len(read_csv(run_dir / "loss.csv")) == 5
    assert (run_dir / "loss.png").stat().st_size > 0


def test_train_prints_summary(scene_dir, tmp_path, capsys):
    assert main(["train", str(scene_dir), *QUICK, "--ablation", "no_gcnn", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "parameters: 399487" in out
    assert "steps/sec" in out and "final loss" in out


def test_deterministic_training_is_idempotent(run_dir, scene_dir, tmp_path):
    assert main(["--deterministic", "train", str(scene_dir), *QUICK, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint.ngps").read_bytes() == (run_dir / "checkpoint.ngps").read_bytes()
    assert (tmp_path / "loss.csv").read_bytes() == (run_dir / "loss.csv").read_bytes()


def test_non_finite_training_exits_with_numeric_code(scene_dir, tmp_path, capsys):
    assert main(["train", str(scene_dir), "--set", "lr=1e38", *QUICK, "--out", str(tmp_path)]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_cross_scene_training(scene_dir, tmp_path):
    other = tmp_path / "other"
    assert main(["synth", "--seed", "1", "--hr-size", "16", "--out", str(other)]) == 0
    assert main(["train", str(scene_dir), str(other), *QUICK, "--out", str(tmp_path / "run")]) == 0


def test_scale_mismatch_names_both(tmp_path, capsys):
    assert main(["synth", "--hr-size", "16", "--scale", "4", "--out", str(tmp_path / "s4")]) == 0
    assert main(["train", str(tmp_path / "s4"), *QUICK, "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "x4" in err and "x2" in err


# ------------------------------------------------------------------- render


def test_render_dimensions_and_repeatability(run_dir, scene_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["render", str(run_dir / "checkpoint.ngps"), str(scene_dir), "--out", str(tmp_path / name)]) == 0
    img = read_image(tmp_path / "a" / "test_000.png")
    assert img.shape == (16, 16, 3)
    assert (tmp_path / "a" / "test_000.png").read_bytes() == (tmp_path / "b" / "test_000.png").read_bytes()


def test_render_train_split(run_dir, scene_dir, tmp_path):
    assert main(["render", str(run_dir / "checkpoint.ngps"), str(scene_dir), "--split", "train",
                 "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("*.png")) == [f"train_{j:03d}.png" for j in range(7)]


def test_render_rejects_mismatched_scene(run_dir, tmp_path, capsys):
    assert main(["synth", "--hr-size", "16", "--scale", "4", "--out", str(tmp_path / "s4")]) == 0
    assert main(["render", str(run_dir / "checkpoint.ngps"), str(tmp_path / "s4"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "s4" in err and "checkpoint.ngps" in err


def test_render_rejects_corrupt_checkpoint(scene_dir, tmp_path, capsys):
    bad = tmp_path / "bad.ngps"
    bad.write_bytes(b"NGPS\x01\x00")
    assert main(["render", str(bad), str(scene_dir), "--out", str(tmp_path)]) == 1
    assert "truncated" in capsys.readouterr().err


# --------------------------------------------------------------------- eval


def test_eval_ground_truth_hits_the_cap(scene_dir, tmp_path):
    renders = tmp_path / "gt"
    renders.mkdir()
    shutil.copy(scene_dir / "test" / "r_0.png", renders / "test_000.png")
    assert main(["eval", str(renders), str(scene_dir)]) == 0
    rows = read_csv(renders / "metrics.csv")
    assert rows[0] == METRIC_COLUMNS
    assert float(rows[1][1]) == 99.0 and float(rows[1][2]) == 1.0
    assert (renders / "metrics.png").exists() and (renders / "comparison.png").exists()


def test_eval_table_and_bicubic_column(run_dir, scene_dir, tmp_path):
    renders = tmp_path / "r"
    assert main(["render", str(run_dir / "checkpoint.ngps"), str(scene_dir), "--split", "train",
                 "--out", str(renders)]) == 0
    assert main(["eval", str(renders), str(scene_dir), "--split", "train", "--out", str(tmp_path / "a")]) == 0
    assert main(["eval", str(renders), str(scene_dir), "--split", "train", "--out", str(tmp_path / "b")]) == 0
    a = read_csv(tmp_path / "a" / "metrics.csv")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    body, mean = a[1:-1], a[-1]
    assert [r[0] for r in body] == [f"train_{j:03d}.png" for j in range(7)]
    assert mean[0] == "mean"
    for col in range(1, 5):
        assert float(mean[col]) == pytest.approx(np.mean([float(r[col]) for r in body]), abs=1e-5)


def test_eval_lists_missing_renders(scene_dir, tmp_path, capsys):
    assert main(["eval", str(tmp_path), str(scene_dir), "--split", "train"]) == 1
    err = capsys.readouterr().err
    assert "train_000.png" in err and "train_006.png" in err


# ------------------------------------------------------------------- ablate


def test_ablate_table(scene_dir, tmp_path, capsys):
    assert main(["ablate", str(scene_dir), *QUICK, "--seed", "7", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert rows[0] == ABLATION_COLUMNS
    assert [r[0] for r in rows[1:]] == ["w/o G_cam", "w/o G_CNN", "w/o G_fuse", "full"]
    assert {r[3] for r in rows[1:]} == {"n/a"}
    assert {(r[6], r[7]) for r in rows[1:]} == {("7", "4")}
    assert (tmp_path / "ablation.png").exists()
    assert "w/o G_CNN" in capsys.readouterr().out


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_report(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    for op in ("linear", "conv2d", "softmax", "take_rows", "end-to-end"):
        assert op in out
    assert "hash.table" in out and "gcnn.2.weight" in out and "decode.1.bias" in out
    assert "gradcheck passed" in out


def test_gradcheck_is_deterministic(capsys):
    main(["gradcheck", "--seed", "2"])
    first = capsys.readouterr().out
    main(["gradcheck", "--seed", "2"])
    assert capsys.readouterr().out == first


def test_module_entry_point(scene_dir):
    proc = subprocess.run([sys.executable, "-m", "ngpsr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout


def test_synth_transforms_record_scale(scene_dir):
    meta = json.loads((scene_dir / "transforms_test.json").read_text())
    assert meta["scale"] == 2 and len(meta["frames"]) == 1


def test_raw_weights_flag_reaches_the_checkpoint(scene_dir, tmp_path):
    assert main(["train", str(scene_dir), *QUICK, "--raw-weights", "--out", str(tmp_path)]) == 0
    assert load_checkpoint(tmp_path / "checkpoint.ngps").config.raw_weights is True

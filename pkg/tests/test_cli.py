import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from medirl.cli import EXIT_CODES, find_manifests, main
from medirl.features import load_scene
from medirl.ften import read_tensor
from medirl.metrics import evaluate_frame
from medirl.rewardnet import NetConfig, init_params, load_checkpoint
from medirl.scanpath import fixations_to_map

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
BUNDLED = str(CONFIGS / "synthetic.json")


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def ok(argv):
    assert main(argv) == 0, argv


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "data"
    ok(["synth", "--config", BUNDLED, "--out", str(out)])
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    """The bundled configuration trained for its default 36 epochs."""
    out = tmp_path_factory.mktemp("train") / "run"
    ok(["train", "--config", BUNDLED, "--data", str(dataset), "--out", str(out)])
    return out


# --- synth ------------------------------------------------------------------

def test_synth_twice_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        ok(["synth", "--seed", "7", "--scenes", "4", "--frames", "6", "--no-figures",
            "--out", str(tmp_path / d)])
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a and a == b


def test_synth_zero_scenes_is_a_config_error(tmp_path, capsys):
    assert main(["synth", "--scenes", "0", "--out", str(tmp_path / "x")]) == EXIT_CODES["config"]
    assert capsys.readouterr().err.startswith("error: config: ")
    assert not (tmp_path / "x").exists()


def test_synth_manifests_reload(dataset):
    manifests = find_manifests(dataset)
    assert len(manifests) == 4
    for m in manifests:
        scene = load_scene(m)
        assert scene.num_frames == 6 and scene.frame_shape == (72, 136)
        assert len(scene.ground_truth_fixations) == 5
        planted = read_tensor(m.parent / "planted_reward.ften")
        assert planted.shape == (6 * 3 - 1, 6, 8)  # one map per decision of the first demo


def test_synth_writes_planted_checkpoint(dataset):
    params, _, meta = load_checkpoint(dataset / "planted")
    assert params.config.input_dim == 11
    assert meta["weights"]["U"] > 0


# --- train ------------------------------------------------------------------

def test_bundled_train_writes_36_history_rows(trained):
    lines = (trained / "history.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,nll")
    assert len(lines) == 1 + 36
    assert (trained / "figures" / "training_curve.png").read_bytes()[:4] == b"\x89PNG"
    report = json.loads((trained / "train_report.json").read_text())
    assert report["gates"]["scenes"] == 4 and report["epochs"] == 36


def test_zero_epochs_writes_the_initialization(dataset, tmp_path):
    ok(["train", "--config", BUNDLED, "--data", str(dataset), "--epochs", "0", "--seed", "3",
        "--out", str(tmp_path)])
    params, _, meta = load_checkpoint(tmp_path / "checkpoint")
    assert params.equals(init_params(NetConfig(11), 3))
    assert meta["epoch"] == 0
    assert (tmp_path / "history.csv").read_text().strip() == "epoch,nll,grad_norm,lr,seconds"


def test_missing_manifest_is_named(dataset, tmp_path, capsys):
    broken = tmp_path / "broken"
    broken.mkdir()
    index = json.loads((dataset / "dataset.json").read_text())
    index["scenes"] = [str(dataset / index["scenes"][0]), "nowhere/manifest.json"]
    (broken / "dataset.json").write_text(json.dumps(index))
    code = main(["train", "--config", BUNDLED, "--data", str(broken), "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["data"]
    assert "nowhere/manifest.json" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_CODES["data"]


def test_gates_can_empty_the_dataset(dataset, tmp_path, capsys):
    # six-frame clips never hold a window that passes the default KL gate
    code = main(["train", "--data", str(dataset), "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["data"]
    err = capsys.readouterr().err
    assert "scenes_without_windows=4" in err
    assert not (tmp_path / "o").exists()


# --- eval -------------------------------------------------------------------

def test_eval_is_deterministic(dataset, trained, tmp_path):
    for d in ("a", "b"):
        ok(["eval", "--config", BUNDLED, "--data", str(dataset), "--checkpoint", str(trained / "checkpoint"),
            "--out", str(tmp_path / d)])
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    report = json.loads(a["metrics.json"])
    assert report["counts"]["frames"] == 24
    assert 0.5 < report["aggregate"]["sauc"] <= 1
    assert "figures/metrics.png" in a


def test_eval_rejects_a_grid_mismatch_before_writing(dataset, trained, tmp_path, capsys):
    cfg = json.loads(Path(BUNDLED).read_text())
    cfg["grid"] = {"frame_h": 72, "frame_w": 136, "patch_h": 24, "patch_w": 34}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    code = main(["eval", "--config", str(path), "--data", str(dataset), "--checkpoint",
                 str(trained / "checkpoint"), "--out", str(out)])
    assert code == EXIT_CODES["validation"]
    assert "grid" in capsys.readouterr().err
    assert not out.exists()


def test_eval_rejects_frames_of_the_wrong_size(dataset, trained, tmp_path):
    cfg = json.loads(Path(BUNDLED).read_text())
    cfg["grid"] = {"frame_h": 144, "frame_w": 256, "patch_h": 12, "patch_w": 17}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    code = main(["eval", "--config", str(path), "--data", str(dataset), "--checkpoint",
                 str(trained / "checkpoint"), "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["validation"]
    assert not (tmp_path / "o").exists()


def test_eval_rejects_a_feature_mismatch(dataset, trained, tmp_path):
    ckpt = tmp_path / "ckpt"
    ckpt.mkdir()
    for f in (trained / "checkpoint").iterdir():
        (ckpt / f.name).write_bytes(f.read_bytes())
    meta = json.loads((ckpt / "checkpoint.json").read_text())
    meta["toggles_off"] = ["M"]
    (ckpt / "checkpoint.json").write_text(json.dumps(meta))
    code = main(["eval", "--data", str(dataset), "--checkpoint", str(ckpt), "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["validation"]


def test_eval_needs_a_checkpoint(dataset, tmp_path):
    assert main(["eval", "--data", str(dataset), "--out", str(tmp_path / "o")]) == EXIT_CODES["data"]


def test_ground_truth_against_itself(dataset):
    scene = load_scene(find_manifests(dataset)[0])
    pts = [p for d in scene.ground_truth_fixations for p in d.points if p.frame_index == 0]
    gt = fixations_to_map(pts, scene.frame_shape, 12.0)
    far = [(0, 0), (71, 135), (0, 135)]
    m = evaluate_frame(gt, gt, pts, far, scene.video_id, 0)
    assert abs(m.kld) < 1e-9 and abs(m.cc - 1) < 1e-9


# --- rollout ----------------------------------------------------------------

@pytest.mark.parametrize("mode", ["sample", "argmax"])
def test_rollout_outputs_and_determinism(dataset, trained, tmp_path, mode):
    for d in ("a", "b"):
        ok(["rollout", "--config", BUNDLED, "--data", str(dataset), "--checkpoint", str(trained / "checkpoint"),
            "--mode", mode, "--no-figures", "--out", str(tmp_path / d)])
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    csvs = [k for k in a if k.startswith("scanpaths/")]
    assert len(csvs) == 4
    rows = a[csvs[0]].decode().splitlines()
    assert rows[0] == "frame_index,step,row,col,prob"
    assert len(rows) == 1 + 6 * 3
    pgm = a["saliency/synth-0-000/frame000.pgm"]
    assert pgm.startswith(b"P5\n136 72\n255\n") and len(pgm) == len(b"P5\n136 72\n255\n") + 72 * 136
    sal = read_tensor(tmp_path / "a" / "saliency" / "synth-0-000" / "frame000.ften")
    assert sal.shape == (72, 136) and np.isclose(sal.sum(), 1.0)


def test_argmax_rollout_avoids_recent_patches(dataset, trained, tmp_path):
    ok(["rollout", "--config", BUNDLED, "--data", str(dataset), "--checkpoint", str(trained / "checkpoint"),
        "--mode", "argmax", "--no-figures", "--out", str(tmp_path)])
    for csv in (tmp_path / "scanpaths").iterdir():
        rows = [tuple(r.split(",")) for r in csv.read_text().splitlines()[1:]]
        for t in range(6):
            cells = [(r[2], r[3]) for r in rows if int(r[0]) == t]
            assert len(cells) == len(set(cells))


# --- entry point -------------------------------------------------------------

def test_module_entry_point_reports_a_category(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "medirl.cli", "synth", "--config", str(tmp_path / "missing.json")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CODES["config"]
    line = proc.stderr.strip()
    assert "\n" not in line and line.startswith("error: config: ")


def test_unknown_toggle_flag(tmp_path):
    assert main(["synth", "--toggle-off", "W", "--out", str(tmp_path / "o")]) == EXIT_CODES["config"]


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("medirl ")

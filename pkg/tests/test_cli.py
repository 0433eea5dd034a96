import json

import numpy as np
import pytest

from reposer import cli
from reposer.datagen import load_png, read_manifest, write_manifest
from reposer.train import TrainingFault
from reposer.warp import read_flow


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({"k": 8, "warp_width": 8, "batch_warp": 8, "batch_gen": 8,
                                "epochs_warp": 1, "epochs_gen": 1, "epochs_e2e": 1}))
    return path


@pytest.fixture(scope="module")
def trained(tiny_dataset, small_cfg, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(small_cfg), "--data", str(tiny_dataset), "--out", str(run)]) == 0
    return run


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--out", "x", "--epochs", "1,2"])
    assert e.value.code == 1
    assert cli.main(["eval", "--data", "nowhere"]) == 1  # missing --checkpoint


def test_datagen(tmp_path, capsys):
    assert cli.main(["datagen", "--classes", "vase", "shoe", "--pairs", "10", "--res", "32", "--seed", "1",
                     "--models-per-class", "4", "--out", str(tmp_path)]) == 0
    man = read_manifest(tmp_path)
    assert len(man.records) == 10 and man.resolution == 32
    assert "10 pairs" in capsys.readouterr().out


def test_match_writes_k_pairs_and_picture(tiny_dataset, tmp_path):
    assert cli.main(["match", "--data", str(tiny_dataset), "--sample", "3", "--k", "35", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "keypoints.json").read_text())
    assert doc["k"] == 35 and len(doc["points_a"]) == 35 and len(doc["points_p"]) == 35
    img = load_png(tmp_path / "matches.png")
    assert img.shape[2] == 2 * img.shape[1]


def test_match_on_image_files(tiny_dataset, tmp_path):
    imgs = sorted((tiny_dataset / "images").glob("*_appearance.png"))[:1] + \
        sorted((tiny_dataset / "images").glob("*_pose.png"))[:1]
    assert cli.main(["match", "--appearance", str(imgs[0]), "--pose", str(imgs[1]), "--k", "5",
                     "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "keypoints.json").read_text())["k"] == 5
    assert cli.main(["match", "--appearance", str(imgs[0]), "--out", str(tmp_path)]) == 1


def test_train_outputs(trained):
    for name in ("warp.pt", "gen.pt", "e2e.pt", "train_log.csv", "config.json"):
        assert (trained / name).exists()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["res"] == 32 and cfg["k"] == 8


def test_infer_writes_image_at_input_resolution(tiny_dataset, trained, tmp_path):
    a = tiny_dataset / "images" / "00000_appearance.png"
    p = tiny_dataset / "images" / "00000_pose.png"
    assert cli.main(["infer", "--checkpoint", str(trained / "e2e.pt"), "--appearance", str(a), "--pose", str(p),
                     "--out", str(tmp_path), "--dump-flow"]) == 0
    gen = load_png(tmp_path / "generated.png")
    assert gen.shape == (3, 32, 32)
    assert read_flow(tmp_path / "flow.flo").shape == (2, 32, 32)


def test_infer_resolution_mismatch_is_data_error(trained, tmp_path, capsys):
    from reposer.datagen import save_png
    save_png(tmp_path / "big.png", np.zeros((3, 64, 64)))
    code = cli.main(["infer", "--checkpoint", str(trained / "e2e.pt"), "--appearance", str(tmp_path / "big.png"),
                     "--pose", str(tmp_path / "big.png"), "--out", str(tmp_path)])
    assert code == 2 and "expects 32" in capsys.readouterr().err


def test_eval_report_and_grids(tiny_dataset, trained, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(trained / "e2e.pt"), "--data", str(tiny_dataset),
                     "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["methods"]) == {"TPS", "WARP", "OURS"}
    assert "All together" in report["methods"]["OURS"]
    assert report["backend"] and report["note"]
    grids = sorted((tmp_path / "grids").glob("*.png"))
    assert len(grids) == report["n_samples"] == 2
    assert load_png(grids[0]).shape == (3, 32, 5 * 32)


def test_eval_deterministic(tiny_dataset, trained, tmp_path):
    for d in ("a", "b"):
        cli.main(["eval", "--checkpoint", str(trained / "e2e.pt"), "--data", str(tiny_dataset),
                  "--out", str(tmp_path / d), "--no-grids"])
    assert (tmp_path / "a" / "report.json").read_text() == (tmp_path / "b" / "report.json").read_text()


def test_eval_empty_manifest(trained, tmp_path, capsys):
    write_manifest([], tmp_path / "empty")
    code = cli.main(["eval", "--checkpoint", str(trained / "e2e.pt"), "--data", str(tmp_path / "empty")])
    assert code == 2 and "empty dataset" in capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "run")]) == 2


def test_training_fault_exit_3(tiny_dataset, small_cfg, tmp_path, monkeypatch):
    def boom(self, skip_e2e=False):
        raise TrainingFault("non-finite warp loss at step 3", "ckpt.pt")

    monkeypatch.setattr(cli.Trainer, "run", boom)
    assert cli.main(["train", "--config", str(small_cfg), "--data", str(tiny_dataset), "--out", str(tmp_path)]) == 3


def test_ablation_report(tiny_dataset, small_cfg, tmp_path):
    assert cli.main(["ablate", "--config", str(small_cfg), "--data", str(tiny_dataset), "--k", "4", "8",
                     "--ablate-pose-input", "--skip-e2e", "--strips", "2", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "ablation.json").read_text())
    labels = [r["method"] for r in doc["rows"]]
    assert labels == ["4 keypoints", "8 keypoints", "Without I_p", "Without End-to-End"]
    for row in doc["rows"]:
        assert {"ssim", "lpips", "fid"} <= set(row)
    strips = sorted((tmp_path / "strips").glob("*.png"))
    assert len(strips) == 2
    assert load_png(strips[0]).shape == (3, 32, 32 * (2 + 4 + 1))

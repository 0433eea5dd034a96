import csv
import json

import numpy as np
import pytest
import torch

from reposer import losses
from reposer.train import (TrainConfig, Trainer, TrainingFault, heldout_scores, load_checkpoint, param_hash,
                           save_checkpoint)


def small_config(data, **kw):
    base = dict(data=str(data), res=32, k=8, epochs_warp=1, epochs_gen=1, epochs_e2e=1, batch_warp=8,
                batch_gen=8, warp_width=8)
    base.update(kw)
    return TrainConfig(**base)


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(data="x", lr=3e-4, k=15)
    cfg.weights.beta3 = 50.0
    cfg.save(tmp_path / "c.json")
    back = TrainConfig.load(tmp_path / "c.json")
    assert back == cfg
    flat = json.loads((tmp_path / "c.json").read_text())
    assert flat["beta3"] == 50.0 and "weights" not in flat
    assert TrainConfig.load(tmp_path / "c.json", k=35).k == 35
    flat["bogus"] = 1
    (tmp_path / "c.json").write_text(json.dumps(flat))
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.load(tmp_path / "c.json")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(res=60)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    assert TrainConfig(res=64).heat_sigma == 2.0


def test_zero_epochs_returns_init_checkpoint(tiny_dataset, tmp_path):
    cfg = small_config(tiny_dataset, epochs_warp=0)
    t = Trainer(cfg, tiny_dataset, tmp_path)
    before = param_hash(t.pipe.flownet)
    ckpt = t.train_warp()
    assert ckpt["epoch"] == -1 and ckpt["step"] == 0
    assert param_hash(t.pipe.flownet) == before
    assert (tmp_path / "warp.pt").exists()


def test_freeze_then_finetune_contract(tiny_dataset, tmp_path):
    t = Trainer(small_config(tiny_dataset), tiny_dataset, tmp_path)
    t.train_warp()
    h_warp = param_hash(t.pipe.flownet)
    g_before = param_hash(t.pipe.generator)
    t.train_gen()
    assert param_hash(t.pipe.flownet) == h_warp
    assert param_hash(t.pipe.generator) != g_before
    assert all(p.requires_grad for p in t.pipe.flownet.parameters())
    t.finetune_e2e()
    assert param_hash(t.pipe.flownet) != h_warp


def test_checkpoint_round_trip(tiny_dataset, tmp_path):
    t = Trainer(small_config(tiny_dataset), tiny_dataset, tmp_path)
    ckpt = t.train_warp()
    save_checkpoint(ckpt, tmp_path / "x.pt")
    back = load_checkpoint(tmp_path / "x.pt")
    assert back["format_version"] == 1 and back["phase"] == "warp"
    for k, v in ckpt["flownet"].items():
        assert torch.equal(v, back["flownet"][k])
    (tmp_path / "bad.pt").write_bytes(b"junk")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")


def test_resume_mid_phase_reproduces_losses(tiny_dataset, tmp_path):
    cfg = small_config(tiny_dataset, epochs_warp=3)
    full = Trainer(cfg, tiny_dataset, tmp_path / "full")
    end = full.train_warp()

    part = Trainer(cfg, tiny_dataset, tmp_path / "part")
    part.train_warp()  # writes every epoch; resume from the first
    mid = load_checkpoint(tmp_path / "part" / "checkpoints" / "warp_e000.pt")
    resumed = Trainer(cfg, tiny_dataset, tmp_path / "part")
    resumed.restore(mid)  # rewinds the log to the checkpoint step
    assert max(int(r[0]) for r in read_log(tmp_path / "part" / "train_log.csv")[1:]) == mid["step"]
    again = resumed.train_warp(resume=mid)
    assert read_log(tmp_path / "full" / "train_log.csv") == read_log(tmp_path / "part" / "train_log.csv")
    for k, v in end["flownet"].items():
        assert torch.equal(v, again["flownet"][k])


def test_log_format(tiny_dataset, tmp_path):
    t = Trainer(small_config(tiny_dataset), tiny_dataset, tmp_path)
    t.train_warp()
    rows = read_log(tmp_path / "train_log.csv")
    assert rows[0] == ["step", "loss_name", "value"]
    names = {r[1] for r in rows[1:]}
    assert {"warp/total", "warp/l1", "warp/per", "warp/sty", "warp/flow", "warp/tv"} <= names
    assert all(np.isfinite(float(r[2])) for r in rows[1:])


def test_nan_loss_aborts_with_last_checkpoint(tiny_dataset, tmp_path, monkeypatch):
    cfg = small_config(tiny_dataset, epochs_warp=2, batch_warp=32)
    t = Trainer(cfg, tiny_dataset, tmp_path)
    real = losses.warp_loss
    calls = {"n": 0}

    def poisoned(*a, **kw):
        calls["n"] += 1
        out = real(*a, **kw)
        return out * float("nan") if calls["n"] == 2 else out

    monkeypatch.setattr(losses, "warp_loss", poisoned)
    with pytest.raises(TrainingFault) as info:
        t.train_warp()
    assert info.value.last_checkpoint.endswith("warp_e000.pt")
    assert "warp_e000.pt" in str(info.value)


def test_resolution_mismatch_rejected(tiny_dataset, tmp_path):
    with pytest.raises(ValueError, match="resolution"):
        Trainer(small_config(tiny_dataset, res=64), tiny_dataset, tmp_path)


def test_heldout_scores_and_pose_ablation(tiny_dataset, tmp_path):
    t = Trainer(small_config(tiny_dataset, zero_pose_image=True), tiny_dataset, tmp_path)
    ckpt = t.train_warp()
    s = heldout_scores(ckpt, t.manifest)
    assert s["n"] == 2 and 0 < s["ssim"] <= 1 and s["l1_warp"] > 0 and s["l1_tps"] > 0
    x = t.pipe.warp_inputs(torch.rand(1, 3, 32, 32), torch.rand(1, 8, 32, 32), torch.rand(1, 3, 32, 32),
                           torch.rand(1, 8, 32, 32))
    assert x.shape[1] == 22 and torch.count_nonzero(x[:, 11:14]) == 0

"""Three-phase training: warp only, generator with a frozen warp, end to end.

Checkpoints are torch containers with a format version; the training log
is a CSV of ``step,loss_name,value`` rows.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .correspondence import (KeypointSet, default_sigma, encode_heatmaps, find_correspondences,
                             keypoints_from_json, keypoints_to_json)
from .datagen import Manifest, load_sample, read_manifest
from .descriptor import FeatureExtractor, ToyBackend
from .evalmetrics import ssim
from .generator import Discriminator, Generator
from .losses import LossWeights
from .warp import FlowNet, build_warp_input, fit_tps, pose_image_channels, tps_flow, warp_image

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PHASES = ("warp", "gen", "e2e")


class TrainingFault(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(f"{message} (last good checkpoint: {last_checkpoint or 'none'})")
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    data: str = ""
    res: int = 64
    k: int = 35
    sigma: float | None = None  # None -> res / 32
    seed: int = 0
    descriptor_seed: int = 0
    epochs_warp: int = 20
    epochs_gen: int = 20
    epochs_e2e: int = 10
    batch_warp: int = 16
    batch_gen: int = 8
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    flow_decay: float = 0.5  # TPS supervision weight multiplier per epoch
    warp_width: int = 24
    zero_pose_image: bool = False
    deterministic: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_warp < 1 or self.batch_gen < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if min(self.epochs_warp, self.epochs_gen, self.epochs_e2e) < 0:
            raise ValueError("phase durations must be >= 0")
        if self.res % 8:
            raise ValueError("resolution must be a multiple of 8")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    @property
    def heat_sigma(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.res)

    def to_flat(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(d.pop("weights"))
        return d

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        wkeys = {f.name for f in dataclasses.fields(LossWeights)}
        ckeys = {f.name for f in dataclasses.fields(cls)} - {"weights"}
        unknown = set(d) - wkeys - ckeys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        weights = LossWeights(**{k: float(d.pop(k)) for k in list(d) if k in wkeys})
        return cls(weights=weights, **d)

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_flat(d)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=1))


# ---------------------------------------------------------------------------
# data


def correspondence_cache(manifest: Manifest, config: TrainConfig) -> dict[int, tuple[KeypointSet, KeypointSet]]:
    """Keypoints for every record, computed once and cached next to the manifest."""
    backend = ToyBackend(seed=config.descriptor_seed)
    cache_dir = manifest.root / "keypoints"
    path = cache_dir / f"{backend.id}-k{config.k}-{manifest.fingerprint()}.json"
    if path.exists():
        doc = json.loads(path.read_text())
        return {int(i): keypoints_from_json(v) for i, v in doc.items()}
    out = {}
    for rec in manifest.records:
        s = load_sample(manifest, rec)
        out[int(rec["id"])] = find_correspondences(backend, s.appearance, s.pose, s.masks["appearance"],
                                                   s.masks["pose"], k=config.k, seed=config.descriptor_seed)
    cache_dir.mkdir(parents=True, exist_ok=True)
    H = manifest.resolution
    path.write_text(json.dumps({str(i): keypoints_to_json(a, p, (H, H)) for i, (a, p) in out.items()}))
    return out


@dataclass
class TensorSet:
    ids: list[int]
    classes: list[str]
    I_a: torch.Tensor
    I_p: torch.Tensor
    I_gt: torch.Tensor
    P_a: np.ndarray  # (N, k, 2)
    P_p: np.ndarray
    f_tps: torch.Tensor  # (N, 2, H, W)

    def __len__(self):
        return len(self.ids)


def load_tensors(manifest: Manifest, config: TrainConfig, split: str | None) -> TensorSet:
    kps = correspondence_cache(manifest, config)
    records = manifest.split(split)
    ids, classes, ia, ip, igt, pa, pp, ft = [], [], [], [], [], [], [], []
    H = manifest.resolution
    for rec in records:
        s = load_sample(manifest, rec)
        Pa, Pp = kps[int(rec["id"])]
        ids.append(int(rec["id"]))
        classes.append(s.class_id)
        ia.append(torch.from_numpy(s.appearance))
        ip.append(torch.from_numpy(s.pose))
        igt.append(torch.from_numpy(s.ground_truth))
        pa.append(Pa.points)
        pp.append(Pp.points)
        ft.append(tps_flow(fit_tps(Pp, Pa), H, H))
    if not ids:
        empty = torch.zeros(0, 3, H, H)
        return TensorSet([], [], empty, empty, empty, np.zeros((0, config.k, 2)), np.zeros((0, config.k, 2)),
                         torch.zeros(0, 2, H, H))
    return TensorSet(ids, classes, torch.stack(ia), torch.stack(ip), torch.stack(igt),
                     np.stack(pa), np.stack(pp), torch.stack(ft))


# ---------------------------------------------------------------------------
# model bundle


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Pipeline:
    """Flow network, generator, discriminator and the fixed feature pyramid."""

    def __init__(self, config: TrainConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.flownet = FlowNet(in_channels=6 + 2 * config.k, width=config.warp_width)
        self.generator = Generator(k=config.k)
        self.discriminator = Discriminator(k=config.k)
        self.fx = FeatureExtractor(seed=0)
        self.descriptor_id = ToyBackend(seed=config.descriptor_seed).id

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "Pipeline":
        pipe = cls(TrainConfig.from_flat(ckpt["config"]))
        pipe.flownet.load_state_dict(ckpt["flownet"])
        pipe.generator.load_state_dict(ckpt["generator"])
        pipe.discriminator.load_state_dict(ckpt["discriminator"])
        return pipe

    def heatmaps(self, points: np.ndarray) -> torch.Tensor:
        H = self.config.res
        return torch.stack([encode_heatmaps(p, H, H, self.config.heat_sigma) for p in points])

    def warp_inputs(self, I_a, I_p, heat_a, heat_p) -> torch.Tensor:
        x = torch.cat([I_a, heat_a, I_p, heat_p], dim=1)
        if self.config.zero_pose_image:
            x[:, pose_image_channels(self.config.k)] = 0.0
        return x

    def infer(self, I_a, I_p, P_a, P_p, seed: int = 0) -> dict:
        """Warp and re-render one sample; returns numpy arrays."""
        self.flownet.eval()
        self.generator.eval()
        I_a = torch.as_tensor(np.asarray(I_a), dtype=torch.float32)
        I_p = torch.as_tensor(np.asarray(I_p), dtype=torch.float32)
        pa = np.asarray(P_a.points if isinstance(P_a, KeypointSet) else P_a)
        pp = np.asarray(P_p.points if isinstance(P_p, KeypointSet) else P_p)
        with torch.no_grad():
            x = build_warp_input(I_a, pa, I_p, pp, self.config.heat_sigma).unsqueeze(0)
            if self.config.zero_pose_image:
                x[:, pose_image_channels(self.config.k)] = 0.0
            flow = self.flownet(x).final
            warped = warp_image(I_a.unsqueeze(0), flow)
            heat_a, heat_p = x[:, 3:3 + self.config.k], x[:, 6 + self.config.k:]
            gen = self.generator(warped, heat_a, heat_p, noise_seed=seed)
            tps = warp_image(I_a, tps_flow(fit_tps(pp, pa), I_a.shape[1], I_a.shape[2]))
        return {"warped": warped[0].numpy(), "generated": gen[0].numpy(), "tps": tps.numpy(),
                "flow": flow[0].numpy()}


# ---------------------------------------------------------------------------
# checkpoints


def make_checkpoint(pipe: Pipeline, phase: str, epoch: int, step: int, optimizers: dict) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "phase": phase,
        "epoch": epoch,
        "step": step,
        "config": pipe.config.to_flat(),
        "flownet": {k: v.clone() for k, v in pipe.flownet.state_dict().items()},
        "generator": {k: v.clone() for k, v in pipe.generator.state_dict().items()},
        "discriminator": {k: v.clone() for k, v in pipe.discriminator.state_dict().items()},
        "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
        "rng_state": torch.get_rng_state(),
    }


def save_checkpoint(ckpt: dict, path: str | os.PathLike) -> None:
    tmp = Path(str(path) + ".tmp")
    torch.save(ckpt, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"{path}: unreadable checkpoint ({exc})") from exc
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('format_version')}")
    return ckpt


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, config: TrainConfig, manifest: Manifest | str, run_dir: str | os.PathLike):
        self.config = config
        self.manifest = manifest if isinstance(manifest, Manifest) else read_manifest(manifest)
        if self.manifest.resolution != config.res:
            raise ValueError(f"dataset resolution {self.manifest.resolution} differs from config res {config.res}")
        self.run_dir = Path(run_dir)
        (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        self.pipe = Pipeline(config)
        self.data = load_tensors(self.manifest, config, "train")
        if len(self.data) == 0:
            raise ValueError("empty dataset: no training records")
        self.step = 0
        self.log_path = self.run_dir / "train_log.csv"
        self.last_checkpoint: str | None = None
        config.save(self.run_dir / "config.json")

    # -- helpers
    def _log(self, rows):
        new = not self.log_path.exists()
        with open(self.log_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "loss_name", "value"])
            for name, value in rows:
                w.writerow([self.step, name, repr(float(value))])

    def _truncate_log(self, step: int):
        if not self.log_path.exists():
            return
        with open(self.log_path, newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= step]
        with open(self.log_path, "w", newline="") as fh:
            csv.writer(fh).writerows(keep)

    def _batches(self, phase: str, epoch: int, batch: int):
        order = np.random.default_rng([self.config.seed, PHASES.index(phase), epoch]).permutation(len(self.data))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            d = self.data
            heat_a = self.pipe.heatmaps(d.P_a[idx])
            heat_p = self.pipe.heatmaps(d.P_p[idx])
            yield {"I_a": d.I_a[idx], "I_p": d.I_p[idx], "I_gt": d.I_gt[idx], "heat_a": heat_a,
                   "heat_p": heat_p, "f_tps": d.f_tps[idx]}

    def _check(self, name: str, value: torch.Tensor):
        if not torch.isfinite(value):
            raise TrainingFault(f"non-finite {name} loss at step {self.step}", self.last_checkpoint)

    def _optim(self, params):
        c = self.config
        return torch.optim.Adam(params, lr=c.lr, betas=(c.adam_beta1, c.adam_beta2))

    def _flow_decay(self, epoch: int) -> float:
        return self.config.flow_decay ** epoch

    def _save(self, phase: str, epoch: int, optimizers: dict, final: bool = False) -> dict:
        ckpt = make_checkpoint(self.pipe, phase, epoch, self.step, optimizers)
        path = self.run_dir / "checkpoints" / f"{phase}_e{epoch:03d}.pt"
        save_checkpoint(ckpt, path)
        self.last_checkpoint = str(path)
        if final:
            save_checkpoint(ckpt, self.run_dir / f"{phase}.pt")
        return ckpt

    def restore(self, ckpt: dict, optimizers: dict | None = None):
        self.pipe.flownet.load_state_dict(ckpt["flownet"])
        self.pipe.generator.load_state_dict(ckpt["generator"])
        self.pipe.discriminator.load_state_dict(ckpt["discriminator"])
        self.step = int(ckpt["step"])
        if optimizers:
            for name, opt in optimizers.items():
                if name in ckpt["optimizers"]:
                    opt.load_state_dict(ckpt["optimizers"][name])
        torch.set_rng_state(ckpt["rng_state"])
        self._truncate_log(self.step)

    # -- forward pieces
    def _warp_forward(self, b):
        x = self.pipe.warp_inputs(b["I_a"], b["I_p"], b["heat_a"], b["heat_p"])
        pyr = self.pipe.flownet(x)
        warped = [warp_image(b["I_a"], f) for f in pyr.upsampled]
        return pyr, warped

    def _disc_step(self, opt_d, b, fake):
        D = self.pipe.discriminator
        opt_d.zero_grad()
        d_loss = losses.lsgan_d(D(b["I_gt"], b["heat_p"]), D(fake.detach(), b["heat_p"]))
        self._check("discriminator", d_loss)
        d_loss.backward()
        opt_d.step()
        return d_loss

    # -- phases
    def train_warp(self, resume: dict | None = None) -> dict:
        c, pipe = self.config, self.pipe
        opt = self._optim(pipe.flownet.parameters())
        start = 0
        if resume is not None:
            self.restore(resume, {"warp": opt})
            start = resume["epoch"] + 1
        else:
            torch.manual_seed(c.seed)
        if c.epochs_warp == 0:
            return self._save("warp", -1, {"warp": opt}, final=True)
        pipe.flownet.train()
        ckpt = None
        for epoch in range(start, c.epochs_warp):
            for b in self._batches("warp", epoch, c.batch_warp):
                terms = {}
                pyr, warped = self._warp_forward(b)
                loss = losses.warp_loss(warped, pyr.upsampled, b["I_gt"], b["f_tps"], c.weights, pipe.fx,
                                        flow_decay=self._flow_decay(epoch), terms_out=terms)
                self._check("warp", loss)
                opt.zero_grad()
                loss.backward()
                opt.step()
                self.step += 1
                self._log([("warp/total", loss.item())] + [(f"warp/{k}", v) for k, v in terms.items()])
            ckpt = self._save("warp", epoch, {"warp": opt}, final=epoch == c.epochs_warp - 1)
        return ckpt

    def train_gen(self, warp_ckpt: dict | None = None, resume: dict | None = None) -> dict:
        c, pipe = self.config, self.pipe
        opt_g = self._optim(pipe.generator.parameters())
        opt_d = self._optim(pipe.discriminator.parameters())
        opts = {"gen": opt_g, "disc": opt_d}
        start = 0
        if resume is not None:
            self.restore(resume, opts)
            start = resume["epoch"] + 1
        else:
            if warp_ckpt is not None:
                self.restore(warp_ckpt)
            torch.manual_seed(c.seed + 1)
        if c.epochs_gen == 0:
            return self._save("gen", -1, opts, final=True)
        pipe.flownet.eval()
        pipe.flownet.requires_grad_(False)
        pipe.generator.train()
        pipe.discriminator.train()
        ckpt = None
        try:
            for epoch in range(start, c.epochs_gen):
                for b in self._batches("gen", epoch, c.batch_gen):
                    with torch.no_grad():
                        _, warped = self._warp_forward(b)
                    I_wrp = warped[-1]
                    fake = pipe.generator(I_wrp, b["heat_a"], b["heat_p"])
                    d_loss = self._disc_step(opt_d, b, fake)
                    terms = {}
                    g_loss = losses.gen_loss(fake, b["I_gt"], pipe.discriminator(fake, b["heat_p"]), c.weights,
                                             pipe.fx, terms_out=terms)
                    self._check("generator", g_loss)
                    opt_g.zero_grad()
                    g_loss.backward()
                    opt_g.step()
                    self.step += 1
                    self._log([("gen/total", g_loss.item()), ("gen/disc", d_loss.item())]
                              + [(f"gen/{k}", v) for k, v in terms.items()])
                ckpt = self._save("gen", epoch, opts, final=epoch == c.epochs_gen - 1)
        finally:
            pipe.flownet.requires_grad_(True)
        return ckpt

    def finetune_e2e(self, ckpt: dict | None = None, resume: dict | None = None) -> dict:
        c, pipe = self.config, self.pipe
        opt = self._optim(list(pipe.flownet.parameters()) + list(pipe.generator.parameters()))
        opt_d = self._optim(pipe.discriminator.parameters())
        opts = {"e2e": opt, "disc": opt_d}
        start = 0
        if resume is not None:
            self.restore(resume, opts)
            start = resume["epoch"] + 1
        else:
            if ckpt is not None:
                self.restore(ckpt)
            torch.manual_seed(c.seed + 2)
        if c.epochs_e2e == 0:
            return self._save("e2e", -1, opts, final=True)
        pipe.flownet.train()
        pipe.generator.train()
        pipe.discriminator.train()
        out = None
        for epoch in range(start, c.epochs_e2e):
            decay = self._flow_decay(c.epochs_warp + epoch)
            for b in self._batches("e2e", epoch, c.batch_gen):
                wterms, gterms = {}, {}
                pyr, warped = self._warp_forward(b)
                l_wrp = losses.warp_loss(warped, pyr.upsampled, b["I_gt"], b["f_tps"], c.weights, pipe.fx,
                                         flow_decay=decay, terms_out=wterms)
                fake = pipe.generator(warped[-1], b["heat_a"], b["heat_p"])
                d_loss = self._disc_step(opt_d, b, fake)
                l_gen = losses.gen_loss(fake, b["I_gt"], pipe.discriminator(fake, b["heat_p"]), c.weights,
                                        pipe.fx, terms_out=gterms)
                total = losses.total_loss(l_wrp, l_gen, c.weights.alpha1, c.weights.alpha2)
                self._check("total", total)
                opt.zero_grad()
                total.backward()
                opt.step()
                self.step += 1
                self._log([("e2e/total", total.item()), ("e2e/wrp", l_wrp.item()), ("e2e/gen", l_gen.item()),
                           ("e2e/disc", d_loss.item())]
                          + [(f"e2e/wrp_{k}", v) for k, v in wterms.items()]
                          + [(f"e2e/gen_{k}", v) for k, v in gterms.items()])
            out = self._save("e2e", epoch, opts, final=epoch == c.epochs_e2e - 1)
        return out

    def run(self, skip_e2e: bool = False) -> dict:
        ckpt = self.train_warp()
        ckpt = self.train_gen()
        if not skip_e2e:
            ckpt = self.finetune_e2e()
        return ckpt


# ---------------------------------------------------------------------------
# functional entry points


def train_warp(config: TrainConfig, dataset, run_dir) -> dict:
    return Trainer(config, dataset, run_dir).train_warp()


def train_gen(config: TrainConfig, dataset, warp_ckpt: dict, run_dir) -> dict:
    t = Trainer(config, dataset, run_dir)
    t.restore(warp_ckpt)
    return t.train_gen()


def finetune_e2e(config: TrainConfig, dataset, ckpt: dict, run_dir) -> dict:
    t = Trainer(config, dataset, run_dir)
    t.restore(ckpt)
    return t.finetune_e2e()


def heldout_scores(ckpt: dict, manifest: Manifest, split: str = "test", seed: int = 0) -> dict:
    """Mean SSIM of generated images and mean L1 of learned / TPS warps on a split."""
    pipe = Pipeline.from_checkpoint(ckpt)
    data = load_tensors(manifest, pipe.config, split)
    if len(data) == 0:
        raise ValueError(f"empty dataset: no records in split {split!r}")
    ss, l1_warp, l1_tps = [], [], []
    for i in range(len(data)):
        res = pipe.infer(data.I_a[i], data.I_p[i], data.P_a[i], data.P_p[i], seed=seed)
        gt = data.I_gt[i].numpy()
        ss.append(ssim(res["generated"], gt))
        l1_warp.append(float(np.abs(res["warped"] - gt).mean()))
        l1_tps.append(float(np.abs(res["tps"] - gt).mean()))
    return {"ssim": float(np.mean(ss)), "l1_warp": float(np.mean(l1_warp)), "l1_tps": float(np.mean(l1_tps)),
            "n": len(data)}

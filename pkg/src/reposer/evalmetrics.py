"""SSIM, a patchwise feature distance, FID, and the evaluation driver."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import load_sample, read_manifest, save_png

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FID_JITTER = 1e-6

CLASS_ROWS = {"vase": "Vases", "briefcase": "Briefcases", "cabinet": "File Cabinets", "shoe": "Shoes"}
ALL_ROW = "All together"


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def _as64(x):
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).detach().to(torch.float64)
    return x.unsqueeze(0) if x.dim() == 3 else x


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window (valid region), averaged over channels."""
    a, b = _as64(a), _as64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    C = a.shape[1]
    w = _gaussian_window(window, sigma).expand(C, 1, window, window).contiguous()
    filt = lambda x: F.conv2d(x, w, groups=C)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def lpips_like(a, b, fx) -> float:
    """Channel-normalised feature differences, spatially averaged, summed over stages."""
    a = torch.as_tensor(a, dtype=torch.float32)
    b = torch.as_tensor(b, dtype=torch.float32)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = a.unsqueeze(0) if a.dim() == 3 else a, b.unsqueeze(0) if b.dim() == 3 else b
    total = 0.0
    with torch.no_grad():
        for fa, fb in zip(fx(a), fx(b)):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
            total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total


def pooled_features(images, fx, batch: int = 32) -> np.ndarray:
    """Global-average-pooled last-stage features, one row per image."""
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), batch):
            x = torch.stack([torch.as_tensor(np.asarray(i), dtype=torch.float32) for i in images[start:start + batch]])
            rows.append(fx(x)[-1].mean(dim=(2, 3)).double().numpy())
    return np.concatenate(rows, axis=0)


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, jitter: float = FID_JITTER) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^(1/2)) via the symmetric form
    Tr((A^(1/2) B A^(1/2))^(1/2))."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    d = len(mu_a)
    A = np.atleast_2d(cov_a) + jitter * np.eye(d)
    B = np.atleast_2d(cov_b) + jitter * np.eye(d)
    sa = _sym_sqrt(A)
    vals = np.linalg.eigvalsh((sa @ B @ sa + (sa @ B @ sa).T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(A) + np.trace(B) - 2.0 * tr_sqrt)


def fid_from_features(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    if len(feat_a) == 0 or len(feat_b) == 0:
        raise ValueError("FID needs non-empty feature sets")
    dim = feat_a.shape[1]
    if min(len(feat_a), len(feat_b)) < dim:
        log.warning("FID on %d/%d samples with %d-dim features; covariance is rank deficient",
                    len(feat_a), len(feat_b), dim)

    def stats(f):
        mu = f.mean(axis=0)
        cov = np.cov(f, rowvar=False) if len(f) > 1 else np.zeros((dim, dim))
        return mu, np.atleast_2d(cov)

    return frechet_distance(*stats(feat_a), *stats(feat_b))


def fid(set_a, set_b, fx) -> float:
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("FID needs non-empty image sets")
    return fid_from_features(pooled_features(set_a, fx), pooled_features(set_b, fx))


@dataclass
class MetricReport:
    backend: str
    rows: dict[str, dict[str, float]]
    n_samples: int
    per_class_counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"backend": self.backend, "n_samples": self.n_samples,
                "counts": self.per_class_counts, "rows": self.rows}


def score_sets(generated, targets, classes, fx) -> MetricReport:
    """Per-class and overall SSIM / LPIPS-like / FID rows, one block per method."""
    if len(generated) == 0:
        raise ValueError("empty dataset: nothing to evaluate")
    if len(generated) != len(targets) or len(generated) != len(classes):
        raise ValueError("generated, targets and classes must align")
    ssims = np.array([ssim(g, t) for g, t in zip(generated, targets)])
    lp = np.array([lpips_like(g, t, fx) for g, t in zip(generated, targets)])
    feat_g = pooled_features(generated, fx)
    feat_t = pooled_features(targets, fx)
    classes = np.asarray(classes)
    rows, counts = {}, {}
    order = [c for c in CLASS_ROWS if c in set(classes.tolist())]
    for c in order:
        sel = classes == c
        rows[CLASS_ROWS[c]] = {"ssim": float(ssims[sel].mean()), "lpips": float(lp[sel].mean()),
                               "fid": fid_from_features(feat_g[sel], feat_t[sel])}
        counts[CLASS_ROWS[c]] = int(sel.sum())
    rows[ALL_ROW] = {"ssim": float(ssims.mean()), "lpips": float(lp.mean()),
                     "fid": fid_from_features(feat_g, feat_t)}
    counts[ALL_ROW] = len(generated)
    return MetricReport(backend=getattr(fx, "id", type(fx).__name__), rows=rows,
                        n_samples=len(generated), per_class_counts=counts)


def save_grid(path: str | os.PathLike, columns) -> None:
    """Side-by-side strip of (3, H, W) images."""
    save_png(path, np.concatenate([np.asarray(c) for c in columns], axis=2))


def evaluate(manifest, checkpoint, out: str | os.PathLike | None = None, split: str | None = "test",
             seed: int = 0, grids: bool = True) -> dict:
    """Run the trained pipeline and the TPS baseline over a dataset split.

    Returns the JSON report: per-class and overall metric rows for each method.
    """
    from .train import Pipeline, correspondence_cache, load_checkpoint

    if not hasattr(manifest, "records"):
        manifest = read_manifest(manifest)
    records = manifest.split(split)
    if not records:
        raise ValueError(f"empty dataset: no records in split {split!r}")
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    pipe = Pipeline.from_checkpoint(ckpt)
    if pipe.config.res != manifest.resolution:
        raise ValueError(f"checkpoint resolution {pipe.config.res} does not match dataset {manifest.resolution}")
    kps = correspondence_cache(manifest, pipe.config)

    ours, warped, tps, gts, classes = [], [], [], [], []
    out = Path(out) if out is not None else None
    if out is not None and grids:
        (out / "grids").mkdir(parents=True, exist_ok=True)
    for rec in records:
        s = load_sample(manifest, rec)
        Pa, Pp = kps[rec["id"]]
        res = pipe.infer(s.appearance, s.pose, Pa, Pp, seed=seed)
        ours.append(res["generated"])
        warped.append(res["warped"])
        tps.append(res["tps"])
        gts.append(s.ground_truth)
        classes.append(s.class_id)
        if out is not None and grids:
            save_grid(out / "grids" / f"{rec['id']:05d}.png",
                      [s.appearance, s.pose, res["warped"], res["generated"], s.ground_truth])

    fx = pipe.fx
    report = {
        "backend": fx.id,
        "descriptor_backend": pipe.descriptor_id,
        "note": "desk-scale metrics on fixed random features; not comparable to published numbers",
        "split": split,
        "n_samples": len(records),
        "methods": {
            "TPS": score_sets(tps, gts, classes, fx).rows,
            "WARP": score_sets(warped, gts, classes, fx).rows,
            "OURS": score_sets(ours, gts, classes, fx).rows,
        },
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=1))
    return report

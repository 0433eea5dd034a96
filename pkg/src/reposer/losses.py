"""Training objectives for the warping and generator stages."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .warp import resize_flow


@dataclass
class LossWeights:
    # warping loss, per level
    beta1: float = 1.0    # L1
    beta2: float = 0.2    # perceptual
    beta3: float = 100.0  # style
    beta4: float = 1.0    # TPS flow supervision
    beta5: float = 0.1    # total variation
    # generator loss
    alpha_l1: float = 1.0
    alpha_per: float = 0.2
    alpha_sty: float = 100.0
    alpha_adv: float = 0.05
    # end-to-end mix
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _batched(x):
    return x.unsqueeze(0) if x.dim() == 3 else x


def l1(a, b):
    _check(a, b)
    return (a - b).abs().mean()


def perceptual(a, b, fx):
    _check(a, b)
    fa, fb = fx(_batched(a)), fx(_batched(b))
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb))


def gram(feat):
    B, C, H, W = feat.shape
    f = feat.reshape(B, C, H * W)
    return f @ f.transpose(1, 2) / (C * H * W)


def style(a, b, fx):
    _check(a, b)
    fa, fb = fx(_batched(a)), fx(_batched(b))
    return sum(((gram(x) - gram(y)) ** 2).mean() for x, y in zip(fa, fb))


def total_variation(flow):
    """mean |d/dx| + mean |d/dy| over both flow channels."""
    dx = flow[..., :, 1:] - flow[..., :, :-1]
    dy = flow[..., 1:, :] - flow[..., :-1, :]
    return dx.abs().mean() + dy.abs().mean()


def flow_supervision(f, f_tps):
    """Mean squared endpoint error."""
    _check(f, f_tps)
    return ((f - f_tps) ** 2).sum(dim=-3).mean()


def lsgan_d(real_scores, fake_scores):
    return 0.5 * ((real_scores - 1) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()


def lsgan_g(fake_scores):
    return ((fake_scores - 1) ** 2).mean()


def resize_image(img, size):
    img = _batched(img)
    if tuple(img.shape[-2:]) == tuple(size):
        return img
    return F.interpolate(img, size=size, mode="bilinear", align_corners=False)


def warp_terms(warped, flow, gt, f_tps, fx) -> dict[str, torch.Tensor]:
    """Unweighted per-level terms; gt and f_tps are resized to the level."""
    warped, flow = _batched(warped), _batched(flow)
    gt_l = resize_image(gt, warped.shape[-2:])
    tps_l = resize_flow(_batched(f_tps), tuple(flow.shape[-2:]))
    return {
        "l1": l1(warped, gt_l),
        "per": perceptual(warped, gt_l, fx),
        "sty": style(warped, gt_l, fx),
        "flow": flow_supervision(flow, tps_l),
        "tv": total_variation(flow),
    }


def warp_loss(warped_levels, flows, gt, f_tps, weights: LossWeights, fx, flow_decay: float = 1.0,
              terms_out: dict | None = None):
    """Sum over levels of the weighted L1, perceptual, style, TPS-flow and TV terms.

    ``flow_decay`` scales the TPS supervision weight (used for its schedule).
    """
    if len(warped_levels) != len(flows):
        raise ValueError(f"{len(warped_levels)} warped images for {len(flows)} flow levels")
    w = (weights.beta1, weights.beta2, weights.beta3, weights.beta4 * flow_decay, weights.beta5)
    total = 0.0
    for img, flow in zip(warped_levels, flows):
        t = warp_terms(img, flow, gt, f_tps, fx)
        if terms_out is not None:
            for name, value in t.items():
                terms_out[name] = terms_out.get(name, 0.0) + float(value.detach())
        total = total + sum(wi * ti for wi, ti in zip(w, t.values()))
    return total


def gen_loss(out, gt, fake_scores, weights: LossWeights, fx, terms_out: dict | None = None):
    terms = {
        "l1": l1(out, gt),
        "per": perceptual(out, gt, fx),
        "sty": style(out, gt, fx),
        "adv": lsgan_g(fake_scores),
    }
    if terms_out is not None:
        terms_out.update({k: float(v.detach()) for k, v in terms.items()})
    return (weights.alpha_l1 * terms["l1"] + weights.alpha_per * terms["per"]
            + weights.alpha_sty * terms["sty"] + weights.alpha_adv * terms["adv"])


def total_loss(L_wrp, L_gen, alpha1: float = 1.0, alpha2: float = 1.0):
    return alpha1 * L_wrp + alpha2 * L_gen

"""Fine-grained re-rendering: pose and texture encoders, texture injection
with 2-D style modulation and noise, coarse-to-fine tRGB heads, and the
pose-conditioned patch discriminator."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .correspondence import encode_heatmaps

NUM_SCALES = 4
SCALE_CHANNELS = (64, 48, 32, 16)  # H/8, H/4, H/2, H


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        return self.act(self.skip(x) + self.conv2(self.act(self.conv1(x))))


class _MultiScaleEncoder(nn.Module):
    """Residual encoder down to H/8 and a decoder with encoder skips that
    emits one feature map per scale, coarse to fine."""

    def __init__(self, in_channels: int, channels=SCALE_CHANNELS):
        super().__init__()
        c8, c4, c2, c1 = channels
        self.stem = ResBlock(in_channels, c1)
        self.down = nn.ModuleList([ResBlock(c1, c2, 2), ResBlock(c2, c4, 2), ResBlock(c4, c8, 2)])
        self.bottleneck = ResBlock(c8, c8)
        self.up = nn.ModuleList([ResBlock(c8 + c4, c4), ResBlock(c4 + c2, c2), ResBlock(c2 + c1, c1)])

    def forward(self, x) -> list[torch.Tensor]:
        s1 = self.stem(x)
        s2 = self.down[0](s1)
        s4 = self.down[1](s2)
        s8 = self.bottleneck(self.down[2](s4))
        outs = [s8]
        h = s8
        for block, skip in zip(self.up, (s4, s2, s1)):
            h = block(torch.cat([F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False), skip], 1))
            outs.append(h)
        return outs


class PoseEncoder(_MultiScaleEncoder):
    """Consumes ``concat(heat(P_p), heat(P_a))``; the order matters."""

    def __init__(self, k: int = 35, channels=SCALE_CHANNELS):
        super().__init__(2 * k, channels)
        self.k = k

    def forward(self, heat_p, heat_a):
        if heat_p.shape != heat_a.shape or heat_p.shape[-3] != self.k:
            raise ValueError(f"expected two {self.k}-channel heatmap stacks, got {tuple(heat_p.shape)}, {tuple(heat_a.shape)}")
        return super().forward(torch.cat([heat_p, heat_a], dim=-3))


class TextureEncoder(_MultiScaleEncoder):
    def __init__(self, channels=SCALE_CHANNELS):
        super().__init__(3, channels)

    def forward(self, image):
        if image.shape[-3] != 3:
            raise ValueError(f"texture encoder expects an RGB image, got {tuple(image.shape)}")
        return super().forward(image)


class InjectionBlock(nn.Module):
    """alpha, beta = two 1x1 conv stacks on the texture features; the pose
    features are modulated ``alpha * e_p + beta`` and then receive per-channel
    weighted unit-normal noise."""

    def __init__(self, texture_channels: int, pose_channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or pose_channels
        self.alpha = nn.Sequential(nn.Conv2d(texture_channels, hidden, 1), nn.ReLU(),
                                   nn.Conv2d(hidden, pose_channels, 1))
        self.beta = nn.Sequential(nn.Conv2d(texture_channels, hidden, 1), nn.ReLU(),
                                  nn.Conv2d(hidden, pose_channels, 1))
        self.noise_weight = nn.Parameter(torch.zeros(pose_channels))
        with torch.no_grad():
            self.alpha[-1].bias.add_(1.0)

    def modulation(self, e_t):
        return self.alpha(e_t), self.beta(e_t)

    def forward(self, e_p, e_t, generator: torch.Generator | None = None):
        return texture_inject(e_p, e_t, self, generator)


def texture_inject(e_p, e_t, block: InjectionBlock, noise=None):
    """One injection step.  ``noise`` may be an int seed, a torch.Generator,
    or None for the global RNG."""
    if e_p.shape[-2:] != e_t.shape[-2:]:
        raise ValueError(f"pose features {tuple(e_p.shape)} and texture features {tuple(e_t.shape)} are misaligned")
    alpha, beta = block.modulation(e_t)
    infused = alpha * e_p + beta
    if isinstance(noise, int):
        noise = torch.Generator().manual_seed(noise)
    shape = (*e_p.shape[:-3], 1, *e_p.shape[-2:])
    n = torch.randn(shape, generator=noise, dtype=e_p.dtype, device=e_p.device)
    return infused + block.noise_weight.view(-1, 1, 1) * n


def trgb_compose(features, heads) -> torch.Tensor:
    """1x1 RGB projection per scale, accumulated coarse to fine with bilinear
    upsampling; the sum is squashed onto [0, 1].  Overflowed logits saturate
    and NaNs map to mid-gray, so the output stays bounded for any weights."""
    acc = None
    for e, head in zip(features, heads):
        rgb = head(e)
        if acc is None:
            acc = rgb
        else:
            acc = F.interpolate(acc, size=rgb.shape[-2:], mode="bilinear", align_corners=False) + rgb
    return torch.sigmoid(torch.nan_to_num(acc, nan=0.0))


class Generator(nn.Module):
    def __init__(self, k: int = 35, channels=SCALE_CHANNELS):
        super().__init__()
        self.k = k
        self.pose_encoder = PoseEncoder(k, channels)
        self.texture_encoder = TextureEncoder(channels)
        self.inject = nn.ModuleList([InjectionBlock(c, c) for c in channels])
        self.trgb = nn.ModuleList([nn.Conv2d(c, 3, 1) for c in channels])

    def forward(self, I_wrp, heat_a, heat_p, noise_seed=None):
        squeeze = I_wrp.dim() == 3
        if squeeze:
            I_wrp, heat_a, heat_p = I_wrp.unsqueeze(0), heat_a.unsqueeze(0), heat_p.unsqueeze(0)
        if I_wrp.shape[-2:] != heat_p.shape[-2:]:
            raise ValueError("image and heatmaps differ in size")
        gen = torch.Generator().manual_seed(noise_seed) if noise_seed is not None else None
        e_p = self.pose_encoder(heat_p, heat_a)
        e_t = self.texture_encoder(I_wrp)
        e_out = [texture_inject(p, t, blk, gen) for p, t, blk in zip(e_p, e_t, self.inject)]
        out = trgb_compose(e_out, self.trgb)
        return out.squeeze(0) if squeeze else out


class Discriminator(nn.Module):
    """Four stride-2 convs over ``concat(image, heat(P_p))``; raw scores at H/16."""

    def __init__(self, k: int = 35, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3 + k, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 3 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(3 * width, 1, 4, stride=2, padding=1),
        )

    def forward(self, image, heat_p):
        squeeze = image.dim() == 3
        x = torch.cat([image, heat_p], dim=-3)
        if squeeze:
            x = x.unsqueeze(0)
        out = self.net(x)
        return out.squeeze(0) if squeeze else out


def pose_encode(heat_p, heat_a, encoder: PoseEncoder) -> list[torch.Tensor]:
    return encoder(heat_p, heat_a)


def texture_encode(I_wrp, encoder: TextureEncoder) -> list[torch.Tensor]:
    return encoder(I_wrp)


def generate(I_wrp, P_a, P_p, model: Generator, seed: int | None = None, sigma: float | None = None):
    """Re-render a warped image given keypoint sets (or precomputed heatmaps)."""
    H, W = I_wrp.shape[-2:]
    heat_a = P_a if torch.is_tensor(P_a) and P_a.dim() >= 3 else encode_heatmaps(P_a, H, W, sigma)
    heat_p = P_p if torch.is_tensor(P_p) and P_p.dim() >= 3 else encode_heatmaps(P_p, H, W, sigma)
    if I_wrp.dim() == 4 and heat_a.dim() == 3:
        heat_a, heat_p = heat_a.unsqueeze(0), heat_p.unsqueeze(0)
    return model(I_wrp, heat_a, heat_p, noise_seed=seed)


def discriminate(image, heat_p, model: Discriminator):
    return model(image, heat_p)

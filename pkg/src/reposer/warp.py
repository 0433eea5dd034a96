"""Coarse alignment: conditioning stack, flow pyramid U-Net, convex
upsampling, differentiable backward warping and the thin-plate-spline warp.

Flow convention: channel 0 is the x displacement, channel 1 the y
displacement, in pixels.  ``warp_image`` samples the source at
``target + flow`` (backward warping).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .correspondence import KeypointSet, default_sigma, encode_heatmaps

NUM_LEVELS = 4
FLOW_MAGIC = b"RFLW"


# ---------------------------------------------------------------------------
# conditioning input


def _points(P, dtype=np.float32) -> np.ndarray:
    return np.asarray(P.points if isinstance(P, KeypointSet) else P, dtype=dtype).reshape(-1, 2)


def build_warp_input(I_a, P_a, I_p, P_p, sigma: float | None = None) -> torch.Tensor:
    """Stack ``[I_a, heat(P_a), I_p, heat(P_p)]`` into a (6 + 2k, H, W) tensor."""
    I_a = torch.as_tensor(np.asarray(I_a) if not torch.is_tensor(I_a) else I_a, dtype=torch.float32)
    I_p = torch.as_tensor(np.asarray(I_p) if not torch.is_tensor(I_p) else I_p, dtype=torch.float32)
    if I_a.shape != I_p.shape or I_a.dim() != 3 or I_a.shape[0] != 3:
        raise ValueError(f"images must both be 3xHxW, got {tuple(I_a.shape)} and {tuple(I_p.shape)}")
    pa, pp = _points(P_a), _points(P_p)
    if pa.shape != pp.shape:
        raise ValueError(f"keypoint sets differ in size: {pa.shape[0]} vs {pp.shape[0]}")
    _, H, W = I_a.shape
    sigma = default_sigma(H) if sigma is None else sigma
    return torch.cat([I_a, encode_heatmaps(pa, H, W, sigma), I_p, encode_heatmaps(pp, H, W, sigma)], dim=0)


def pose_image_channels(k: int) -> slice:
    return slice(3 + k, 6 + k)


# ---------------------------------------------------------------------------
# convex upsampling and warping


def convex_weights(mask_logits: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Softmax over the 9 neighbours: (B, 9, factor, factor, h, w)."""
    B, _, h, w = mask_logits.shape
    return torch.softmax(mask_logits.view(B, 9, factor, factor, h, w), dim=1)


def convex_upsample(flow: torch.Tensor, mask_logits: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Upsample ``flow`` (B, 2, h, w) by ``factor`` with softmax-weighted 3x3
    neighbourhoods; coarse values are scaled by ``factor`` first.

    ``mask_logits`` is (B, factor*factor*9, h, w).  Borders replicate the
    coarse flow so a constant field stays constant.
    """
    B, C, h, w = flow.shape
    if mask_logits.shape != (B, factor * factor * 9, h, w):
        raise ValueError(
            f"mask logits {tuple(mask_logits.shape)} do not match flow {tuple(flow.shape)} at factor {factor}"
        )
    weights = convex_weights(mask_logits, factor).unsqueeze(1)
    padded = F.pad(factor * flow, (1, 1, 1, 1), mode="replicate")
    neigh = F.unfold(padded, kernel_size=3).view(B, C, 9, 1, 1, h, w)
    up = (weights * neigh).sum(dim=2)  # B, C, f, f, h, w
    return up.permute(0, 1, 4, 2, 5, 3).reshape(B, C, factor * h, factor * w)


def warp_image(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp with border clamping.

    Accepts (C, H, W) / (2, H, W) or batched (B, C, H, W) / (B, 2, H, W).
    Integer sample positions reproduce source pixels exactly.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image, flow = image.unsqueeze(0), flow.unsqueeze(0)
    B, C, H, W = image.shape
    if flow.shape != (B, 2, H, W):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match image {tuple(image.shape)}")
    flow = flow.to(image.dtype)
    ys = torch.arange(H, dtype=image.dtype, device=image.device).view(1, H, 1)
    xs = torch.arange(W, dtype=image.dtype, device=image.device).view(1, 1, W)
    sx = (xs + flow[:, 0]).clamp(0, W - 1)
    sy = (ys + flow[:, 1]).clamp(0, H - 1)
    x0f, y0f = torch.floor(sx), torch.floor(sy)
    wx, wy = sx - x0f, sy - y0f
    x0, y0 = x0f.long(), y0f.long()
    x1, y1 = (x0 + 1).clamp(max=W - 1), (y0 + 1).clamp(max=H - 1)

    flat = image.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).view(B, 1, H * W).expand(B, C, H * W)
        return torch.gather(flat, 2, idx).view(B, C, H, W)

    wx, wy = wx.unsqueeze(1), wy.unsqueeze(1)
    out = (gather(y0, x0) * ((1 - wx) * (1 - wy)) + gather(y0, x1) * (wx * (1 - wy))
           + gather(y1, x0) * ((1 - wx) * wy) + gather(y1, x1) * (wx * wy))
    return out.squeeze(0) if squeeze else out


def resize_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a (B, 2, h, w) flow and rescale its pixel units."""
    h, w = flow.shape[-2:]
    if (h, w) == tuple(size):
        return flow
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    scale = torch.tensor([size[1] / w, size[0] / h], dtype=flow.dtype, device=flow.device).view(1, 2, 1, 1)
    return out * scale


# ---------------------------------------------------------------------------
# flow network


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.LeakyReLU(0.1),
    )


@dataclass
class FlowPyramid:
    levels: list[torch.Tensor]  # own-scale flows, coarse to fine
    masks: list[torch.Tensor]  # convex-upsampling logits at every non-final scale
    upsampled: list[torch.Tensor] = field(default_factory=list)  # all at full resolution

    @property
    def final(self) -> torch.Tensor:
        return self.upsampled[-1]


class FlowNet(nn.Module):
    """Skip U-Net with six encoder and six decoder convs.

    Flow heads sit on decoder layers at H/8, H/4, H/2 and H; mask heads on the
    first three of those produce the convex-upsampling weights used to lift
    every level to full resolution.
    """

    def __init__(self, in_channels: int = 76, width: int = 24):
        super().__init__()
        c1, c2, c3, c4 = width, width + 8, 2 * width, 2 * width + 16
        self.enc = nn.ModuleList([
            _conv(in_channels, c1),          # H
            _conv(c1, c2, stride=2),         # H/2
            _conv(c2, c3, stride=2),         # H/4
            _conv(c3, c4, stride=2),         # H/8
            _conv(c4, c4, dilation=2),       # H/8
            _conv(c4, c4, dilation=2),       # H/8
        ])
        self.dec = nn.ModuleList([
            _conv(c4, c4),                   # H/8
            _conv(c4 + c4, c4),              # H/8, skip from enc[3]
            _conv(c4 + c3, c3),              # H/4, skip from enc[2]
            _conv(c3 + c2, c2),              # H/2, skip from enc[1]
            _conv(c2 + c1, c1),              # H, skip from enc[0]
            _conv(c1, c1),                   # H
        ])
        head_in = [c4, c3, c2, c1]
        self.flow_heads = nn.ModuleList([nn.Conv2d(c, 2, 3, padding=1) for c in head_in])
        self.mask_heads = nn.ModuleList([
            nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, 4 * 9, 1))
            for c in head_in[:-1]
        ])
        for head in self.flow_heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        for head in self.mask_heads:
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    def forward(self, x: torch.Tensor) -> FlowPyramid:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        H, W = x.shape[-2:]
        if H % 8 or W % 8:
            raise ValueError(f"input size {H}x{W} must be divisible by 8")
        skips = []
        h = x
        for layer in self.enc:
            h = layer(h)
            skips.append(h)
        up = lambda t: F.interpolate(t, scale_factor=2, mode="bilinear", align_corners=False)  # noqa: E731
        d = self.dec[0](h)
        feats = []
        d = self.dec[1](torch.cat([d, skips[3]], 1))
        feats.append(d)
        d = self.dec[2](torch.cat([up(d), skips[2]], 1))
        feats.append(d)
        d = self.dec[3](torch.cat([up(d), skips[1]], 1))
        feats.append(d)
        d = self.dec[4](torch.cat([up(d), skips[0]], 1))
        d = self.dec[5](d)
        feats.append(d)

        levels = []
        for f, head in zip(feats, self.flow_heads):
            # heads predict displacement as a fraction of the level size
            scale = torch.tensor([f.shape[-1], f.shape[-2]], dtype=f.dtype, device=f.device).view(1, 2, 1, 1)
            levels.append(head(f) * scale * 0.25)
        masks = [head(f) for f, head in zip(feats[:-1], self.mask_heads)]
        pyr = FlowPyramid(levels, masks)
        pyr.upsampled = upsample_pyramid(levels, masks)
        for f in pyr.upsampled:
            if not torch.isfinite(f).all():
                raise FloatingPointError("non-finite flow produced by FlowNet")
        return pyr


def upsample_pyramid(levels, masks) -> list[torch.Tensor]:
    """Lift every level to the finest resolution with successive 2x convex steps."""
    n = len(levels)
    out = []
    for l, flow in enumerate(levels):
        for m in masks[l:n - 1]:
            flow = convex_upsample(flow, m)
        out.append(flow)
    return out


# ---------------------------------------------------------------------------
# thin-plate spline


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r2 * np.log(r2)
    return np.where(r2 > 0, out, 0.0)


@dataclass
class TpsWarp:
    control_src: np.ndarray  # (k, 2) points in the source (appearance) image
    control_dst: np.ndarray  # (k, 2) points in the target (pose) image
    affine: np.ndarray  # (2, 3): [c, a_x, a_y] per output coordinate
    weights: np.ndarray  # (k, 2)
    lam: float = 0.0
    regularized: bool = False

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        """Map target-image points (n, 2) to source-image points."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        r2 = ((pts[:, None, :] - self.control_dst[None]) ** 2).sum(-1)
        basis = np.column_stack([np.ones(len(pts)), pts])
        return basis @ self.affine.T + _tps_kernel(r2) @ self.weights


def fit_tps(P_p, P_a, lam: float = 0.0) -> TpsWarp:
    """Thin-plate spline taking pose-image points ``P_p`` onto ``P_a``.

    Duplicate or collinear control points make the system singular; those
    are solved in the least-squares sense with a ridge of at least 1e-6 and
    flagged ``regularized``.
    """
    dst = _points(P_p, np.float64)
    src = _points(P_a, np.float64)
    k = len(dst)
    if k != len(src):
        raise ValueError("control point sets differ in size")
    if k < 3:
        raise ValueError("thin-plate spline needs at least 3 control points")
    P = np.column_stack([np.ones(k), dst])
    duplicate = len(np.unique(dst, axis=0)) < k
    collinear = np.linalg.matrix_rank(P) < 3
    degenerate = duplicate or collinear
    if degenerate:
        lam = max(lam, 1e-6)
    K = _tps_kernel(((dst[:, None] - dst[None]) ** 2).sum(-1)) + lam * np.eye(k)
    L = np.zeros((k + 3, k + 3))
    L[:k, :k] = K
    L[:k, k:] = P
    L[k:, :k] = P.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = src
    if degenerate:
        sol = np.linalg.lstsq(L, rhs, rcond=None)[0]
    else:
        sol = np.linalg.solve(L, rhs)
    return TpsWarp(src, dst, sol[k:].T.copy(), sol[:k].copy(), float(lam), degenerate)


def tps_flow(tps: TpsWarp, H: int, W: int) -> torch.Tensor:
    ys, xs = np.mgrid[0:H, 0:W]
    grid = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    disp = tps(grid) - grid
    return torch.from_numpy(disp.T.reshape(2, H, W).astype(np.float32))


def tps_warp_image(I_a, P_a, P_p, lam: float = 0.0) -> torch.Tensor:
    """Thin-plate-spline baseline: warp ``I_a`` so ``P_a`` lands on ``P_p``."""
    I_a = torch.as_tensor(np.asarray(I_a) if not torch.is_tensor(I_a) else I_a, dtype=torch.float32)
    H, W = I_a.shape[-2:]
    return warp_image(I_a, tps_flow(fit_tps(P_p, P_a, lam), H, W))


# ---------------------------------------------------------------------------
# flow dump


def write_flow(path: str | os.PathLike, flow) -> None:
    f = np.asarray(flow.detach().cpu() if torch.is_tensor(flow) else flow, dtype="<f4")
    if f.ndim != 3 or f.shape[0] != 2:
        raise ValueError(f"flow must be 2xHxW, got {f.shape}")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", f.shape[1], f.shape[2]))
        fh.write(np.ascontiguousarray(f[0]).tobytes())
        fh.write(np.ascontiguousarray(f[1]).tobytes())


def read_flow(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow file")
    H, W = struct.unpack_from("<II", blob, 4)
    data = np.frombuffer(blob, dtype="<f4", offset=12)
    if data.size != 2 * H * W:
        raise ValueError(f"{path}: payload size does not match {H}x{W}")
    return data.reshape(2, H, W).copy()

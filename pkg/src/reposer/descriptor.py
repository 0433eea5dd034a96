"""Patch descriptors, salience maps and the fixed feature pyramid.

Descriptors live on an (H/8, W/8) grid.  The built-in backend is a seeded
random filter bank applied to each 8x8 patch; real transformer descriptors
can be exported offline and loaded with :func:`load_precomputed`.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
from torch import nn

PATCH = 8
MAGIC = b"DGRD"
_HEADER = struct.Struct("<4sIII4s")  # magic, D, rows, cols, dtype tag


@dataclass
class DescriptorGrid:
    grid: np.ndarray  # (rows, cols, D) float32
    salience: np.ndarray  # (rows, cols) float32 in [0, 1]
    patch_stride: int = PATCH

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ValueError(f"descriptor grid must be (rows, cols, D), got {self.grid.shape}")
        if self.salience.shape != self.grid.shape[:2]:
            raise ValueError(f"salience shape {self.salience.shape} does not match grid {self.grid.shape[:2]}")

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]

    @property
    def all_background(self) -> bool:
        return not np.any(self.salience > 0)


class DescriptorBackend(Protocol):
    name: str
    dim: int

    def extract(self, image: np.ndarray, mask: np.ndarray | None = None) -> DescriptorGrid:
        ...


def foreground_from_background(image: np.ndarray, background: float = 128.0 / 255.0) -> np.ndarray:
    """Pixels differing from the uniform background color in any channel."""
    return np.any(np.abs(np.asarray(image) - background) > 1e-6, axis=0)


def patch_salience(mask: np.ndarray) -> np.ndarray:
    H, W = mask.shape
    cells = mask.reshape(H // PATCH, PATCH, W // PATCH, PATCH).astype(np.int64)
    return (cells.sum(axis=(1, 3)) / float(PATCH * PATCH)).astype(np.float32)


def _patches(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H/8, W/8, C*64) non-overlapping patch vectors."""
    C, H, W = x.shape
    p = x.reshape(C, H // PATCH, PATCH, W // PATCH, PATCH)
    return p.transpose(1, 3, 0, 2, 4).reshape(H // PATCH, W // PATCH, C * PATCH * PATCH)


class ToyBackend:
    """Seeded random filter bank over 8x8 RGB+mask patches, pooled per patch.

    Half of the output channels are tanh responses of full-patch filters, the
    other half are average-pooled ReLU responses of 2x2 sub-filters, so both
    coarse layout and local texture inside a patch are described.
    """

    name = "toy-filterbank"

    def __init__(self, seed: int = 0, dim: int = 64):
        if dim % 2:
            raise ValueError("descriptor dim must be even")
        self.seed = seed
        self.dim = dim
        rng = np.random.default_rng(seed)
        in_ch = 4
        self.global_filters = rng.normal(size=(in_ch * PATCH * PATCH, dim // 2)) / np.sqrt(in_ch * PATCH * PATCH)
        self.local_filters = rng.normal(size=(in_ch * 4, dim // 2)) / np.sqrt(in_ch * 4)
        self.local_bias = rng.normal(scale=0.1, size=dim // 2)

    @property
    def id(self) -> str:
        return f"{self.name}-d{self.dim}-s{self.seed}"

    def extract(self, image: np.ndarray, mask: np.ndarray | None = None) -> DescriptorGrid:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
        _, H, W = image.shape
        if H % PATCH or W % PATCH:
            raise ValueError(f"image size {H}x{W} is not divisible by {PATCH}")
        if mask is None:
            mask = foreground_from_background(image)
        mask = np.asarray(mask, dtype=bool)
        x = np.concatenate([image - 0.5, mask[None].astype(np.float64) - 0.5], axis=0)

        coarse = np.tanh(_patches(x) @ self.global_filters)
        # 2x2 sub-patches inside each 8x8 patch, pooled over the 16 positions
        C = x.shape[0]
        sub = x.reshape(C, H // PATCH, 4, 2, W // PATCH, 4, 2)
        sub = sub.transpose(1, 4, 2, 5, 0, 3, 6).reshape(H // PATCH, W // PATCH, 16, C * 4)
        local = np.maximum(sub @ self.local_filters + self.local_bias, 0.0).mean(axis=2)

        grid = np.concatenate([coarse, local], axis=-1).astype(np.float32)
        return DescriptorGrid(grid=grid, salience=patch_salience(mask))


def extract(backend: DescriptorBackend, image: np.ndarray, mask: np.ndarray | None = None) -> DescriptorGrid:
    return backend.extract(image, mask)


def save_precomputed(grid: DescriptorGrid, path: str | os.PathLike) -> None:
    rows, cols = grid.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, grid.dim, rows, cols, b"f4le"))
        fh.write(np.ascontiguousarray(grid.grid, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(grid.salience, dtype="<f4").tobytes())


def load_precomputed(path: str | os.PathLike) -> DescriptorGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated descriptor header")
    magic, dim, rows, cols, dtype = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if dtype != b"f4le":
        raise ValueError(f"{path}: unsupported dtype tag {dtype!r}")
    expected = 4 * (rows * cols * dim + rows * cols)
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload has {len(payload)} bytes, header declares D={dim}, "
            f"{rows}x{cols} ({expected} bytes)"
        )
    n = rows * cols * dim
    grid = np.frombuffer(payload, dtype="<f4", count=n).reshape(rows, cols, dim).astype(np.float32)
    sal = np.frombuffer(payload, dtype="<f4", offset=4 * n).reshape(rows, cols).astype(np.float32)
    return DescriptorGrid(grid=grid, salience=sal)


class FeatureExtractor(nn.Module):
    """Frozen three-stage conv pyramid used by perceptual/style losses and metrics.

    Stage 0 is a 1x1 conv (pointwise), stages 1 and 2 are stride-2 3x3 convs.
    """

    def __init__(self, seed: int = 0, channels=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c0, c1, c2 = channels
        self.stages = nn.ModuleList([
            nn.Conv2d(3, c0, 1),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
        ])
        with torch.no_grad():
            for conv in self.stages:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.05)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.seed = seed

    @property
    def id(self) -> str:
        return f"fixed-convpyramid-s{self.seed}"

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x - 0.5
        for conv in self.stages:
            h = torch.relu(conv(h))
            feats.append(h)
        return feats

"""Best-buddy keypoint correspondences and Gaussian heatmap encoding."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .descriptor import PATCH, DescriptorGrid

DEFAULT_K = 35

Cell = tuple[int, int]


@dataclass
class KeypointSet:
    points: np.ndarray  # (k, 2) pixel coordinates (x, y)
    salience: np.ndarray  # (k,)
    padded: bool = False
    cells: list[Cell] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.points)


def _unit(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def cosine_similarity(Sa: DescriptorGrid, Sp: DescriptorGrid) -> np.ndarray:
    a = _unit(Sa.grid.reshape(-1, Sa.dim))
    p = _unit(Sp.grid.reshape(-1, Sp.dim))
    return a @ p.T


def best_buddies(Sa: DescriptorGrid, Sp: DescriptorGrid) -> list[tuple[Cell, Cell]]:
    """Mutual nearest neighbours under cosine similarity among salient cells.

    Ties resolve to the first cell in row-major order.  Pairs come back
    ordered by the appearance-side cell.
    """
    if Sa.dim != Sp.dim:
        raise ValueError(f"descriptor dims differ: {Sa.dim} vs {Sp.dim}")
    fa = np.flatnonzero(Sa.salience.ravel() > 0)
    fp = np.flatnonzero(Sp.salience.ravel() > 0)
    if fa.size == 0 or fp.size == 0:
        return []
    a = _unit(Sa.grid.reshape(-1, Sa.dim)[fa])
    p = _unit(Sp.grid.reshape(-1, Sp.dim)[fp])
    sim = a @ p.T
    nn_ap = sim.argmax(axis=1)
    nn_pa = sim.argmax(axis=0)
    mutual = nn_pa[nn_ap] == np.arange(fa.size)
    cols_a, cols_p = Sa.shape[1], Sp.shape[1]
    pairs = []
    for i in np.flatnonzero(mutual):
        ca, cp = int(fa[i]), int(fp[nn_ap[i]])
        pairs.append(((ca // cols_a, ca % cols_a), (cp // cols_p, cp % cols_p)))
    return pairs


def cell_center(cell: Cell) -> tuple[int, int]:
    """Pixel (x, y) nearest the centre of a grid cell."""
    r, c = cell
    return (c * PATCH + PATCH // 2, r * PATCH + PATCH // 2)


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns labels."""
    n = len(x)
    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for it in range(iters):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if it > 0 and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels


def _rank(pairs, sal):
    # highest salience first, ties by lexicographic cell coordinates
    return sorted(range(len(pairs)), key=lambda i: (-sal[i], pairs[i]))


def select_keypoints(pairs, Sa: DescriptorGrid, Sp: DescriptorGrid, k: int = DEFAULT_K,
                     seed: int = 0) -> tuple[KeypointSet, KeypointSet]:
    """Cluster matched pairs into ``k`` groups, keep the most salient pair per
    cluster and emit them in salience order.

    Fewer than ``k`` pairs are padded by repeating the most salient one and the
    result is flagged ``padded``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not pairs:
        raise ValueError("no correspondences to select from")
    pairs = sorted((tuple(a), tuple(p)) for a, p in pairs)
    sal = np.array([(Sa.salience[a] + Sp.salience[p]) / 2.0 for a, p in pairs], dtype=np.float64)

    if len(pairs) <= k:
        chosen = _rank(pairs, sal)
    else:
        feats = np.array([np.concatenate([Sa.grid[a], Sp.grid[p]]) for a, p in pairs], dtype=np.float64)
        labels = kmeans(feats, k, seed=seed)
        reps = []
        for j in range(k):
            members = np.flatnonzero(labels == j)
            if members.size:
                reps.append(min(members, key=lambda i: (-sal[i], pairs[i])))
        reps_sorted = sorted(reps, key=lambda i: (-sal[i], pairs[i]))
        chosen = reps_sorted[:k]

    padded = len(chosen) < k
    if padded:
        chosen = chosen + [chosen[0]] * (k - len(chosen))
    cells_a = [pairs[i][0] for i in chosen]
    cells_p = [pairs[i][1] for i in chosen]
    s = sal[chosen].astype(np.float32)
    Pa = KeypointSet(np.array([cell_center(c) for c in cells_a], dtype=np.float32), s, padded, cells_a)
    Pp = KeypointSet(np.array([cell_center(c) for c in cells_p], dtype=np.float32), s.copy(), padded, cells_p)
    return Pa, Pp


def default_sigma(H: int) -> float:
    return H / 32.0


def encode_heatmaps(points, H: int, W: int, sigma: float | None = None) -> torch.Tensor:
    """Per-point Gaussian channels, k x H x W, peak value 1 at each point."""
    pts = points.points if isinstance(points, KeypointSet) else points
    pts = torch.as_tensor(np.asarray(pts, dtype=np.float32)).reshape(-1, 2)
    if sigma is None:
        sigma = default_sigma(H)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if pts.numel() and ((pts[:, 0] < 0) | (pts[:, 0] >= W) | (pts[:, 1] < 0) | (pts[:, 1] >= H)).any():
        raise ValueError(f"keypoint outside the {H}x{W} image")
    ys = torch.arange(H, dtype=torch.float32).view(1, H, 1)
    xs = torch.arange(W, dtype=torch.float32).view(1, 1, W)
    px = pts[:, 0].view(-1, 1, 1)
    py = pts[:, 1].view(-1, 1, 1)
    d2 = (xs - px) ** 2 + (ys - py) ** 2
    return torch.exp(-d2 / (2.0 * sigma * sigma))


def find_correspondences(backend, image_a, image_p, mask_a=None, mask_p=None, k: int = DEFAULT_K,
                         seed: int = 0) -> tuple[KeypointSet, KeypointSet]:
    """Descriptor extraction, best buddies and selection in one call.

    When no best-buddy pair exists the image centres are used as a single
    (padded) correspondence so downstream shapes stay fixed.
    """
    Sa = backend.extract(image_a, mask_a)
    Sp = backend.extract(image_p, mask_p)
    pairs = best_buddies(Sa, Sp)
    if not pairs:
        rows, cols = Sa.shape
        center = (rows // 2, cols // 2)
        pairs = [(center, center)]
    return select_keypoints(pairs, Sa, Sp, k, seed=seed)


def keypoints_to_json(Pa: KeypointSet, Pp: KeypointSet, image_size) -> dict:
    return {
        "k": Pa.k,
        "image_size": [int(image_size[0]), int(image_size[1])],
        "points_a": Pa.points.tolist(),
        "points_p": Pp.points.tolist(),
        "salience": Pa.salience.tolist(),
        "padded": bool(Pa.padded),
    }


def keypoints_from_json(doc: dict) -> tuple[KeypointSet, KeypointSet]:
    sal = np.asarray(doc["salience"], dtype=np.float32)
    pad = bool(doc.get("padded", False))
    Pa = KeypointSet(np.asarray(doc["points_a"], dtype=np.float32).reshape(-1, 2), sal, pad)
    Pp = KeypointSet(np.asarray(doc["points_p"], dtype=np.float32).reshape(-1, 2), sal.copy(), pad)
    if Pa.k != doc["k"] or Pp.k != doc["k"]:
        raise ValueError("keypoint count does not match declared k")
    return Pa, Pp


def save_keypoints(path: str | os.PathLike, Pa: KeypointSet, Pp: KeypointSet, image_size) -> None:
    with open(path, "w") as fh:
        json.dump(keypoints_to_json(Pa, Pp, image_size), fh)


def load_keypoints(path: str | os.PathLike) -> tuple[KeypointSet, KeypointSet]:
    with open(path) as fh:
        return keypoints_from_json(json.load(fh))

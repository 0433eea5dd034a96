"""Procedural paired-pose dataset.

Two models of one class are rendered under two random Euler configurations,
giving the four images M1c1, M1c2, M2c1, M2c2.  The appearance image is
M1c1, the pose exemplar M2c2 and the ground truth M1c2.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

CLASSES = ("shoe", "briefcase", "vase", "cabinet")
# size of the asset catalogue per class
MODELS_PER_CLASS = {"shoe": 8, "briefcase": 12, "vase": 29, "cabinet": 11}
CLASS_ALIASES = {
    "shoe-like": "shoe", "shoes": "shoe",
    "briefcase-like": "briefcase", "briefcases": "briefcase",
    "vase-like": "vase", "vases": "vase",
    "cabinet-like": "cabinet", "cabinets": "cabinet", "file-cabinet": "cabinet",
}

ANGLE_MIN, ANGLE_MAX = 30.0, 180.0
BACKGROUND = 128.0 / 255.0
LIGHT_DIR = np.array([-0.35, 0.45, 0.82]) / np.linalg.norm([-0.35, 0.45, 0.82])
ROLES = ("appearance", "pose", "gt", "aux")


def canonical_class(class_id: str) -> str:
    name = CLASS_ALIASES.get(class_id, class_id)
    if name not in CLASSES:
        raise ValueError(f"unknown class_id {class_id!r}; expected one of {CLASSES}")
    return name


@dataclass(frozen=True)
class TextureSpec:
    base_color: tuple[float, float, float]
    accent_color: tuple[float, float, float]
    pattern: str  # "stripes" or "checker"
    frequency: float
    axis: tuple[float, float, float]
    logo_center: tuple[float, float, float]
    logo_radius: float
    logo_color: tuple[float, float, float]

    def color_at(self, points: np.ndarray) -> np.ndarray:
        """Albedo for object-space points of shape (n, 3)."""
        base = np.asarray(self.base_color)
        accent = np.asarray(self.accent_color)
        if self.pattern == "stripes":
            sel = np.sin(self.frequency * points @ np.asarray(self.axis)) > 0
        else:
            cells = np.floor(points * self.frequency / np.pi).astype(np.int64)
            sel = cells.sum(axis=1) % 2 == 0
        rgb = np.where(sel[:, None], accent, base)
        in_logo = np.linalg.norm(points - np.asarray(self.logo_center), axis=1) < self.logo_radius
        rgb[in_logo] = np.asarray(self.logo_color)
        return rgb


@dataclass(frozen=True)
class ObjectModel:
    class_id: str
    model_id: int
    vertices: np.ndarray = field(repr=False)  # (n, 3) canonical orientation, unit radius
    faces: np.ndarray = field(repr=False)  # (m, 3) int, outward winding
    texture: TextureSpec = field(repr=False)

    def mesh_bytes(self) -> bytes:
        return self.vertices.tobytes() + self.faces.tobytes()


@dataclass(frozen=True)
class AngleConfig:
    euler_xyz: tuple[float, float, float]
    config_id: int = 0

    def __post_init__(self):
        if len(self.euler_xyz) != 3:
            raise ValueError("euler_xyz needs three angles")
        for a in self.euler_xyz:
            if not ANGLE_MIN <= a <= ANGLE_MAX:
                raise ValueError(f"Euler angle {a} outside [{ANGLE_MIN}, {ANGLE_MAX}]")


def random_config(rng: np.random.Generator, config_id: int) -> AngleConfig:
    angles = np.round(rng.uniform(ANGLE_MIN, ANGLE_MAX, size=3), 2)
    return AngleConfig(tuple(float(a) for a in angles), config_id)


@dataclass
class Rendering:
    image: np.ndarray  # (3, H, W) float32 in [0, 1], quantized to 1/255 steps
    mask: np.ndarray  # (H, W) bool


@dataclass
class PairedSample:
    appearance: np.ndarray
    pose: np.ndarray
    ground_truth: np.ndarray
    aux: np.ndarray
    masks: dict[str, np.ndarray]
    class_id: str
    model_ids: tuple[int, int]
    config_ids: tuple[int, int]
    angles: tuple[tuple[float, ...], tuple[float, ...]] = ((), ())
    sample_id: int = 0
    split: str = "train"

    def role_image(self, role: str) -> np.ndarray:
        return {"appearance": self.appearance, "pose": self.pose,
                "gt": self.ground_truth, "aux": self.aux}[role]

    def metadata(self) -> dict:
        return {
            "id": self.sample_id,
            "class": self.class_id,
            "split": self.split,
            "model_ids": list(self.model_ids),
            "config_ids": list(self.config_ids),
            "angles": [list(a) for a in self.angles],
        }


# ---------------------------------------------------------------------------
# meshes


def _extrude(profile: np.ndarray, depth: float) -> tuple[np.ndarray, np.ndarray]:
    """Extrude a star-shaped (w.r.t. its centroid) 2-D polygon along z."""
    n = len(profile)
    center = profile.mean(axis=0)
    half = depth / 2.0
    front = np.column_stack([profile, np.full(n, half)])
    back = np.column_stack([profile, np.full(n, -half)])
    verts = np.vstack([front, back, [[*center, half], [*center, -half]]])
    cf, cb = 2 * n, 2 * n + 1
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces.append((i, j, n + j))
        faces.append((i, n + j, n + i))
        faces.append((cf, j, i))
        faces.append((cb, n + i, n + j))
    return verts, np.asarray(faces, dtype=np.int64)


def _lathe(radii: np.ndarray, heights: np.ndarray, segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Surface of revolution about y, closed by bottom and top caps."""
    rings = len(radii)
    theta = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    verts = []
    for r, h in zip(radii, heights):
        verts.append(np.column_stack([r * np.cos(theta), np.full(segments, h), r * np.sin(theta)]))
    verts = np.vstack(verts + [[[0.0, heights[0], 0.0]], [[0.0, heights[-1], 0.0]]])
    bottom, top = rings * segments, rings * segments + 1
    faces = []
    for a in range(rings - 1):
        for s in range(segments):
            t = (s + 1) % segments
            i0, i1 = a * segments + s, a * segments + t
            j0, j1 = (a + 1) * segments + s, (a + 1) * segments + t
            faces.append((i0, j0, i1))
            faces.append((i1, j0, j1))
    for s in range(segments):
        t = (s + 1) % segments
        faces.append((bottom, s, t))
        last = (rings - 1) * segments
        faces.append((top, last + t, last + s))
    return verts, np.asarray(faces, dtype=np.int64)


def _shoe_mesh(rng):
    toe = rng.uniform(0.9, 1.1)
    heel_h = rng.uniform(0.55, 0.8)
    sole = rng.uniform(0.08, 0.14)
    toe_h = rng.uniform(0.25, 0.35)
    profile = np.array([
        [-0.95, -0.3], [-0.3, -0.3 - sole * 0.2], [0.4, -0.3], [toe, -0.25],
        [toe + 0.05, -0.1], [toe - 0.1, toe_h - 0.3 + 0.1], [0.4, toe_h - 0.05],
        [-0.1, toe_h + 0.05], [-0.55, heel_h - 0.3], [-0.8, heel_h - 0.25],
        [-0.98, heel_h - 0.4], [-1.0, 0.0],
    ])
    return _extrude(profile, rng.uniform(0.45, 0.6))


def _briefcase_mesh(rng):
    w = rng.uniform(0.85, 1.05)
    h = rng.uniform(0.55, 0.7)
    hw = rng.uniform(0.25, 0.35)
    hh = rng.uniform(0.18, 0.28)
    off = rng.uniform(-0.08, 0.08)
    profile = np.array([
        [-w, -h], [w, -h], [w, h], [off + hw, h], [off + hw * 0.7, h + hh],
        [off - hw * 0.7, h + hh], [off - hw, h], [-w, h],
    ])
    return _extrude(profile, rng.uniform(0.3, 0.45))


def _cabinet_mesh(rng):
    w = rng.uniform(0.45, 0.6)
    h = rng.uniform(0.9, 1.05)
    lip = rng.uniform(0.05, 0.12)
    kick = rng.uniform(0.04, 0.1)
    # side profile: front at +x, top lip overhang, recessed kick plate
    profile = np.array([
        [-w, -h], [w - kick, -h], [w - kick, -h + 0.12], [w, -h + 0.15],
        [w, h - 0.1], [w + lip, h - 0.08], [w + lip, h], [-w, h],
    ])
    return _extrude(profile, rng.uniform(0.8, 1.1))


def _vase_mesh(rng):
    rings = 14
    t = np.linspace(0.0, 1.0, rings)
    foot = rng.uniform(0.3, 0.45)
    belly = rng.uniform(0.6, 0.85)
    belly_at = rng.uniform(0.3, 0.5)
    neck = rng.uniform(0.18, 0.3)
    lip = rng.uniform(0.3, 0.45)
    radii = foot + (belly - foot) * np.exp(-((t - belly_at) / 0.22) ** 2)
    radii = np.where(t > 0.7, neck + (lip - neck) * ((t - 0.7) / 0.3) ** 2, radii)
    radii = np.maximum(radii, 0.12)
    # slight asymmetric bulge so rotations about y stay observable
    verts, faces = _lathe(radii, 2.0 * t - 1.0, segments=24)
    tilt = rng.uniform(0.08, 0.15)
    verts[:, 0] += tilt * (verts[:, 1] + 1.0) ** 2 * 0.25
    return verts, faces


_BUILDERS = {"shoe": _shoe_mesh, "briefcase": _briefcase_mesh, "vase": _vase_mesh, "cabinet": _cabinet_mesh}


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    centroid = verts.mean(axis=0)
    tri = verts[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    outward = np.einsum("ij,ij->i", normals, tri.mean(axis=1) - centroid) >= 0
    faces = faces.copy()
    faces[~outward] = faces[~outward][:, [0, 2, 1]]
    return faces


def _random_texture(rng) -> TextureSpec:
    def color():
        c = rng.uniform(0.05, 0.95, size=3)
        return tuple(float(x) for x in np.round(c, 4))

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return TextureSpec(
        base_color=color(),
        accent_color=color(),
        pattern=str(rng.choice(["stripes", "checker"])),
        frequency=float(np.round(rng.uniform(4.0, 10.0), 4)),
        axis=tuple(float(x) for x in np.round(axis, 6)),
        logo_center=tuple(float(x) for x in np.round(rng.uniform(-0.6, 0.6, size=3), 4)),
        logo_radius=float(np.round(rng.uniform(0.2, 0.35), 4)),
        logo_color=color(),
    )


def make_model(class_id: str, model_id: int, rng_seed: int = 0) -> ObjectModel:
    """Build a procedural single-component textured mesh; pure in its arguments."""
    name = canonical_class(class_id)
    if not 0 <= model_id < MODELS_PER_CLASS[name]:
        raise ValueError(f"model_id {model_id} out of range for {name} (0..{MODELS_PER_CLASS[name] - 1})")
    rng = np.random.default_rng([CLASSES.index(name), model_id, rng_seed])
    verts, faces = _BUILDERS[name](rng)
    verts = verts - (verts.max(axis=0) + verts.min(axis=0)) / 2.0
    verts = verts / np.linalg.norm(verts, axis=1).max()
    faces = _orient_outward(verts, faces)
    return ObjectModel(name, model_id, verts.astype(np.float64), faces, _random_texture(rng))


# ---------------------------------------------------------------------------
# rendering


def rotation_matrix(cfg: AngleConfig) -> np.ndarray:
    return Rotation.from_euler("xyz", cfg.euler_xyz, degrees=True).as_matrix()


def render(model: ObjectModel, cfg: AngleConfig, H: int = 64, W: int = 64) -> Rendering:
    """Flat-shaded orthographic z-buffer render on a uniform gray background."""
    if H <= 0 or W <= 0 or H % 8 or W % 8:
        raise ValueError(f"render size must be positive multiples of 8, got {H}x{W}")
    if len(model.faces) == 0:
        raise ValueError("degenerate mesh: zero triangles")

    rot = rotation_matrix(cfg)
    world = model.vertices @ rot.T
    tri_world = world[model.faces]
    normals = np.cross(tri_world[:, 1] - tri_world[:, 0], tri_world[:, 2] - tri_world[:, 0])
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    normals[normals[:, 2] < 0] *= -1.0
    shade = 0.35 + 0.65 * np.clip(normals @ LIGHT_DIR, 0.0, None)

    # world [-1.05, 1.05] maps onto the image; +y up
    scale = min(H, W) / 2.1
    sx = world[:, 0] * scale + W / 2.0
    sy = -world[:, 1] * scale + H / 2.0
    tri_x, tri_y, tri_z = sx[model.faces], sy[model.faces], world[model.faces][..., 2]

    x0, y0 = tri_x[:, 0], tri_y[:, 0]
    e1x, e1y = tri_x[:, 1] - x0, tri_y[:, 1] - y0
    e2x, e2y = tri_x[:, 2] - x0, tri_y[:, 2] - y0
    det = e1x * e2y - e2x * e1y
    valid = np.abs(det) > 1e-12
    det = np.where(valid, det, 1.0)

    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    n_pix = px.size
    face_idx = np.full(n_pix, -1, dtype=np.int64)
    bary = np.zeros((n_pix, 3))
    chunk = 2048
    for start in range(0, n_pix, chunk):
        qx = px[start:start + chunk, None] - x0[None]
        qy = py[start:start + chunk, None] - y0[None]
        b1 = (qx * e2y - e2x * qy) / det
        b2 = (e1x * qy - qx * e1y) / det
        b0 = 1.0 - b1 - b2
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0) & valid[None]
        depth = b0 * tri_z[:, 0] + b1 * tri_z[:, 1] + b2 * tri_z[:, 2]
        depth = np.where(inside, depth, -np.inf)
        best = np.argmax(depth, axis=1)
        rows = np.arange(len(best))
        hit = np.isfinite(depth[rows, best])
        sl = slice(start, start + len(best))
        face_idx[sl] = np.where(hit, best, -1)
        bary[sl] = np.column_stack([b0[rows, best], b1[rows, best], b2[rows, best]])

    mask = face_idx >= 0
    image = np.full((n_pix, 3), BACKGROUND)
    if mask.any():
        f = face_idx[mask]
        canon = np.einsum("nk,nkd->nd", bary[mask], model.vertices[model.faces[f]])
        albedo = model.texture.color_at(canon)
        image[mask] = np.clip(albedo * shade[f, None], 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0
    image = image.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float32)
    return Rendering(image=image, mask=mask.reshape(H, W))


def make_quadruple(m1: ObjectModel, m2: ObjectModel, c1: AngleConfig, c2: AngleConfig,
                   H: int = 64, W: int = 64, sample_id: int = 0, split: str = "train") -> PairedSample:
    if m1.class_id != m2.class_id:
        raise ValueError(f"class mismatch: {m1.class_id} vs {m2.class_id}")
    if m1.model_id == m2.model_id:
        raise ValueError("quadruple needs two distinct models")
    r11 = render(m1, c1, H, W)
    r12 = render(m1, c2, H, W)
    r21 = render(m2, c1, H, W)
    r22 = render(m2, c2, H, W)
    return PairedSample(
        appearance=r11.image, pose=r22.image, ground_truth=r12.image, aux=r21.image,
        masks={"appearance": r11.mask, "pose": r22.mask, "gt": r12.mask, "aux": r21.mask},
        class_id=m1.class_id, model_ids=(m1.model_id, m2.model_id),
        config_ids=(c1.config_id, c2.config_id), angles=(c1.euler_xyz, c2.euler_xyz),
        sample_id=sample_id, split=split,
    )


def heldout_models(class_id: str, n_models: int) -> set[int]:
    """Model ids reserved for the test split (last ~10% of the catalogue slice, at least one)."""
    n_test = max(1, int(round(0.1 * n_models)))
    return set(range(n_models - n_test, n_models))


def generate_dataset(classes, n_pairs: int, res: int = 64, seed: int = 0,
                     models_per_class: int | None = None) -> list[PairedSample]:
    """Deterministic list of ``n_pairs`` quadruples cycling through ``classes``.

    Every tenth sample is a test sample whose appearance model comes from the
    held-out model ids of its class.
    """
    classes = [canonical_class(c) for c in classes]
    if not classes:
        raise ValueError("at least one class is required")
    rng = np.random.default_rng(seed)
    cache: dict[tuple[str, int], ObjectModel] = {}

    def model(name, mid):
        if (name, mid) not in cache:
            cache[(name, mid)] = make_model(name, mid, seed)
        return cache[(name, mid)]

    samples = []
    for i in range(n_pairs):
        name = classes[i % len(classes)]
        n_models = min(models_per_class or MODELS_PER_CLASS[name], MODELS_PER_CLASS[name])
        if n_models < 2:
            raise ValueError("need at least two models per class")
        test = heldout_models(name, n_models)
        split = "test" if i % 10 == 9 else "train"
        pool = sorted(test) if split == "test" else [m for m in range(n_models) if m not in test]
        if not pool:
            pool = list(range(n_models))
        m1 = int(rng.choice(pool))
        m2 = int(rng.choice([m for m in range(n_models) if m != m1]))
        c1 = random_config(rng, 2 * i)
        c2 = random_config(rng, 2 * i + 1)
        samples.append(make_quadruple(model(name, m1), model(name, m2), c1, c2, res, res,
                                      sample_id=i, split=split))
    return samples


# ---------------------------------------------------------------------------
# manifest I/O


def save_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] or an (H, W) mask."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        data = np.round(np.clip(arr.transpose(1, 2, 0), 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path)
    else:
        data = np.where(arr > 0.5, 255, 0).astype(np.uint8) if arr.dtype != np.uint8 else arr
        Image.fromarray(data, mode="L").save(path)


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        return arr > 127
    return (arr[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1)


def write_manifest(samples, out_dir: str | os.PathLike, resolution: int | None = None) -> Path:
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    records = []
    for s in samples:
        rec = s.metadata()
        rec["paths"], rec["masks"] = {}, {}
        for role in ROLES:
            img_rel = f"images/{s.sample_id:05d}_{role}.png"
            mask_rel = f"masks/{s.sample_id:05d}_{role}.png"
            try:
                save_png(out / img_rel, s.role_image(role))
                save_png(out / mask_rel, s.masks[role])
            except OSError as exc:
                raise OSError(f"failed writing {out / img_rel}: {exc}") from exc
            rec["paths"][role] = img_rel
            rec["masks"][role] = mask_rel
        records.append(rec)
    if resolution is None:
        resolution = int(samples[0].appearance.shape[-1]) if samples else 0
    doc = {"version": MANIFEST_VERSION, "resolution": resolution, "records": records}
    path = out / MANIFEST_NAME
    try:
        path.write_text(json.dumps(doc, indent=1))
    except OSError as exc:
        raise OSError(f"failed writing manifest {path}: {exc}") from exc
    return path


@dataclass
class Manifest:
    root: Path
    version: int
    resolution: int
    records: list[dict]

    def split(self, name: str | None) -> list[dict]:
        if name is None:
            return list(self.records)
        return [r for r in self.records if r.get("split", "train") == name]

    def fingerprint(self) -> str:
        blob = json.dumps({"resolution": self.resolution, "records": self.records}, sort_keys=True)
        return f"{zlib.crc32(blob.encode()):08x}"


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    for key in ("version", "resolution", "records"):
        if key not in doc:
            raise ValueError(f"manifest {path} missing key {key!r}")
    return Manifest(path.parent, int(doc["version"]), int(doc["resolution"]), list(doc["records"]))


def load_sample(manifest: Manifest, record: dict) -> PairedSample:
    imgs = {role: load_png(manifest.root / record["paths"][role]) for role in ROLES}
    masks = {role: load_png(manifest.root / record["masks"][role]) for role in ROLES}
    return PairedSample(
        appearance=imgs["appearance"], pose=imgs["pose"], ground_truth=imgs["gt"], aux=imgs["aux"],
        masks=masks, class_id=record["class"], model_ids=tuple(record["model_ids"]),
        config_ids=tuple(record["config_ids"]),
        angles=tuple(tuple(a) for a in record.get("angles", [[], []])),
        sample_id=int(record["id"]), split=record.get("split", "train"),
    )

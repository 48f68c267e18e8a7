"""Procedural multi-view dataset of analytic primitives.

Scenes are 1-4 spheres, boxes or vertical cylinders inside a ball of radius
0.7, rendered by exact ray casting with Lambertian shading over a white
background. Everything is reproducible from integer seeds.

On-disk layout::

    root/index.json
    root/scene_<seed>/view_<k>.png
    root/scene_<seed>/mask_<k>.png
    root/scene_<seed>/pose_<k>.json
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .exceptions import CorruptDataset
from .geometry import CameraPose, camera_rays, look_at

BOUND_RADIUS = 0.7
KINDS = ("sphere", "box", "cylinder")
TEXTURES = (None, "stripe", "checker")
LIGHT_DIR = np.array([0.35, 0.8, -0.5]) / np.linalg.norm([0.35, 0.8, -0.5])
AMBIENT = 0.45
DIFFUSE = 0.55
FOCAL_FRACTION = 1.1


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple
    # sphere: (r,); box: half extents (a, b, c); cylinder: (r, half_height)
    size: tuple
    albedo: tuple
    texture: str | None = None
    albedo2: tuple = (1.0, 1.0, 1.0)
    texture_freq: float = 8.0
    yaw: float = 0.0

    @property
    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return float(np.linalg.norm(self.size))
        return float(np.hypot(self.size[0], self.size[1]))

    @property
    def size_bucket(self) -> int:
        r = self.bounding_radius
        return 0 if r < 0.22 else (1 if r < 0.3 else 2)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple = ()

    @property
    def signature(self) -> tuple:
        return (len(self.primitives),) + tuple(
            (p.kind, p.texture, p.size_bucket) for p in self.primitives
        )

    @property
    def bucket(self) -> str:
        """Primitive-type bucket used for stratified evaluation."""
        return self.primitives[0].kind if self.primitives else "empty"


@dataclass
class ViewRecord:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    pose: CameraPose
    scene_id: int
    view_id: int

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float32) / 255.0

    def png_bytes(self) -> tuple[bytes, bytes]:
        return _png(self.image), _png(self.mask.astype(np.uint8) * 255)


def _png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def generate_scene(seed: int) -> SceneSpec:
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    count = int(rng.choice([1, 2, 3, 4], p=[0.1, 0.2, 0.3, 0.4]))
    prims = []
    for _ in range(count):
        kind = KINDS[rng.integers(3)]
        if kind == "sphere":
            size = (float(rng.uniform(0.12, 0.35)),)
        elif kind == "box":
            size = tuple(float(v) for v in rng.uniform(0.08, 0.22, size=3))
        else:
            size = (float(rng.uniform(0.08, 0.2)), float(rng.uniform(0.1, 0.25)))
        proto = Primitive(kind, (0, 0, 0), size, (0, 0, 0))
        room = BOUND_RADIUS - proto.bounding_radius
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        # bias towards the middle so that objects stay connected-looking
        offset = direction * room * rng.uniform(0.0, 0.8) ** 1.5
        albedo = tuple(float(v) for v in rng.uniform(0.1, 0.9, size=3))
        albedo2 = tuple(float(v) for v in rng.uniform(0.1, 0.9, size=3))
        texture = TEXTURES[rng.integers(3)]
        prims.append(Primitive(
            kind=kind,
            center=tuple(float(v) for v in offset),
            size=size,
            albedo=albedo,
            texture=texture,
            albedo2=albedo2,
            texture_freq=float(rng.uniform(5.0, 12.0)),
            yaw=float(rng.uniform(0, np.pi)),
        ))
    return SceneSpec(seed=seed, primitives=tuple(prims))


def default_intrinsics(image_size: int) -> dict:
    f = FOCAL_FRACTION * image_size
    return dict(fx=f, fy=f, cx=image_size / 2, cy=image_size / 2, width=image_size, height=image_size)


def sample_views(spec: SceneSpec, n: int, seed: int, image_size: int = 64) -> list[CameraPose]:
    """Look-at-origin cameras with stratified azimuths.

    Azimuth of view k lies in the central half of the k-th of n equal
    sectors (after a random global rotation), so neighbours are at least
    ``180/n`` degrees apart.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([int(seed) % 2**63, int(spec.seed) % 2**63])
    offset = rng.uniform(0, 2 * np.pi)
    sector = 2 * np.pi / n
    poses = []
    for k in range(n):
        az = offset + sector * (k + rng.uniform(0.25, 0.75))
        el = np.deg2rad(rng.uniform(-10.0, 50.0))
        r = rng.uniform(1.5, 2.5)
        eye = r * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        poses.append(look_at(eye, (0.0, 0.0, 0.0), **default_intrinsics(image_size)))
    return poses


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray):
    """Nearest positive hit distance and world normal; ``inf`` where missed."""
    n_rays = o.shape[0]
    t_hit = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    Ry = _yaw_matrix(prim.yaw)
    center = np.asarray(prim.center)
    # local frame: x_local = Ry^T (x - c)
    lo = (o - center) @ Ry
    ld = d @ Ry
    eps = 1e-9
    if prim.kind == "sphere":
        r = prim.size[0]
        b = np.einsum("ij,ij->i", lo, ld)
        c = np.einsum("ij,ij->i", lo, lo) - r * r
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > eps, t0, np.where(t1 > eps, t1, np.inf))
        t = np.where(ok, t, np.inf)
        t_hit = t
        p = lo + ld * np.where(np.isfinite(t), t, 0)[:, None]
        normal = p / r
    elif prim.kind == "box":
        half = np.asarray(prim.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(np.abs(ld) < 1e-12, 1e-12, ld)
        t1 = (-half - lo) * inv
        t2 = (half - lo) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tn = tmin.max(axis=1)
        tf = tmax.min(axis=1)
        ok = (tn <= tf) & (tf > eps)
        t = np.where(tn > eps, tn, tf)
        t_hit = np.where(ok, t, np.inf)
        p = lo + ld * np.where(ok, t, 0)[:, None]
        rel = np.abs(p) / half
        axis = rel.argmax(axis=1)
        normal = np.zeros_like(p)
        normal[np.arange(n_rays), axis] = np.sign(p[np.arange(n_rays), axis])
    else:
        r, hh = prim.size
        a = ld[:, 0] ** 2 + ld[:, 2] ** 2
        b = lo[:, 0] * ld[:, 0] + lo[:, 2] * ld[:, 2]
        c = lo[:, 0] ** 2 + lo[:, 2] ** 2 - r * r
        disc = b * b - a * c
        ok = (disc >= 0) & (a > 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0))
        a_safe = np.where(a > 1e-12, a, 1.0)
        cands = []
        for t in ((-b - sq) / a_safe, (-b + sq) / a_safe):
            y = lo[:, 1] + t * ld[:, 1]
            valid = ok & (t > eps) & (np.abs(y) <= hh)
            cands.append((np.where(valid, t, np.inf), "side"))
        dy = np.where(np.abs(ld[:, 1]) < 1e-12, 1e-12, ld[:, 1])
        for cap in (hh, -hh):
            t = (cap - lo[:, 1]) / dy
            x = lo[:, 0] + t * ld[:, 0]
            z = lo[:, 2] + t * ld[:, 2]
            valid = (t > eps) & (x * x + z * z <= r * r)
            cands.append((np.where(valid, t, np.inf), cap))
        ts = np.stack([c_[0] for c_ in cands], axis=1)
        which = ts.argmin(axis=1)
        t_hit = ts[np.arange(n_rays), which]
        p = lo + ld * np.where(np.isfinite(t_hit), t_hit, 0)[:, None]
        side = np.stack([p[:, 0], np.zeros(n_rays), p[:, 2]], axis=1) / r
        top = np.tile([0.0, 1.0, 0.0], (n_rays, 1))
        normal = np.where((which < 2)[:, None], side, np.where((which == 2)[:, None], top, -top))
    local_p = p
    world_n = normal @ Ry.T
    nn = np.linalg.norm(world_n, axis=1, keepdims=True)
    world_n = world_n / np.where(nn > 0, nn, 1)
    return t_hit, world_n, local_p


def _albedo(prim: Primitive, local_p: np.ndarray) -> np.ndarray:
    a1 = np.asarray(prim.albedo)
    a2 = np.asarray(prim.albedo2)
    if prim.texture is None:
        return np.tile(a1, (local_p.shape[0], 1))
    if prim.texture == "stripe":
        sel = np.sin(prim.texture_freq * local_p[:, 1] * np.pi) > 0
    else:
        cells = np.floor(local_p * prim.texture_freq).astype(np.int64)
        sel = (cells.sum(axis=1) % 2) == 0
    return np.where(sel[:, None], a1, a2)


def trace(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Shade arbitrary rays. Returns ``(rgb, hit, depth)`` as flat arrays."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    rgb = np.ones((n, 3))
    for prim in spec.primitives:
        t, normal, local_p = _intersect(prim, origins, dirs)
        closer = t < best_t
        if not closer.any():
            continue
        best_t = np.where(closer, t, best_t)
        lam = np.clip(normal @ LIGHT_DIR, 0.0, None)
        shade = _albedo(prim, local_p) * (AMBIENT + DIFFUSE * lam)[:, None]
        rgb = np.where(closer[:, None], np.clip(shade, 0, 1), rgb)
    hit = np.isfinite(best_t)
    return rgb, hit, best_t


def render_scene(spec: SceneSpec, pose: CameraPose, view_id: int = 0) -> ViewRecord:
    grid = camera_rays(pose)
    H, W = grid.shape
    rgb, hit, _ = trace(spec, grid.origins.reshape(-1, 3), grid.directions.reshape(-1, 3))
    image = np.round(rgb.reshape(H, W, 3) * 255.0).astype(np.uint8)
    mask = hit.reshape(H, W)
    image[~mask] = 255
    return ViewRecord(image=image, mask=mask, pose=pose, scene_id=spec.seed, view_id=view_id)


def render_depth(spec: SceneSpec, pose: CameraPose) -> np.ndarray:
    grid = camera_rays(pose)
    _, _, t = trace(spec, grid.origins.reshape(-1, 3), grid.directions.reshape(-1, 3))
    return t.reshape(grid.shape)


def scene_seeds(seed: int, n_scenes: int) -> list[int]:
    base = int(seed) * 10_000
    return [base + i for i in range(n_scenes)]


def split_of(scene_seed: int) -> str:
    return "train" if scene_seed % 2 == 0 else "val"


def build_scene(scene_seed: int, n_views: int, image_size: int) -> list[ViewRecord]:
    spec = generate_scene(scene_seed)
    poses = sample_views(spec, n_views, seed=scene_seed, image_size=image_size)
    return [render_scene(spec, p, view_id=k) for k, p in enumerate(poses)]


# ---------------------------------------------------------------- on disk


def _scene_dir(root: Path, scene_id: int) -> Path:
    return root / f"scene_{scene_id}"


def _checksum(files: Iterable[tuple[str, bytes]]) -> str:
    h = hashlib.sha256()
    for name, blob in sorted(files):
        h.update(name.encode())
        h.update(len(blob).to_bytes(8, "little"))
        h.update(blob)
    return h.hexdigest()


def write_dataset(root, scenes: dict[int, Sequence[ViewRecord]], meta: dict | None = None) -> Path:
    """Write scenes (``{scene_id: [ViewRecord, ...]}``) and the index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"version": 1, "meta": meta or {}, "scenes": {}}
    for scene_id in sorted(scenes):
        d = _scene_dir(root, scene_id)
        d.mkdir(exist_ok=True)
        files = []
        for rec in scenes[scene_id]:
            img, msk = rec.png_bytes()
            pose = json.dumps(rec.pose.to_dict(), sort_keys=True).encode()
            for name, blob in ((f"view_{rec.view_id}.png", img),
                               (f"mask_{rec.view_id}.png", msk),
                               (f"pose_{rec.view_id}.json", pose)):
                (d / name).write_bytes(blob)
                files.append((name, blob))
        index["scenes"][str(scene_id)] = {
            "views": sorted(r.view_id for r in scenes[scene_id]),
            "sha256": _checksum(files),
            "split": split_of(scene_id),
        }
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return root


class Dataset:
    """Read-only handle over a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / "index.json"
        if not index_path.exists():
            raise CorruptDataset(f"missing index at {index_path}")
        self.index = json.loads(index_path.read_text())
        self._cache: dict[int, list[ViewRecord]] = {}

    @property
    def meta(self) -> dict:
        return self.index.get("meta", {})

    @property
    def scene_ids(self) -> list[int]:
        return sorted(int(k) for k in self.index["scenes"])

    def split(self, name: str) -> list[int]:
        return [s for s in self.scene_ids if split_of(s) == name]

    def __len__(self):
        return len(self.index["scenes"])

    def load_scene(self, scene_id: int) -> list[ViewRecord]:
        if scene_id in self._cache:
            return self._cache[scene_id]
        entry = self.index["scenes"].get(str(scene_id))
        if entry is None:
            raise CorruptDataset(f"scene {scene_id} not in index")
        d = _scene_dir(self.root, scene_id)
        records, files = [], []
        for k in entry["views"]:
            blobs = {}
            for name in (f"view_{k}.png", f"mask_{k}.png", f"pose_{k}.json"):
                path = d / name
                if not path.exists():
                    raise CorruptDataset(f"scene {scene_id} view {k}: missing {name}")
                blobs[name] = path.read_bytes()
                files.append((name, blobs[name]))
            image = np.array(Image.open(io.BytesIO(blobs[f"view_{k}.png"])).convert("RGB"))
            mask = np.array(Image.open(io.BytesIO(blobs[f"mask_{k}.png"])).convert("L")) > 127
            pose = CameraPose.from_dict(json.loads(blobs[f"pose_{k}.json"]))
            records.append(ViewRecord(image, mask, pose, scene_id, k))
        if _checksum(files) != entry["sha256"]:
            raise CorruptDataset(f"scene {scene_id}: checksum mismatch")
        self._cache[scene_id] = records
        return records

    def spec(self, scene_id: int) -> SceneSpec:
        return generate_scene(scene_id)


def read_dataset(root) -> Dataset:
    ds = Dataset(root)
    for scene_id in ds.scene_ids:
        d = _scene_dir(ds.root, scene_id)
        if not d.is_dir():
            raise CorruptDataset(f"scene {scene_id}: directory missing")
    return ds


def generate_dataset(root, seed: int, n_scenes: int, views_per_scene: int = 8,
                     image_size: int = 64) -> Dataset:
    scenes = {s: build_scene(s, views_per_scene, image_size) for s in scene_seeds(seed, n_scenes)}
    write_dataset(root, scenes, meta={
        "seed": seed, "n_scenes": n_scenes, "views_per_scene": views_per_scene,
        "image_size": image_size,
    })
    return read_dataset(root)


def load_unposed_folder(path, image_size: int = 64) -> np.ndarray:
    """Load a folder of object photos for inference; no poses are read.

    RGBA images use alpha as the mask, otherwise a sibling ``mask_<name>``
    file is used when present. Returns ``(N, S, S, 3)`` floats in [0, 1]
    with the background composited to white.
    """
    path = Path(path)
    names = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg") and not p.name.startswith("mask_"))
    out = []
    for p in names:
        im = Image.open(p)
        if im.mode == "RGBA":
            arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
            rgb, alpha = arr[..., :3], arr[..., 3:]
        else:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            mp = p.with_name("mask_" + p.name)
            alpha = (np.asarray(Image.open(mp).convert("L"), dtype=np.float32) / 255.0)[..., None] \
                if mp.exists() else np.ones(rgb.shape[:2] + (1,), np.float32)
        comp = rgb * alpha + (1 - alpha)
        comp = Image.fromarray(np.round(comp * 255).astype(np.uint8)).resize(
            (image_size, image_size), Image.BILINEAR)
        out.append(np.asarray(comp, dtype=np.float32) / 255.0)
    if not out:
        raise CorruptDataset(f"no images found in {path}")
    return np.stack(out)


def parallel_generate(root, seed, n_scenes, views_per_scene=8, image_size=64, workers=None):
    """Same output as :func:`generate_dataset`, built with a process pool."""
    from concurrent.futures import ProcessPoolExecutor

    seeds = scene_seeds(seed, n_scenes)
    workers = workers or min(len(seeds), os.cpu_count() or 1)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        built = list(pool.map(build_scene, seeds, [views_per_scene] * len(seeds),
                              [image_size] * len(seeds)))
    write_dataset(root, dict(zip(seeds, built)), meta={
        "seed": seed, "n_scenes": n_scenes, "views_per_scene": views_per_scene,
        "image_size": image_size,
    })
    return read_dataset(root)

"""Analytic SDF scenes, sphere-traced ground truth, and the dataset container."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Camera, Ray, generate_rays, look_at, pixel_grid

log = logging.getLogger(__name__)

PRIMITIVE_KINDS = ("sphere", "box", "rounded-box")


@dataclass
class Primitive:
    kind: str
    center: Tuple[float, float, float]
    size: Tuple[float, ...]  # sphere: (radius,); box: half extents; rounded-box: half extents + radius
    albedo: Tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.albedo = tuple(float(a) for a in self.albedo)
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo must lie in [0, 1]")
        need = {"sphere": 1, "box": 3, "rounded-box": 4}[self.kind]
        if len(self.size) != need:
            raise ValueError(f"{self.kind} needs {need} size values, got {len(self.size)}")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.asarray(p, dtype=np.float64) - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            return _box_sdf(q, np.asarray(self.size))
        r = self.size[3]
        return _box_sdf(q, np.asarray(self.size[:3]) - r) - r

    def extent(self) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        h = self.size[0] if self.kind == "sphere" else np.asarray(self.size[:3])
        return c - h, c + h


def _box_sdf(q: np.ndarray, half: np.ndarray) -> np.ndarray:
    d = np.abs(q) - half
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return outside + inside


@dataclass
class AnalyticScene:
    primitives: List[Primitive]
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    light: Tuple[float, float, float] = (0.4, -0.8, -0.45)
    ambient: float = 0.1

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        light = np.asarray(self.light, dtype=np.float64)
        self.light = tuple(light / np.linalg.norm(light))

    def to_dict(self) -> dict:
        return {
            "primitives": [
                {"kind": p.kind, "center": list(p.center), "size": list(p.size), "albedo": list(p.albedo)}
                for p in self.primitives
            ],
            "background": list(self.background),
            "light": list(self.light),
            "ambient": self.ambient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        prims = [Primitive(p["kind"], p["center"], p["size"], p["albedo"]) for p in d["primitives"]]
        return cls(prims, tuple(d["background"]), tuple(d["light"]), float(d.get("ambient", 0.1)))


def sdf_all(scene: AnalyticScene, points) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized union SDF: (P, 3) -> distances (P,), albedos (P, 3)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dists = np.stack([p.sdf(pts) for p in scene.primitives], axis=0)
    nearest = np.argmin(dists, axis=0)
    albedo = np.asarray([p.albedo for p in scene.primitives])[nearest]
    return dists[nearest, np.arange(len(pts))], albedo


def sdf_eval(scene: AnalyticScene, point) -> Tuple[float, np.ndarray]:
    d, a = sdf_all(scene, np.asarray(point).reshape(1, 3))
    return float(d[0]), a[0]


def sdf_normals(scene: AnalyticScene, points: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    grad = np.empty_like(pts)
    for k in range(3):
        off = np.zeros(3)
        off[k] = eps
        grad[:, k] = (sdf_all(scene, pts + off)[0] - sdf_all(scene, pts - off)[0]) / (2 * eps)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    return grad / np.where(norm > 0, norm, 1.0)


@dataclass
class TraceResult:
    hit: np.ndarray
    t: np.ndarray
    normal: np.ndarray
    stalled: int = 0


def sphere_trace_batch(
    scene: AnalyticScene,
    origins: np.ndarray,
    dirs: np.ndarray,
    far: float,
    t0: float = 0.0,
    hit_eps: float = 1e-6,
    max_iter: int = 10_000,
    polish_eps: float = 1e-12,
    polish_iter: int = 5_000,
) -> TraceResult:
    """March every ray by the SDF value until it lands within ``hit_eps`` or passes ``far``."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t = np.full(n, float(t0))
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        ids = np.nonzero(active)[0]
        d, _ = sdf_all(scene, origins[ids] + t[ids, None] * dirs[ids])
        close = np.abs(d) < hit_eps
        hit[ids[close]] = True
        t[ids[~close]] += d[~close]
        active[ids[close]] = False
        gone = ids[~close][t[ids[~close]] > far]
        active[gone] = False
    stalled = int(active.sum())
    if stalled:
        log.warning("sphere trace: %d rays hit the iteration limit; treated as misses", stalled)
    # polish hits: near-tangent rays stop well short of the contact point at hit_eps
    ids = np.nonzero(hit)[0]
    for _ in range(polish_iter):
        if ids.size == 0:
            break
        d, _ = sdf_all(scene, origins[ids] + t[ids, None] * dirs[ids])
        move = d > polish_eps
        t[ids[move]] += d[move]
        ids = ids[move]
    normals = np.zeros((n, 3))
    if hit.any():
        normals[hit] = sdf_normals(scene, origins[hit] + t[hit, None] * dirs[hit])
    return TraceResult(hit, np.where(hit, t, np.inf), normals, stalled)


def sphere_trace(scene: AnalyticScene, ray: Ray) -> Tuple[bool, float, np.ndarray]:
    res = sphere_trace_batch(scene, ray.origin[None], ray.direction[None], ray.far)
    return bool(res.hit[0]), float(res.t[0]), res.normal[0]


def shade(scene: AnalyticScene, albedo: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Lambertian plus ambient, clamped to [0, 1]."""
    lam = np.maximum(0.0, normals @ np.asarray(scene.light))
    return np.clip(albedo * (lam[:, None] + scene.ambient), 0.0, 1.0)


# ---------------------------------------------------------------- datasets


@dataclass
class PosedView:
    image: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, 0 = no hit
    camera: Camera


@dataclass
class Dataset:
    scene_id: str
    views: List[PosedView]
    bounds: np.ndarray  # (2, 3) min / max corners
    near: float
    far: float
    scene: Optional[AnalyticScene] = None

    @property
    def extent(self) -> float:
        lo, hi = self.bounds
        return float(np.max(hi - lo))


def default_scene() -> AnalyticScene:
    """One sphere and one box inside [-1, 1]^3, y up."""
    return AnalyticScene(
        [
            Primitive("sphere", (-0.3, 0.0, 0.25), (0.45,), (0.85, 0.35, 0.25)),
            Primitive("box", (0.35, -0.15, -0.2), (0.3, 0.3, 0.3), (0.25, 0.55, 0.85)),
        ],
        background=(0.0, 0.0, 0.0),
        light=(0.3, 0.8, -0.5),
    )


BUILTIN_SCENES = {"sphere-box": default_scene}


def ring_cameras(
    n: int = 6,
    radius: float = 3.0,
    elevation_deg: float = 20.0,
    size: int = 32,
    fov_deg: float = 36.0,
    offset_deg: float = 0.0,
) -> List[Camera]:
    """Cameras evenly spaced on a horizontal ring, all looking at the origin."""
    focal = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    el = np.radians(elevation_deg)
    cams = []
    for k in range(n):
        az = np.radians(offset_deg) + 2 * np.pi * k / n
        eye = radius * np.array([np.cos(az) * np.cos(el), np.sin(el), np.sin(az) * np.cos(el)])
        cams.append(look_at(eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), focal, focal, size, size))
    return cams


def render_view(scene: AnalyticScene, camera: Camera, near: float, far: float) -> PosedView:
    origins, dirs = generate_rays(camera, pixel_grid(camera.width, camera.height))
    res = sphere_trace_batch(scene, origins, dirs, far)
    hit = res.hit & (res.t >= near) & (res.t <= far)
    color = np.tile(np.asarray(scene.background, dtype=np.float64), (len(origins), 1))
    if hit.any():
        _, albedo = sdf_all(scene, origins[hit] + res.t[hit, None] * dirs[hit])
        color[hit] = shade(scene, albedo, res.normal[hit])
    depth = np.where(hit, res.t, 0.0)
    h, w = camera.height, camera.width
    return PosedView(color.reshape(h, w, 3), depth.reshape(h, w), camera)


def _scene_bounds_ok(scene: AnalyticScene, bounds: np.ndarray) -> bool:
    lo, hi = bounds
    return all(np.all(p.extent()[0] >= lo) and np.all(p.extent()[1] <= hi) for p in scene.primitives)


def generate_dataset(
    scene: AnalyticScene,
    cameras: Sequence[Camera],
    near: float = 1.5,
    far: float = 4.5,
    rng_seed: int = 0,
    bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    scene_id: str = "sphere-box",
) -> Dataset:
    """Render every camera; the seed is recorded for provenance, rendering is deterministic."""
    if len(cameras) < 3:
        raise ValueError(f"need at least 3 cameras, got {len(cameras)}")
    bounds = np.asarray(bounds, dtype=np.float64)
    if not _scene_bounds_ok(scene, bounds):
        raise ValueError("scene primitives extend outside the bounds")
    views = []
    for cam in cameras:
        cam.validate()
        center = cam.center
        fwd = cam.R[2]
        to_box = bounds.mean(axis=0) - center
        if fwd @ to_box <= 0:
            log.warning("camera at %s is not looking at the scene bounds", np.round(center, 3))
        views.append(render_view(scene, cam, near, far))
    return Dataset(scene_id, views, bounds, float(near), float(far), scene)


# Container layout (little-endian):
#   magic b"RETRDATA", uint32 version
#   then tagged sections: 4-byte tag, uint64 payload length, payload
#     META: utf-8 JSON (scene id, near, far, bounds, view count, scene description)
#     CAMS: per view 12 float64 extrinsics, 9 float64 intrinsics, 2 int32 (width, height)
#     IMGS: per view H*W*3 float64
#     DEPT: per view H*W float64

DATA_MAGIC = b"RETRDATA"
DATA_VERSION = 1
SECTIONS = (b"META", b"CAMS", b"IMGS", b"DEPT")
SECTION_NAMES = {b"META": "scene-meta", b"CAMS": "cameras", b"IMGS": "image block", b"DEPT": "depth block"}


class DatasetFormatError(ValueError):
    pass


def dataset_save(ds: Dataset, path) -> None:
    meta = {
        "scene_id": ds.scene_id,
        "near": ds.near,
        "far": ds.far,
        "bounds": np.asarray(ds.bounds).tolist(),
        "n_views": len(ds.views),
        "scene": ds.scene.to_dict() if ds.scene is not None else None,
    }
    cams = b"".join(
        np.ascontiguousarray(v.camera.extrinsics, dtype="<f8").tobytes()
        + np.ascontiguousarray(v.camera.intrinsics, dtype="<f8").tobytes()
        + struct.pack("<ii", v.camera.width, v.camera.height)
        for v in ds.views
    )
    imgs = b"".join(np.ascontiguousarray(v.image, dtype="<f8").tobytes() for v in ds.views)
    deps = b"".join(np.ascontiguousarray(v.depth, dtype="<f8").tobytes() for v in ds.views)
    payloads = [json.dumps(meta, sort_keys=True).encode("utf-8"), cams, imgs, deps]
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<I", DATA_VERSION))
        for tag, body in zip(SECTIONS, payloads):
            fh.write(tag)
            fh.write(struct.pack("<Q", len(body)))
            fh.write(body)


def dataset_load(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic header")
    if len(buf) < 12:
        raise DatasetFormatError(f"{path}: truncated before version")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != DATA_VERSION:
        raise DatasetFormatError(f"{path}: format version {version}, expected {DATA_VERSION}")
    pos = 12
    found = {}
    for tag in SECTIONS:
        name = SECTION_NAMES[tag]
        if pos + 12 > len(buf):
            raise DatasetFormatError(f"{path}: truncated; missing section '{name}'")
        if buf[pos : pos + 4] != tag:
            raise DatasetFormatError(f"{path}: expected section '{name}', found {buf[pos:pos + 4]!r}")
        (size,) = struct.unpack_from("<Q", buf, pos + 4)
        pos += 12
        if pos + size > len(buf):
            raise DatasetFormatError(f"{path}: truncated inside section '{name}'")
        found[tag] = buf[pos : pos + size]
        pos += size
    meta = json.loads(found[b"META"].decode("utf-8"))
    n = meta["n_views"]
    cam_rec = 12 * 8 + 9 * 8 + 8
    if len(found[b"CAMS"]) != n * cam_rec:
        raise DatasetFormatError(f"{path}: section 'cameras' has wrong size")
    cams = []
    for i in range(n):
        off = i * cam_rec
        ext = np.frombuffer(found[b"CAMS"], "<f8", 12, off).reshape(3, 4)
        K = np.frombuffer(found[b"CAMS"], "<f8", 9, off + 96).reshape(3, 3)
        w, h = struct.unpack_from("<ii", found[b"CAMS"], off + 168)
        cams.append(Camera(K.copy(), ext.copy(), w, h))
    views = []
    ipos = dpos = 0
    for cam in cams:
        npx = cam.width * cam.height
        if ipos + npx * 24 > len(found[b"IMGS"]) or dpos + npx * 8 > len(found[b"DEPT"]):
            raise DatasetFormatError(f"{path}: image/depth blocks shorter than the cameras require")
        img = np.frombuffer(found[b"IMGS"], "<f8", npx * 3, ipos).reshape(cam.height, cam.width, 3)
        dep = np.frombuffer(found[b"DEPT"], "<f8", npx, dpos).reshape(cam.height, cam.width)
        ipos += npx * 24
        dpos += npx * 8
        views.append(PosedView(img.astype(np.float64), dep.astype(np.float64), cam))
    scene = AnalyticScene.from_dict(meta["scene"]) if meta.get("scene") else None
    return Dataset(meta["scene_id"], views, np.asarray(meta["bounds"]), float(meta["near"]), float(meta["far"]), scene)


def export_previews(ds: Dataset, out_dir) -> List[Path]:
    """8-bit PNG previews of every image and depth map (never read back)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, v in enumerate(ds.views):
        p = out / f"view_{i:02d}_rgb.png"
        plt.imsave(p, np.clip(v.image, 0, 1))
        paths.append(p)
        p = out / f"view_{i:02d}_depth.png"
        d = np.where(v.depth > 0, v.depth, np.nan)
        plt.imsave(p, np.nan_to_num((d - ds.near) / (ds.far - ds.near), nan=1.0), cmap="viridis", vmin=0, vmax=1)
        paths.append(p)
    return paths

"""Pinhole cameras, rays, sampling along rays, projection and interpolation.

Pixel convention: integer pixel coordinates address pixel centers, so pixel
(u, v) back-projects through image-plane point (u + 0.5, v + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor


class GeometryError(ValueError):
    pass


@dataclass
class Camera:
    intrinsics: np.ndarray  # 3x3
    extrinsics: np.ndarray  # 3x4 world-to-camera [R|t]
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(3, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def R(self) -> np.ndarray:
        return self.extrinsics[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.extrinsics[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def validate(self, tol: float = 1e-9) -> None:
        R = self.R
        if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
            raise GeometryError("extrinsic rotation is not a proper rotation")
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        cx, cy = self.intrinsics[0, 2], self.intrinsics[1, 2]
        if fx <= 0 or fy <= 0:
            raise GeometryError(f"focal lengths must be positive (fx={fx}, fy={fy})")
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise GeometryError(f"principal point ({cx}, {cy}) outside {self.width}x{self.height}")

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resized by ``factor`` (pixel-center aware)."""
        K = self.intrinsics.copy()
        K[:2] *= factor
        w = int(np.ceil(self.width * factor))
        h = int(np.ceil(self.height * factor))
        return Camera(K, self.extrinsics.copy(), w, h)

    def shifted(self, dx: float) -> "Camera":
        """Virtual view: the same camera moved by ``dx`` world units along its own x axis."""
        ext = self.extrinsics.copy()
        ext[0, 3] -= dx  # center moves by dx * R[0]; t = -R c
        return Camera(self.intrinsics.copy(), ext, self.width, self.height)


def look_at(eye, target, up, fx: float, fy: float, width: int, height: int) -> Camera:
    """OpenCV-style camera (x right, y down, z forward) looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    K = np.array([[fx, 0.0, width / 2.0], [0.0, fy, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K, np.concatenate([R, t[:, None]], axis=1), width, height)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if not self.near < self.far:
            raise GeometryError(f"near ({self.near}) must be < far ({self.far})")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass
class RaySamples:
    ray: Ray
    t: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return self.ray.at(self.t)


def generate_rays(camera: Camera, pixels) -> Tuple[np.ndarray, np.ndarray]:
    """Batched back-projection: pixels (P, 2) -> origins (P, 3), unit directions (P, 3)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    K = camera.intrinsics
    if abs(np.linalg.det(K)) < 1e-12:
        raise GeometryError("singular intrinsics")
    homo = np.concatenate([pixels + 0.5, np.ones((len(pixels), 1))], axis=1)
    cam_dirs = np.linalg.solve(K, homo.T).T
    dirs = cam_dirs @ camera.R  # R^T applied to row vectors
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def generate_ray(camera: Camera, pixel, near: float = 1e-3, far: float = 1e3) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not (-0.5 <= u <= camera.width - 0.5 and -0.5 <= v <= camera.height - 0.5):
        raise GeometryError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    o, d = generate_rays(camera, [[u, v]])
    return Ray(o[0], d[0], near, far)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """All integer pixel coordinates (u, v), row-major over v then u."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)


def project_points(points, camera: Camera) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched projection -> (u, v, depth, valid); invalid means behind the camera."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pts @ camera.R.T + camera.t
    z = cam[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    pix = cam @ camera.intrinsics.T
    u = pix[:, 0] / zs - 0.5
    v = pix[:, 1] / zs - 0.5
    return u, v, z, valid


def project(point, camera: Camera) -> Tuple[float, float, float, bool]:
    u, v, z, ok = project_points(np.asarray(point).reshape(1, 3), camera)
    return float(u[0]), float(v[0]), float(z[0]), bool(ok[0])


# ---------------------------------------------------------------- ray sampling


def bin_edges(near: float, far: float, n: int) -> np.ndarray:
    return np.linspace(near, far, n + 1)


def coarse_depths(near, far, n: int, n_rays: int, stratified: bool, rng: Optional[np.random.Generator]) -> np.ndarray:
    """(n_rays, n) depths, one per equal-width bin."""
    if n < 2:
        raise ValueError(f"need at least 2 coarse samples, got {n}")
    edges = bin_edges(near, far, n)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = rng.random((n_rays, n))
    else:
        jitter = np.full((n_rays, n), 0.5)
    return lo[None, :] + jitter * width[None, :]


def sample_coarse(ray: Ray, n: int, stratified: bool = False, rng_seed=None) -> RaySamples:
    rng = np.random.default_rng(rng_seed) if stratified else None
    t = coarse_depths(ray.near, ray.far, n, 1, stratified, rng)[0]
    return RaySamples(ray, t)


def fine_depths(
    coarse_t: np.ndarray,
    weights: np.ndarray,
    near: float,
    far: float,
    n_fine: int,
    rng: np.random.Generator,
    dedup_tol: float = 1e-9,
) -> np.ndarray:
    """Inverse-transform sampling from the piecewise-constant PDF over the
    coarse bins, merged with the coarse depths and sorted.

    coarse_t, weights: (B, N). Returns (B, N + n_fine); any fine draw within
    ``dedup_tol`` of an existing depth is redrawn.
    """
    coarse_t = np.atleast_2d(coarse_t)
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if w.shape != coarse_t.shape:
        raise ValueError(f"weights shape {w.shape} vs samples shape {coarse_t.shape}")
    if np.any(w < 0):
        raise ValueError("negative sampling weights")
    totals = w.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("all-zero sampling weights")
    pdf = w / totals
    b, n = w.shape
    edges = bin_edges(near, far, n)
    cdf = np.concatenate([np.zeros((b, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    def draw(u: np.ndarray, rows: np.ndarray) -> np.ndarray:
        c = cdf[rows]
        # bin index = number of interior CDF knots at or below u
        idx = np.sum(u[:, :, None] >= c[:, None, 1:-1], axis=-1)
        idx = np.clip(idx, 0, n - 1)
        lo_c = np.take_along_axis(c, idx, axis=1)
        p = np.take_along_axis(pdf[rows], idx, axis=1)
        frac = np.where(p > 0, (u - lo_c) / np.where(p > 0, p, 1.0), 0.5)
        frac = np.clip(frac, 0.0, 1.0)
        return edges[idx] + frac * (edges[idx + 1] - edges[idx])

    fine = draw(rng.random((b, n_fine)), np.arange(b))
    merged = np.sort(np.concatenate([coarse_t, fine], axis=1), axis=1)
    for _ in range(100):
        dup = np.diff(merged, axis=1) <= dedup_tol
        rows = np.nonzero(dup.any(axis=1))[0]
        if rows.size == 0:
            break
        for r in rows:
            keep = np.concatenate([[True], ~dup[r]])
            kept = merged[r][keep]
            extra = draw(rng.random((1, merged.shape[1] - kept.size)), np.array([r]))[0]
            merged[r] = np.sort(np.concatenate([kept, extra]))
    return merged


def sample_fine_from_attention(coarse: RaySamples, attn, n_fine: int, rng_seed=None) -> RaySamples:
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape != coarse.t.shape:
        raise ValueError(f"attention length {attn.size} != sample count {coarse.t.size}")
    if not np.all(attn >= 0):
        raise ValueError("attention weights must be non-negative")
    if attn.sum() <= 0:
        raise ValueError("all-zero attention")
    if abs(attn.sum() - 1.0) > 1e-6:
        raise ValueError(f"attention must sum to 1 (got {attn.sum()})")
    rng = np.random.default_rng(rng_seed)
    t = fine_depths(coarse.t[None], attn[None], coarse.ray.near, coarse.ray.far, n_fine, rng)[0]
    return RaySamples(coarse.ray, t)


# ---------------------------------------------------------------- interpolation


def bilinear_taps(u: np.ndarray, v: np.ndarray, height: int, width: int):
    """Flat indices (P, 4), weights (P, 4) and validity for an H x W grid.

    Grid value [i, j] sits at (u=j, v=i). Out-of-range points get zero weights.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    valid = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uc = np.clip(u, 0, width - 1)
    vc = np.clip(v, 0, height - 1)
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(width - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(height - 2, 0))
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    fu = uc - u0
    fv = vc - v0
    idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    w *= valid[:, None]
    return idx, w, valid


def _stencil(idx: np.ndarray, wts: np.ndarray, n_rows: int) -> sparse.csr_matrix:
    p, k = idx.shape
    rows = np.repeat(np.arange(p), k)
    return sparse.csr_matrix((wts.reshape(-1), (rows, idx.reshape(-1))), shape=(p, n_rows))


def bilinear_sample(grid, u, v):
    """Sample an H x W x C grid at (u, v). Returns (C-vector, valid flag).

    ``grid`` may be an ndarray or a Tensor; Tensors give a differentiable result.
    """
    data = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    if data.size == 0:
        raise GeometryError("empty grid")
    h, w, c = data.shape
    out, valid = sample_grid_2d(grid, np.array([u]), np.array([v]))
    if isinstance(grid, Tensor):
        return ad.reshape(out, (c,)), bool(valid[0])
    return out[0], bool(valid[0])


def sample_grid_2d(grid, u, v):
    """Batched bilinear sampling: grid (H, W, C), u/v (P,) -> (P, C), valid (P,)."""
    is_t = isinstance(grid, Tensor)
    data = grid.data if is_t else np.asarray(grid, dtype=np.float64)
    h, w, c = data.shape
    idx, wts, valid = bilinear_taps(u, v, h, w)
    if not is_t:
        flat = data.reshape(h * w, c)
        return np.einsum("pk,pkc->pc", wts, flat[idx]), valid
    return ad.spmm(_stencil(idx, wts, h * w), ad.reshape(grid, (h * w, c))), valid


def trilinear_taps(xyz: np.ndarray, res: int):
    """Flat indices (P, 8) and weights (P, 8) for an R^3 lattice over [-1, 1]^3.

    Lattice point i sits at -1 + 2 i / (R - 1) on each axis.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    valid = np.all((xyz >= -1.0) & (xyz <= 1.0), axis=1)
    g = (np.clip(xyz, -1.0, 1.0) + 1.0) * 0.5 * (res - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    f = g - i0
    idx = []
    wts = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                idx.append((ix * res + iy) * res + iz)
                wx = f[:, 0] if dx else 1 - f[:, 0]
                wy = f[:, 1] if dy else 1 - f[:, 1]
                wz = f[:, 2] if dz else 1 - f[:, 2]
                wts.append(wx * wy * wz)
    w = np.stack(wts, axis=1) * valid[:, None]
    return np.stack(idx, axis=1), w, valid


def sample_volume(volume, xyz):
    """Batched trilinear sampling of an (R, R, R, C) volume at normalized xyz (P, 3)."""
    is_t = isinstance(volume, Tensor)
    data = volume.data if is_t else np.asarray(volume, dtype=np.float64)
    r, _, _, c = data.shape
    idx, wts, valid = trilinear_taps(xyz, r)
    if not is_t:
        flat = data.reshape(-1, c)
        return np.einsum("pk,pkc->pc", wts, flat[idx]), valid
    return ad.spmm(_stencil(idx, wts, r**3), ad.reshape(volume, (r**3, c))), valid


def trilinear_sample(volume, xyz):
    data = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    if data.size == 0:
        raise GeometryError("empty volume")
    out, valid = sample_volume(volume, np.asarray(xyz, dtype=np.float64).reshape(1, 3))
    if isinstance(volume, Tensor):
        return ad.reshape(out, (data.shape[-1],)), bool(valid[0])
    return out[0], bool(valid[0])


def world_to_volume(points: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Map world points into [-1, 1]^3 over an axis-aligned box (2, 3)."""
    lo, hi = np.asarray(bounds, dtype=np.float64)
    return 2.0 * (np.asarray(points) - lo) / (hi - lo) - 1.0


def volume_lattice(bounds: np.ndarray, res: int) -> np.ndarray:
    """World positions of lattice points, (R^3, 3), x-major like ``trilinear_taps``."""
    lo, hi = np.asarray(bounds, dtype=np.float64)
    axes = [np.linspace(lo[k], hi[k], res) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

"""Hybrid extractor at desk scale.

A small strided 2D conv pyramid runs on every source image; every pyramid
level is lifted into the voxel lattice (mean and variance over the views that
see each voxel), the levels are concatenated, and a decoder-only 3D conv stack
turns them into the global feature volume. ``fuse_points`` then builds the
per-sample fused feature from the volume, the finest image level and the
source colors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, project_points, sample_grid_2d, sample_volume, volume_lattice, world_to_volume
from .nn import MLP, Module


# ---------------------------------------------------------------- convolutions


@lru_cache(maxsize=64)
def _im2col_2d(n: int, h: int, w: int, stride: int) -> Tuple[np.ndarray, int, int]:
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    zero_row = n * h * w
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    cols = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            r = oi * stride + di
            c = oj * stride + dj
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            cols.append(np.where(ok, r * w + c, -1).ravel())
    base = np.stack(cols, axis=1)  # (ho*wo, 9)
    idx = np.concatenate([np.where(base >= 0, base + k * h * w, zero_row) for k in range(n)], axis=0)
    return idx, ho, wo


@lru_cache(maxsize=16)
def _im2col_3d(r: int) -> np.ndarray:
    zero_row = r**3
    gi, gj, gk = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    cols = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                a, b, c = gi + di, gj + dj, gk + dk
                ok = (a >= 0) & (a < r) & (b >= 0) & (b < r) & (c >= 0) & (c < r)
                cols.append(np.where(ok, (a * r + b) * r + c, zero_row).ravel())
    return np.stack(cols, axis=1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1. x (N, H, W, Cin), weight (9*Cin, Cout)."""
    n, h, w, cin = x.shape
    if weight.shape[0] != 9 * cin:
        raise ad.ShapeError(f"conv2d: input shape {x.shape} vs weight shape {weight.shape}")
    idx, ho, wo = _im2col_2d(n, h, w, stride)
    flat = ad.concat([ad.reshape(x, (n * h * w, cin)), ad.constant(np.zeros((1, cin)))], axis=0)
    cols = ad.reshape(ad.take(flat, idx.reshape(-1), axis=0), (idx.shape[0], 9 * cin))
    out = ad.matmul(cols, weight) + bias
    return ad.reshape(out, (n, ho, wo, weight.shape[1]))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 convolution, stride 1, zero padding 1. x (R, R, R, Cin), weight (27*Cin, Cout)."""
    r = x.shape[0]
    cin = x.shape[-1]
    if weight.shape[0] != 27 * cin:
        raise ad.ShapeError(f"conv3d: input shape {x.shape} vs weight shape {weight.shape}")
    idx = _im2col_3d(r)
    flat = ad.concat([ad.reshape(x, (r**3, cin)), ad.constant(np.zeros((1, cin)))], axis=0)
    cols = ad.reshape(ad.take(flat, idx.reshape(-1), axis=0), (r**3, 27 * cin))
    out = ad.matmul(cols, weight) + bias
    return ad.reshape(out, (r, r, r, weight.shape[1]))


class ConvLayer(Module):
    def __init__(self, cin: int, cout: int, taps: int, rng: np.random.Generator, stride: int = 1):
        fan_in = taps * cin
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, cout)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, cout)), requires_grad=True)
        self.stride = stride
        self.taps = taps


class ImageEncoder(Module):
    """Level 0 keeps full resolution; each further level halves it (ceil)."""

    def __init__(self, channels: Sequence[int], rng: np.random.Generator):
        chans = [3] + list(channels)
        self.convs = [
            ConvLayer(a, b, 9, rng, stride=1 if i == 0 else 2) for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))
        ]

    @property
    def channels(self) -> List[int]:
        return [c.weight.shape[1] for c in self.convs]


@dataclass
class ImageFeaturePyramid:
    levels: List[Tensor]  # each (V, H_l, W_l, C_l), level 0 finest

    def shapes(self) -> List[Tuple[int, ...]]:
        return [lvl.shape for lvl in self.levels]


def extract_image_features(images, encoder: ImageEncoder) -> ImageFeaturePyramid:
    """images: (V, H, W, 3) or (H, W, 3) array."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    n_levels = len(encoder.convs)
    min_size = 2 ** n_levels
    if imgs.shape[1] < min_size or imgs.shape[2] < min_size:
        raise ValueError(f"image {imgs.shape[1]}x{imgs.shape[2]} too small for {n_levels} levels (min {min_size})")
    x: Tensor = ad.constant(imgs)
    levels = []
    for conv in encoder.convs:
        x = ad.relu(conv2d(x, conv.weight, conv.bias, conv.stride))
        levels.append(x)
    return ImageFeaturePyramid(levels)


# ---------------------------------------------------------------- feature volume


class VolumeDecoder(Module):
    def __init__(self, cin: int, hidden: int, dim: int, rng: np.random.Generator):
        self.conv1 = ConvLayer(cin, hidden, 27, rng)
        self.conv2 = ConvLayer(hidden, dim, 27, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.relu(conv3d(x, self.conv1.weight, self.conv1.bias))
        return conv3d(x, self.conv2.weight, self.conv2.bias)


@dataclass
class FeatureVolume:
    data: Tensor  # (R, R, R, D)
    bounds: np.ndarray
    validity: np.ndarray  # (R^3,) number of views seeing each lattice point (finest level)

    @property
    def resolution(self) -> int:
        return self.data.shape[0]


def _view_stats(samples: List[Tensor], masks: List[np.ndarray]) -> Tuple[Tensor, Tensor, np.ndarray]:
    """Mean and variance over views with invalid samples excluded.

    Summation runs in a fixed view order, but mean/variance are symmetric, so
    the result does not depend on the order beyond rounding.
    """
    count = np.sum(masks, axis=0).astype(np.float64)
    denom = ad.constant(np.maximum(count, 1.0)[:, None])
    total = None
    for s, m in zip(samples, masks):
        term = s * ad.constant(m[:, None].astype(np.float64))
        total = term if total is None else total + term
    mu = total / denom
    sq = None
    for s, m in zip(samples, masks):
        diff = (s - mu) * ad.constant(m[:, None].astype(np.float64))
        term = diff * diff
        sq = term if sq is None else sq + term
    return mu, sq / denom, count


def _level_coords(u: np.ndarray, v: np.ndarray, level: int) -> Tuple[np.ndarray, np.ndarray]:
    # stride-2 3x3 convs center output pixel j on input pixel 2j
    s = float(2**level)
    return u / s, v / s


def aggregate_views(
    points: np.ndarray, cameras: Sequence[Camera], pyramid: ImageFeaturePyramid, levels: Optional[Sequence[int]] = None
) -> Tuple[List[Tensor], np.ndarray]:
    """Per-level [mean, variance] over views at world points, plus finest-level view count."""
    levels = range(len(pyramid.levels)) if levels is None else levels
    proj = [project_points(points, cam) for cam in cameras]
    feats: List[Tensor] = []
    count0 = None
    for lvl in levels:
        grid = pyramid.levels[lvl]
        samples, masks = [], []
        for k, (u, v, _, front) in enumerate(proj):
            ul, vl = _level_coords(u, v, lvl)
            s, valid = sample_grid_2d(ad.slice_(grid, k), ul, vl)
            samples.append(s)
            masks.append(valid & front)
        mu, var, count = _view_stats(samples, masks)
        feats += [mu, var]
        if count0 is None:
            count0 = count
    return feats, count0


def build_feature_volume(
    cameras: Sequence[Camera],
    pyramid: ImageFeaturePyramid,
    bounds,
    res: int,
    decoder: Optional[VolumeDecoder],
) -> FeatureVolume:
    """Lift every pyramid level onto an R^3 lattice and decode it.

    With ``decoder=None`` the raw aggregated features are returned.
    """
    if len(cameras) < 1:
        raise ValueError("need at least one source view")
    if res < 2:
        raise ValueError(f"volume resolution {res} too small")
    bounds = np.asarray(bounds, dtype=np.float64)
    pts = volume_lattice(bounds, res)
    feats, count = aggregate_views(pts, cameras, pyramid)
    frac = ad.constant((count / len(cameras))[:, None])
    raw = ad.concat(feats + [frac], axis=1)
    raw = ad.reshape(raw, (res, res, res, raw.shape[-1]))
    data = raw if decoder is None else decoder(raw)
    return FeatureVolume(data, bounds, count)


def volume_input_channels(channels: Sequence[int]) -> int:
    return 2 * sum(channels) + 1


# ---------------------------------------------------------------- point fusion


@dataclass
class PointFeatures:
    fused: Tensor  # (P, D)
    validity: np.ndarray  # (P,) views that saw each point
    view_feats: List[Tensor]  # per view (P, C0), zero where unseen
    view_rgb: List[np.ndarray]  # per view (P, 3)
    view_mask: np.ndarray  # (V, P)


class FeatureFusion(Module):
    def __init__(self, dim: int, c0: int, hidden: int, rng: np.random.Generator):
        self.mlp = MLP([dim + 2 * c0 + 4, hidden, dim], rng)


def fuse_points(
    points,
    volume: FeatureVolume,
    cameras: Sequence[Camera],
    pyramid: ImageFeaturePyramid,
    images: np.ndarray,
    fusion: FeatureFusion,
) -> PointFeatures:
    """f = MLP([volume feature, image mean, image variance, RGB mean, seen fraction])."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fv, _ = sample_volume(volume.data, world_to_volume(pts, volume.bounds))
    grid0 = pyramid.levels[0]
    samples, masks, rgbs = [], [], []
    for k, cam in enumerate(cameras):
        u, v, _, front = project_points(pts, cam)
        s, valid = sample_grid_2d(ad.slice_(grid0, k), u, v)
        rgb, _ = sample_grid_2d(images[k], u, v)
        m = valid & front
        samples.append(s)
        masks.append(m)
        rgbs.append(rgb * m[:, None])
    mu, var, count = _view_stats(samples, masks)
    rgb_mean = np.sum(rgbs, axis=0) / np.maximum(count, 1.0)[:, None]
    frac = (count / len(cameras))[:, None]
    x = ad.concat([fv, mu, var, ad.constant(np.concatenate([rgb_mean, frac], axis=1))], axis=1)
    fused = fusion.mlp(x)
    return PointFeatures(fused, count, samples, rgbs, np.asarray(masks))


def fuse_point_features(x, t, volume, cameras, pyramid, images, fusion) -> PointFeatures:
    """Single-point form; ``t`` is carried for the caller and does not enter the feature."""
    return fuse_points(np.asarray(x).reshape(1, 3), volume, cameras, pyramid, images, fusion)

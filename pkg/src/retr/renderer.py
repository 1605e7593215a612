"""Ray rendering: the transformer renderer and the classical volume-rendering baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .extractor import (
    FeatureFusion,
    FeatureVolume,
    ImageEncoder,
    ImageFeaturePyramid,
    VolumeDecoder,
    build_feature_volume,
    extract_image_features,
    fuse_points,
    volume_input_channels,
)
from .geometry import Camera, Ray, coarse_depths, fine_depths
from .nn import MLP, Module, MultiHeadAttention, mha_forward


@dataclass
class ModelConfig:
    renderer: str = "retr"  # or "classical-baseline"
    dim: int = 64
    heads: int = 4
    blocks: int = 1
    channels: Tuple[int, ...] = (8, 16, 32)
    volume_res: int = 32
    decoder_hidden: int = 32
    fusion_hidden: int = 64
    beta: float = 100.0
    positional: str = "continuous"  # or "index"

    def __post_init__(self):
        if self.renderer not in ("retr", "classical-baseline"):
            raise ValueError(f"unknown renderer {self.renderer!r}")
        if self.positional not in ("continuous", "index"):
            raise ValueError(f"unknown positional encoding {self.positional!r}")
        if self.dim % 2 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be even and divisible by heads {self.heads}")
        if self.blocks < 1:
            raise ValueError("need at least one transformer block")
        self.channels = tuple(int(c) for c in self.channels)


@dataclass
class SamplingConfig:
    n_coarse: int = 64
    n_fine: int = 64
    stratified: bool = False


@dataclass
class CpeConfig:
    beta: float = 100.0
    dim: int = 64

    def __post_init__(self):
        if self.dim % 2:
            raise ValueError("encoding dim must be even")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


# ---------------------------------------------------------------- classical rendering


def _exclusive_prefix(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n)), k=1)  # [j, i] = 1 when j < i


def classical_volume_render(sigmas, colors) -> Tuple[Tensor, Tensor]:
    """w_i = T_i (1 - exp(-sigma_i)), T_i = exp(-sum_{j<i} sigma_j); color = sum_i w_i c_i.

    sigmas (..., N), colors (..., N, 3); plain arrays are wrapped as constants.
    """
    s = sigmas if isinstance(sigmas, Tensor) else ad.constant(sigmas)
    c = colors if isinstance(colors, Tensor) else ad.constant(colors)
    if np.any(s.data < 0):
        raise ValueError("negative density")
    squeeze = s.ndim == 1
    if squeeze:
        s = ad.reshape(s, (1,) + s.shape)
        c = ad.reshape(c, (1,) + c.shape)
    n = s.shape[-1]
    trans = ad.exp(-ad.matmul(s, ad.constant(_exclusive_prefix(n))))
    w = trans * (1.0 - ad.exp(-s))
    color = ad.sum_(ad.reshape(w, w.shape + (1,)) * c, axis=-2)
    if squeeze:
        return ad.reshape(color, (3,)), ad.reshape(w, (n,))
    return color, w


def blend_projected_colors(weights, rgb) -> np.ndarray:
    """c = sum_j weight_j rgb_j over M views."""
    w = np.asarray(weights, dtype=np.float64)
    return np.einsum("...m,...mc->...c", w, np.asarray(rgb, dtype=np.float64))


def generalized_render_specialcase_check(sigmas, view_weights, projected_colors) -> float:
    """Max |generalized form - classical form| over RGB.

    The generalized form evaluates W(F_1..F_i) on each prefix of per-sample
    feature sets, with W chosen as the transmittance-times-opacity rule and
    the color function as the projected-color blend.
    """
    sig = np.asarray(sigmas, dtype=np.float64)
    vw = np.asarray(view_weights, dtype=np.float64)
    pc = np.asarray(projected_colors, dtype=np.float64)
    feats = [{"sigma": float(sig[i]), "w": vw[i], "rgb": pc[i]} for i in range(len(sig))]

    def weight_fn(prefix: Sequence[dict]) -> float:
        acc = 1.0
        for f in prefix[:-1]:
            acc *= math.exp(-f["sigma"])
        return acc * (1.0 - math.exp(-prefix[-1]["sigma"]))

    def color_fn(f: dict) -> np.ndarray:
        return blend_projected_colors(f["w"], f["rgb"])

    general = np.zeros(3)
    for i in range(len(feats)):
        general += weight_fn(feats[: i + 1]) * color_fn(feats[i])
    classical, _ = classical_volume_render(sig, blend_projected_colors(vw, pc))
    return float(np.max(np.abs(general - classical.data)))


# ---------------------------------------------------------------- positional encodings


def continuous_positional_encoding(t, cfg: CpeConfig) -> np.ndarray:
    """(sin, cos) pairs of beta * t / 10000^(2k/D) for k < D/2, interleaved."""
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(cfg.dim // 2)
    freq = cfg.beta / 10000.0 ** (2.0 * k / cfg.dim)
    ang = t[..., None] * freq
    out = np.empty(t.shape + (cfg.dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def index_positional_encoding(n: int, dim: int) -> np.ndarray:
    """Classic transformer encoding of the sample index 0..n-1 (the control)."""
    return continuous_positional_encoding(np.arange(n, dtype=np.float64), CpeConfig(beta=1.0, dim=dim))


# ---------------------------------------------------------------- transformer blocks


class OcclusionBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.mlp = MLP([dim, 2 * dim, dim], rng, layer_norm=[True, False])


class RenderBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)


def occlusion_mask(n: int) -> np.ndarray:
    """(N, N+1): sample i may see the meta token (column 0) and samples 0..i."""
    mask = np.zeros((n, n + 1), dtype=bool)
    mask[:, 0] = True
    mask[:, 1:] = np.tril(np.ones((n, n), dtype=bool))
    return mask


def occlusion_transform(f_tok: Tensor, f_fused: Tensor, pe, block: OcclusionBlock) -> Tensor:
    """f_occ_i = MLP(MHA(q=f_i, kv={tok, f_1..f_i}) + f_i).

    f_tok (D,) or (B, 1, D); f_fused (N, D) or (B, N, D); ``pe`` is added to
    f_fused first (pass None when already included).
    """
    squeeze = f_fused.ndim == 2
    x = ad.reshape(f_fused, (1,) + f_fused.shape) if squeeze else f_fused
    b, n, d = x.shape
    if n == 0:
        raise ValueError("occlusion transform needs at least one sample")
    if pe is not None:
        x = x + ad.constant(np.asarray(pe).reshape((-1, n, d)))
    tok = ad.broadcast_to(ad.reshape(f_tok, (1, 1, d)), (b, 1, d))
    kv = ad.concat([tok, x], axis=1)
    out, _ = mha_forward(block.attn, x, kv, kv, occlusion_mask(n))
    occ = block.mlp(out + x)
    return ad.reshape(occ, (n, d)) if squeeze else occ


def render_transform(query: Tensor, f_occ: Tensor, f_fused: Tensor, block: RenderBlock) -> Tuple[Tensor, Tensor]:
    """Single-query attention: keys from f_occ, values from f_fused.

    Returns the aggregated feature (D,) / (B, D) and head-averaged attention (N,) / (B, N).
    """
    squeeze = f_occ.ndim == 2
    k = ad.reshape(f_occ, (1,) + f_occ.shape) if squeeze else f_occ
    v = ad.reshape(f_fused, (1,) + f_fused.shape) if squeeze else f_fused
    b, n, d = k.shape
    q = ad.broadcast_to(ad.reshape(query, (-1, 1, d)), (b, 1, d)) if query.size == d else query
    out, attn = mha_forward(block.attn, q, k, v)
    feat = ad.reshape(out, (b, d))
    alpha = ad.reshape(ad.mean(attn, axis=1), (b, n))
    if squeeze:
        return ad.reshape(feat, (d,)), ad.reshape(alpha, (n,))
    return feat, alpha


class ColorHead(Module):
    # the aggregated feature carries the positional encoding and unnormalized fused
    # features; normalizing it keeps the sigmoid out of saturation early in training
    def __init__(self, dim: int, rng: np.random.Generator):
        self.mlp = MLP([dim, dim, 3], rng, layer_norm=[True, False])


def decode_color(feature: Tensor, head: ColorHead) -> Tensor:
    return ad.sigmoid(head.mlp(feature))


def render_depth(attention, t):
    """D = sum_i alpha_i t_i."""
    if isinstance(attention, Tensor):
        return ad.sum_(attention * ad.constant(t), axis=-1)
    return np.sum(np.asarray(attention) * np.asarray(t), axis=-1)


# ---------------------------------------------------------------- models


@dataclass
class SceneContext:
    images: np.ndarray  # (V, H, W, 3)
    cameras: List[Camera]
    pyramid: ImageFeaturePyramid
    volume: FeatureVolume
    bounds: np.ndarray


@dataclass
class RenderBatch:
    color: Tensor  # (B, 3)
    depth: Tensor  # (B,)
    attention: Tensor  # (B, N)
    t: np.ndarray  # (B, N)
    validity: Optional[np.ndarray] = None  # (B, N) views seeing each sample


@dataclass
class RenderResult:
    color: np.ndarray
    depth: float
    attention: np.ndarray
    samples: np.ndarray


def canonical_view_order(images: np.ndarray, cameras: Sequence[Camera]) -> List[int]:
    """Order views by camera parameters (then pixels) so input order cannot matter."""

    def key(i):
        cam = cameras[i]
        return (
            tuple(np.round(cam.extrinsics.ravel(), 12)),
            tuple(np.round(cam.intrinsics.ravel(), 12)),
            np.asarray(images[i]).tobytes(),
        )

    return sorted(range(len(cameras)), key=key)


class _Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg.channels, rng)
        self.decoder = VolumeDecoder(volume_input_channels(cfg.channels), cfg.decoder_hidden, cfg.dim, rng)
        self.fusion = FeatureFusion(cfg.dim, cfg.channels[0], cfg.fusion_hidden, rng)

    def build_context(self, images, cameras: Sequence[Camera], bounds) -> SceneContext:
        images = np.asarray(images, dtype=np.float64)
        order = canonical_view_order(images, cameras)
        images = images[order]
        cams = [cameras[i] for i in order]
        pyr = extract_image_features(images, self.encoder)
        vol = build_feature_volume(cams, pyr, bounds, self.cfg.volume_res, self.decoder)
        return SceneContext(images, cams, pyr, vol, np.asarray(bounds, dtype=np.float64))

    def point_features(self, ctx: SceneContext, points: np.ndarray):
        return fuse_points(points, ctx.volume, ctx.cameras, ctx.pyramid, ctx.images, self.fusion)

    def render_rays(
        self,
        ctx: SceneContext,
        origins: np.ndarray,
        dirs: np.ndarray,
        near: float,
        far: float,
        sampling: SamplingConfig,
        rng: Optional[np.random.Generator] = None,
    ) -> RenderBatch:
        """Coarse pass (no tape), optional attention/weight-guided fine pass, final pass."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        if rng is None:
            rng = np.random.default_rng(0)
        t = coarse_depths(near, far, sampling.n_coarse, len(origins), sampling.stratified, rng)
        if sampling.n_fine > 0:
            with ad.no_grad():
                coarse = self.render_samples(ctx, origins, dirs, t, near, far)
            t = fine_depths(t, coarse.attention.data, near, far, sampling.n_fine, rng)
        return self.render_samples(ctx, origins, dirs, t, near, far)

    def render_samples(self, ctx, origins, dirs, t, near, far) -> RenderBatch:
        raise NotImplementedError


class ReTRModel(_Backbone):
    """Fused point features -> CPE -> occlusion transformer -> render transformer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.token = Tensor(rng.normal(0.0, 0.02, (1, cfg.dim)), requires_grad=True)
        self.occ_blocks = [OcclusionBlock(cfg.dim, cfg.heads, rng) for _ in range(cfg.blocks)]
        self.render_blocks = [RenderBlock(cfg.dim, cfg.heads, rng) for _ in range(cfg.blocks)]
        self.color_head = ColorHead(cfg.dim, rng)

    def positional(self, t: np.ndarray) -> np.ndarray:
        if self.cfg.positional == "index":
            pe = index_positional_encoding(t.shape[-1], self.cfg.dim)
            return np.broadcast_to(pe, t.shape + (self.cfg.dim,))
        return continuous_positional_encoding(t, CpeConfig(self.cfg.beta, self.cfg.dim))

    def transform(self, fused: Tensor, t: np.ndarray) -> Tuple[Tensor, Tensor]:
        """fused (B, N, D) -> (aggregated feature (B, D), attention (B, N))."""
        b, n, d = fused.shape
        x = fused + ad.constant(self.positional(t))
        f_occ = x
        query = ad.broadcast_to(ad.reshape(self.token, (1, 1, d)), (b, 1, d))
        feat = alpha = None
        for occ_blk, ren_blk in zip(self.occ_blocks, self.render_blocks):
            f_occ = occlusion_transform(self.token, f_occ, None, occ_blk)
            feat, alpha = render_transform(query, f_occ, x, ren_blk)
            query = ad.reshape(feat, (b, 1, d))
        return feat, alpha

    def render_samples(self, ctx, origins, dirs, t, near, far) -> RenderBatch:
        b, n = t.shape
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        pf = self.point_features(ctx, pts.reshape(-1, 3))
        fused = ad.reshape(pf.fused, (b, n, self.cfg.dim))
        feat, alpha = self.transform(fused, t)
        color = decode_color(feat, self.color_head)
        depth = render_depth(alpha, t)
        return RenderBatch(color, depth, alpha, t, pf.validity.reshape(b, n))


class ClassicalModel(_Backbone):
    """Density from fused features, color from softmax-blended source colors, classical compositing."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        c0 = cfg.channels[0]
        self.density = MLP([cfg.dim, cfg.dim, 1], rng)
        self.blend = MLP([cfg.dim + c0 + 3, cfg.dim, 1], rng)

    def render_samples(self, ctx, origins, dirs, t, near, far) -> RenderBatch:
        b, n = t.shape
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        pf = self.point_features(ctx, pts.reshape(-1, 3))
        p = b * n
        delta = np.diff(np.concatenate([t, np.full((b, 1), far)], axis=1), axis=1)
        sigma = ad.reshape(ad.softplus(self.density(pf.fused)), (b, n)) * ad.constant(np.maximum(delta, 0.0))
        logits = []
        for feat_k, rgb_k in zip(pf.view_feats, pf.view_rgb):
            x = ad.concat([pf.fused, feat_k, ad.constant(rgb_k)], axis=1)
            logits.append(self.blend(x))
        logits = ad.concat(logits, axis=1)  # (P, V)
        mask = pf.view_mask.T.copy()
        mask[~mask.any(axis=1)] = True  # unseen points: colors are zero anyway
        wv = ad.softmax(logits, axis=1, mask=mask)
        rgb = np.stack(pf.view_rgb, axis=1)  # (P, V, 3)
        c = ad.sum_(ad.reshape(wv, (p, -1, 1)) * ad.constant(rgb), axis=1)
        color, w = classical_volume_render(sigma, ad.reshape(c, (b, n, 3)))
        # leftover transmittance goes to the last sample so the weights form a distribution
        rest = ad.exp(-ad.sum_(sigma, axis=1, keepdims=True))
        pad = np.zeros((1, n))
        pad[0, -1] = 1.0
        alpha = w + rest * ad.constant(pad)
        depth = render_depth(alpha, t)
        return RenderBatch(color, depth, alpha, t, pf.validity.reshape(b, n))


def build_model(cfg: ModelConfig, seed: int = 0) -> _Backbone:
    rng = np.random.default_rng(seed)
    if cfg.renderer == "retr":
        return ReTRModel(cfg, rng)
    return ClassicalModel(cfg, rng)


def render_ray(
    ray: Ray,
    ctx: SceneContext,
    model: _Backbone,
    sampling: Optional[SamplingConfig] = None,
    seed: int = 0,
) -> RenderResult:
    sampling = sampling or SamplingConfig()
    with ad.no_grad():
        out = model.render_rays(
            ctx, ray.origin[None], ray.direction[None], ray.near, ray.far, sampling, np.random.default_rng(seed)
        )
    return RenderResult(out.color.data[0].copy(), float(out.depth.data[0]), out.attention.data[0].copy(), out.t[0].copy())

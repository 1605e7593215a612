"""Training loop, losses, evaluation metrics and point-cloud fusion."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, generate_rays, pixel_grid
from .nn import AdamState, adam_step, cosine_lr, load_checkpoint, load_into, save_checkpoint
from .renderer import ModelConfig, SamplingConfig, build_model
from .scenes import AnalyticScene, Dataset, sdf_all

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "loss", "loss_color", "loss_depth")


@dataclass
class TrainConfig:
    steps: int = 200
    rays_per_step: int = 256
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    alpha: float = 1.0
    n_coarse: int = 64
    n_fine: int = 64
    seed: int = 0
    train_views: Tuple[int, ...] = ()  # empty means every view
    max_sources: int = 4
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        self.train_views = tuple(int(v) for v in self.train_views)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[Path], cause: Exception):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint
        self.cause = cause


# ---------------------------------------------------------------- losses


def loss_total(
    pred_color: Tensor,
    pred_depth: Tensor,
    gt_color: np.ndarray,
    gt_depth: np.ndarray,
    valid: np.ndarray,
    alpha: float = 1.0,
) -> Tuple[Tensor, float, float]:
    """Mean per-ray L2 color error plus alpha times mean |depth error| on valid rays.

    Returns (loss, color term, depth term); the depth term is 0 without valid rays.
    """
    b = pred_color.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    diff = pred_color - ad.constant(np.asarray(gt_color).reshape(b, 3))
    per_ray = ad.sqrt(ad.sum_(diff * diff, axis=1))
    color_term = ad.mean(per_ray)
    valid = np.asarray(valid, dtype=bool).reshape(b)
    n_valid = int(valid.sum())
    if n_valid == 0 or alpha == 0:
        depth_val = 0.0
        if n_valid:
            with ad.no_grad():
                depth_val = float(np.abs(pred_depth.data - gt_depth)[valid].mean())
        return color_term, float(color_term.data), depth_val
    err = ad.abs_(pred_depth - ad.constant(np.where(valid, gt_depth, 0.0)))
    depth_term = ad.sum_(err * ad.constant(valid.astype(np.float64))) * (1.0 / n_valid)
    total = color_term + depth_term * alpha
    return total, float(color_term.data), float(depth_term.data)


# ---------------------------------------------------------------- training


def nearest_sources(ds: Dataset, target: int, pool: Sequence[int], k: int) -> List[int]:
    others = [i for i in pool if i != target]
    c = ds.views[target].camera.center
    others.sort(key=lambda i: (float(np.linalg.norm(ds.views[i].camera.center - c)), i))
    return sorted(others[:k])


@dataclass
class TrainResult:
    model: object
    log: List[dict]
    checkpoint: Optional[Path]


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_HEADER[1:]])


def read_log(path) -> List[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "step" else float(r[k])) for k in LOG_HEADER} for r in rows]


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing mean over ``window`` entries (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def train(cfg: TrainConfig, ds: Dataset, out_dir=None, progress: bool = False) -> TrainResult:
    """Adam + cosine schedule over random rays of a random target view per step."""
    views = list(cfg.train_views) or list(range(len(ds.views)))
    if len(views) < 3:
        raise ValueError(f"need at least 3 training views, got {len(views)}")
    model = build_model(cfg.model, cfg.seed)
    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed + 1)
    sampling = SamplingConfig(cfg.n_coarse, cfg.n_fine, stratified=True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = None

    def save(tag: str) -> Path:
        path = out / f"{tag}.ckpt"
        save_checkpoint(path, model.named_parameters())
        return path

    if out is not None:
        ckpt = save("checkpoint")
    rows: List[dict] = []
    h, w = ds.views[0].image.shape[:2]
    pix = pixel_grid(w, h)
    for step in range(cfg.steps):
        target = int(rng.choice(views))
        sources = nearest_sources(ds, target, views, cfg.max_sources)
        imgs = np.stack([ds.views[i].image for i in sources])
        cams = [ds.views[i].camera for i in sources]
        pick = rng.choice(h * w, size=min(cfg.rays_per_step, h * w), replace=False)
        tv = ds.views[target]
        o, d = generate_rays(tv.camera, pix[pick])
        gt_c = tv.image.reshape(-1, 3)[pick]
        gt_d = tv.depth.reshape(-1)[pick]
        lr = cosine_lr(step, cfg.steps, cfg.lr_start, cfg.lr_end)
        try:
            ctx = model.build_context(imgs, cams, ds.bounds)
            batch = model.render_rays(ctx, o, d, ds.near, ds.far, sampling, rng)
            loss, lc, ld = loss_total(batch.color, batch.depth, gt_c, gt_d, gt_d > 0, cfg.alpha)
            ad.backward(loss)
            adam_step(params, [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params], state, lr)
        except ad.NonFiniteError as e:
            if out is not None:
                write_log(rows, out / "loss_log.csv")
            raise TrainingDiverged(step, ckpt, e) from e
        rows.append({"step": step, "lr": lr, "loss": float(loss.data), "loss_color": lc, "loss_depth": ld})
        if progress and step % 50 == 0:
            log.info("step %d loss %.4f (color %.4f depth %.4f)", step, float(loss.data), lc, ld)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            ckpt = save("checkpoint")
            write_log(rows, out / "loss_log.csv")
    if out is not None:
        ckpt = save("checkpoint")
        write_log(rows, out / "loss_log.csv")
    return TrainResult(model, rows, ckpt)


def load_model(cfg: ModelConfig, path) -> object:
    model = build_model(cfg, 0)
    load_into(model, load_checkpoint(path))
    return model


# ---------------------------------------------------------------- rendering views


@dataclass
class ViewRender:
    color: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W
    attention: np.ndarray  # (H*W, N)
    t: np.ndarray  # (H*W, N)


def render_view(
    model,
    ds: Dataset,
    camera: Camera,
    sources: Sequence[int],
    sampling: SamplingConfig,
    seed: int = 0,
    chunk: int = 256,
) -> ViewRender:
    imgs = np.stack([ds.views[i].image for i in sources])
    cams = [ds.views[i].camera for i in sources]
    rng = np.random.default_rng(seed)
    h, w = camera.height, camera.width
    o, d = generate_rays(camera, pixel_grid(w, h))
    colors, depths, attns, ts = [], [], [], []
    with ad.no_grad():
        ctx = model.build_context(imgs, cams, ds.bounds)
        for s in range(0, len(o), chunk):
            b = model.render_rays(ctx, o[s : s + chunk], d[s : s + chunk], ds.near, ds.far, sampling, rng)
            colors.append(b.color.data)
            depths.append(b.depth.data)
            attns.append(b.attention.data)
            ts.append(b.t)
    return ViewRender(
        np.concatenate(colors).reshape(h, w, 3),
        np.concatenate(depths).reshape(h, w),
        np.concatenate(attns),
        np.concatenate(ts),
    )


# ---------------------------------------------------------------- metrics


THRESHOLDS = (0.01, 0.02, 0.04)


def eval_depth(pred, gt, valid=None, extent: float = 2.0) -> Dict[str, float]:
    """MAE and percent of valid pixels within 1/2/4 % of the scene extent."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} vs gt shape {gt.shape}")
    valid = (gt > 0) if valid is None else np.asarray(valid, dtype=bool).ravel()
    n = int(valid.sum())
    if n == 0:
        return {"empty": True, "n_valid": 0, "mae": float("nan"), **{f"acc_{int(p * 100)}": float("nan") for p in THRESHOLDS}}
    err = np.abs(pred[valid] - gt[valid])
    out = {"empty": False, "n_valid": n, "mae": float(err.mean())}
    for p in THRESHOLDS:
        out[f"acc_{int(p * 100)}"] = 100.0 * float(np.mean(err < p * extent))
    return out


def psnr(pred, gt) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


def attention_kurtosis(attention, t) -> float:
    """Excess kurtosis of the alpha-weighted depth distribution; +inf when it has no spread."""
    a = np.asarray(attention, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a = a / a.sum()
    mu = np.sum(a * t)
    var = np.sum(a * (t - mu) ** 2)
    if var <= 1e-18 * max(1.0, mu * mu):
        return float("inf")
    m4 = np.sum(a * (t - mu) ** 4)
    return float(m4 / var**2 - 3.0)


def kurtosis_summary(attention: np.ndarray, t: np.ndarray, hit: np.ndarray) -> Tuple[float, int]:
    """Mean excess kurtosis over hit rays with finite values, and the count of degenerate rays."""
    vals = np.array([attention_kurtosis(a, tt) for a, tt in zip(attention[hit], t[hit])])
    finite = np.isfinite(vals)
    mean = float(vals[finite].mean()) if finite.any() else float("inf") if len(vals) else float("nan")
    return mean, int((~finite).sum())


def fuse_point_cloud(depths: Sequence[np.ndarray], cameras: Sequence[Camera], bounds=None, masks=None) -> np.ndarray:
    """Back-project every pixel with depth > 0 (and inside the mask) along its ray."""
    pts = []
    for k, (dep, cam) in enumerate(zip(depths, cameras)):
        dep = np.asarray(dep, dtype=np.float64)
        ok = dep.ravel() > 0
        if masks is not None:
            ok &= np.asarray(masks[k], dtype=bool).ravel()
        if not ok.any():
            continue
        o, d = generate_rays(cam, pixel_grid(cam.width, cam.height)[ok])
        pts.append(o + dep.ravel()[ok, None] * d)
    cloud = np.concatenate(pts) if pts else np.zeros((0, 3))
    if bounds is not None and len(cloud):
        lo, hi = np.asarray(bounds)
        cloud = cloud[np.all((cloud >= lo) & (cloud <= hi), axis=1)]
    return cloud


def sample_surface(scene: AnalyticScene, n: int, seed: int = 0, tol: float = 1e-6) -> np.ndarray:
    """Area-uniform samples on each primitive, kept when they lie on the union boundary."""
    rng = np.random.default_rng(seed)
    pts = []
    for prim in scene.primitives:
        c = np.asarray(prim.center)
        if prim.kind == "sphere":
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            p = c + prim.size[0] * d
        else:
            half = np.asarray(prim.size[:3])
            areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
            face = rng.choice(6, size=n, p=areas / areas.sum())
            u = rng.uniform(-1, 1, size=(n, 3)) * half
            axis = face % 3
            sign = np.where(face < 3, 1.0, -1.0)
            u[np.arange(n), axis] = sign * half[axis]
            p = c + u
            if prim.kind == "rounded-box":
                # pull the flat-box samples onto the rounded surface along the SDF gradient
                for _ in range(5):
                    dist = prim.sdf(p)
                    g = np.stack(
                        [(prim.sdf(p + e) - prim.sdf(p - e)) / 2e-6 for e in np.eye(3) * 1e-6], axis=1
                    )
                    p = p - dist[:, None] * g / np.linalg.norm(g, axis=1, keepdims=True)
        pts.append(p)
    pts = np.concatenate(pts)
    d, _ = sdf_all(scene, pts)
    return pts[np.abs(d) < tol]


def nearest_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    return cKDTree(points).query(queries, k=1)[0]


def chamfer_eval(points, scene: AnalyticScene, n_surface_samples: int = 20000, seed: int = 0) -> Tuple[float, float, float]:
    """(accuracy, completeness, chamfer). Accuracy uses the exact SDF; completeness
    is the mean nearest-predicted-point distance over surface samples."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        log.warning("chamfer_eval: empty point cloud; completeness is infinite")
        return float("nan"), float("inf"), float("inf")
    acc = float(np.mean(np.abs(sdf_all(scene, pts)[0])))
    surf = sample_surface(scene, n_surface_samples, seed)
    comp = float(np.mean(nearest_distances(surf, pts)))
    return acc, comp, 0.5 * (acc + comp)


def write_ply(points: np.ndarray, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def read_ply(path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    return np.array([[float(x) for x in l.split()] for l in lines[end + 1 : end + 1 + n]]).reshape(-1, 3)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    renderer: str
    depth_mae: float
    acc_1: float
    acc_2: float
    acc_4: float
    psnr: float
    kurtosis_mean: float
    kurtosis_degenerate: int
    pc_accuracy: float
    pc_completeness: float
    pc_chamfer: float
    n_points: int
    n_valid: int

    def to_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"

    def csv_header(self) -> List[str]:
        return [f.name for f in fields(self)]

    def csv_row(self) -> List[str]:
        return [str(getattr(self, f.name)) for f in fields(self)]

    def write(self, out_dir, stem: str = "report") -> Tuple[Path, Path]:
        out = Path(out_dir)
        txt = out / f"{stem}.txt"
        txt.write_text(self.to_text())
        path = out / f"{stem}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.csv_header())
            w.writerow(self.csv_row())
        return txt, path


@dataclass
class Evaluation:
    report: EvalReport
    renders: Dict[int, ViewRender]
    cloud: np.ndarray


def evaluate(
    model,
    ds: Dataset,
    eval_views: Sequence[int],
    source_views: Sequence[int],
    sampling: SamplingConfig,
    seed: int = 0,
    max_sources: int = 4,
    oracle_depth: bool = False,
    n_surface_samples: int = 20000,
) -> Evaluation:
    """Render ``eval_views`` from ``source_views`` and score depth, color, attention and fusion.

    ``oracle_depth`` swaps predicted depth for ground truth (sanity mode).
    """
    renders = {}
    preds, gts, valids, colors, gcolors = [], [], [], [], []
    attn_all, t_all, hit_all = [], [], []
    for v in eval_views:
        srcs = nearest_sources(ds, v, list(source_views), max_sources)
        if v in source_views and not srcs:
            srcs = list(source_views)
        r = render_view(model, ds, ds.views[v].camera, srcs, sampling, seed)
        renders[v] = r
        gt = ds.views[v].depth
        preds.append(gt if oracle_depth else r.depth)
        gts.append(gt)
        valids.append(gt > 0)
        colors.append(r.color)
        gcolors.append(ds.views[v].image)
        attn_all.append(r.attention)
        t_all.append(r.t)
        hit_all.append((gt > 0).ravel())
    dm = eval_depth(np.concatenate([p.ravel() for p in preds]), np.concatenate([g.ravel() for g in gts]), None, ds.extent)
    km, kd = kurtosis_summary(np.concatenate(attn_all), np.concatenate(t_all), np.concatenate(hit_all))
    cams = [ds.views[v].camera for v in eval_views]
    cloud = fuse_point_cloud(preds, cams, ds.bounds, masks=valids)
    if ds.scene is not None and len(cloud):
        acc, comp, ch = chamfer_eval(cloud, ds.scene, n_surface_samples, seed)
    else:
        acc, comp, ch = float("nan"), float("inf"), float("inf")
    report = EvalReport(
        renderer=getattr(getattr(model, "cfg", None), "renderer", "unknown"),
        depth_mae=dm["mae"],
        acc_1=dm["acc_1"],
        acc_2=dm["acc_2"],
        acc_4=dm["acc_4"],
        psnr=psnr(np.concatenate([c.ravel() for c in colors]), np.concatenate([c.ravel() for c in gcolors])),
        kurtosis_mean=km,
        kurtosis_degenerate=kd,
        pc_accuracy=acc,
        pc_completeness=comp,
        pc_chamfer=ch,
        n_points=len(cloud),
        n_valid=dm["n_valid"],
    )
    return Evaluation(report, renders, cloud)

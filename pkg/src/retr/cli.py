"""Command-line entry point: gen-data, train, render, eval, selftest.

Exit codes: 0 success, 1 self-test failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib.pyplot as plt
import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig
from .geometry import GeometryError
from .harness import (
    TrainingDiverged,
    evaluate,
    load_model,
    nearest_sources,
    psnr,
    render_view,
    train,
    write_ply,
)
from .nn import CheckpointError
from .plotting import plot_attention, plot_depth_maps, plot_loss_curve
from .scenes import (
    BUILTIN_SCENES,
    AnalyticScene,
    DatasetFormatError,
    dataset_load,
    dataset_save,
    export_previews,
    generate_dataset,
    ring_cameras,
)

log = logging.getLogger("retr")

RESOLVED_NAME = "resolved_config.ini"


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file with [data], [model], [train], [eval], [run] sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, help="random seed (run.seed)")
    p.add_argument("--threads", type=int, help="BLAS threads (default: RETR_THREADS or all cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="retr", description="Transformer ray renderer with a classical volume-rendering baseline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render an analytic scene into a dataset file with PNG previews")
    _common(p)
    p.add_argument("--scene", default=None, help="builtin name (sphere-box) or a JSON scene file")
    p.add_argument("--views", type=int, help="number of ring cameras")
    p.add_argument("--size", type=int, help="image width and height in pixels")
    p.add_argument("--out", required=True, help="dataset file to write")

    p = sub.add_parser("train", help="train a renderer on a dataset")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--renderer", choices=["retr", "classical-baseline"])
    p.add_argument("--blocks", type=int, help="stacked occlusion/render blocks")
    p.add_argument("--alpha", type=float, help="depth loss weight (0 = unsupervised depth)")
    p.add_argument("--rays", type=int, help="rays per step")
    p.add_argument("--train-views", help="comma-separated view indices")

    p = sub.add_parser("render", help="render one view (dataset index or novel ring azimuth)")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--view", type=int, help="dataset view index")
    g.add_argument("--azimuth", type=float, help="novel ring camera azimuth in degrees")
    p.add_argument("--dump-attention", metavar="PX,PY", help="write (t, alpha) for one pixel")

    p = sub.add_parser("eval", help="render views, score depth/color/attention, fuse a point cloud")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gt-depth", action="store_true", help="score ground-truth depth instead (sanity mode)")

    sub.add_parser("selftest", help="run the invariant self-test suites")
    return ap


def _resolve(args, extra: Sequence[str] = (), config_path=None) -> RunConfig:
    cfg = RunConfig.load(args.config or config_path, list(extra) + list(args.set))
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    if args.threads is not None:
        cfg.set("run.threads", args.threads)
    return cfg


def _threads(cfg: RunConfig) -> Optional[int]:
    n = int(cfg.get("run.threads"))
    if n <= 0:
        env = os.environ.get("RETR_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise UsageError(f"RETR_THREADS must be an integer, got {env!r}") from None
    return n if n > 0 else None


def _load_dataset(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    try:
        return dataset_load(p)
    except DatasetFormatError as e:
        raise UsageError(str(e)) from None


def _scene(spec: str) -> AnalyticScene:
    if spec in BUILTIN_SCENES:
        return BUILTIN_SCENES[spec]()
    p = Path(spec)
    if not p.exists():
        raise UsageError(f"unknown scene {spec!r}: not a builtin ({', '.join(BUILTIN_SCENES)}) or a file")
    try:
        return AnalyticScene.from_dict(json.loads(p.read_text()))
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"bad scene spec {p}: {e}") from None


def cmd_gen_data(args) -> int:
    extra = []
    if args.scene is not None:
        extra.append(f"data.scene={args.scene}")
    if args.views is not None:
        extra.append(f"data.views={args.views}")
    if args.size is not None:
        extra.append(f"data.size={args.size}")
    cfg = _resolve(args, extra)
    d = cfg.values["data"]
    scene = _scene(str(d["scene"]))
    if d["views"] < 3:
        raise UsageError(f"need at least 3 views, got {d['views']}")
    cams = ring_cameras(int(d["views"]), float(d["radius"]), float(d["elevation"]), int(d["size"]), float(d["fov"]))
    try:
        ds = generate_dataset(scene, cams, d["near"], d["far"], int(cfg.get("run.seed")), scene_id=Path(str(d["scene"])).stem)
    except (ValueError, GeometryError) as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_save(ds, out)
    export_previews(ds, out.parent / f"{out.stem}_previews")
    cfg.write(out.parent / RESOLVED_NAME)
    hit = np.mean([np.mean(v.depth > 0) for v in ds.views])
    print(f"wrote {out} ({len(ds.views)} views, {d['size']}x{d['size']}, hit fraction {hit:.3f})")
    return 0


def cmd_train(args) -> int:
    extra = []
    for flag, key in (("steps", "train.steps"), ("renderer", "model.renderer"), ("blocks", "model.blocks"),
                      ("alpha", "train.alpha"), ("rays", "train.rays_per_step"), ("train_views", "train.train_views")):
        val = getattr(args, flag)
        if val is not None:
            extra.append(f"{key}={val}")
    cfg = _resolve(args, extra)
    ds = _load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED_NAME)
    tcfg = cfg.train_config()
    bad = [v for v in tcfg.train_views if not 0 <= v < len(ds.views)]
    if bad:
        raise UsageError(f"train views {bad} out of range for {len(ds.views)} views")
    try:
        res = train(tcfg, ds, out, progress=True)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        raise UsageError(str(e)) from None
    if res.log:
        plot_loss_curve(res.log, out / "loss_curve.png")
        print(f"final loss {res.log[-1]['loss']:.5f} after {len(res.log)} steps")
    print(f"checkpoint {res.checkpoint}")
    return 0


def _model_from(args, cfg: RunConfig):
    try:
        return load_model(cfg.model_config(), args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    except CheckpointError as e:
        raise UsageError(f"checkpoint {args.checkpoint} does not fit the configured model: {e}") from None


def _sources_for(cfg: RunConfig, ds, target: Optional[int]) -> List[int]:
    pool = list(cfg.get("eval.source_views")) or list(cfg.get("train.train_views")) or list(range(len(ds.views)))
    if target is None:
        return pool[: cfg.get("train.max_sources")]
    return nearest_sources(ds, target, pool, cfg.get("train.max_sources"))


def _ckpt_config(args) -> Optional[Path]:
    p = Path(args.checkpoint).parent / RESOLVED_NAME
    return p if p.exists() else None


def cmd_render(args) -> int:
    cfg = _resolve(args, config_path=_ckpt_config(args))
    ds = _load_dataset(args.dataset)
    model = _model_from(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED_NAME)
    d = cfg.values["data"]
    if args.view is not None:
        if not 0 <= args.view < len(ds.views):
            raise UsageError(f"view {args.view} out of range for {len(ds.views)} views")
        cam = ds.views[args.view].camera
        sources = _sources_for(cfg, ds, args.view)
        tag = f"view{args.view}"
    else:
        h = ds.views[0].camera.height
        cam = ring_cameras(1, float(d["radius"]), float(d["elevation"]), h, float(d["fov"]), args.azimuth)[0]
        sources = _sources_for(cfg, ds, None)
        tag = f"az{args.azimuth:g}"
    sampling = cfg.eval_sampling()
    seed = int(cfg.get("run.seed"))
    r = render_view(model, ds, cam, sources, sampling, seed)
    plt.imsave(out / f"render_{tag}.png", np.clip(r.color, 0.0, 1.0))
    np.savetxt(out / f"depth_{tag}.csv", r.depth, delimiter=",", fmt="%.9g")
    print(f"wrote {out / f'render_{tag}.png'} and depth_{tag}.csv (sources {sources})")
    if args.view is not None:
        print(f"psnr {psnr(r.color, ds.views[args.view].image):.3f} dB")
    if args.dump_attention:
        try:
            px, py = (int(x) for x in args.dump_attention.split(","))
        except ValueError:
            raise UsageError(f"--dump-attention expects PX,PY, got {args.dump_attention!r}") from None
        if not (0 <= px < cam.width and 0 <= py < cam.height):
            raise UsageError(f"pixel ({px}, {py}) outside {cam.width}x{cam.height} image")
        k = py * cam.width + px
        order = np.argsort(r.t[k], kind="stable")
        path = out / f"attention_{px}_{py}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "alpha"])
            for i in order:
                w.writerow([repr(float(r.t[k, i])), repr(float(r.attention[k, i]))])
        gt = ds.views[args.view].depth[py, px] if args.view is not None else None
        plot_attention(r.t[k], r.attention[k], out / f"attention_{px}_{py}.png", gt)
        print(f"wrote {path} ({len(order)} samples, alpha sum {r.attention[k].sum():.9f})")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, config_path=_ckpt_config(args))
    ds = _load_dataset(args.dataset)
    model = _model_from(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED_NAME)
    views = list(cfg.get("eval.eval_views")) or list(range(len(ds.views)))
    bad = [v for v in views if not 0 <= v < len(ds.views)]
    if bad:
        raise UsageError(f"eval views {bad} out of range for {len(ds.views)} views")
    pool = list(cfg.get("eval.source_views")) or list(cfg.get("train.train_views")) or list(range(len(ds.views)))
    ev = evaluate(
        model,
        ds,
        views,
        pool,
        cfg.eval_sampling(),
        seed=int(cfg.get("run.seed")),
        max_sources=int(cfg.get("train.max_sources")),
        oracle_depth=args.gt_depth,
        n_surface_samples=int(cfg.get("eval.surface_samples")),
    )
    ev.report.write(out)
    write_ply(ev.cloud, out / "cloud.ply")
    plot_depth_maps({v: r.depth for v, r in ev.renders.items()}, {v: ds.views[v].depth for v in views},
                    out / "depth_maps.png", ds.near, ds.far)
    print("--- report ---")
    print(ev.report.to_text(), end="")
    print("--- end report ---")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import main

    return main()


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "selftest": cmd_selftest}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = None
        if args.command != "selftest":
            limit = _threads(_resolve(args, config_path=_ckpt_config(args) if hasattr(args, "checkpoint") else None))
        ctx = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
        with ctx:
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

import math

import numpy as np
import pytest

from retr import autodiff as ad
from retr import harness
from retr.geometry import generate_ray, generate_rays
from retr.harness import (
    EvalReport,
    TrainConfig,
    TrainingDiverged,
    attention_kurtosis,
    chamfer_eval,
    eval_depth,
    evaluate,
    fuse_point_cloud,
    kurtosis_summary,
    load_model,
    loss_total,
    nearest_distances,
    nearest_sources,
    psnr,
    read_log,
    read_ply,
    sample_surface,
    smoothed,
    train,
    write_ply,
)
from retr.nn import load_checkpoint
from retr.renderer import ModelConfig, SamplingConfig
from retr.scenes import AnalyticScene, Primitive, default_scene, generate_dataset, ring_cameras, sdf_all


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(default_scene(), ring_cameras())


@pytest.fixture(scope="module")
def small_ds():
    # 16x16 keeps the training-loop tests fast
    return generate_dataset(default_scene(), ring_cameras(4, size=16))


def tiny_train(renderer="retr", **kw):
    mc = ModelConfig(renderer=renderer, dim=8, heads=2, channels=(2, 2), volume_res=4, decoder_hidden=4, fusion_hidden=8)
    base = dict(steps=3, rays_per_step=4, lr_start=1e-3, lr_end=1e-5, n_coarse=6, n_fine=4, model=mc)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- loss


def test_loss_perfect_prediction():
    c = np.random.default_rng(0).uniform(size=(4, 3))
    d = np.array([2.0, 3.0, 0.0, 2.5])
    loss, lc, ld = loss_total(ad.constant(c), ad.constant(d), c, d, d > 0)
    assert float(loss.data) == 0.0 and lc == 0.0 and ld == 0.0


def test_loss_color_by_hand():
    pred = np.zeros((2, 3))
    gt = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]])
    _, lc, _ = loss_total(ad.constant(pred), ad.constant(np.zeros(2)), gt, np.zeros(2), np.zeros(2, bool))
    assert lc == 2.5


def test_loss_depth_term_only_valid_rays():
    c = np.zeros((3, 3))
    pred_d = np.array([2.0, 3.0, 4.0])
    gt_d = np.array([2.5, 0.0, 3.0])
    loss, lc, ld = loss_total(ad.constant(c), ad.constant(pred_d), c, gt_d, gt_d > 0, alpha=2.0)
    assert ld == pytest.approx(0.75, abs=1e-15)
    assert float(loss.data) == pytest.approx(1.5, abs=1e-15)


def test_loss_alpha_zero_is_color_only():
    rng = np.random.default_rng(0)
    pc, gc = rng.uniform(size=(5, 3)), rng.uniform(size=(5, 3))
    pd, gd = rng.uniform(2, 3, 5), rng.uniform(2, 3, 5)
    loss0, lc, _ = loss_total(ad.constant(pc), ad.constant(pd), gc, gd, gd > 0, alpha=0.0)
    assert float(loss0.data) == lc
    loss1, _, ld = loss_total(ad.constant(gc), ad.constant(pd), gc, gd, gd > 0, alpha=0.7)
    assert float(loss1.data) == 0.7 * ld


def test_loss_no_valid_depth():
    loss, _, ld = loss_total(ad.constant(np.zeros((2, 3))), ad.constant(np.ones(2)), np.zeros((2, 3)), np.zeros(2), np.zeros(2, bool))
    assert ld == 0.0 and float(loss.data) == 0.0


def test_loss_gradient():
    rng = np.random.default_rng(0)
    c = ad.tensor(rng.uniform(size=(4, 3)), requires_grad=True)
    d = ad.tensor(rng.uniform(2, 3, 4), requires_grad=True)
    gc, gd = rng.uniform(size=(4, 3)), np.array([2.2, 0.0, 2.9, 2.4])
    assert ad.grad_check(lambda: loss_total(c, d, gc, gd, gd > 0)[0], [c, d]) < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)


# ---------------------------------------------------------------- training


def test_nearest_sources(ds):
    assert nearest_sources(ds, 0, range(6), 2) == [1, 5]
    assert nearest_sources(ds, 0, [0, 2, 4], 4) == [2, 4]


def test_zero_steps(tmp_path, small_ds):
    res = train(tiny_train(steps=0), small_ds, tmp_path)
    assert res.log == [] and res.checkpoint.exists()
    assert read_log(tmp_path / "loss_log.csv") == []
    state = load_checkpoint(res.checkpoint)
    assert set(state) == set(res.model.named_parameters())


def test_training_deterministic(tmp_path, small_ds):
    a = train(tiny_train(), small_ds, tmp_path / "a")
    b = train(tiny_train(), small_ds, tmp_path / "b")
    assert (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    c = train(tiny_train(seed=1), small_ds)
    assert [r["loss"] for r in c.log] != [r["loss"] for r in a.log]


def test_log_round_trip(tmp_path, small_ds):
    res = train(tiny_train(), small_ds, tmp_path)
    back = read_log(tmp_path / "loss_log.csv")
    assert back == res.log
    assert [r["step"] for r in back] == [0, 1, 2]
    assert (tmp_path / "loss_log.csv").read_text().splitlines()[0] == "step,lr,loss,loss_color,loss_depth"


def test_checkpoint_reload_renders_identically(tmp_path, small_ds):
    cfg = tiny_train()
    res = train(cfg, small_ds, tmp_path)
    model = load_model(cfg.model, res.checkpoint)
    s = SamplingConfig(6, 4)
    a = harness.render_view(res.model, small_ds, small_ds.views[1].camera, [0, 2], s)
    b = harness.render_view(model, small_ds, small_ds.views[1].camera, [0, 2], s)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.color, b.color)


def test_non_finite_loss_aborts(tmp_path, small_ds, monkeypatch):
    real = harness.loss_total
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise ad.NonFiniteError("injected")
        return real(*args, **kw)

    monkeypatch.setattr(harness, "loss_total", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(tiny_train(steps=5, checkpoint_every=1), small_ds, tmp_path)
    assert info.value.step == 2
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()
    assert len(read_log(tmp_path / "loss_log.csv")) == 2


def test_needs_three_views(small_ds):
    with pytest.raises(ValueError):
        train(tiny_train(train_views=(0, 1)), small_ds)


def test_smoothed():
    np.testing.assert_allclose(smoothed([1.0, 2.0, 3.0, 4.0], 2), [1.0, 1.5, 2.5, 3.5])
    assert smoothed(np.ones(200))[-1] == 1.0


@pytest.mark.parametrize("renderer", ["retr", "classical-baseline"])
def test_baseline_trains_through_same_loop(small_ds, renderer):
    res = train(tiny_train(renderer, steps=2), small_ds)
    assert len(res.log) == 2 and all(math.isfinite(r["loss"]) for r in res.log)


# ---------------------------------------------------------------- metrics


def test_eval_depth_exact():
    gt = np.array([2.0, 3.0, 0.0, 4.0])
    m = eval_depth(gt, gt)
    assert m["mae"] == 0.0 and m["acc_1"] == m["acc_2"] == m["acc_4"] == 100.0 and m["n_valid"] == 3


def test_eval_depth_step_function():
    gt = np.full(10, 3.0)
    m = eval_depth(gt + 0.015 * 2.0, gt, extent=2.0)
    assert m["acc_1"] == 0.0 and m["acc_2"] == 100.0 and m["acc_4"] == 100.0


def test_eval_depth_hand_counted():
    gt = np.array([2.0, 2.0, 2.0, 2.0])
    pred = gt + np.array([0.01, 0.03, 0.07, 0.2])
    m = eval_depth(pred, gt, extent=2.0)  # thresholds 0.02, 0.04, 0.08
    assert (m["acc_1"], m["acc_2"], m["acc_4"]) == (25.0, 50.0, 75.0)
    assert m["mae"] == pytest.approx(0.0775, abs=1e-15)


def test_eval_depth_empty_and_shape():
    m = eval_depth(np.ones(3), np.zeros(3))
    assert m["empty"] and math.isnan(m["mae"])
    with pytest.raises(ValueError):
        eval_depth(np.ones(3), np.ones(4))


def test_psnr():
    assert psnr(np.zeros(4), np.zeros(4)) == math.inf
    assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0, abs=1e-12)


def test_kurtosis_uniform_closed_form():
    n = 64
    t = np.linspace(1.5, 4.5, n)
    expected = -6.0 * (n * n + 1) / (5.0 * (n * n - 1))
    assert attention_kurtosis(np.full(n, 1 / n), t) == pytest.approx(expected, abs=1e-9)
    big = 20000
    assert abs(attention_kurtosis(np.full(big, 1 / big), np.linspace(0, 1, big)) + 1.2) < 1e-6


def test_kurtosis_degenerate_and_two_point():
    assert attention_kurtosis(np.eye(8)[3], np.arange(8.0)) == math.inf
    assert attention_kurtosis(np.array([0.5, 0.5]), np.array([1.0, 3.0])) == pytest.approx(-2.0, abs=1e-12)


def test_kurtosis_summary_hit_only():
    t = np.tile(np.arange(4.0), (3, 1))
    a = np.array([[0.5, 0, 0, 0.5], np.eye(4)[1], [0.25] * 4])
    mean, deg = kurtosis_summary(a, t, np.array([True, True, False]))
    assert mean == pytest.approx(-2.0) and deg == 1


# ---------------------------------------------------------------- fusion and chamfer


def test_fuse_empty():
    cam = ring_cameras(3)[0]
    assert fuse_point_cloud([np.zeros((32, 32))], [cam]).shape == (0, 3)


def test_fuse_single_pixel():
    cam = ring_cameras(3)[0]
    dep = np.zeros((32, 32))
    dep[5, 7] = 2.5
    pts = fuse_point_cloud([dep], [cam])
    o, d = generate_rays(cam, np.array([[7.0, 5.0]]))
    np.testing.assert_array_equal(pts, o + 2.5 * d)
    ray = generate_ray(cam, (7, 5))
    np.testing.assert_allclose(pts[0], ray.at(2.5), atol=1e-15)


def test_fuse_gt_depths_on_surface(ds):
    pts = fuse_point_cloud([v.depth for v in ds.views], [v.camera for v in ds.views], ds.bounds)
    assert len(pts) > 1000
    assert np.max(np.abs(sdf_all(ds.scene, pts)[0])) < 1e-4


def test_fuse_discards_out_of_bounds():
    cam = ring_cameras(3)[0]
    dep = np.full((32, 32), 4.4)  # beyond the box for most pixels
    inside = fuse_point_cloud([dep], [cam], np.array([[-1.0] * 3, [1.0] * 3]))
    assert np.all(np.abs(inside) <= 1.0)
    assert len(inside) < 32 * 32


def test_surface_samples_on_union(ds):
    s = sample_surface(ds.scene, 2000, seed=1)
    assert len(s) > 2000
    assert np.max(np.abs(sdf_all(ds.scene, s)[0])) < 1e-6


def test_surface_samples_rounded_box():
    sc = AnalyticScene([Primitive("rounded-box", (0, 0, 0), (0.5, 0.4, 0.3, 0.1), (0.5, 0.5, 0.5))])
    s = sample_surface(sc, 500)
    assert len(s) > 450
    assert np.max(np.abs(sdf_all(sc, s)[0])) < 1e-6


def test_chamfer_surface_itself(ds):
    s = sample_surface(ds.scene, 3000, seed=5)
    acc, comp, ch = chamfer_eval(s, ds.scene, 3000, seed=6)
    assert acc < 1e-6 and comp < 0.05 and ch == pytest.approx(0.5 * (acc + comp))


def test_chamfer_offset_accuracy():
    sc = AnalyticScene([Primitive("sphere", (0, 0, 0), (0.5,), (0.5, 0.5, 0.5))])
    s = sample_surface(sc, 500)
    n = s / np.linalg.norm(s, axis=1, keepdims=True)
    acc, _, _ = chamfer_eval(s + 0.01 * n, sc, 500)
    assert abs(acc - 0.01) < 1e-9


def test_completeness_matches_brute_force():
    rng = np.random.default_rng(0)
    q = rng.uniform(-1, 1, (300, 3))
    p = rng.uniform(-1, 1, (200, 3))
    brute = np.sqrt(((q[:, None, :] - p[None]) ** 2).sum(-1)).min(1)
    assert np.max(np.abs(nearest_distances(q, p) - brute)) < 1e-12


def test_chamfer_empty_cloud(ds, caplog):
    with caplog.at_level("WARNING"):
        acc, comp, ch = chamfer_eval(np.zeros((0, 3)), ds.scene)
    assert math.isnan(acc) and comp == math.inf and ch == math.inf
    assert "empty" in caplog.text


def test_ply_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(17, 3))
    write_ply(pts, tmp_path / "c.ply")
    text = (tmp_path / "c.ply").read_text()
    assert text.startswith("ply\nformat ascii 1.0\nelement vertex 17\n")
    np.testing.assert_allclose(read_ply(tmp_path / "c.ply"), pts, rtol=1e-8)


# ---------------------------------------------------------------- evaluation


@pytest.mark.parametrize("renderer", ["retr", "classical-baseline"])
def test_evaluate_report_well_formed(tmp_path, small_ds, renderer):
    cfg = tiny_train(renderer)
    from retr.renderer import build_model

    model = build_model(cfg.model, 0)
    ev = evaluate(model, small_ds, [1, 3], [0, 2], SamplingConfig(6, 4), n_surface_samples=500)
    r = ev.report
    assert r.renderer == renderer
    for v in (r.acc_1, r.acc_2, r.acc_4):
        assert 0.0 <= v <= 100.0
    assert r.pc_chamfer >= 0 and r.n_valid > 0
    assert ev.renders[1].depth.shape == (16, 16)
    txt, csv_path = r.write(tmp_path)
    assert "depth_mae = " in txt.read_text()
    header, row = csv_path.read_text().splitlines()
    assert header.split(",") == EvalReport.csv_header(r) and len(row.split(",")) == len(header.split(","))


def test_evaluate_oracle_depth(small_ds):
    from retr.renderer import build_model

    model = build_model(tiny_train().model, 0)
    ev = evaluate(model, small_ds, [1, 3], [0, 2], SamplingConfig(6, 0), oracle_depth=True, n_surface_samples=500)
    assert ev.report.depth_mae == 0.0 and ev.report.acc_1 == 100.0
    assert ev.report.pc_accuracy < 1e-4

import math

import numpy as np
import pytest

from retr import autodiff as ad
from retr.geometry import generate_ray, generate_rays
from retr.renderer import (
    ColorHead,
    CpeConfig,
    ModelConfig,
    OcclusionBlock,
    RenderBlock,
    SamplingConfig,
    blend_projected_colors,
    build_model,
    classical_volume_render,
    continuous_positional_encoding,
    decode_color,
    generalized_render_specialcase_check,
    index_positional_encoding,
    occlusion_mask,
    occlusion_transform,
    render_depth,
    render_ray,
    render_transform,
)
from retr.scenes import default_scene, generate_dataset, ring_cameras


def toy_config(renderer="retr", **kw):
    base = dict(dim=8, heads=2, channels=(2, 2), volume_res=4, decoder_hidden=4, fusion_hidden=8)
    base.update(kw)
    return ModelConfig(renderer=renderer, **base)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(default_scene(), ring_cameras(3))


@pytest.fixture(scope="module")
def small(ds):
    """Three 8x8 views of the default scene."""
    images = np.stack([v.image[::4, ::4] for v in ds.views])
    cams = [v.camera.scaled(0.25) for v in ds.views]
    return images, cams, ds.bounds, ds.near, ds.far


def _rays(cam, n, seed=0):
    rng = np.random.default_rng(seed)
    px = rng.uniform(0, cam.width - 1, (n, 2))
    return generate_rays(cam, px)


# ---------------------------------------------------------------- classical rendering


def test_classical_empty_space():
    color, w = classical_volume_render(np.zeros(4), np.ones((4, 3)))
    np.testing.assert_array_equal(w.data, 0.0)
    np.testing.assert_array_equal(color.data, 0.0)


def test_classical_opaque_front():
    c = np.random.default_rng(0).uniform(size=(5, 3))
    color, w = classical_volume_render(np.array([50.0, 1.0, 1.0, 1.0, 1.0]), c)
    assert abs(w.data[0] - 1.0) < 1e-9
    np.testing.assert_allclose(color.data, c[0], atol=1e-9)


def test_classical_two_samples():
    _, w = classical_volume_render(np.array([0.5, 0.5]), np.zeros((2, 3)))
    a = 1 - math.exp(-0.5)
    np.testing.assert_allclose(w.data, [a, math.exp(-0.5) * a], atol=1e-15)
    assert abs(w.data[0] - 0.39347) < 1e-5 and abs(w.data[1] - 0.23865) < 1e-5


def test_classical_negative_density_rejected():
    with pytest.raises(ValueError):
        classical_volume_render(np.array([0.1, -0.1]), np.zeros((2, 3)))


def test_classical_batched_matches_single():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 2, (4, 6))
    c = rng.uniform(size=(4, 6, 3))
    color, w = classical_volume_render(s, c)
    for i in range(4):
        ci, wi = classical_volume_render(s[i], c[i])
        np.testing.assert_allclose(color.data[i], ci.data, atol=1e-14)
        np.testing.assert_allclose(w.data[i], wi.data, atol=1e-14)


def test_blend_examples():
    np.testing.assert_array_equal(blend_projected_colors([1.0], [[0.2, 0.3, 0.4]]), [0.2, 0.3, 0.4])
    np.testing.assert_array_equal(blend_projected_colors([0.5, 0.5], [[0, 0, 0], [1, 1, 1]]), [0.5] * 3)
    np.testing.assert_allclose(blend_projected_colors([0.25, 0.75], [[1, 0, 0], [0, 0, 1]]), [0.25, 0, 0.75])


def test_specialcase_examples():
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(3), size=5)
    rgb = rng.uniform(size=(5, 3, 3))
    assert generalized_render_specialcase_check(np.zeros(5), w, rgb) == 0.0
    assert generalized_render_specialcase_check(np.array([60.0, 1, 1, 1, 1]), w, rgb) < 1e-9
    for _ in range(20):
        n = int(rng.integers(1, 30))
        sig = rng.uniform(0, 3, n)
        w = rng.dirichlet(np.ones(2), size=n)
        assert generalized_render_specialcase_check(sig, w, rng.uniform(size=(n, 2, 3))) < 1e-9


# ---------------------------------------------------------------- positional encodings


def test_cpe_zero():
    pe = continuous_positional_encoding(0.0, CpeConfig(100.0, 8))
    np.testing.assert_array_equal(pe, [0, 1, 0, 1, 0, 1, 0, 1])


def test_cpe_self_dot():
    for t in np.random.default_rng(0).uniform(-10, 10, 20):
        pe = continuous_positional_encoding(t, CpeConfig(100.0, 16))
        assert abs(pe @ pe - 8.0) < 1e-12


def test_cpe_dot_identity():
    rng = np.random.default_rng(1)
    cfg = CpeConfig(100.0, 32)
    k = np.arange(16)
    for ti, tj in rng.uniform(0, 5, (100, 2)):
        dot = continuous_positional_encoding(ti, cfg) @ continuous_positional_encoding(tj, cfg)
        ref = np.sum(np.cos(100.0 * (tj - ti) / 10000.0 ** (2 * k / 32)))
        assert abs(dot - ref) < 1e-9


def test_cpe_config_validation():
    with pytest.raises(ValueError):
        CpeConfig(100.0, 7)
    with pytest.raises(ValueError):
        CpeConfig(0.0, 8)


def test_cpe_independent_of_sample_count():
    cfg = CpeConfig(100.0, 16)
    t32 = np.linspace(1.5, 4.5, 32)
    t64 = np.sort(np.concatenate([t32, t32[:-1] + np.diff(t32) / 2]))
    i32 = 10
    i64 = int(np.nonzero(t64 == t32[i32])[0][0])
    a = continuous_positional_encoding(t32, cfg)[i32]
    b = continuous_positional_encoding(t64, cfg)[i64]
    assert np.max(np.abs(a - b)) == 0.0
    idx_a = index_positional_encoding(32, 16)[i32]
    idx_b = index_positional_encoding(64, 16)[i64]
    assert np.max(np.abs(idx_a - idx_b)) > 0.1


# ---------------------------------------------------------------- occlusion transformer


def test_occlusion_mask_layout():
    m = occlusion_mask(3)
    np.testing.assert_array_equal(m, [[1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]])


def test_occlusion_single_sample():
    rng = np.random.default_rng(0)
    blk = OcclusionBlock(8, 2, rng)
    out = occlusion_transform(ad.constant(rng.normal(size=8)), ad.constant(rng.normal(size=(1, 8))), None, blk)
    assert out.shape == (1, 8)


def test_occlusion_empty_rejected():
    rng = np.random.default_rng(0)
    blk = OcclusionBlock(8, 2, rng)
    with pytest.raises(ValueError):
        occlusion_transform(ad.constant(np.zeros(8)), ad.constant(np.zeros((0, 8))), None, blk)


def test_occlusion_causality():
    rng = np.random.default_rng(0)
    for _ in range(5):
        blk = OcclusionBlock(16, 2, rng)
        tok = ad.constant(rng.normal(size=16))
        f = rng.normal(size=(8, 16))
        j = int(rng.integers(1, 8))
        base = occlusion_transform(tok, ad.constant(f), None, blk).data
        g = f.copy()
        g[j] += 1.0
        moved = occlusion_transform(tok, ad.constant(g), None, blk).data
        assert np.array_equal(base[:j], moved[:j])
        assert not np.array_equal(base[j:], moved[j:])


def test_occlusion_matches_truncated_reference():
    # every row must equal an unmasked attention over its own truncated key set
    rng = np.random.default_rng(0)
    blk = OcclusionBlock(8, 2, rng)
    tok = rng.normal(size=8)
    f = np.tile(rng.normal(size=(1, 8)), (5, 1))
    pe = continuous_positional_encoding(np.linspace(1, 2, 5), CpeConfig(10.0, 8))
    out = occlusion_transform(ad.constant(tok), ad.constant(f), pe, blk).data
    x = f + pe
    for i in range(5):
        kv = ad.constant(np.vstack([tok[None], x[: i + 1]]))
        att, _ = blk.attn(ad.constant(x[i : i + 1]), kv, kv)
        ref = blk.mlp(att + ad.constant(x[i : i + 1])).data[0]
        np.testing.assert_allclose(out[i], ref, atol=1e-12)


def test_occlusion_all_equal_inputs_differ_only_by_mask():
    rng = np.random.default_rng(0)
    blk = OcclusionBlock(8, 2, rng)
    f = np.tile(rng.normal(size=(1, 8)), (4, 1))
    out = occlusion_transform(ad.constant(rng.normal(size=8)), ad.constant(f), None, blk).data
    # rows see the token plus i identical copies, so they all differ
    for i in range(3):
        assert not np.allclose(out[i], out[i + 1])


def test_occlusion_batched_matches_single():
    rng = np.random.default_rng(0)
    blk = OcclusionBlock(8, 2, rng)
    tok = ad.constant(rng.normal(size=8))
    f = rng.normal(size=(3, 6, 8))
    batched = occlusion_transform(tok, ad.constant(f), None, blk).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], occlusion_transform(tok, ad.constant(f[b]), None, blk).data, atol=1e-12)


# ---------------------------------------------------------------- render transformer


def test_render_single_sample():
    rng = np.random.default_rng(0)
    blk = RenderBlock(8, 2, rng)
    v = rng.normal(size=(1, 8))
    feat, alpha = render_transform(ad.constant(rng.normal(size=8)), ad.constant(rng.normal(size=(1, 8))), ad.constant(v), blk)
    np.testing.assert_allclose(alpha.data, [1.0], atol=1e-15)
    np.testing.assert_allclose(feat.data, blk.attn.o(blk.attn.v(ad.constant(v))).data[0], atol=1e-12)


def test_render_identical_keys_uniform():
    rng = np.random.default_rng(0)
    blk = RenderBlock(8, 2, rng)
    keys = np.tile(rng.normal(size=(1, 8)), (5, 1))
    vals = rng.normal(size=(5, 8))
    feat, alpha = render_transform(ad.constant(rng.normal(size=8)), ad.constant(keys), ad.constant(vals), blk)
    np.testing.assert_allclose(alpha.data, 0.2, atol=1e-15)
    mean_v = blk.attn.o(blk.attn.v(ad.constant(vals.mean(0, keepdims=True)))).data[0]
    np.testing.assert_allclose(feat.data, mean_v, atol=1e-12)


def test_render_matches_reference():
    rng = np.random.default_rng(0)
    d, n, h = 4, 3, 2
    blk = RenderBlock(d, h, rng)
    tok = rng.normal(size=d)
    k_in = rng.normal(size=(n, d))
    v_in = rng.normal(size=(n, d))
    feat, alpha = render_transform(ad.constant(tok), ad.constant(k_in), ad.constant(v_in), blk)
    a = blk.attn
    q = tok @ a.q.weight.data + a.q.bias.data[0]
    k = k_in @ a.k.weight.data + a.k.bias.data[0]
    v = v_in @ a.v.weight.data + a.v.bias.data[0]
    hd = d // h
    heads_out, maps = [], []
    for j in range(h):
        s = slice(j * hd, (j + 1) * hd)
        logits = k[:, s] @ q[s] / math.sqrt(hd)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        maps.append(w)
        heads_out.append(w @ v[:, s])
    ref = np.concatenate(heads_out) @ a.o.weight.data + a.o.bias.data[0]
    np.testing.assert_allclose(feat.data, ref, atol=1e-10)
    np.testing.assert_allclose(alpha.data, np.mean(maps, axis=0), atol=1e-10)


def test_render_keys_and_values_are_separate():
    rng = np.random.default_rng(0)
    blk = RenderBlock(8, 2, rng)
    tok = ad.constant(rng.normal(size=8))
    keys = rng.normal(size=(4, 8))
    vals = rng.normal(size=(4, 8))
    _, a1 = render_transform(tok, ad.constant(keys), ad.constant(vals), blk)
    _, a2 = render_transform(tok, ad.constant(keys), ad.constant(vals * 3.0), blk)
    np.testing.assert_array_equal(a1.data, a2.data)


# ---------------------------------------------------------------- color and depth


def test_decode_color_zero_weights():
    head = ColorHead(8, np.random.default_rng(0))
    for p in head.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(decode_color(ad.constant(np.ones(8)), head).data, 0.5)


def test_decode_color_saturates():
    head = ColorHead(8, np.random.default_rng(0))
    head.mlp.layers[-1].bias.data[...] = 50.0
    c = decode_color(ad.constant(np.zeros((1, 8))), head).data
    assert np.all(c > 1 - 1e-12) and np.all(c <= 1.0)


def test_decode_color_hand_computed():
    head = ColorHead(2, np.random.default_rng(0))
    l0, l1 = head.mlp.layers
    l0.weight.data[...] = [[1.0, -1.0], [0.5, 2.0]]
    l0.bias.data[...] = [[0.1, -0.2]]
    l1.weight.data[...] = [[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]]
    l1.bias.data[...] = 0.0
    # input (3, 1) normalizes to (s, -s), s = 1/sqrt(1 + eps)
    # hidden = relu([0.5 s + 0.1, -3 s - 0.2]) = [0.5 s + 0.1, 0] -> logits [h, 0, -h]
    s = 1 / np.sqrt(1 + 1e-5)
    h = 0.5 * s + 0.1
    ref = 1 / (1 + np.exp(-np.array([h, 0.0, -h])))
    np.testing.assert_allclose(decode_color(ad.constant(np.array([[3.0, 1.0]])), head).data[0], ref, atol=1e-15)


def test_render_depth_examples():
    assert render_depth(np.eye(4)[2], np.array([1.0, 2.0, 3.0, 4.0])) == 3.0
    assert render_depth(np.full(3, 1 / 3), np.array([1.0, 2.0, 3.0])) == pytest.approx(2.0, abs=1e-15)
    assert render_depth(np.array([0.2, 0.3, 0.5]), np.array([1.0, 2.0, 3.0])) == pytest.approx(2.3, abs=1e-15)


# ---------------------------------------------------------------- full models


@pytest.mark.parametrize("renderer", ["retr", "classical-baseline"])
def test_render_result_invariants(small, renderer):
    images, cams, bounds, near, far = small
    model = build_model(toy_config(renderer), seed=1)
    ctx = model.build_context(images, cams, bounds)
    o, d = _rays(cams[0], 30)
    out = model.render_rays(ctx, o, d, near, far, SamplingConfig(12, 12), np.random.default_rng(0))
    a = out.attention.data
    assert a.shape == (30, 24) and out.t.shape == (30, 24)
    assert np.all(a >= 0) and np.max(np.abs(a.sum(1) - 1)) < 1e-6
    assert np.all(out.depth.data >= near) and np.all(out.depth.data <= far)
    assert np.all((out.color.data >= 0) & (out.color.data <= 1))
    assert np.all(np.diff(out.t, axis=1) > 0)


def test_render_ray_single(small):
    images, cams, bounds, near, far = small
    model = build_model(toy_config(), seed=1)
    ctx = model.build_context(images, cams, bounds)
    ray = generate_ray(cams[1], (3.5, 4.0), near, far)
    res = render_ray(ray, ctx, model, SamplingConfig(8, 8))
    assert res.color.shape == (3,) and res.attention.shape == (16,) and res.samples.shape == (16,)
    assert near <= res.depth <= far
    assert abs(res.attention.sum() - 1.0) < 1e-12
    # the batched path gives the same numbers
    out = model.render_rays(ctx, ray.origin[None], ray.direction[None], near, far, SamplingConfig(8, 8), np.random.default_rng(0))
    np.testing.assert_allclose(out.color.data[0], res.color, atol=1e-12)


def test_uniform_attention_gives_mean_depth(small):
    images, cams, bounds, near, far = small
    model = build_model(toy_config(), seed=1)
    q = model.render_blocks[0].attn.q
    q.weight.data[...] = 0.0
    q.bias.data[...] = 0.0
    ctx = model.build_context(images, cams, bounds)
    o, d = _rays(cams[0], 5)
    out = model.render_rays(ctx, o, d, near, far, SamplingConfig(16, 0))
    np.testing.assert_allclose(out.attention.data, 1 / 16, atol=1e-15)
    np.testing.assert_allclose(out.depth.data, out.t.mean(1), atol=1e-12)


@pytest.mark.parametrize("blocks", [1, 2, 3])
def test_stacked_blocks(small, blocks):
    images, cams, bounds, near, far = small
    model = build_model(toy_config(blocks=blocks), seed=2)
    assert len(model.occ_blocks) == blocks
    ctx = model.build_context(images, cams, bounds)
    o, d = _rays(cams[2], 10)
    out = model.render_rays(ctx, o, d, near, far, SamplingConfig(8, 8))
    a = out.attention.data
    assert a.shape == (10, 16) and np.all(a >= 0) and np.max(np.abs(a.sum(1) - 1)) < 1e-6
    assert np.all((out.depth.data >= near) & (out.depth.data <= far))


def test_view_order_invariance(small):
    images, cams, bounds, near, far = small
    model = build_model(toy_config(), seed=3)
    o, d = _rays(cams[0], 8)
    out = []
    for perm in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
        ctx = model.build_context(images[perm], [cams[i] for i in perm], bounds)
        r = model.render_rays(ctx, o, d, near, far, SamplingConfig(8, 8))
        out.append((r.color.data, r.depth.data))
    for c, dep in out[1:]:
        assert np.array_equal(c, out[0][0]) and np.array_equal(dep, out[0][1])


def test_index_positional_variant_runs(small):
    images, cams, bounds, near, far = small
    model = build_model(toy_config(positional="index"), seed=1)
    ctx = model.build_context(images, cams, bounds)
    o, d = _rays(cams[0], 4)
    out = model.render_rays(ctx, o, d, near, far, SamplingConfig(8, 8))
    assert np.all(np.isfinite(out.depth.data))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(renderer="nerf")
    with pytest.raises(ValueError):
        ModelConfig(dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(blocks=0)
    with pytest.raises(ValueError):
        ModelConfig(positional="learned")


def test_same_seed_same_model():
    a = build_model(toy_config(), seed=5).named_parameters()
    b = build_model(toy_config(), seed=5).named_parameters()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


@pytest.mark.parametrize("renderer", ["retr", "classical-baseline"])
def test_model_gradient(small, renderer):
    images, cams, bounds, near, far = small
    model = build_model(toy_config(renderer, volume_res=4), seed=4)
    o, d = _rays(cams[0], 2)
    gt = np.random.default_rng(0).uniform(size=(2, 3))
    names = ["fusion.mlp.layers.0.weight"]
    names += ["token", "color_head.mlp.layers.0.weight"] if renderer == "retr" else ["density.layers.0.weight"]
    named = model.named_parameters()
    params = [named[n] for n in names]

    def loss():
        ctx = model.build_context(images, cams, bounds)
        out = model.render_rays(ctx, o, d, near, far, SamplingConfig(6, 0))
        diff = out.color - ad.constant(gt)
        return ad.sum_(diff * diff) + ad.sum_(out.depth) * 0.1

    assert ad.grad_check(loss, params) < 1e-4

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from r2reid.exceptions import ConfigError, DivisibilityError, ShapeError
from r2reid.res2net import (
    BackboneConfig,
    Res2NetBlockParams,
    backbone_forward,
    bottleneck_block,
    build_backbone,
    extract_descriptor,
    extract_descriptors,
    init_block,
    num_group_convs,
    res2net_block,
)
from r2reid.multitask import siamese_forward
from r2reid.tensor import ConvParams, finite_diff_check
from r2reid.res2net import res2net_block_backward


def test_group_conv_count():
    assert [num_group_convs(s) for s in (1, 2, 4, 8)] == [1, 1, 3, 7]
    assert num_group_convs(4, first_split_conv=True) == 4


@pytest.mark.parametrize("scale", [1, 2, 4, 8])
def test_width_times_scale(scale):
    p = init_block(np.random.default_rng(0), 8, 8, 8, scale)
    assert p.width * p.scale == p.reduce.out_channels == 8


def test_indivisible_scale_rejected():
    with pytest.raises(DivisibilityError):
        init_block(np.random.default_rng(0), 8, 8, 6, 4)


def test_block_with_wrong_group_convs_cannot_be_built():
    p = init_block(np.random.default_rng(0), 8, 8, 8, 4)
    with pytest.raises(ConfigError):
        Res2NetBlockParams(p.reduce, p.reduce_bn, p.group_convs[:2], p.group_bns[:2], p.expand, p.expand_bn, 4)


def test_missing_projection_rejected():
    p = init_block(np.random.default_rng(0), 8, 16, 16, 4)
    with pytest.raises(ConfigError):
        Res2NetBlockParams(p.reduce, p.reduce_bn, p.group_convs, p.group_bns, p.expand, p.expand_bn, 4)


def test_channel_mismatch():
    p = init_block(np.random.default_rng(0), 8, 8, 8, 4)
    with pytest.raises(ShapeError):
        res2net_block(np.zeros((1, 4, 6, 6), np.float32), p)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("train", [True, False])
def test_scale1_matches_bottleneck_bitwise(seed, train):
    rng = np.random.default_rng(seed)
    p = init_block(rng, 8, 16, 8, 1, stride=2)
    q = init_block(rng, 8, 16, 8, 1, stride=2)
    for name, arr in p.arrays().items():
        q.arrays()[name][...] = arr
    x = rng.standard_normal((2, 8, 6, 6)).astype(np.float32)
    out, _ = res2net_block(x, p, train)
    assert np.array_equal(out, bottleneck_block(x, q, train))


def test_zero_input_zero_output():
    p = init_block(np.random.default_rng(0), 8, 8, 8, 4)
    x = np.zeros((2, 8, 5, 5), np.float32)
    for train in (True, False):
        out, _ = res2net_block(x, p, train)
        assert not out.any()


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("cin,cout,stride,scale", [(8, 8, 1, 4), (8, 16, 2, 4), (4, 8, 1, 2)])
def test_block_gradients(seed, cin, cout, stride, scale):
    rng = np.random.default_rng(seed)
    p = init_block(rng, cin, cout, cout, scale, stride, dtype=np.float64)
    x = rng.standard_normal((3, cin, 6, 5))
    names = list(p.arrays())

    def bwd(x_, *rest):
        _, cache = res2net_block(x, p, True)
        gx, grads = res2net_block_backward(p, cache, rest[-1])
        return [gx] + [grads[n] for n in names]

    res = finite_diff_check(
        lambda *a: res2net_block(x, p, True)[0], bwd, [x] + [p.arrays()[n] for n in names], tol=1e-4, rng=rng
    )
    assert res.ok, res


@given(st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2]), st.integers(4, 9), st.integers(4, 9))
@settings(max_examples=25, deadline=None)
def test_output_shape_depends_only_on_stride(scale, stride, h, w):
    rng = np.random.default_rng(0)
    cout = 8 if stride == 1 else 16
    p = init_block(rng, 8, cout, 8, scale, stride)
    out, _ = res2net_block(rng.standard_normal((1, 8, h, w)).astype(np.float32), p)
    expected = (h, w) if stride == 1 else ((h - 1) // 2 + 1, (w - 1) // 2 + 1)
    assert out.shape == (1, cout) + expected


def test_toy_backbone_descriptor_dim():
    model = build_backbone(BackboneConfig(stages=[(1, 8, 1), (1, 16, 2)], scale=4), rng=0)
    f, _ = backbone_forward(model, np.random.default_rng(0).random((2, 3, 16, 8), dtype=np.float32))
    assert model.config.descriptor_dim == 16 and f.shape == (2, 16)
    assert model.id_head.weight.shape == (8, 16) and model.verif_head.weight.shape == (2, 16)


def test_same_seed_same_parameters():
    a, b = build_backbone(BackboneConfig(), rng=3), build_backbone(BackboneConfig(), rng=3)
    c = build_backbone(BackboneConfig(), rng=4)
    assert all(np.array_equal(a.state_arrays()[k], v) for k, v in b.state_arrays().items())
    assert any(not np.array_equal(a.parameters()[k], v) for k, v in c.parameters().items())


def test_initialization_statistics():
    model = build_backbone(BackboneConfig(stem_channels=32, stages=[(1, 64, 1)], descriptor_dim=64, num_identities=751), rng=0)
    w = model.stem.weight
    assert abs(w.std() - np.sqrt(2 / 27)) < 0.1 * np.sqrt(2 / 27)
    assert abs(model.id_head.weight.std() - 0.001) < 1e-4 and not model.id_head.bias.any()
    assert (model.stem_bn.gamma == 1).all() and not model.stem_bn.beta.any()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"descriptor_dim": 8},
        {"num_identities": 1},
        {"scale": 3},
        {"stages": []},
        {"stages": [(1, 8, 3)]},
        {"input_mean": (0.5,)},
        {"input_std": (1.0, 0.0, 1.0)},
    ],
)
def test_bad_config(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


def test_config_dict_roundtrip():
    cfg = BackboneConfig(input_mean=(0.1, 0.2, 0.3), input_std=(1, 2, 3), first_split_conv=True)
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        BackboneConfig.from_dict(cfg.to_dict() | {"bogus": 1})


def test_branches_share_weights(rng):
    model = build_backbone(BackboneConfig(), rng=0)
    img = rng.random((1, 3, 16, 8), dtype=np.float32)
    fa, fb = siamese_forward(model, img, img)[:2]
    assert np.array_equal(fa, fb)


def test_batch_vs_single_extraction(rng):
    model = build_backbone(BackboneConfig(), rng=0)
    imgs = rng.random((5, 3, 16, 8), dtype=np.float32)
    batch = extract_descriptors(model, imgs)
    for i in range(5):
        np.testing.assert_allclose(extract_descriptor(model, imgs[i]), batch[i], rtol=1e-6, atol=1e-6)


def test_extraction_deterministic_and_pure(rng):
    model = build_backbone(BackboneConfig(), rng=0)
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    img = rng.random((3, 16, 8), dtype=np.float32)
    assert np.array_equal(extract_descriptor(model, img), extract_descriptor(model, img))
    assert all(np.array_equal(before[k], v) for k, v in model.state_arrays().items())


def test_wrong_image_channels():
    model = build_backbone(BackboneConfig(), rng=0)
    with pytest.raises(ShapeError):
        extract_descriptor(model, np.zeros((1, 16, 8), np.float32))


def test_random_init_descriptor_smoke():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = build_backbone(BackboneConfig(), rng=rng)
        f = extract_descriptor(model, rng.random((3, 16, 8), dtype=np.float32))
        assert np.isfinite(f).all() and np.abs(f).sum() > 0


def test_input_normalization_applied():
    base = build_backbone(BackboneConfig(), rng=0)
    norm = build_backbone(BackboneConfig(input_mean=(0.5,) * 3, input_std=(0.25,) * 3), rng=0)
    img = np.random.default_rng(1).random((3, 16, 8), dtype=np.float32)
    np.testing.assert_allclose(extract_descriptor(norm, img), extract_descriptor(base, (img - 0.5) / 0.25), rtol=1e-5, atol=1e-6)

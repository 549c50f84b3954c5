import numpy as np
import pytest
from scipy.signal import correlate2d

from scenefusion.fusion import (
    ChannelAttention,
    EcaAttention,
    FusionBank,
    FusionModule,
    SpatialAttention,
    cam_heatmap,
    cbam_fuse,
    channel_attention,
    default_reduction,
    eca_attention,
    export_channel_attention,
    fusion_param_formula,
    minmax_normalize,
    param_count,
    spatial_attention,
    write_heatmap,
)
from scenefusion.nn import Parameter, grad_check
from scenefusion.tensor import Tensor, weighted_sum


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def readout(t, seed=3):
    return weighted_sum(t, np.random.default_rng(seed).normal(size=t.shape))


# ---------------------------------------------------------------- channel attention


def test_channel_attention_zero_weights_give_half():
    ca = ChannelAttention(8, np.random.default_rng(0), reduction=2)
    ca.w0.data[:] = 0
    f = Tensor(np.random.default_rng(1).normal(size=(2, 8, 3, 3)))
    np.testing.assert_array_equal(channel_attention(f, ca).data, 0.5)


def test_channel_attention_identity_closed_form():
    ca = ChannelAttention(2, np.random.default_rng(0), reduction=1)
    ca.w0.data = np.eye(2)
    ca.w1.data = np.eye(2)
    f = np.empty((1, 2, 4, 4))
    f[0, 0], f[0, 1] = 1.0, -1.0
    m = channel_attention(Tensor(f), ca).data.reshape(-1)
    np.testing.assert_allclose(m, [0.88079708, 0.11920292], atol=5e-9)


def test_channel_attention_matches_formula():
    rng = np.random.default_rng(2)
    ca = ChannelAttention(16, rng, reduction=4)
    f = rng.normal(size=(3, 16, 5, 5))
    avg, mx = f.mean(axis=(2, 3)), f.max(axis=(2, 3))
    w0, w1 = ca.w0.data, ca.w1.data
    ref = sig(avg @ w0.T @ w1.T + mx @ w0.T @ w1.T)
    out = channel_attention(Tensor(f), ca).data
    assert out.shape == (3, 16, 1, 1)
    np.testing.assert_allclose(out[:, :, 0, 0], ref, rtol=1e-12)


def test_channel_attention_constant_input_symmetry():
    rng = np.random.default_rng(3)
    ca = ChannelAttention(4, rng, reduction=2)
    means = rng.normal(size=4)
    f = np.broadcast_to(means[None, :, None, None], (1, 4, 3, 3)).copy()
    ref = sig(2 * ca.w1.data @ ca.w0.data @ means)
    np.testing.assert_allclose(channel_attention(Tensor(f), ca).data.reshape(-1), ref, rtol=1e-12)


def test_channel_attention_errors():
    with pytest.raises(ValueError):
        ChannelAttention(6, np.random.default_rng(0), reduction=4)
    ca = ChannelAttention(4, np.random.default_rng(0), reduction=2)
    with pytest.raises(ValueError):
        ca(Tensor(np.zeros((1, 6, 2, 2))))


def test_default_reduction():
    assert default_reduction(256) == 16
    assert default_reduction(16) == 16
    assert default_reduction(8) == 2
    assert default_reduction(2) == 1


# ---------------------------------------------------------------- spatial attention


def test_spatial_attention_zero_kernel():
    sa = SpatialAttention(np.random.default_rng(0))
    sa.kernel.data[:] = 0
    sa.bias.data[:] = 0
    out = spatial_attention(Tensor(np.random.default_rng(1).normal(size=(2, 5, 6, 7))), sa)
    assert out.shape == (2, 1, 6, 7)
    np.testing.assert_array_equal(out.data, 0.5)


def test_spatial_attention_matches_scipy_oracle():
    rng = np.random.default_rng(4)
    sa = SpatialAttention(rng)
    f = rng.normal(size=(2, 6, 9, 8))
    out = spatial_attention(Tensor(f), sa).data
    for n in range(2):
        planes = [f[n].mean(axis=0), f[n].max(axis=0)]
        z = sum(correlate2d(p, sa.kernel.data[0, c], mode="same") for c, p in enumerate(planes)) + sa.bias.data[0]
        np.testing.assert_allclose(out[n, 0], sig(z), rtol=1e-11)


def test_spatial_attention_single_channel_planes_equal():
    # with C=1 the mean and max planes coincide, so only the kernel sum matters
    rng = np.random.default_rng(5)
    sa = SpatialAttention(rng)
    f = Tensor(rng.normal(size=(1, 1, 8, 8)))
    a = spatial_attention(f, sa).data
    merged = sa.kernel.data.sum(axis=1, keepdims=True)
    sa.kernel.data = np.concatenate([merged, np.zeros_like(merged)], axis=1)
    np.testing.assert_allclose(spatial_attention(f, sa).data, a, rtol=1e-12)


# ---------------------------------------------------------------- ECA


def test_eca_zero_kernel_and_pointwise():
    f = Tensor(np.random.default_rng(6).normal(size=(2, 5, 3, 3)))
    np.testing.assert_array_equal(eca_attention(f, Tensor(np.zeros(3))).data, 0.5)
    out = eca_attention(f, Tensor(np.array([0.7]))).data[:, :, 0, 0]
    np.testing.assert_allclose(out, sig(0.7 * f.data.mean(axis=(2, 3))), rtol=1e-12)


def test_eca_matches_loop_oracle():
    rng = np.random.default_rng(7)
    f = rng.normal(size=(2, 6, 4, 4))
    k = rng.normal(size=3)
    avg = f.mean(axis=(2, 3))
    ref = np.zeros_like(avg)
    for b in range(2):
        for c in range(6):
            for j in range(3):
                src = c + j - 1
                if 0 <= src < 6:
                    ref[b, c] += k[j] * avg[b, src]
    np.testing.assert_allclose(eca_attention(Tensor(f), Tensor(k)).data[:, :, 0, 0], sig(ref), rtol=1e-12)


def test_eca_even_width_rejected():
    with pytest.raises(ValueError):
        eca_attention(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        EcaAttention(4, np.random.default_rng(0), k=4)


# ---------------------------------------------------------------- fusion module


def test_cbam_fuse_shape_and_masks_shrink():
    rng = np.random.default_rng(8)
    m = FusionModule(4, rng)
    a, b = Tensor(rng.normal(size=(2, 4, 6, 6))), Tensor(rng.normal(size=(2, 4, 6, 6)))
    assert cbam_fuse(a, b, m).shape == (2, 4, 6, 6)
    f, mc, f2 = m.attend(a, b)
    assert np.all((mc.data > 0) & (mc.data < 1))
    assert np.all(np.abs(f2.data) <= np.abs(f.data))


def test_cbam_fuse_averaging_kernel_closed_form():
    rng = np.random.default_rng(9)
    m = FusionModule(4, rng, reduction=2)
    m.channel_attn.w0.data[:] = 0
    m.spatial_attn.kernel.data[:] = 0
    m.spatial_attn.bias.data[:] = 0
    m.reduce_weight.data[:] = 1.0 / 8
    m.reduce_bias.data[:] = 0
    a, b = rng.normal(size=(1, 4, 5, 5)), rng.normal(size=(1, 4, 5, 5))
    out = cbam_fuse(Tensor(a), Tensor(b), m).data
    expect = 0.25 * np.concatenate([a, b], axis=1).mean(axis=1)
    for c in range(4):
        np.testing.assert_allclose(out[0, c], expect[0], rtol=1e-12)


def test_zero_weights_leave_only_reduce_bias():
    rng = np.random.default_rng(10)
    m = FusionModule(3, rng, reduction=2)
    m.reduce_weight.data[:] = 0
    m.reduce_bias.data = np.array([0.1, -0.2, 0.3])
    out = cbam_fuse(Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 4))), m).data
    np.testing.assert_allclose(out[0, :, 0, 0], [0.1, -0.2, 0.3])
    assert np.ptp(out, axis=(2, 3)).max() == 0


def test_reduce_init_starts_near_modality_mean():
    m = FusionModule(4, np.random.default_rng(0))
    w = m.reduce_weight.data[:, :, 0, 0]
    for i in range(4):
        assert w[i, i] == w[i, 4 + i] > 0
    assert np.count_nonzero(w) == 8


def test_fuse_shape_mismatch():
    m = FusionModule(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cbam_fuse(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 2))), m)
    with pytest.raises(ValueError):
        cbam_fuse(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))), m)


@pytest.mark.parametrize("kind", ["cbam", "eca"])
def test_fusion_module_gradients(kind):
    rng = np.random.default_rng(11)
    m = FusionModule(4, rng, kind=kind, reduction=2)
    a = Parameter(rng.normal(size=(2, 4, 6, 6)))
    b = Parameter(rng.normal(size=(2, 4, 6, 6)))
    params = [(n, p) for n, p in m.named_parameters()] + [("a", a), ("b", b)]
    rep = grad_check(lambda: readout(cbam_fuse(a, b, m)), params, step=1e-5)
    assert rep.max_rel_err < 1e-4, rep


def test_param_count_formula():
    assert fusion_param_formula(4, 2) == 199
    m = FusionModule(4, np.random.default_rng(0), reduction=2)
    assert param_count(m).total == 199
    bank = FusionBank("day", 8, np.random.default_rng(0))
    assert param_count(bank).total == 5 * fusion_param_formula(8)
    bank.freeze()
    assert param_count(bank).trainable == 0


# ---------------------------------------------------------------- introspection


def test_minmax_constant_is_zero():
    np.testing.assert_array_equal(minmax_normalize(np.full(5, 0.3)), 0)
    np.testing.assert_allclose(minmax_normalize(np.array([1.0, 3.0, 2.0])), [0, 1, 0.5])


def _pairs(rng, n, cf=4):
    return [([Tensor(rng.normal(size=(1, cf, 4, 4)))] * 5, [Tensor(rng.normal(size=(1, cf, 4, 4)))] * 5)
            for _ in range(n)]


def test_channel_profile_single_and_mean():
    rng = np.random.default_rng(12)
    bank = FusionBank("night", 4, rng, reduction=2)
    pairs = _pairs(rng, 2)
    prof = export_channel_attention(bank, pairs[:1], level=2)
    _, mc, _ = bank.modules[2].attend(*[p[2] for p in pairs[0]])
    np.testing.assert_allclose(prof.values, minmax_normalize(mc.data.reshape(-1)))
    assert len(prof.values) == 8 and prof.labels[:4] == ["rgb0", "rgb1", "rgb2", "rgb3"]
    masks = [bank.modules[2].attend(*[p[2] for p in pr])[1].data.reshape(-1) for pr in pairs]
    prof2 = export_channel_attention(bank, pairs, level=2)
    np.testing.assert_allclose(prof2.values, minmax_normalize((masks[0] + masks[1]) / 2))
    assert prof2.values.min() >= 0 and prof2.values.max() <= 1


def test_channel_profile_errors_and_file(tmp_path):
    bank = FusionBank("fog", 4, np.random.default_rng(0), reduction=2)
    with pytest.raises(ValueError):
        export_channel_attention(bank, [], 0)
    prof = export_channel_attention(bank, _pairs(np.random.default_rng(1), 1), 0)
    prof.write(tmp_path / "p.txt")
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert lines[0] == "# level=0 scene=fog channels=8" and len(lines) == 9


def test_cam_rank_one_recovers_pattern():
    rng = np.random.default_rng(13)
    a = rng.normal(size=6)
    v = np.abs(rng.normal(size=20)) + 0.1
    act = np.outer(a, v).reshape(1, 6, 4, 5)
    heat = cam_heatmap(act)
    np.testing.assert_allclose(heat.reshape(-1), minmax_normalize(v), atol=1e-9)


def test_cam_degenerate_and_sign_invariance(tmp_path):
    np.testing.assert_array_equal(cam_heatmap(np.zeros((1, 3, 4, 4))), 0)
    np.testing.assert_array_equal(cam_heatmap(np.ones((1, 3, 4, 4))), 0)
    act = np.random.default_rng(14).normal(size=(1, 5, 6, 6))
    np.testing.assert_allclose(cam_heatmap(act), cam_heatmap(-act), atol=1e-12)
    np.testing.assert_array_equal(cam_heatmap(act), cam_heatmap(act))
    write_heatmap(tmp_path / "h.txt", cam_heatmap(act), 1, "day")
    assert len((tmp_path / "h.txt").read_text().splitlines()) == 2 + 36

import numpy as np
import pytest
from scipy.signal import correlate2d

from featslam.codec import codec_to_bytes, decode, init_codec, pretrain
from featslam.gaussians import GaussianMap, Keyframe, insert_from_keyframe
from featslam.geometry import Pose
from featslam.gicp import depth_cloud
from featslam.mapping import (
    SSIM_C1,
    SSIM_C2,
    OptimizerState,
    compute_losses,
    encoder_gate,
    loss_and_grads,
    mapping_round,
    psnr,
    select_window,
    ssim,
)
from featslam.render import render, render_backward
from featslam.synthetic import feature_corpus, render_view, room_scene, trajectory_poses

from _util import K16, random_scene


def ssim_oracle(a, b):
    """Direct per-channel valid-mode SSIM with scipy correlation."""
    r = np.arange(11) - 5
    g = np.exp(-(r**2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        f = lambda z: correlate2d(z, w, mode="valid")
        mx, my = f(x), f(y)
        vx, vy, cxy = f(x * x) - mx**2, f(y * y) - my**2, f(x * y) - mx * my
        s = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2) / ((mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2))
        vals.append(s.mean())
    return float(np.mean(vals))


def test_ssim_identity_checker_and_oracle():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(20, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    checker = np.indices((16, 16)).sum(0) % 2 * 1.0
    assert ssim(checker, 1 - checker) < 0
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-12)
    with pytest.raises(ValueError):
        ssim(a, b[:-1])


def test_ssim_constant_closed_form():
    v, w = 0.3, 0.7
    got = ssim(np.full((16, 16, 3), v), np.full((16, 16, 3), w))
    want = (2 * v * w + SSIM_C1) * SSIM_C2 / ((v * v + w * w + SSIM_C1) * SSIM_C2)
    assert got == pytest.approx(want, abs=1e-12)


def test_ssim_gradient():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(14, 13, 3)), rng.uniform(size=(14, 13, 3))
    _, g = ssim(a, b, return_grad=True)
    h = 1e-6
    for idx in [(0, 0, 0), (7, 6, 1), (13, 12, 2), (3, 9, 0)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        assert g[idx] == pytest.approx((ssim(ap, b) - ssim(am, b)) / (2 * h), rel=1e-5, abs=1e-10)


@pytest.fixture(scope="module")
def fitted():
    """A random scene, a codec, and a keyframe that equals the scene's own render."""
    rng = np.random.default_rng(2)
    g = random_scene(rng, n=15, d=4)
    g.colors = np.clip(g.colors, 0, 1)
    codec = init_codec(6, 4, H=8, seed=0)
    out = render(g, Pose.identity(), K16)
    depth = np.where(out.acc_alpha > 0.5, out.depth, 0.0)
    kf = Keyframe(0, Pose.identity(), out.rgb.copy(), depth, decode(codec, out.feat))
    return g, codec, kf, out


def test_perfect_fit_all_zero(fitted):
    g, codec, kf, out = fitted
    lb = compute_losses(out, kf, codec)
    assert lb.l_depth == 0 and lb.l_feat == 0 and lb.l_total == pytest.approx(0, abs=1e-12)


def test_constant_rgb_offset(fitted):
    g, codec, kf, out = fitted
    shifted = Keyframe(0, kf.pose, kf.rgb - 0.1, kf.depth, kf.feat_gt)
    lb = compute_losses(out, shifted, codec)
    want = 0.8 * 0.1 + 0.2 * (1 - ssim_oracle(out.rgb, kf.rgb - 0.1)) / 2
    assert lb.l_rgb == pytest.approx(want, abs=1e-12)


def test_invalid_depth_masks(fitted):
    g, codec, kf, out = fitted
    blank = Keyframe(0, kf.pose, kf.rgb, np.zeros_like(kf.depth), kf.feat_gt)
    lb, g_rgb, g_depth, g_feat = loss_and_grads(out, blank, codec)
    assert lb.l_depth == 0 and not g_depth.any()


def test_decomposition_and_zero_feature_weight(fitted):
    g, codec, kf, out = fitted
    rng = np.random.default_rng(3)
    noisy = Keyframe(0, kf.pose, np.clip(kf.rgb + 0.05 * rng.normal(size=kf.rgb.shape), 0, 1),
                     kf.depth + 0.01, kf.feat_gt + 0.1)
    for wd, wf in ((0.5, 1.0), (0.3, 2.5), (0.5, 0.0)):
        lb, _, _, g_feat = loss_and_grads(out, noisy, codec, wd, wf)
        assert abs(lb.l_total - (lb.l_rgb + wd * lb.l_depth + wf * lb.l_feat)) < 1e-9
    lb, g_rgb, g_depth, g_feat = loss_and_grads(out, noisy, codec, 0.5, 0.0)
    grads = render_backward(g, out, g_rgb, g_depth, g_feat)
    assert not grads["features"].any()


def test_feature_gradient_through_decoder(fitted):
    g, codec, kf, out = fitted
    rng = np.random.default_rng(4)
    target = Keyframe(0, kf.pose, kf.rgb, kf.depth, kf.feat_gt + 0.2 * rng.normal(size=kf.feat_gt.shape))
    g = g.copy()
    base = render(g, Pose.identity(), K16)
    lb, g_rgb, g_depth, g_feat = loss_and_grads(base, target, codec)
    an = render_backward(g, base, g_rgb, g_depth, g_feat)["features"]
    i = int(np.argmax(np.abs(an).sum(1)))
    h = 1e-4
    fd = np.zeros(g.feature_dim)
    for c in range(g.feature_dim):
        old = g.features[i, c]
        g.features[i, c] = old + h
        lp = compute_losses(render(g, Pose.identity(), K16, freeze=base), target, codec).l_total
        g.features[i, c] = old - h
        lm = compute_losses(render(g, Pose.identity(), K16, freeze=base), target, codec).l_total
        g.features[i, c] = old
        fd[c] = (lp - lm) / (2 * h)
    assert np.linalg.norm(an[i] - fd) / np.linalg.norm(fd) < 1e-3


def test_zero_iterations_is_noop(fitted):
    g, codec, kf, _ = fitted
    h = g.copy()
    mapping_round(h, [kf], 0, codec, OptimizerState(), K16)
    assert h.state_bytes() == g.state_bytes()
    with pytest.raises(ValueError):
        mapping_round(h, [], 1, codec, OptimizerState(), K16)


def test_codec_frozen_during_mapping(fitted):
    g, codec, kf, _ = fitted
    before = codec_to_bytes(codec)
    arrays = [a.copy() for a in codec.as_dict().values()]
    mapping_round(g.copy(), [kf], 5, codec, OptimizerState(), K16)
    assert codec_to_bytes(codec) == before
    assert all(np.array_equal(a, b) for a, b in zip(arrays, codec.as_dict().values()))


def test_optimizer_state_tracks_ids(fitted):
    g, codec, kf, _ = fitted
    h = g.copy()
    st = OptimizerState()
    mapping_round(h, [kf], 2, codec, st, K16)
    m_before = st.adam.m["colors"].copy()
    mask = np.arange(len(h)) % 3 != 0
    st.sync(h)
    st.keep_rows(mask)
    h.keep(mask)
    np.testing.assert_array_equal(st.adam.m["colors"], m_before[mask])
    h.add(np.zeros((2, 3)) + [0, 0, 1.5], np.tile([1.0, 0, 0, 0], (2, 1)), np.full((2, 3), -3.0), np.zeros(2),
          np.full((2, 3), 0.5), np.zeros((2, 4)), 0)
    st.sync(h)
    assert st.adam.m["colors"].shape == (len(h), 3)
    assert not st.adam.m["colors"][-2:].any()
    np.testing.assert_array_equal(st.ids, h.ids)


@pytest.mark.parametrize("it,kfs,expected", [(0, 10, False), (501, 10, True), (10**6, 9, False), (500, 10, True)])
def test_encoder_gate(it, kfs, expected):
    assert encoder_gate(it, kfs) is expected


def test_select_window():
    rng = np.random.default_rng(0)
    kfs = list(range(20))
    w = select_window(kfs, rng)
    assert w[-8:] == kfs[-8:] and len(w) == 12 and all(k < 12 for k in w[:4])
    assert select_window(kfs[:5], rng) == kfs[:5]


def test_psnr_values():
    a = np.zeros((4, 4))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_single_keyframe_convergence():
    spec = room_scene(n_frames=2, width=32, height=32)
    K = spec.intrinsics
    pose = trajectory_poses(spec.trajectory)[0]
    f = render_view(spec, pose, np.random.default_rng(0))
    codec = pretrain(feature_corpus(spec, n_views=8, seed=1), epochs=30, seed=0)
    kf = Keyframe(0, pose, f["rgb"], f["depth"], f["feat"])
    g = GaussianMap(codec.d)
    src = depth_cloud(f["depth"], K, voxel_size=0.02)
    insert_from_keyframe(g, kf, src, f["depth"] > 0, codec)
    trace = []
    mapping_round(g, [kf], 300, codec, OptimizerState(), K, trace=trace)
    out = render(g, pose, K)
    assert psnr(out.rgb, f["rgb"]) > 30
    assert compute_losses(out, kf, codec).l_feat < 0.05
    smooth = np.array([lb.l_total for lb in trace]).reshape(6, 50).mean(1)
    assert np.all(np.diff(smooth) <= 0)

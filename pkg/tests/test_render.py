import numpy as np
import pytest
from types import SimpleNamespace

from featslam.gaussians import GaussianMap, logit
from featslam.geometry import CameraIntrinsics, Pose, rot_z
from featslam.render import ALPHA_MAX, project_gaussian, render, render_backward

from _util import GROUPS, K16, gradient_errors, random_scene

K100 = CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)


def one(position, log_scale=np.log(0.1), opacity_logit=0.0):
    return SimpleNamespace(position=position, rotation=[1.0, 0, 0, 0], log_scale=[log_scale] * 3,
                           opacity_logit=opacity_logit)


def splat_map(entries, d=4):
    g = GaussianMap(d)
    for pos, scale, op, color in entries:
        g.add([pos], [[1.0, 0, 0, 0]], [[np.log(scale)] * 3], [logit(op)], [color], np.zeros((1, d)), 0)
    g.keyframe_ids.add(0)
    return g


def test_on_axis_cov2d():
    p = project_gaussian(one([0, 0, 1.0]), Pose.identity(), K100)
    np.testing.assert_allclose(p.cov2d[0], np.diag([100.3, 100.3]), atol=1e-9)


def test_behind_camera_culled():
    assert project_gaussian(one([0, 0, -1.0]), Pose.identity(), K100) is None


def test_fx_doubling_doubles_offset():
    K2 = CameraIntrinsics(200.0, 100.0, 32.0, 32.0, 64, 64)
    a = project_gaussian(one([0.05, 0.02, 1.0], np.log(0.01)), Pose.identity(), K100).mean2d[0]
    b = project_gaussian(one([0.05, 0.02, 1.0], np.log(0.01)), Pose.identity(), K2).mean2d[0]
    assert (b[0] - 32.0) == pytest.approx(2 * (a[0] - 32.0))


def test_empty_map_background():
    out = render(GaussianMap(4), Pose.identity(), K16)
    assert not out.rgb.any() and not out.depth.any() and not out.feat.any() and not out.acc_alpha.any()


def test_single_splat_center():
    # near-one opacity and a wide footprint: alpha at the center clamps to 0.99
    g = splat_map([([0.0, 0.0, 2.0], 0.2, 0.9999, [1.0, 0, 0])])
    out = render(g, Pose.identity(), CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 17, 17))
    np.testing.assert_allclose(out.rgb[8, 8], [ALPHA_MAX, 0, 0], atol=1e-12)
    assert out.depth[8, 8] == pytest.approx(2.0)


def test_two_coincident_splats():
    K = CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 17, 17)
    c1, c2 = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]
    # wide splats so the density at the center pixel is exp(0)=1
    g = splat_map([([0, 0, 1.0], 0.3, 0.5, c1), ([0, 0, 1.5], 0.3, 0.5, c2)])
    out = render(g, Pose.identity(), K)
    np.testing.assert_allclose(out.rgb[8, 8], 0.5 * np.array(c1) + 0.25 * np.array(c2), atol=1e-12)


def test_zero_cotangent_and_linear_color():
    K = CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 17, 17)
    g = splat_map([([0, 0, 1.0], 0.3, 0.7, [0.2, 0.4, 0.6])])
    out = render(g, Pose.identity(), K)
    gr = np.zeros((17, 17, 3))
    gr[8, 8, 0] = 1.0
    gd = np.zeros((17, 17))
    gf = np.zeros((17, 17, 4))
    grads = render_backward(g, out, gr, gd, gf)
    assert not grads["features"].any()
    assert grads["colors"][0, 0] == pytest.approx(out.acc_alpha[8, 8])


def test_properties_on_random_scenes():
    rng = np.random.default_rng(3)
    for _ in range(5):
        g = random_scene(rng, n=30, d=8)
        g.colors = np.clip(g.colors, 0, 1)
        out = render(g, Pose.identity(), K16)
        assert np.all((out.acc_alpha >= 0) & (out.acc_alpha <= 1))
        assert out.rgb.min() >= 0 and out.rgb.max() <= 1.01
        fmax = np.linalg.norm(g.features, axis=1).max()
        assert np.linalg.norm(out.feat, axis=-1).max() <= fmax + 1e-9
        T, new = out.pairs["T"], out.pairs["new"]
        # transmittance never rises along a pixel's composite order
        assert np.all(np.diff(T)[~new[1:]] <= 1e-15)
        for a in (out.rgb, out.depth, out.feat):
            assert np.all(np.isfinite(a))


def test_order_invariance():
    rng = np.random.default_rng(4)
    g = random_scene(rng, n=25, d=4)
    perm = rng.permutation(len(g))
    h = GaussianMap(4)
    for name in GROUPS + ("ids", "anchors"):
        setattr(h, name, getattr(g, name)[perm].copy())
    h.keyframe_ids = set(g.keyframe_ids)
    pose = Pose(rot_z(0.1).q, [0.02, 0.0, 0.0])
    a, b = render(g, pose, K16), render(h, pose, K16)
    for x, y in ((a.rgb, b.rgb), (a.depth, b.depth), (a.feat, b.feat)):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_backward_shape_mismatch():
    g = random_scene(np.random.default_rng(5), n=5, d=4)
    out = render(g, Pose.identity(), K16)
    with pytest.raises(ValueError):
        render_backward(g, out, np.zeros((3, 3, 3)))


def test_gradient_check_small():
    rng = np.random.default_rng(6)
    for _ in range(2):
        errs = gradient_errors(random_scene(rng, n=8, d=4), rng)
        assert max(errs.values()) < 1e-3, errs

import numpy as np
import pytest
from scipy.spatial import cKDTree

from featslam.geometry import Pose, se3_exp
from featslam.gicp import (
    AlignmentResult,
    GICPConfig,
    TrackingLostError,
    _correspond,
    depth_cloud,
    estimate_covariances,
    gicp_align,
    gicp_cost,
    is_keyframe,
    track_frame,
)
from featslam.synthetic import render_view, room_scene, trajectory_poses


def box_cloud(n, rng):
    """Points on the faces of a unit box: well constrained in all six DOF."""
    face = rng.integers(0, 6, n)
    p = rng.uniform(-0.5, 0.5, (n, 3))
    axis, sign = face // 2, np.where(face % 2 == 0, -0.5, 0.5)
    p[np.arange(n), axis] = sign
    return p * np.array([1.0, 0.8, 0.6])


def test_plane_normals():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-1, 1, (400, 2)), np.zeros(400)]
    cloud = estimate_covariances(pts, 10)
    w, V = np.linalg.eigh(cloud.covariances)
    assert np.all(np.abs(V[:, 2, 0]) > 0.999)


def test_regularized_eigenvalues_exact():
    rng = np.random.default_rng(1)
    cloud = estimate_covariances(rng.normal(size=(300, 3)), 10)
    w = np.linalg.eigvalsh(cloud.covariances)
    np.testing.assert_allclose(w, np.tile([1e-3, 1.0, 1.0], (300, 1)), atol=1e-12)
    np.testing.assert_allclose(cloud.covariances, np.swapaxes(cloud.covariances, 1, 2), atol=1e-12)


def test_too_few_points():
    with pytest.raises(ValueError):
        estimate_covariances(np.zeros((3, 3)), 4)


def test_self_alignment():
    rng = np.random.default_rng(2)
    cloud = estimate_covariances(box_cloud(600, rng), 10)
    res = gicp_align(cloud, cloud, Pose.identity())
    assert res.inlier_ratio == 1.0
    assert res.rmse < 1e-9
    np.testing.assert_allclose(res.pose.matrix(), np.eye(4), atol=1e-9)


def test_known_transform_recovery():
    rng = np.random.default_rng(3)
    pts = box_cloud(2000, rng)
    T = se3_exp(np.r_[rng.uniform(-0.05, 0.05, 3), np.deg2rad(8) * np.array([0.6, -0.5, 0.62])])
    src = estimate_covariances(pts, 10)
    tgt = estimate_covariances(T.apply(pts), 10)
    res = gicp_align(src, tgt, Pose.identity())
    err = res.pose.inverse() @ T
    angle = 2 * np.degrees(np.arccos(min(1.0, abs(err.q[0]))))
    assert angle < 0.5 and np.linalg.norm(err.t) < 5e-3


def test_disjoint_clouds_lost():
    rng = np.random.default_rng(4)
    pts = box_cloud(500, rng)
    a = estimate_covariances(pts, 10)
    b = estimate_covariances(pts + 10.0, 10)
    with pytest.raises(TrackingLostError):
        gicp_align(a, b, Pose.identity())


def test_cost_non_increasing_on_fixed_pairs():
    rng = np.random.default_rng(5)
    pts = box_cloud(800, rng)
    T = se3_exp([0.03, -0.02, 0.01, 0.05, 0.03, -0.04])
    src = estimate_covariances(pts, 10)
    tgt = estimate_covariances(T.apply(pts), 10)
    tree = cKDTree(tgt.points)
    si, ti, _ = _correspond(tree, src.points, 0.2)
    pairs = (si, ti)
    costs = [gicp_cost(src, tgt, Pose.identity(), pairs)]
    pose = Pose.identity()
    for _ in range(5):
        res = gicp_align(src, tgt, pose, GICPConfig(max_iter=1, max_corr_dist=0.2), tree=_FixedTree(tree, si, ti))
        pose = res.pose
        costs.append(gicp_cost(src, tgt, pose, pairs))
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


class _FixedTree:
    """Stands in for the KD-tree so that correspondences never change."""

    def __init__(self, tree, si, ti):
        self.tree, self.si, self.ti = tree, si, ti

    def query(self, pts, k=1, distance_upper_bound=np.inf):
        dist = np.full(len(pts), np.inf)
        idx = np.full(len(pts), len(self.tree.data))
        dist[self.si] = np.linalg.norm(pts[self.si] - self.tree.data[self.ti], axis=1)
        idx[self.si] = self.ti
        return dist, idx


def test_deterministic():
    rng = np.random.default_rng(6)
    pts = box_cloud(700, rng)
    T = se3_exp([0.02, 0.0, -0.01, 0.03, 0.01, 0.02])
    src = estimate_covariances(pts, 10)
    tgt = estimate_covariances(T.apply(pts), 10)
    a = gicp_align(src, tgt, Pose.identity())
    b = gicp_align(src, tgt, Pose.identity())
    assert a.pose.q.tobytes() == b.pose.q.tobytes() and a.pose.t.tobytes() == b.pose.t.tobytes()
    assert (a.rmse, a.inlier_ratio, a.iterations) == (b.rmse, b.inlier_ratio, b.iterations)


def test_track_frame_zero_motion_and_invalid_depth():
    spec = room_scene(n_frames=2)
    K = spec.intrinsics
    pose = trajectory_poses(spec.trajectory)[0]
    f = render_view(spec, pose)

    world = depth_cloud(f["depth"], K).transformed(pose)
    res, src = track_frame(f["depth"], K, world, pose)
    assert np.linalg.norm(res.pose.t - pose.t) < 1e-6
    with pytest.raises(TrackingLostError):
        track_frame(np.zeros_like(f["depth"]), K, world, pose)


@pytest.mark.parametrize("ratio,expected", [(0.79, True), (0.80, False), (1.0, False)])
def test_keyframe_boundary(ratio, expected):
    r = AlignmentResult(Pose.identity(), ratio, 0.0, 1, True)
    assert is_keyframe(r, 0.80) is expected

import numpy as np
import pytest

from featslam.geometry import Pose, so3_exp
from featslam.metrics import ate_rmse, miou_accuracy, psnr, trajectory_length, umeyama_rigid


def _traj(rng, n=100):
    return [(i / 30.0, Pose(so3_exp(rng.normal(0, 0.3, 3)), rng.normal(size=3))) for i in range(n)]


def test_ate_identity_is_zero():
    gt = _traj(np.random.default_rng(0))
    assert ate_rmse(gt, gt) < 1e-12


def test_ate_invariant_to_rigid_transform():
    gt = _traj(np.random.default_rng(1))
    T = Pose(so3_exp([0.3, -1.2, 2.0]), [5.0, -3.0, 1.0])
    est = [(t, T @ p) for t, p in gt]
    assert ate_rmse(est, gt) < 1e-9


def test_ate_single_offset():
    # collinear-free trajectory on a grid so the alignment stays close to identity
    gt = [(i / 30.0, Pose(t=[i % 10, i // 10, (i * 7) % 3])) for i in range(100)]
    est = list(gt)
    est[50] = (gt[50][0], Pose(t=gt[50][1].t + [0.3, 0.0, 0.0]))
    # brute force: residual of the optimal rigid fit
    a = np.array([p.t for _, p in est])
    b = np.array([p.t for _, p in gt])
    R, t = umeyama_rigid(a, b)
    ref = np.sqrt(np.mean(np.sum((a @ R.T + t - b) ** 2, axis=1)))
    assert ate_rmse(est, gt) == pytest.approx(ref, rel=1e-12)
    assert ate_rmse(est, gt) == pytest.approx(0.03, abs=5e-4)


def test_ate_needs_three_pairs():
    gt = _traj(np.random.default_rng(2), 2)
    with pytest.raises(ValueError):
        ate_rmse(gt, gt)
    far = [(t + 10.0, p) for t, p in _traj(np.random.default_rng(3), 5)]
    with pytest.raises(ValueError):
        ate_rmse(far, _traj(np.random.default_rng(3), 5))


def test_umeyama_recovers_rotation():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(50, 3))
    R0 = Pose(so3_exp([0.4, 0.1, -0.7])).R
    R, t = umeyama_rigid(src, src @ R0.T + [1, 2, 3])
    np.testing.assert_allclose(R, R0, atol=1e-12)
    np.testing.assert_allclose(t, [1, 2, 3], atol=1e-12)


def test_trajectory_length():
    tr = [(0.0, Pose(t=[0, 0, 0])), (1.0, Pose(t=[3, 4, 0])), (2.0, Pose(t=[3, 4, 1]))]
    assert trajectory_length(tr) == pytest.approx(6.0)


def test_psnr_cases():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(b, a) == psnr(a, b)


def test_miou_identity_and_swap():
    gt = np.array([[0, 0, 1, 1]])
    assert miou_accuracy(gt, gt) == (1.0, 1.0)
    assert miou_accuracy(1 - gt, gt) == (0.0, 0.0)


def test_miou_hand_count():
    # class 0: inter 3, union 5 -> 0.6; class 1: inter 1, union 3 -> 1/3
    gt = np.array([0, 0, 0, 0, 1, 1])
    pred = np.array([0, 0, 0, 1, 1, 0])
    miou, acc = miou_accuracy(pred, gt)
    assert miou == pytest.approx((0.6 + 1 / 3) / 2)
    assert acc == pytest.approx(4 / 6)


def test_miou_void_handling():
    gt = np.array([0, 1, -1, -1])
    pred = np.array([0, 1, 1, 0])
    assert miou_accuracy(pred, gt, gt < 0) == (1.0, 1.0)
    with pytest.raises(ValueError):
        miou_accuracy(pred, gt, np.ones(4, bool))

"""Trajectory, image and segmentation metrics."""

from __future__ import annotations

import numpy as np

from .mapping import psnr, ssim

__all__ = ["associate", "umeyama_rigid", "ate_rmse", "psnr", "image_metrics", "miou_accuracy", "trajectory_length"]


def _as_traj(traj):
    """Accept a list of ``(timestamp, Pose)`` pairs; return times and positions."""
    if len(traj) == 0:
        return np.zeros(0), np.zeros((0, 3))
    ts = np.array([float(t) for t, _ in traj])
    xyz = np.array([np.asarray(p.t, dtype=np.float64) for _, p in traj])
    return ts, xyz


def associate(t_est, t_gt, max_dt=0.02):
    """Greedy nearest-timestamp matching; returns index pairs ``(i_est, i_gt)``."""
    t_gt = np.asarray(t_gt)
    if len(t_gt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.argsort(t_gt)
    sorted_gt = t_gt[order]
    pos = np.clip(np.searchsorted(sorted_gt, t_est), 1, max(len(sorted_gt) - 1, 1))
    left = np.maximum(pos - 1, 0)
    right = np.minimum(pos, len(sorted_gt) - 1)
    pick = np.where(np.abs(sorted_gt[left] - t_est) <= np.abs(sorted_gt[right] - t_est), left, right)
    ok = np.abs(sorted_gt[pick] - t_est) <= max_dt
    return np.nonzero(ok)[0], order[pick[ok]]


def umeyama_rigid(src, dst):
    """Rotation R and translation t minimizing sum ||R src_i + t - dst_i||^2 (no scale)."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(est, gt, max_dt=0.02):
    """Absolute trajectory error (m) after rigid alignment of ``est`` onto ``gt``.

    Both trajectories are sequences of ``(timestamp, Pose)``.
    """
    te, pe = _as_traj(est)
    tg, pg = _as_traj(gt)
    ie, ig = associate(te, tg, max_dt)
    if len(ie) < 3:
        raise ValueError(f"ATE needs at least 3 associated poses, got {len(ie)}")
    a, b = pe[ie], pg[ig]
    R, t = umeyama_rigid(a, b)
    res = a @ R.T + t - b
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def trajectory_length(traj):
    _, xyz = _as_traj(traj)
    return float(np.linalg.norm(np.diff(xyz, axis=0), axis=1).sum()) if len(xyz) > 1 else 0.0


def image_metrics(a, b):
    return psnr(a, b), ssim(a, b)


def miou_accuracy(pred, gt, void_mask=None):
    """Mean IoU over classes present in ``gt`` and pixel accuracy, ignoring void pixels."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = np.ones(gt.shape, dtype=bool) if void_mask is None else ~np.asarray(void_mask, dtype=bool)
    if not valid.any():
        raise ValueError("every pixel is void")
    p, g = pred[valid], gt[valid]
    ious = []
    for c in np.unique(g):
        inter = np.sum((p == c) & (g == c))
        union = np.sum((p == c) | (g == c))
        ious.append(inter / union)
    return float(np.mean(ious)), float(np.mean(p == g))

"""Generalized-ICP frame tracking.

Source points come from a voxel-downsampled depth image; targets are Gaussian
centers sampled from the map. Both carry plane-favoring covariances with
eigenvalues regularized to ``(eps, 1, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Pose, backproject_depth, quat_to_matrix, se3_exp

PLANE_EPS = 1e-3


class TrackingLostError(RuntimeError):
    pass


@dataclass
class CovPointCloud:
    """Points with per-point 3x3 covariances.

    ``spread`` holds the mean of the two largest raw neighbor-scatter
    eigenvalues (m^2) and ``pixels`` the ``(u, v)`` pixel each point was taken
    from; both are optional and only present for clouds built from depth.
    """

    points: np.ndarray
    covariances: np.ndarray
    spread: np.ndarray | None = None
    pixels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(-1, 3, 3)
        if len(self.points) != len(self.covariances):
            raise ValueError("points and covariances differ in length")

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> "CovPointCloud":
        R = pose.R
        return CovPointCloud(
            pose.apply(self.points),
            R @ self.covariances @ R.T,
            self.spread,
            self.pixels,
        )

    def subset(self, idx) -> "CovPointCloud":
        return CovPointCloud(
            self.points[idx],
            self.covariances[idx],
            None if self.spread is None else self.spread[idx],
            None if self.pixels is None else self.pixels[idx],
        )


@dataclass
class AlignmentResult:
    pose: Pose
    inlier_ratio: float
    rmse: float
    iterations: int
    converged: bool


@dataclass
class GICPConfig:
    max_corr_dist: float = 0.1
    max_iter: int = 30
    tol: float = 1e-6
    min_correspondences: int = 10
    k_neighbors: int = 10
    voxel_size: float = 0.05


def regularize_covariances(cov):
    """Replace eigenvalues by ``(eps, 1, 1)`` keeping the eigenvectors."""
    w, V = np.linalg.eigh(cov)
    reg = np.array([PLANE_EPS, 1.0, 1.0])
    return (V * reg[..., None, :]) @ np.swapaxes(V, -1, -2), w


def estimate_covariances(points, k_neighbors: int = 10) -> CovPointCloud:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k_neighbors < 4:
        raise ValueError("k_neighbors must be at least 4")
    if len(points) <= k_neighbors:
        raise ValueError(
            f"need more than {k_neighbors} points for covariance estimation, got {len(points)}"
        )
    tree = cKDTree(points)
    _, nn = tree.query(points, k=k_neighbors)
    nbrs = points[nn]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors
    cov, raw = regularize_covariances(scatter)
    spread = 0.5 * (raw[:, 1] + raw[:, 2])
    return CovPointCloud(points, cov, spread=np.maximum(spread, 0.0))


def gaussian_covariances(rotations, log_scales):
    """G-ICP covariances from Gaussian orientations: thinnest axis gets ``eps``."""
    R = quat_to_matrix(rotations)
    w = np.ones(np.shape(log_scales))
    w[np.arange(len(w)), np.argmin(log_scales, axis=1)] = PLANE_EPS
    return (R * w[:, None, :]) @ np.swapaxes(R, 1, 2)


def _hat_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def gicp_cost(source: CovPointCloud, target: CovPointCloud, pose: Pose, pairs):
    """Sum of Mahalanobis residuals for fixed ``(src_idx, tgt_idx)`` pairs."""
    si, ti = pairs
    R = pose.R
    a = pose.apply(source.points[si])
    d = target.points[ti] - a
    C = target.covariances[ti] + R @ source.covariances[si] @ R.T
    Minv = np.linalg.inv(C)
    return float(np.einsum("ni,nij,nj->", d, Minv, d))


def _correspond(tree, source_world, max_dist):
    dist, idx = tree.query(source_world, k=1, distance_upper_bound=max_dist)
    ok = np.isfinite(dist)
    return np.nonzero(ok)[0], idx[ok], dist[ok]


def gicp_align(
    source: CovPointCloud,
    target: CovPointCloud,
    init: Pose | None = None,
    cfg: GICPConfig | None = None,
    tree: cKDTree | None = None,
) -> AlignmentResult:
    """Estimate the pose mapping ``source`` onto ``target`` by Gauss-Newton."""
    cfg = cfg or GICPConfig()
    pose = init if init is not None else Pose.identity()
    if len(source) < 50 or len(target) < 50:
        raise TrackingLostError("G-ICP needs at least 50 points in each cloud")
    if tree is None:
        tree = cKDTree(target.points)
    src_cov = source.covariances
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        si, ti, _ = _correspond(tree, pose.apply(source.points), cfg.max_corr_dist)
        R = pose.R
        if len(si) < cfg.min_correspondences:
            raise TrackingLostError(f"only {len(si)} correspondences")
        p = source.points[si]
        a = p @ R.T + pose.t
        d = target.points[ti] - a
        C = target.covariances[ti] + R @ src_cov[si] @ R.T
        M = np.linalg.inv(C)
        # Left perturbation T <- exp(xi) T: d(a)/d(omega) = -[a]x, d(a)/d(rho) = I.
        Jac = np.empty((len(si), 3, 6))
        Jac[:, :, :3] = -_hat_batch(a)
        Jac[:, :, 3:] = np.eye(3)
        # residual r = d, dr/dxi = -Jac
        JtM = np.einsum("nki,nkj->nij", Jac, M)
        H = np.einsum("nij,njk->ik", JtM, Jac)
        g = np.einsum("nij,nj->i", JtM, d)
        xi = np.linalg.solve(H + 1e-12 * np.eye(6), g)
        # The step treats C as constant although it rotates with the pose, so
        # halve it until the cost on these pairs does not go up.
        cost = float(np.einsum("ni,nij,nj->", d, M, d))
        for _ in range(30):
            cand = se3_exp(xi) @ pose
            if gicp_cost(source, target, cand, (si, ti)) <= cost:
                break
            xi = 0.5 * xi
        else:
            converged = True
            break
        pose = cand
        if np.linalg.norm(xi) < cfg.tol:
            converged = True
            break
    si, ti, dist = _correspond(tree, pose.apply(source.points), cfg.max_corr_dist)
    if len(si) < cfg.min_correspondences:
        raise TrackingLostError(f"only {len(si)} correspondences")
    rmse = float(np.sqrt(np.mean(dist**2)))
    return AlignmentResult(pose, len(si) / len(source), rmse, it, converged)


def voxel_downsample(points, pixels, voxel_size):
    """Keep the first point (raster order) falling in each voxel."""
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return points[first], pixels[first]


def depth_cloud(depth, K: CameraIntrinsics, voxel_size=0.05, k_neighbors=10) -> CovPointCloud:
    """Camera-frame covariance cloud from a depth image."""
    pts, pix = backproject_depth(depth, K)
    if len(pts) < 50:
        raise TrackingLostError(f"depth image has only {len(pts)} valid pixels")
    pts, pix = voxel_downsample(pts, pix, voxel_size)
    if len(pts) <= k_neighbors:
        raise TrackingLostError("too few points after downsampling")
    cloud = estimate_covariances(pts, k_neighbors)
    cloud.pixels = pix
    return cloud


def track_frame(
    depth,
    K: CameraIntrinsics,
    map_samples: CovPointCloud,
    prev_pose: Pose,
    cfg: GICPConfig | None = None,
    source: CovPointCloud | None = None,
):
    """Align the frame's depth cloud to map samples starting from ``prev_pose``.

    Returns ``(AlignmentResult, source)`` with the result pose world<-camera and
    the camera-frame source cloud whose covariances feed map insertion.
    """
    cfg = cfg or GICPConfig()
    if source is None:
        source = depth_cloud(depth, K, cfg.voxel_size, cfg.k_neighbors)
    return gicp_align(source, map_samples, prev_pose, cfg), source


def is_keyframe(result: AlignmentResult, threshold: float = 0.80) -> bool:
    return result.inlier_ratio < threshold


def frustum_mask(positions, cam_pose: Pose, K: CameraIntrinsics, near=0.01, far=np.inf):
    pc = cam_pose.inverse().apply(positions)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[:, 0] / z + K.cx
        v = K.fy * pc[:, 1] / z + K.cy
    return (z > near) & (z < far) & (u >= -0.5) & (u <= K.width - 0.5) & (v >= -0.5) & (v <= K.height - 0.5)


def sample_map_targets(positions, rotations, log_scales, cam_pose, K, max_samples=20000, rng=None):
    """Uniform subsample of Gaussian centers inside the camera frustum."""
    idx = np.nonzero(frustum_mask(positions, cam_pose, K))[0]
    if len(idx) > max_samples:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(idx, size=max_samples, replace=False))
    cloud = CovPointCloud(positions[idx], gaussian_covariances(rotations[idx], log_scales[idx]))
    return cloud, idx

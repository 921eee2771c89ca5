"""CPU Gaussian splatting: depth-sorted forward compositing and analytic backward.

Every Gaussian is projected with the first-order (EWA) approximation, then all
(Gaussian, pixel) pairs whose opacity clears ``1/255`` are generated, sorted by
pixel and depth, and composited front to back. The pairs are kept in the
:class:`RenderOutput` so the backward pass needs no second sort.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .geometry import CameraIntrinsics, Pose, quat_to_matrix

NEAR = 0.01
DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
DEPTH_EPS = 1e-6
# The projection Jacobian is evaluated with x/z and y/z clamped to this
# multiple of the half field of view, so off-screen splats near the camera
# plane do not blow up to screen-filling footprints.
FOV_CLAMP = 1.3


@dataclass
class ProjectedGaussians:
    """Screen-space quantities for the Gaussians that survive culling."""

    index: np.ndarray  # into the map arrays
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2)
    conic: np.ndarray  # (M, 3) = a, b, c of the inverse covariance
    depth: np.ndarray  # (M,)
    cam_points: np.ndarray
    J: np.ndarray
    W: np.ndarray
    R: np.ndarray
    cov3d: np.ndarray
    opacity: np.ndarray

    def __len__(self):
        return len(self.index)


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    feat: np.ndarray
    acc_alpha: np.ndarray
    proj: ProjectedGaussians
    pairs: dict
    weights: sparse.csr_matrix
    n_gaussians: int
    cam_pose: Pose
    K: CameraIntrinsics

    @property
    def contributors(self):
        """Number of composited splats per pixel."""
        return np.diff(self.weights.indptr).reshape(self.depth.shape)


def project_gaussians(gmap, cam_pose: Pose, K: CameraIntrinsics, index=None) -> ProjectedGaussians:
    """Project map Gaussians into the camera ``cam_pose`` (world <- camera).

    With ``index`` given, exactly those Gaussians are projected and no culling
    is applied (used to replay a frozen forward pass).
    """
    positions, rotations, log_scales, logits = (
        gmap.positions,
        gmap.rotations,
        gmap.log_scales,
        gmap.opacity_logits,
    )
    W = cam_pose.R.T
    tcw = -W @ cam_pose.t
    t = positions @ W.T + tcw
    if index is None:
        index = np.nonzero(t[:, 2] > NEAR)[0]
    t = t[index]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    R = quat_to_matrix(rotations[index])
    s2 = np.exp(2.0 * log_scales[index])
    cov3d = (R * s2[:, None, :]) @ np.swapaxes(R, 1, 2)
    uc, vc = _clamped_ratios(x, y, z, K)
    J = np.zeros((len(index), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * uc / z
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * vc / z
    M = J @ W
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    opacity = 0.5 * (1.0 + np.tanh(0.5 * logits[index]))
    return ProjectedGaussians(index, mean2d, cov2d, conic, z, t, J, W, R, cov3d, opacity)


def _fov_limits(K: CameraIntrinsics):
    return (
        FOV_CLAMP * max(K.cx + 0.5, K.width - 0.5 - K.cx) / K.fx,
        FOV_CLAMP * max(K.cy + 0.5, K.height - 0.5 - K.cy) / K.fy,
    )


def _clamped_ratios(x, y, z, K):
    lx, ly = _fov_limits(K)
    return np.clip(x / z, -lx, lx), np.clip(y / z, -ly, ly)


def project_gaussian(g, cam_pose: Pose, K: CameraIntrinsics):
    """Project a single Gaussian; returns ``None`` when it is culled.

    ``g`` is any object with ``position``, ``rotation``, ``log_scale`` and
    ``opacity_logit`` attributes.
    """

    class _One:
        positions = np.asarray(g.position, dtype=np.float64).reshape(1, 3)
        rotations = np.asarray(g.rotation, dtype=np.float64).reshape(1, 4)
        log_scales = np.asarray(g.log_scale, dtype=np.float64).reshape(1, 3)
        opacity_logits = np.asarray([g.opacity_logit], dtype=np.float64)

    proj = _cull(project_gaussians(_One, cam_pose, K), K)
    return proj if len(proj) else None


def _take(proj: ProjectedGaussians, keep) -> ProjectedGaussians:
    return ProjectedGaussians(
        *(getattr(proj, f)[keep] if f != "W" else proj.W for f in proj.__dataclass_fields__)
    )


def _lambda_max(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


def _cull(proj: ProjectedGaussians, K: CameraIntrinsics) -> ProjectedGaussians:
    r = 3.0 * np.sqrt(_lambda_max(proj.cov2d))
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    inside = (
        (proj.depth > NEAR)
        & (u + r >= -0.5)
        & (u - r <= K.width - 0.5)
        & (v + r >= -0.5)
        & (v - r <= K.height - 0.5)
    )
    return _take(proj, inside)


def _generate_pairs(proj: ProjectedGaussians, K: CameraIntrinsics):
    """All (Gaussian, pixel) pairs inside each splat's 1/255 opacity contour."""
    op = proj.opacity
    qmax = 2.0 * np.log(np.maximum(op * 255.0, 1.0))
    r = np.sqrt(qmax * _lambda_max(proj.cov2d))
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    x0 = np.clip(np.ceil(u - r), 0, K.width - 1).astype(np.int64)
    x1 = np.clip(np.floor(u + r), 0, K.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - r), 0, K.height - 1).astype(np.int64)
    y1 = np.clip(np.floor(v + r), 0, K.height - 1).astype(np.int64)
    wx = np.maximum(x1 - x0 + 1, 0)
    wy = np.maximum(y1 - y0 + 1, 0)
    ok = (qmax > 0) & (u + r >= 0) & (u - r <= K.width - 1) & (v + r >= 0) & (v - r <= K.height - 1)
    counts = np.where(ok, wx * wy, 0)
    gi = np.repeat(np.arange(len(proj)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(len(gi)) - np.repeat(starts, counts)
    wxg = wx[gi]
    px = x0[gi] + local % wxg
    py = y0[gi] + local // wxg
    return gi, py * K.width + px


def _composite(proj, gi, pix, K):
    """Per-pair pixel offsets, Mahalanobis terms and unclamped opacity."""
    px = pix % K.width
    py = pix // K.width
    dx = px - proj.mean2d[gi, 0]
    dy = py - proj.mean2d[gi, 1]
    a, b, c = proj.conic[gi, 0], proj.conic[gi, 1], proj.conic[gi, 2]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    gauss = np.exp(-0.5 * q)
    alpha_raw = proj.opacity[gi] * gauss
    return dx, dy, q, gauss, alpha_raw


def _segment_first(pix):
    n = len(pix)
    new = np.ones(n, dtype=bool)
    new[1:] = pix[1:] != pix[:-1]
    starts = np.nonzero(new)[0]
    first = np.maximum.accumulate(np.where(new, np.arange(n), 0))
    return new, starts, first


def render(gmap, cam_pose: Pose, K: CameraIntrinsics, freeze: RenderOutput | None = None) -> RenderOutput:
    """Render RGB, depth, compact features and accumulated opacity.

    ``freeze`` replays the contributor structure (culling, pair set, sort
    order and clamp flags) of an earlier output on the current parameters.
    Gradient checks use it so finite differences never straddle the opacity
    skip/clamp thresholds.
    """
    H, Wd = K.height, K.width
    d = gmap.feature_dim
    P = H * Wd
    if freeze is None:
        proj = _cull(project_gaussians(gmap, cam_pose, K), K)
        gi, pix = _generate_pairs(proj, K)
        dx, dy, q, gauss, alpha_raw = _composite(proj, gi, pix, K)
        keep = alpha_raw >= ALPHA_MIN
        gi, pix = gi[keep], pix[keep]
        dx, dy, q, gauss, alpha_raw = dx[keep], dy[keep], q[keep], gauss[keep], alpha_raw[keep]
        # Front-to-back by depth, ties by Gaussian ID.
        rank = np.empty(len(proj), dtype=np.int64)
        rank[np.lexsort((gmap.ids[proj.index], proj.depth))] = np.arange(len(proj))
        order = np.argsort(pix * max(len(proj), 1) + rank[gi], kind="stable")
        gi, pix = gi[order], pix[order]
        dx, dy, q, gauss, alpha_raw = dx[order], dy[order], q[order], gauss[order], alpha_raw[order]
        clamped = alpha_raw > ALPHA_MAX
    else:
        fp = freeze.pairs
        proj = project_gaussians(gmap, cam_pose, K, index=freeze.proj.index)
        gi, pix, clamped = fp["gi"], fp["pix"], fp["clamped"]
        dx, dy, q, gauss, alpha_raw = _composite(proj, gi, pix, K)
    alpha = np.where(clamped, ALPHA_MAX, alpha_raw)
    L = np.log1p(-alpha)
    new, starts, first = _segment_first(pix)
    C = np.cumsum(L)
    base = C[first] - L[first] if len(C) else C
    T = np.exp(C - L - base)
    w = alpha * T
    indptr = np.concatenate([[0], np.cumsum(np.bincount(pix, minlength=P))])
    Wm = sparse.csr_matrix((w, gi, indptr), shape=(P, len(proj)))
    X = np.concatenate(
        [
            gmap.colors[proj.index],
            gmap.features[proj.index],
            proj.depth[:, None],
            np.ones((len(proj), 1)),
        ],
        axis=1,
    )
    img = np.asarray(Wm @ X) if len(proj) else np.zeros((P, X.shape[1]))
    acc = img[:, -1]
    depth = img[:, -2] / np.maximum(acc, DEPTH_EPS)
    pairs = dict(gi=gi, pix=pix, dx=dx, dy=dy, q=q, gauss=gauss, alpha_raw=alpha_raw,
                 alpha=alpha, clamped=clamped, T=T, w=w, new=new, starts=starts)
    return RenderOutput(
        rgb=img[:, :3].reshape(H, Wd, 3),
        depth=depth.reshape(H, Wd),
        feat=img[:, 3 : 3 + d].reshape(H, Wd, d),
        acc_alpha=np.clip(acc, 0.0, 1.0).reshape(H, Wd),
        proj=proj,
        pairs=pairs,
        weights=Wm,
        n_gaussians=len(gmap),
        cam_pose=cam_pose,
        K=K,
    )


def _segment_suffix(values, pix, new):
    """Sum of ``values`` over strictly later pairs in the same pixel segment."""
    C = np.cumsum(values)
    ends = np.append(np.nonzero(new)[0][1:] - 1, len(values) - 1)
    return C[ends[np.cumsum(new) - 1]] - C


def _drot_dquat(q):
    """dR/dq for unit quaternions: array (N, 4, 3, 3)."""
    w, x, y, z = q.T
    n = len(q)
    D = np.zeros((n, 4, 3, 3))
    # d/dw
    D[:, 0, 0, 1], D[:, 0, 0, 2] = -2 * z, 2 * y
    D[:, 0, 1, 0], D[:, 0, 1, 2] = 2 * z, -2 * x
    D[:, 0, 2, 0], D[:, 0, 2, 1] = -2 * y, 2 * x
    # d/dx
    D[:, 1, 0, 1], D[:, 1, 0, 2] = 2 * y, 2 * z
    D[:, 1, 1, 0], D[:, 1, 1, 1], D[:, 1, 1, 2] = 2 * y, -4 * x, -2 * w
    D[:, 1, 2, 0], D[:, 1, 2, 1], D[:, 1, 2, 2] = 2 * z, 2 * w, -4 * x
    # d/dy
    D[:, 2, 0, 0], D[:, 2, 0, 1], D[:, 2, 0, 2] = -4 * y, 2 * x, 2 * w
    D[:, 2, 1, 0], D[:, 2, 1, 2] = 2 * x, 2 * z
    D[:, 2, 2, 0], D[:, 2, 2, 1], D[:, 2, 2, 2] = -2 * w, 2 * z, -4 * y
    # d/dz
    D[:, 3, 0, 0], D[:, 3, 0, 1], D[:, 3, 0, 2] = -4 * z, -2 * w, 2 * x
    D[:, 3, 1, 0], D[:, 3, 1, 1], D[:, 3, 1, 2] = 2 * w, -4 * z, 2 * y
    D[:, 3, 2, 0], D[:, 3, 2, 1] = 2 * x, 2 * y
    return D


def render_backward(gmap, out: RenderOutput, grad_rgb=None, grad_depth=None, grad_feat=None):
    """Gradients of ``<grad_rgb, rgb> + <grad_depth, depth> + <grad_feat, feat>``.

    Returns a dict keyed like the map attributes (``positions``, ``rotations``,
    ``log_scales``, ``opacity_logits``, ``colors``, ``features``), each shaped
    like the corresponding map array. Rotation gradients are with respect to
    the stored (raw) quaternion.
    """
    H, Wd = out.depth.shape
    d = gmap.feature_dim
    P = H * Wd
    if out.n_gaussians != len(gmap):
        raise ValueError("render output does not match the map")
    grad_rgb = np.zeros((H, Wd, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=np.float64)
    grad_depth = np.zeros((H, Wd)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    grad_feat = np.zeros((H, Wd, d)) if grad_feat is None else np.asarray(grad_feat, dtype=np.float64)
    if grad_rgb.shape != (H, Wd, 3) or grad_depth.shape != (H, Wd) or grad_feat.shape != (H, Wd, d):
        raise ValueError("cotangent shapes do not match the render output")

    proj, pr = out.proj, out.pairs
    K = out.K
    M_ = len(proj)
    grads = {
        "positions": np.zeros_like(gmap.positions),
        "rotations": np.zeros_like(gmap.rotations),
        "log_scales": np.zeros_like(gmap.log_scales),
        "opacity_logits": np.zeros_like(gmap.opacity_logits),
        "colors": np.zeros_like(gmap.colors),
        "features": np.zeros_like(gmap.features),
    }
    if M_ == 0 or len(pr["gi"]) == 0:
        return grads

    acc = np.asarray(out.weights.sum(axis=1)).ravel()
    depth = out.depth.ravel()
    big = acc > DEPTH_EPS
    g_depth = grad_depth.ravel()
    g_Z = g_depth / np.maximum(acc, DEPTH_EPS)
    g_A = np.where(big, -g_depth * depth / np.where(big, acc, 1.0), 0.0)
    G = np.concatenate(
        [grad_rgb.reshape(P, 3), grad_feat.reshape(P, d), g_Z[:, None], g_A[:, None]], axis=1
    )
    X = np.concatenate(
        [gmap.colors[proj.index], gmap.features[proj.index], proj.depth[:, None], np.ones((M_, 1))],
        axis=1,
    )
    dX = np.asarray(out.weights.T @ G)
    grads["colors"][proj.index] = dX[:, :3]
    grads["features"][proj.index] = dX[:, 3 : 3 + d]
    g_z = dX[:, 3 + d].copy()

    gi, pix = pr["gi"], pr["pix"]
    s = np.einsum("ij,ij->i", G[pix], X[gi])
    alpha, T, w = pr["alpha"], pr["T"], pr["w"]
    later = _segment_suffix(s * w, pix, pr["new"])
    g_alpha = T * s - later / (1.0 - alpha)
    g_alpha = np.where(pr["clamped"], 0.0, g_alpha)

    g_op = np.bincount(gi, weights=g_alpha * pr["gauss"], minlength=M_)
    g_q = g_alpha * (-0.5 * pr["alpha_raw"])
    dx, dy = pr["dx"], pr["dy"]
    a, b, c = proj.conic[gi, 0], proj.conic[gi, 1], proj.conic[gi, 2]
    g_mx = np.bincount(gi, weights=g_q * -2.0 * (a * dx + b * dy), minlength=M_)
    g_my = np.bincount(gi, weights=g_q * -2.0 * (b * dx + c * dy), minlength=M_)
    g_a = np.bincount(gi, weights=g_q * dx * dx, minlength=M_)
    g_b = np.bincount(gi, weights=g_q * 2.0 * dx * dy, minlength=M_)
    g_c = np.bincount(gi, weights=g_q * dy * dy, minlength=M_)

    op = proj.opacity
    grads["opacity_logits"][proj.index] = g_op * op * (1.0 - op)

    # conic -> cov2d
    Gc = np.empty((M_, 2, 2))
    Gc[:, 0, 0], Gc[:, 0, 1], Gc[:, 1, 0], Gc[:, 1, 1] = g_a, 0.5 * g_b, 0.5 * g_b, g_c
    A = np.empty((M_, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    G2 = -A @ Gc @ A

    # cov2d = M cov3d M^T, M = J W
    Wr = proj.W
    Mm = proj.J @ Wr
    G3 = np.swapaxes(Mm, 1, 2) @ G2 @ Mm
    gM = 2.0 * G2 @ Mm @ proj.cov3d
    gJ = gM @ Wr.T

    t = proj.cam_points
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = K.fx, K.fy
    uc, vc = _clamped_ratios(x, y, z, K)
    lx, ly = _fov_limits(K)
    # d(uc)/dx = 1/z and d(uc)/dz = -x/z^2 inside the clamp range, zero outside
    fu = (np.abs(x / z) < lx).astype(np.float64)
    fv = (np.abs(y / z) < ly).astype(np.float64)
    gt = np.zeros((M_, 3))
    gt[:, 0] = gJ[:, 0, 2] * (-fx / z**2) * fu + g_mx * fx / z
    gt[:, 1] = gJ[:, 1, 2] * (-fy / z**2) * fv + g_my * fy / z
    gt[:, 2] = (
        gJ[:, 0, 0] * (-fx / z**2)
        + gJ[:, 0, 2] * (fx * uc / z**2 + fu * fx * x / z**3)
        + gJ[:, 1, 1] * (-fy / z**2)
        + gJ[:, 1, 2] * (fy * vc / z**2 + fv * fy * y / z**3)
        - g_mx * fx * x / z**2
        - g_my * fy * y / z**2
        + g_z
    )
    grads["positions"][proj.index] = gt @ Wr

    # cov3d = R diag(exp(2s)) R^T
    R = proj.R
    s2 = np.exp(2.0 * gmap.log_scales[proj.index])
    RtGR = np.swapaxes(R, 1, 2) @ G3 @ R
    grads["log_scales"][proj.index] = 2.0 * s2 * np.diagonal(RtGR, axis1=1, axis2=2)
    gR = 2.0 * G3 @ R * s2[:, None, :]
    qraw = gmap.rotations[proj.index]
    qn = np.linalg.norm(qraw, axis=1, keepdims=True)
    qhat = qraw / qn
    g_qhat = np.einsum("nkij,nij->nk", _drot_dquat(qhat), gR)
    g_qraw = (g_qhat - qhat * np.sum(g_qhat * qhat, axis=1, keepdims=True)) / qn
    grads["rotations"][proj.index] = g_qraw
    return grads

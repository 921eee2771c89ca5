"""Rigid-body geometry: quaternion poses, SE(3) exp/log and the pinhole camera.

Conventions
-----------
* Quaternions are stored as ``(w, x, y, z)`` and multiplied with the Hamilton
  product.
* Camera frame is +z forward, +x right, +y down.
* Twists are ordered ``(rx, ry, rz, tx, ty, tz)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    pass


class DegenerateRotationError(ValueError):
    """Raised by :func:`so3_log` when the rotation angle is exactly pi."""


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_multiply(a, b):
    """Hamilton product, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    """Rotation matrix of (not necessarily normalized) quaternions ``(..., 4)``."""
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Quaternion with w >= 0 from rotation matrices ``(..., 3, 3)``."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    m = R.reshape(-1, 3, 3)
    # Shepperd: pick the largest of (w, x, y, z) magnitudes for stability.
    diag = np.stack([m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    tr = diag.sum(axis=1)
    cand = np.stack(
        [1 + tr, 1 + 2 * diag[:, 0] - tr, 1 + 2 * diag[:, 1] - tr, 1 + 2 * diag[:, 2] - tr],
        axis=1,
    )
    best = np.argmax(cand, axis=1)
    q = np.empty((m.shape[0], 4))
    s = 2.0 * np.sqrt(np.maximum(cand[np.arange(len(best)), best], 1e-300))
    d21, d02, d10 = m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]
    s01, s02, s12 = m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0], m[:, 1, 2] + m[:, 2, 1]
    rows = [
        (0.25 * s, d21 / s, d02 / s, d10 / s),
        (d21 / s, 0.25 * s, s01 / s, s02 / s),
        (d02 / s, s01 / s, 0.25 * s, s12 / s),
        (d10 / s, s02 / s, s12 / s, 0.25 * s),
    ]
    for k, comps in enumerate(rows):
        sel = best == k
        for c in range(4):
            q[sel, c] = comps[c][sel]
    q = quat_normalize(q)
    q[q[:, 0] < 0] *= -1
    return q.reshape(batch + (4,))


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega):
    """Unit quaternion of the rotation vector ``omega``."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        q = np.array([1.0, 0.5 * omega[0], 0.5 * omega[1], 0.5 * omega[2]])
        return q / np.linalg.norm(q)
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * omega / theta])


def so3_log(q):
    """Rotation vector of a unit quaternion, taking the w >= 0 branch."""
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    if w == 0.0:
        raise DegenerateRotationError("rotation angle is pi; axis sign is ambiguous")
    if s < 1e-12:
        return 2.0 * v / w
    theta = 2.0 * np.arctan2(s, w)
    return theta * v / s


def _left_jacobian(omega):
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / t2 * K
        + (theta - np.sin(theta)) / (t2 * theta) * K @ K
    )


def _left_jacobian_inv(omega):
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    t2 = theta * theta
    coef = (1.0 / t2) * (1 - theta * np.sin(theta) / (2 * (1 - np.cos(theta))))
    return np.eye(3) - 0.5 * K + coef * K @ K


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R(q) x + t``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.array(self.q, dtype=np.float64)))
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -quat_to_matrix(qi) @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    __matmul__ = compose

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def rotation_angle(self):
        return 2.0 * np.arccos(np.clip(abs(self.q[0]), 0.0, 1.0))

    def __eq__(self, other):
        return (
            isinstance(other, Pose)
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.t, other.t)
        )

    def __hash__(self):
        return hash((self.q.tobytes(), self.t.tobytes()))


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(p: Pose) -> Pose:
    return p.inverse()


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=np.float64)
    omega, rho = xi[:3], xi[3:]
    return Pose(so3_exp(omega), _left_jacobian(omega) @ rho)


def se3_log(p: Pose) -> np.ndarray:
    omega = so3_log(p.q)
    return np.concatenate([omega, _left_jacobian_inv(omega) @ p.t])


def pose_error(a: Pose, b: Pose):
    """(rotation error in radians, translation error in meters) between poses."""
    d = a.inverse() @ b
    return d.rotation_angle(), float(np.linalg.norm(a.t - b.t))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor):
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


def project(point, K: CameraIntrinsics):
    """Pixel coordinates ``(u, v, z)`` of a camera-frame point."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if not z > 0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def project_points(points, K: CameraIntrinsics):
    """Vectorized projection; returns ``(uv, z)`` without depth checks."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * points[:, 0] / z + K.cx
        v = K.fy * points[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def backproject(u, v, depth, K: CameraIntrinsics):
    """Camera-frame point seen at pixel ``(u, v)`` with the given depth.

    Returns ``None`` for a rejected pixel (non-positive depth or outside the image).
    """
    if not depth > 0:
        return None
    if not (0 <= u <= K.width - 1 and 0 <= v <= K.height - 1):
        return None
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def backproject_depth(depth, K: CameraIntrinsics):
    """Backproject every valid pixel of a depth image.

    Returns ``(points (N, 3), pixels (N, 2) as (u, v) ints)`` in raster order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    v, u = np.nonzero(np.isfinite(depth) & (depth > 0))
    z = depth[v, u]
    pts = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)
    return pts, np.stack([u, v], axis=1)


def rot_x(angle):
    return Pose(so3_exp([angle, 0, 0]))


def rot_y(angle):
    return Pose(so3_exp([0, angle, 0]))


def rot_z(angle):
    return Pose(so3_exp([0, 0, angle]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose.from_rt(R, eye)

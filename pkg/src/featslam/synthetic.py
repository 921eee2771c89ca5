"""Ray-cast synthetic RGB-D scenes with per-pixel high-dimensional features.

The oracle intersects camera rays with analytic planes, spheres and boxes. It
shares no code with the splat renderer, so it can serve as ground truth for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, look_at, so3_exp

VOID = -1


@dataclass
class Primitive:
    shape: str  # "plane" | "sphere" | "box"
    pose: Pose  # world <- object
    size: tuple  # plane: (half_x, half_y); sphere: (radius,); box: (hx, hy, hz)
    class_id: int
    albedo: tuple

    def __post_init__(self):
        if self.shape not in ("plane", "sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")


@dataclass
class TrajectorySpec:
    kind: str = "orbit"  # "orbit" | "lawnmower" | "square-loop"
    n_frames: int = 200
    params: dict = field(default_factory=dict)


@dataclass
class SyntheticSceneSpec:
    primitives: list
    classes: dict  # class id -> unit prototype (D,)
    trajectory: TrajectorySpec
    intrinsics: CameraIntrinsics
    depth_sigma: float = 0.0
    feature_sigma: float = 0.0
    # Spatially smooth within-class feature variation (amplitude, rank).
    nuisance_amplitude: float = 0.0
    nuisance_rank: int = 0
    seed: int = 0
    light_dir: tuple = (0.3, -0.5, 0.8)

    def __post_init__(self):
        for c, proto in self.classes.items():
            if abs(np.linalg.norm(proto) - 1.0) > 1e-9:
                raise ValueError(f"class {c} prototype is not unit norm")
        if self.trajectory.n_frames < 2:
            raise ValueError("trajectory needs at least two frames")

    @property
    def feature_dim(self):
        return len(next(iter(self.classes.values())))

    def class_names(self):
        return sorted(self.classes)


def class_prototypes(n_classes, D, seed=0, one_hot=False):
    """Unit prototypes; random ones are orthogonalized when possible."""
    if one_hot:
        return {c: np.eye(D)[c] for c in range(n_classes)}
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(D, max(n_classes, 1)))
    if n_classes <= D:
        Q, _ = np.linalg.qr(A)
        # Mix in a shared component so prototypes are correlated like real embeddings.
        shared = rng.normal(size=D)
        shared /= np.linalg.norm(shared)
        P = 0.9 * Q[:, :n_classes].T + 0.45 * shared
    else:
        P = A.T
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    return {c: P[c] for c in range(n_classes)}


# ---------------------------------------------------------------- intersections


def _intersect_plane(o, d, size):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 2] / d[:, 2]
    p = o + t[:, None] * d
    ok = np.isfinite(t) & (t > 1e-9) & (np.abs(p[:, 0]) <= size[0]) & (np.abs(p[:, 1]) <= size[1])
    n = np.broadcast_to(np.array([0.0, 0.0, 1.0]), o.shape).copy()
    return np.where(ok, t, np.inf), n


def _intersect_sphere(o, d, size):
    r = size[0]
    b = np.einsum("ij,ij->i", o, d)
    a = np.einsum("ij,ij->i", d, d)
    c = np.einsum("ij,ij->i", o, o) - r * r
    disc = b * b - a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - sq) / a
    t2 = (-b + sq) / a
    t = np.where(t1 > 1e-9, t1, t2)
    ok = (disc >= 0) & (t > 1e-9)
    t = np.where(ok, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, p / r


def _intersect_box(o, d, size):
    h = np.asarray(size, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-h - o) * inv
        t1 = (h - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    t = np.where(tn > 1e-9, tn, tf)
    ok = (tn <= tf) & (t > 1e-9)
    t = np.where(ok, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    axis = np.argmax(np.abs(p) / h, axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(p[np.arange(len(p)), axis])
    return t, n


_INTERSECT = {"plane": _intersect_plane, "sphere": _intersect_sphere, "box": _intersect_box}


def cast_rays(spec: SyntheticSceneSpec, origins, dirs):
    """Nearest hit per ray: (t, world point, world normal, primitive index or -1)."""
    best_t = np.full(len(origins), np.inf)
    best_n = np.zeros((len(origins), 3))
    best_i = np.full(len(origins), -1)
    for k, prim in enumerate(spec.primitives):
        inv = prim.pose.inverse()
        o = inv.apply(origins)
        d = dirs @ inv.R.T
        t, n = _INTERSECT[prim.shape](o, d, prim.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer] @ prim.pose.R.T
        best_i[closer] = k
    hit = np.isfinite(best_t)
    pts = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
    return best_t, pts, best_n, best_i


# ------------------------------------------------------------------ rendering


def _nuisance_basis(spec: SyntheticSceneSpec):
    rng = np.random.default_rng(spec.seed + 7919)
    r = spec.nuisance_rank
    B = rng.normal(size=(r, spec.feature_dim))
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    freq = rng.normal(0.0, 2.0, size=(r, 3))
    phase = rng.uniform(0, 2 * np.pi, size=r)
    return B, freq, phase


def features_at(spec: SyntheticSceneSpec, points, class_ids, rng=None):
    """Teacher features for world points of the given classes (void -> zero)."""
    D = spec.feature_dim
    protos = np.zeros((max(spec.classes) + 2, D))
    for c, p in spec.classes.items():
        protos[c] = p
    out = protos[np.where(class_ids >= 0, class_ids, -1)]
    valid = class_ids >= 0
    if spec.nuisance_amplitude > 0 and spec.nuisance_rank > 0:
        B, freq, phase = _nuisance_basis(spec)
        coef = np.sin(points @ freq.T + phase)
        out = out + spec.nuisance_amplitude * coef @ B
    if spec.feature_sigma > 0 and rng is not None:
        out = out + rng.normal(0.0, spec.feature_sigma, size=out.shape)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    out = np.where(norm > 0, out / np.where(norm > 0, norm, 1.0), 0.0)
    out[~valid] = 0.0
    return out


def render_view(spec: SyntheticSceneSpec, pose: Pose, rng=None, K: CameraIntrinsics | None = None):
    """Ray-cast one view; returns dict(rgb, depth, feat, labels)."""
    K = K or spec.intrinsics
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    rays_cam = np.stack(
        [(u.ravel() - K.cx) / K.fx, (v.ravel() - K.cy) / K.fy, np.ones(u.size)], axis=1
    )
    dirs = rays_cam @ pose.R.T
    origins = np.broadcast_to(pose.t, dirs.shape)
    t, pts, normals, prim = cast_rays(spec, origins, dirs)
    hit = prim >= 0
    # rays have unit z in the camera frame, so t is the z-depth
    depth = np.where(hit, t, 0.0)
    if spec.depth_sigma > 0 and rng is not None:
        depth = np.where(hit, depth + rng.normal(0.0, spec.depth_sigma, size=depth.shape), 0.0)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    facing = np.where(np.einsum("ij,ij->i", normals, dirs)[:, None] > 0, -normals, normals)
    shade = 0.35 + 0.65 * np.abs(facing @ light)
    albedo = np.zeros((len(spec.primitives) + 1, 3))
    cls = np.full(len(spec.primitives) + 1, VOID)
    for k, p in enumerate(spec.primitives):
        albedo[k] = p.albedo
        cls[k] = p.class_id
    rgb = np.where(hit[:, None], albedo[prim] * shade[:, None], 0.0)
    labels = np.where(hit, cls[prim], VOID)
    feat = features_at(spec, pts, labels, rng)
    H, W = K.height, K.width
    return dict(
        rgb=np.clip(rgb, 0.0, 1.0).reshape(H, W, 3),
        depth=depth.reshape(H, W),
        feat=feat.reshape(H, W, -1),
        labels=labels.reshape(H, W),
    )


# --------------------------------------------------------------- trajectories


def trajectory_poses(spec: TrajectorySpec) -> list:
    n = spec.n_frames
    p = spec.params
    if n < 1:
        raise ValueError("trajectory has zero frames")
    if spec.kind == "orbit":
        radius = p.get("radius", 1.2)
        height = p.get("height", 1.4)
        center = np.asarray(p.get("center", (0.0, 0.0, 0.9)))
        sweep = p.get("sweep", 2 * np.pi)
        poses = []
        for i in range(n):
            a = sweep * i / n
            eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
            poses.append(look_at(eye, center))
        return poses
    if spec.kind == "square-loop":
        side = p.get("side", 1.6)
        height = p.get("height", 1.4)
        pitch = p.get("pitch", -0.35)
        extra = p.get("overlap", 0.25)
        # waypoints (x, y, yaw) around a square, facing outward-left of travel
        corners = [(-side / 2, -side / 2), (side / 2, -side / 2), (side / 2, side / 2), (-side / 2, side / 2)]
        legs = []
        for k in range(4):
            a, b = np.array(corners[k]), np.array(corners[(k + 1) % 4])
            legs.append((a, b, np.pi / 2 * k))
        path = []
        total = 4 + extra
        for i in range(n):
            s = total * i / (n - 1)
            k = int(np.floor(s)) % 4
            f = s - np.floor(s)
            a, b, yaw = legs[k]
            # heading pans a quarter turn per leg, so rotation per frame stays
            # within the tracker's basin (no in-place turns at the corners)
            path.append((a + (b - a) * f, yaw + np.pi / 2 * f))
        poses = []
        for pos, ang in path:
            eye = np.array([pos[0], pos[1], height])
            fwd = np.array([np.cos(ang - np.pi / 2), np.sin(ang - np.pi / 2), 0.0])
            target = eye + fwd + np.array([0, 0, np.tan(pitch)])
            poses.append(look_at(eye, target))
        return poses
    if spec.kind == "lawnmower":
        width = p.get("width", 2.0)
        rows = p.get("rows", 3)
        height = p.get("height", 1.4)
        poses = []
        for i in range(n):
            s = rows * i / n
            r = int(s)
            f = s - r
            x = -width / 2 + width * (f if r % 2 == 0 else 1 - f)
            y = -0.6 + 1.2 * r / max(rows - 1, 1)
            eye = np.array([x, y, height])
            poses.append(look_at(eye, eye + np.array([0.0, 1.0, -0.4])))
        return poses
    raise ValueError(f"unknown trajectory kind {spec.kind!r}")


def generate_sequence(spec: SyntheticSceneSpec, seed: int = 0) -> list:
    """Render every trajectory frame; each frame is a dict with ``gt_pose``."""
    poses = trajectory_poses(spec.trajectory)
    rng = np.random.default_rng(seed)
    frames = []
    for i, pose in enumerate(poses):
        f = render_view(spec, pose, rng)
        f["gt_pose"] = pose
        f["timestamp"] = i / 30.0
        frames.append(f)
    return frames


def feature_corpus(spec: SyntheticSceneSpec, n_views=24, seed=123, per_view=512):
    """Teacher features sampled from random views inside the scene."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_views):
        eye = np.array([rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(0.8, 2.0)])
        target = np.array([rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5), rng.uniform(0.0, 2.0)])
        if np.linalg.norm(target - eye) < 0.5:
            continue
        f = render_view(spec, look_at(eye, target), rng)
        feats = f["feat"].reshape(-1, spec.feature_dim)[f["labels"].ravel() >= 0]
        take = rng.choice(len(feats), size=min(per_view, len(feats)), replace=False)
        out.append(feats[take])
    return np.concatenate(out)


# ----------------------------------------------------------------- scenes


def room_primitives(n_classes=4, half=3.0, height=3.0):
    """A closed room with a sphere and a box; class layout depends on ``n_classes``."""
    up = Pose.identity()
    if n_classes == 4:
        floor, ceil, walls, sphere, box = 0, 1, [1, 1, 1, 1], 2, 3
    elif n_classes == 8:
        floor, ceil, walls, sphere, box = 0, 1, [2, 3, 4, 5], 6, 7
    else:
        raise ValueError("room scenes support 4 or 8 classes")
    wall_colors = [(0.85, 0.8, 0.7), (0.7, 0.8, 0.85), (0.8, 0.85, 0.7), (0.85, 0.7, 0.8)]
    if n_classes == 4:
        wall_colors = [(0.8, 0.78, 0.72)] * 4
    prims = [
        Primitive("plane", Pose(t=[0, 0, 0.0]), (half, half), floor, (0.55, 0.4, 0.3)),
        Primitive("plane", Pose(t=[0, 0, height]), (half, half), ceil, (0.9, 0.9, 0.88)),
    ]
    for k, (ang, c) in enumerate(zip((0, np.pi / 2, np.pi, 3 * np.pi / 2), wall_colors)):
        # wall normal points toward the room center
        R = Pose(so3_exp([0, 0, ang])) @ Pose(so3_exp([np.pi / 2, 0, 0]))
        t = Pose(so3_exp([0, 0, ang])).apply([0, half, height / 2])
        prims.append(Primitive("plane", Pose(R.q, t), (half, height / 2), walls[k], c))
    prims.append(Primitive("sphere", Pose(t=[0.3, 0.4, 0.45]), (0.45,), sphere, (0.2, 0.5, 0.85)))
    prims.append(Primitive("box", Pose(so3_exp([0, 0, 0.4]), [-0.5, -0.45, 0.35]), (0.35, 0.3, 0.35), box, (0.85, 0.3, 0.25)))
    # furniture against the walls so outward-looking views stay well constrained
    furniture = [
        ((1.2, half - 0.3, 0.5), 0.2, (0.5, 0.3, 0.5), (0.3, 0.6, 0.3)),
        ((half - 0.35, -0.8, 0.9), -0.3, (0.35, 0.6, 0.9), (0.6, 0.45, 0.2)),
        ((-1.0, -half + 0.4, 0.6), 0.5, (0.7, 0.4, 0.6), (0.25, 0.35, 0.6)),
        ((-half + 0.3, 1.1, 0.4), 0.0, (0.3, 0.5, 0.4), (0.7, 0.7, 0.2)),
    ]
    for center, yaw, size, color in furniture:
        prims.append(Primitive("box", Pose(so3_exp([0, 0, yaw]), center), size, box, color))
    # balls hung along the walls pin translation parallel to them
    for k, ang in enumerate((0, np.pi / 2, np.pi, 3 * np.pi / 2)):
        for j, along in enumerate((-1.8, 0.0, 1.8)):
            c = Pose(so3_exp([0, 0, ang])).apply([along, half - 0.45, 0.9 + 0.4 * ((j + k) % 3)])
            prims.append(Primitive("sphere", Pose(t=c), (0.22,), sphere, (0.3 + 0.1 * j, 0.45, 0.8 - 0.1 * k)))
    return prims


def room_scene(
    n_classes=4,
    D=32,
    n_frames=200,
    trajectory="orbit",
    width=64,
    height=64,
    depth_sigma=0.001,
    feature_sigma=0.01,
    nuisance_amplitude=0.0,
    nuisance_rank=0,
    seed=0,
    trajectory_params=None,
) -> SyntheticSceneSpec:
    fx = 50.0 * width / 64.0
    K = CameraIntrinsics(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    return SyntheticSceneSpec(
        primitives=room_primitives(n_classes),
        classes=class_prototypes(n_classes, D, seed),
        trajectory=TrajectorySpec(trajectory, n_frames, dict(trajectory_params or {})),
        intrinsics=K,
        depth_sigma=depth_sigma,
        feature_sigma=feature_sigma,
        nuisance_amplitude=nuisance_amplitude,
        nuisance_rank=nuisance_rank,
        seed=seed,
    )

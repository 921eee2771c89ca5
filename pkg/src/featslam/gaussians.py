"""Language-embedded Gaussian map, keyframes and the binary map format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, quat_multiply, quat_normalize, matrix_to_quat

MAP_MAGIC = b"LEGOMAP1"
SCALE_MIN, SCALE_MAX = 1e-4, 1.0


class MapFormatError(ValueError):
    pass


class MalformedHeaderError(MapFormatError):
    pass


class FeatureDimensionError(MapFormatError):
    pass


class TruncatedPayloadError(MapFormatError):
    pass


def logit(p):
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class Keyframe:
    id: int
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray
    feat_gt: np.ndarray | None = None
    signature: np.ndarray | None = None
    frame_index: int = 0
    source: object = None

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError("rgb and depth sizes disagree")
        if self.feat_gt is not None:
            if self.feat_gt.shape[:2] != (h, w):
                raise ValueError("feature map and depth sizes disagree")
            if not np.all(np.isfinite(self.feat_gt)):
                raise ValueError("feature map has non-finite entries")


_ATTRS = ("positions", "rotations", "log_scales", "opacity_logits", "colors", "features")


@dataclass
class GaussianMap:
    """Structure-of-arrays Gaussian store with stable integer IDs."""

    feature_dim: int = 16
    ids: np.ndarray = None
    positions: np.ndarray = None
    rotations: np.ndarray = None
    log_scales: np.ndarray = None
    opacity_logits: np.ndarray = None
    colors: np.ndarray = None
    features: np.ndarray = None
    anchors: np.ndarray = None
    keyframe_ids: set = field(default_factory=set)
    next_id: int = 0

    def __post_init__(self):
        d = self.feature_dim
        shapes = {
            "ids": (0,),
            "positions": (0, 3),
            "rotations": (0, 4),
            "log_scales": (0, 3),
            "opacity_logits": (0,),
            "colors": (0, 3),
            "features": (0, d),
            "anchors": (0,),
        }
        for name, shape in shapes.items():
            if getattr(self, name) is None:
                dtype = np.int64 if name in ("ids", "anchors") else np.float64
                setattr(self, name, np.zeros(shape, dtype=dtype))
        if len(self.ids):
            self.next_id = max(self.next_id, int(self.ids.max()) + 1)

    def __len__(self):
        return len(self.ids)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianMap":
        out = GaussianMap(self.feature_dim)
        for name in _ATTRS + ("ids", "anchors"):
            setattr(out, name, getattr(self, name).copy())
        out.keyframe_ids = set(self.keyframe_ids)
        out.next_id = self.next_id
        return out

    def add(self, positions, rotations, log_scales, opacity_logits, colors, features, anchors):
        n = len(positions)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        self.ids = np.concatenate([self.ids, new_ids])
        self.positions = np.concatenate([self.positions, np.asarray(positions, dtype=np.float64).reshape(n, 3)])
        self.rotations = np.concatenate([self.rotations, quat_normalize(np.asarray(rotations, dtype=np.float64).reshape(n, 4))])
        self.log_scales = np.concatenate([self.log_scales, np.asarray(log_scales, dtype=np.float64).reshape(n, 3)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).reshape(n)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.float64).reshape(n, 3)])
        self.features = np.concatenate(
            [self.features, np.asarray(features, dtype=np.float64).reshape(n, self.feature_dim)]
        )
        self.anchors = np.concatenate([self.anchors, np.broadcast_to(np.asarray(anchors, dtype=np.int64), (n,))])
        return new_ids

    def keep(self, mask):
        """Drop every Gaussian where ``mask`` is False."""
        mask = np.asarray(mask, dtype=bool)
        for name in _ATTRS + ("ids", "anchors"):
            setattr(self, name, getattr(self, name)[mask])

    def index_of(self, ids):
        return np.searchsorted(self.ids, ids)

    def validate(self):
        """Raise if any attribute is non-finite or out of its valid range."""
        for name in _ATTRS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if len(self) == 0:
            return
        if np.abs(np.linalg.norm(self.rotations, axis=1) - 1).max() > 1e-6:
            raise ValueError("non-unit quaternion")
        if np.any(np.exp(self.log_scales) >= 10.0):
            raise ValueError("scale of 10 m or more")
        if np.any(np.diff(self.ids) <= 0):
            raise ValueError("IDs not unique and ascending")
        unknown = set(np.unique(self.anchors).tolist()) - self.keyframe_ids
        if unknown:
            raise ValueError(f"anchors reference unknown keyframes {sorted(unknown)[:5]}")

    def state_bytes(self) -> bytes:
        return b"".join(getattr(self, n).tobytes() for n in _ATTRS + ("ids", "anchors"))


def coverage_mask(acc_alpha, rendered_depth, measured_depth):
    """Pixels that need new Gaussians: weak coverage or a depth disagreement."""
    valid = measured_depth > 0
    tol = np.maximum(0.05, 0.05 * measured_depth)
    return valid & ((acc_alpha < 0.5) | (np.abs(rendered_depth - measured_depth) > tol))


def covariance_to_rotation_scale(cov):
    """Rotation quaternions and log-scales from symmetric covariances (N,3,3)."""
    w, V = np.linalg.eigh(cov)
    flip = np.linalg.det(V) < 0
    V[flip, :, 0] *= -1
    s = np.log(np.clip(np.sqrt(np.maximum(w, 0.0)), SCALE_MIN, SCALE_MAX))
    return matrix_to_quat(V), s


def insert_from_keyframe(gmap: GaussianMap, kf: Keyframe, source_cov, coverage, codec, K=None):
    """Add one Gaussian per selected source point; returns the new IDs.

    ``source_cov`` is the camera-frame cloud from tracking. Its points carry
    the pixel they were sampled from; a point is used when ``coverage`` is set
    at that pixel. Covariances are the regularized tracking covariances scaled
    by each point's neighbor spread.
    """
    gmap.keyframe_ids.add(kf.id)
    pix = source_cov.pixels
    if pix is None or len(source_cov) == 0:
        return np.zeros(0, dtype=np.int64)
    sel = np.nonzero(np.asarray(coverage, dtype=bool)[pix[:, 1], pix[:, 0]])[0]
    if len(sel) == 0:
        return np.zeros(0, dtype=np.int64)
    R = kf.pose.R
    pts_world = kf.pose.apply(source_cov.points[sel])
    cov = source_cov.covariances[sel]
    if source_cov.spread is not None:
        cov = cov * source_cov.spread[sel][:, None, None]
    cov_world = R @ cov @ R.T
    rot, log_s = covariance_to_rotation_scale(cov_world)
    u, v = pix[sel, 0], pix[sel, 1]
    colors = kf.rgb[v, u]
    if kf.feat_gt is not None and codec is not None:
        feats = codec.encode_vectors(kf.feat_gt[v, u])
    else:
        feats = np.zeros((len(sel), gmap.feature_dim))
    return gmap.add(
        pts_world,
        rot,
        log_s,
        np.full(len(sel), logit(0.5)),
        colors,
        feats,
        kf.id,
    )


def apply_rigid_correction(gmap: GaussianMap, kf_id: int, delta: Pose):
    """Move every Gaussian anchored to ``kf_id`` by the rigid transform ``delta``."""
    if kf_id not in gmap.keyframe_ids:
        raise KeyError(f"unknown keyframe {kf_id}")
    if delta == Pose.identity():
        return
    sel = gmap.anchors == kf_id
    if not sel.any():
        return
    gmap.positions[sel] = delta.apply(gmap.positions[sel])
    gmap.rotations[sel] = quat_normalize(quat_multiply(delta.q, gmap.rotations[sel]))


def bytes_per_gaussian(feature_dim):
    return 4 * (3 + 4 + 3 + 1 + 3 + feature_dim) + 8


HEADER = struct.Struct("<8sIQ")


def _record_dtype(d):
    return np.dtype(
        [
            ("position", "<f4", 3),
            ("rotation", "<f4", 4),
            ("log_scale", "<f4", 3),
            ("opacity", "<f4"),
            ("rgb", "<f4", 3),
            ("feature", "<f4", (d,)),
            ("anchor", "<u8"),
        ]
    )


def map_to_bytes(gmap: GaussianMap) -> bytes:
    d = gmap.feature_dim
    rec = np.zeros(len(gmap), dtype=_record_dtype(d))
    rec["position"] = gmap.positions
    rec["rotation"] = gmap.rotations
    rec["log_scale"] = gmap.log_scales
    rec["opacity"] = gmap.opacity_logits
    rec["rgb"] = gmap.colors
    rec["feature"] = gmap.features.reshape(len(gmap), d)
    rec["anchor"] = gmap.anchors
    return HEADER.pack(MAP_MAGIC, d, len(gmap)) + rec.tobytes()


def serialize(gmap: GaussianMap, path):
    with open(path, "wb") as fh:
        fh.write(map_to_bytes(gmap))


def map_from_bytes(data: bytes, feature_dim: int | None = None) -> GaussianMap:
    if len(data) < HEADER.size:
        raise MalformedHeaderError("file shorter than the map header")
    magic, d, count = HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if feature_dim is not None and d != feature_dim:
        raise FeatureDimensionError(f"map has feature dimension {d}, expected {feature_dim}")
    dt = _record_dtype(d)
    need = HEADER.size + count * dt.itemsize
    if len(data) < need:
        raise TruncatedPayloadError(f"payload has {len(data)} bytes, header implies {need}")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=HEADER.size)
    anchors = rec["anchor"].astype(np.int64)
    gmap = GaussianMap(
        d,
        ids=np.arange(count, dtype=np.int64),
        positions=rec["position"].astype(np.float64),
        rotations=rec["rotation"].astype(np.float64),
        log_scales=rec["log_scale"].astype(np.float64),
        opacity_logits=rec["opacity"].astype(np.float64),
        colors=rec["rgb"].astype(np.float64),
        features=rec["feature"].astype(np.float64).reshape(count, d),
        anchors=anchors,
    )
    gmap.keyframe_ids = set(np.unique(anchors).tolist())
    return gmap


def deserialize(path, feature_dim: int | None = None) -> GaussianMap:
    with open(path, "rb") as fh:
        return map_from_bytes(fh.read(), feature_dim)


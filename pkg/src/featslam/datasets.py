"""Dataset ingestion and the on-disk synthetic dataset layout.

A synthetic dataset directory holds, per frame ``i`` (zero padded to 5 digits):
``rgb/i.png`` (8-bit RGB), ``depth/i.raw`` (f32 with a 16-byte header),
``feat/i.raw`` (f32 with a 20-byte header), ``labels/i.raw`` (i32 with a
16-byte header), plus ``poses.txt`` (ground truth, TUM line format) and
``scene.txt`` (the generating scene as JSON).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose
from .synthetic import Primitive, SyntheticSceneSpec, TrajectorySpec, generate_sequence

DEPTH_MAGIC = b"LEGODPT1"
FEAT_MAGIC = b"LEGOFEAT"
LABEL_MAGIC = b"LEGOLBL1"
_HW = struct.Struct("<8sII")
_HWD = struct.Struct("<8sIII")
TUM_DEPTH_SCALE = 5000.0
TUM_MAX_DT = 0.02
TIE_EPS = 1e-9
# Freiburg 1 defaults; override through the loader argument.
TUM_INTRINSICS = CameraIntrinsics(517.3, 516.5, 318.6, 255.3, 640, 480)


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError):
    pass


class ParseError(DatasetError):
    pass


class AssociationError(DatasetError):
    pass


@dataclass
class Dataset:
    """Frames are dicts with ``rgb``, ``depth``, ``timestamp`` and optionally
    ``feat``, ``labels`` and ``gt_pose``."""

    frames: list
    intrinsics: CameraIntrinsics
    spec: SyntheticSceneSpec | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def has_features(self):
        return bool(self.frames) and self.frames[0].get("feat") is not None

    def ground_truth(self):
        return [(f["timestamp"], f["gt_pose"]) for f in self.frames if f.get("gt_pose") is not None]


# ------------------------------------------------------------ trajectories


def pose_to_tum(ts, pose: Pose) -> str:
    w, x, y, z = pose.q
    tx, ty, tz = pose.t
    return f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}"


def write_trajectory(path, traj):
    """Write ``(timestamp, Pose)`` pairs as ``timestamp tx ty tz qx qy qz qw`` lines."""
    times = [t for t, _ in traj]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("trajectory timestamps must be strictly increasing")
    with open(path, "w") as fh:
        for t, p in traj:
            fh.write(pose_to_tum(t, p) + "\n")


def _data_lines(path):
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield n, line.split()


def read_trajectory(path):
    out = []
    for n, parts in _data_lines(path):
        if len(parts) != 8:
            raise ParseError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        try:
            t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
        except ValueError as exc:
            raise ParseError(f"{path}:{n}: {exc}") from None
        out.append((t, Pose([qw, qx, qy, qz], [tx, ty, tz])))
    return out


# ------------------------------------------------------------------- TUM


def _read_list(path):
    rows = []
    for n, parts in _data_lines(path):
        if len(parts) < 2:
            raise ParseError(f"{path}:{n}: expected 'timestamp filename'")
        try:
            rows.append((float(parts[0]), parts[1]))
        except ValueError:
            raise ParseError(f"{path}:{n}: bad timestamp {parts[0]!r}") from None
    return rows


def associate_nearest(t_query, t_ref, max_dt=TUM_MAX_DT):
    """Index into ``t_ref`` of the nearest stamp for each query, or -1 beyond ``max_dt``."""
    t_ref = np.asarray(t_ref, dtype=np.float64)
    out = np.full(len(t_query), -1, dtype=np.int64)
    if len(t_ref) == 0:
        return out
    for k, t in enumerate(t_query):
        dt = np.abs(t_ref - t)
        # stamps equidistant in decimal differ by ~1e-16 in binary; call
        # those ties and take the earlier stamp
        near = np.nonzero(dt <= dt.min() + TIE_EPS)[0]
        j = int(near[np.argmin(t_ref[near])])
        if dt[j] <= max_dt + TIE_EPS:
            out[k] = j
    return out


def load_tum_rgbd(directory, intrinsics: CameraIntrinsics | None = None, max_dt=TUM_MAX_DT) -> Dataset:
    """TUM RGB-D sequence: rgb/depth associated by nearest timestamp, depth in meters."""
    root = Path(directory)
    for name in ("rgb.txt", "depth.txt"):
        if not (root / name).is_file():
            raise MissingFileError(f"{root / name} not found")
    rgb_rows = _read_list(root / "rgb.txt")
    depth_rows = _read_list(root / "depth.txt")
    gt = read_trajectory(root / "groundtruth.txt") if (root / "groundtruth.txt").is_file() else []
    match = associate_nearest([t for t, _ in rgb_rows], [t for t, _ in depth_rows], max_dt)
    if not np.any(match >= 0):
        raise AssociationError("no rgb/depth pairs within the association window")
    gt_match = associate_nearest([t for t, _ in rgb_rows], [t for t, _ in gt], max_dt) if gt else None
    frames = []
    for k, (t, rgb_name) in enumerate(rgb_rows):
        if match[k] < 0:
            continue
        depth_name = depth_rows[match[k]][1]
        frame = dict(timestamp=t, rgb_path=root / rgb_name, depth_path=root / depth_name)
        frame["gt_pose"] = gt[gt_match[k]][1] if gt_match is not None and gt_match[k] >= 0 else None
        frames.append(frame)
    for f in frames:
        for key in ("rgb_path", "depth_path"):
            if not f[key].is_file():
                raise MissingFileError(f"{f[key]} not found")
        f["rgb"] = np.asarray(Image.open(f["rgb_path"]).convert("RGB"), dtype=np.float64) / 255.0
        f["depth"] = decode_tum_depth(np.asarray(Image.open(f["depth_path"])))
        f["feat"] = None
    K = intrinsics or TUM_INTRINSICS
    h, w = frames[0]["depth"].shape
    if (K.height, K.width) != (h, w):
        # downsampled sequences: scale the calibration with the resolution
        sx, sy = w / K.width, h / K.height
        K = CameraIntrinsics(K.fx * sx, K.fy * sy, K.cx * sx, K.cy * sy, w, h)
    return Dataset(frames, K, meta=dict(kind="tum", root=str(root)))


def decode_tum_depth(raw):
    return np.asarray(raw, dtype=np.float64) / TUM_DEPTH_SCALE


# ------------------------------------------------------- raw array files


def write_depth_raw(path, depth):
    depth = np.asarray(depth)
    with open(path, "wb") as fh:
        fh.write(_HW.pack(DEPTH_MAGIC, *depth.shape))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def _read_raw(path, header, magic, dtype):
    data = Path(path).read_bytes()
    if len(data) < header.size:
        raise ParseError(f"{path}: truncated header")
    fields = header.unpack_from(data)
    if fields[0] != magic:
        raise ParseError(f"{path}: bad magic {fields[0]!r}")
    shape = tuple(fields[1:])
    need = header.size + int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(data) != need:
        raise ParseError(f"{path}: expected {need} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype, offset=header.size).reshape(shape)


def read_depth_raw(path):
    return _read_raw(path, _HW, DEPTH_MAGIC, "<f4").astype(np.float64)


def write_feat_raw(path, feat):
    feat = np.asarray(feat)
    with open(path, "wb") as fh:
        fh.write(_HWD.pack(FEAT_MAGIC, *feat.shape))
        fh.write(np.ascontiguousarray(feat, dtype="<f4").tobytes())


def read_feat_raw(path):
    return _read_raw(path, _HWD, FEAT_MAGIC, "<f4").astype(np.float64)


def write_labels_raw(path, labels):
    labels = np.asarray(labels)
    with open(path, "wb") as fh:
        fh.write(_HW.pack(LABEL_MAGIC, *labels.shape))
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def read_labels_raw(path):
    return _read_raw(path, _HW, LABEL_MAGIC, "<i4").astype(np.int64)


# ------------------------------------------------------ synthetic datasets


def spec_to_dict(spec: SyntheticSceneSpec) -> dict:
    K = spec.intrinsics
    return dict(
        primitives=[
            dict(shape=p.shape, q=list(p.pose.q), t=list(p.pose.t), size=list(p.size), class_id=p.class_id,
                 albedo=list(p.albedo))
            for p in spec.primitives
        ],
        classes={str(c): list(v) for c, v in spec.classes.items()},
        trajectory=dict(kind=spec.trajectory.kind, n_frames=spec.trajectory.n_frames, params=spec.trajectory.params),
        intrinsics=dict(fx=K.fx, fy=K.fy, cx=K.cx, cy=K.cy, width=K.width, height=K.height),
        depth_sigma=spec.depth_sigma,
        feature_sigma=spec.feature_sigma,
        nuisance_amplitude=spec.nuisance_amplitude,
        nuisance_rank=spec.nuisance_rank,
        seed=spec.seed,
        light_dir=list(spec.light_dir),
    )


def spec_from_dict(d: dict) -> SyntheticSceneSpec:
    prims = [
        Primitive(p["shape"], Pose(p["q"], p["t"]), tuple(p["size"]), int(p["class_id"]), tuple(p["albedo"]))
        for p in d["primitives"]
    ]
    classes = {int(c): np.asarray(v, dtype=np.float64) for c, v in d["classes"].items()}
    tr = d["trajectory"]
    return SyntheticSceneSpec(
        primitives=prims,
        classes=classes,
        trajectory=TrajectorySpec(tr["kind"], int(tr["n_frames"]), dict(tr.get("params", {}))),
        intrinsics=CameraIntrinsics(**d["intrinsics"]),
        depth_sigma=d["depth_sigma"],
        feature_sigma=d["feature_sigma"],
        nuisance_amplitude=d.get("nuisance_amplitude", 0.0),
        nuisance_rank=d.get("nuisance_rank", 0),
        seed=d.get("seed", 0),
        light_dir=tuple(d.get("light_dir", (0.3, -0.5, 0.8))),
    )


def write_synthetic_dataset(directory, spec: SyntheticSceneSpec, frames):
    root = Path(directory)
    for sub in ("rgb", "depth", "feat", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        name = f"{i:05d}"
        rgb8 = (np.clip(f["rgb"], 0, 1) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(rgb8).save(root / "rgb" / f"{name}.png")
        write_depth_raw(root / "depth" / f"{name}.raw", f["depth"])
        write_feat_raw(root / "feat" / f"{name}.raw", f["feat"])
        write_labels_raw(root / "labels" / f"{name}.raw", f["labels"])
    write_trajectory(root / "poses.txt", [(f["timestamp"], f["gt_pose"]) for f in frames])
    (root / "scene.txt").write_text(json.dumps(spec_to_dict(spec), indent=1))


def load_synthetic_dataset(directory) -> Dataset:
    root = Path(directory)
    for name in ("poses.txt", "scene.txt"):
        if not (root / name).is_file():
            raise MissingFileError(f"{root / name} not found")
    try:
        spec = spec_from_dict(json.loads((root / "scene.txt").read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{root / 'scene.txt'}: {exc}") from None
    gt = read_trajectory(root / "poses.txt")
    frames = []
    for i, (t, pose) in enumerate(gt):
        name = f"{i:05d}"
        paths = {k: root / k / f"{name}{ext}" for k, ext in
                 (("rgb", ".png"), ("depth", ".raw"), ("feat", ".raw"), ("labels", ".raw"))}
        for p in paths.values():
            if not p.is_file():
                raise MissingFileError(f"{p} not found")
        frames.append(
            dict(
                timestamp=t,
                gt_pose=pose,
                rgb=np.asarray(Image.open(paths["rgb"]).convert("RGB"), dtype=np.float64) / 255.0,
                depth=read_depth_raw(paths["depth"]),
                feat=read_feat_raw(paths["feat"]),
                labels=read_labels_raw(paths["labels"]),
            )
        )
    return Dataset(frames, spec.intrinsics, spec, meta=dict(kind="synthetic", root=str(root)))


def synthetic_dataset(spec: SyntheticSceneSpec, seed: int = 0) -> Dataset:
    """In-memory dataset straight from the ray-cast oracle."""
    return Dataset(generate_sequence(spec, seed), spec.intrinsics, spec, meta=dict(kind="synthetic"))

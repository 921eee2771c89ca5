"""Place recognition with a feature codebook, G-ICP verification and pose-graph correction."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .gaussians import GaussianMap, Keyframe, apply_rigid_correction
from .geometry import Pose, se3_exp, se3_log
from .gicp import CovPointCloud, GICPConfig, TrackingLostError, gaussian_covariances, gicp_align

CODEBOOK_MAGIC = b"LEGOCB1"
_CB_HEADER = struct.Struct("<7sII")


# Residuals at float rounding level (|r| ~ 1e-12 or less) count as consistent;
# "improving" them would only shuffle the last bits of every pose.
FIXPOINT_COST = 1e-20


class CodebookFormatError(ValueError):
    pass


class DisconnectedGraphError(ValueError):
    pass


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 2:
            raise ValueError("a codebook needs at least two centroids")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("codebook centroids must be finite")

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def D(self):
        return self.centroids.shape[1]

    def assign(self, x):
        return np.argmin(cdist(x, self.centroids, "sqeuclidean"), axis=1)


def _kmeans_pp(X, k, rng):
    idx = [int(rng.integers(len(X)))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every remaining point coincides with a chosen center
            rest = np.setdiff1d(np.arange(len(X)), idx)
            idx.append(int(rest[0]))
        else:
            idx.append(int(rng.choice(len(X), p=d2 / total)))
        d2 = np.minimum(d2, np.sum((X - X[idx[-1]]) ** 2, axis=1))
    return X[idx].copy()


def build_codebook(samples, k: int = 64, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> Codebook:
    """k-means with k-means++ seeding; empty clusters restart at the farthest point."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("samples must be an (N, D) array")
    if len(X) < k:
        raise ValueError(f"need at least k={k} samples, got {len(X)}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        d2 = cdist(X, C, "sqeuclidean")
        lab = np.argmin(d2, axis=1)
        best = d2[np.arange(len(X)), lab]
        counts = np.bincount(lab, minlength=k)
        for c in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(best))
            C[c] = X[far]
            lab[far] = c
            best[far] = 0.0
        counts = np.bincount(lab, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, lab, X)
        C = sums / counts[:, None]
        inertia = float(np.sum((X - C[lab]) ** 2))
        if prev == 0.0 or (np.isfinite(prev) and abs(prev - inertia) <= tol * prev) or inertia == 0.0:
            prev = inertia
            break
        prev = inertia
    return Codebook(C, prev, it)


def save_codebook(cb: Codebook, path):
    with open(path, "wb") as fh:
        fh.write(_CB_HEADER.pack(CODEBOOK_MAGIC, cb.k, cb.D))
        fh.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CB_HEADER.size:
        raise CodebookFormatError("file shorter than the codebook header")
    magic, k, D = _CB_HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"bad magic {magic!r}")
    if len(data) != _CB_HEADER.size + 4 * k * D:
        raise CodebookFormatError("payload size does not match the header")
    return Codebook(np.frombuffer(data, dtype="<f4", offset=_CB_HEADER.size).reshape(k, D).astype(np.float64))


def compute_signature(feat_gt, cb: Codebook):
    """Normalized histogram of nearest-centroid assignments over non-void pixels."""
    F = np.asarray(feat_gt, dtype=np.float64)
    if F.shape[-1] != cb.D:
        raise ValueError(f"feature map has {F.shape[-1]} channels, codebook expects {cb.D}")
    X = F.reshape(-1, cb.D)
    X = X[np.any(X != 0, axis=1)]
    hist = np.zeros(cb.k)
    if len(X) == 0:
        return hist
    hist += np.bincount(cb.assign(X), minlength=cb.k)
    return hist / len(X)


def signature_similarity(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass
class LoopConfig:
    recency_gap: int = 20
    radius: float = 3.0
    sim_threshold: float = 0.7
    max_candidates: int = 2
    min_inlier_ratio: float = 0.6
    max_rmse: float = 0.05
    neighbors: int = 2
    min_info_rmse: float = 1e-3


@dataclass
class LoopEdge:
    i: int
    j: int
    Z: Pose
    information: np.ndarray
    similarity: float = 0.0
    rmse: float = 0.0


def detect_candidates(current: Keyframe, past, cfg: LoopConfig | None = None):
    """Up to ``max_candidates`` ``(id, similarity)`` pairs, best first; ties favor recent keyframes."""
    cfg = cfg or LoopConfig()
    scored = []
    for kf in past:
        if kf.id > current.id - cfg.recency_gap:
            continue
        if np.linalg.norm(kf.pose.t - current.pose.t) > cfg.radius:
            continue
        sim = signature_similarity(current.signature, kf.signature)
        if sim > cfg.sim_threshold:
            scored.append((-sim, -kf.id, kf.id, sim))
    scored.sort()
    return [(kid, sim) for _, _, kid, sim in scored[: cfg.max_candidates]]


def _information(rmse, cfg):
    return np.eye(6) / max(rmse, cfg.min_info_rmse) ** 2


def submap_cloud(gmap: GaussianMap, anchor_ids) -> CovPointCloud:
    sel = np.isin(gmap.anchors, np.asarray(list(anchor_ids), dtype=np.int64))
    return CovPointCloud(gmap.positions[sel], gaussian_covariances(gmap.rotations[sel], gmap.log_scales[sel]))


def verify_candidate(current: Keyframe, candidate: Keyframe, keyframe_ids, gmap: GaussianMap, source: CovPointCloud,
                     cfg: LoopConfig | None = None, gicp_cfg: GICPConfig | None = None):
    """Align the current depth cloud to the candidate's submap.

    ``keyframe_ids`` is the sorted list of existing keyframe IDs, used to find
    the candidate's temporal neighbors. Returns ``(edge or None, info dict)``.
    """
    cfg = cfg or LoopConfig()
    ids = list(keyframe_ids)
    pos = ids.index(candidate.id)
    half = cfg.neighbors // 2
    lo = max(0, pos - half)
    hi = min(len(ids), lo + cfg.neighbors + 1)
    lo = max(0, hi - cfg.neighbors - 1)
    target = submap_cloud(gmap, ids[lo:hi])
    info = dict(candidate=candidate.id, accepted=False, rmse=float("nan"), inlier_ratio=0.0)
    try:
        res = gicp_align(source, target, current.pose, gicp_cfg)
    except TrackingLostError:
        return None, info
    info.update(rmse=res.rmse, inlier_ratio=res.inlier_ratio)
    if res.inlier_ratio < cfg.min_inlier_ratio or res.rmse > cfg.max_rmse:
        return None, info
    info["accepted"] = True
    Z = candidate.pose.inverse() @ res.pose
    return LoopEdge(candidate.id, current.id, Z, _information(res.rmse, cfg), rmse=res.rmse), info


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)

    def add_node(self, i, pose: Pose):
        self.nodes[i] = pose

    def add_edge(self, i, j, Z: Pose, information=None):
        if i not in self.nodes or j not in self.nodes:
            raise KeyError(f"edge ({i}, {j}) references a missing node")
        self.edges.append((i, j, Z, np.eye(6) if information is None else np.asarray(information, dtype=np.float64)))

    @property
    def anchor(self):
        return min(self.nodes)

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        adj = {k: [] for k in self.nodes}
        for i, j, _, _ in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = {self.anchor}
        queue = deque([self.anchor])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        return len(seen) == len(self.nodes)


def _residual(Ti: Pose, Tj: Pose, Z: Pose):
    return se3_log(Z.inverse() @ Ti.inverse() @ Tj)


def graph_cost(g: PoseGraph, poses=None) -> float:
    poses = g.nodes if poses is None else poses
    total = 0.0
    for i, j, Z, Om in g.edges:
        r = _residual(poses[i], poses[j], Z)
        total += float(r @ Om @ r)
    return total


def optimize_pose_graph(g: PoseGraph, max_iter: int = 50, rel_tol: float = 1e-9, trace=None) -> dict:
    """Levenberg-Marquardt over all non-anchor nodes; returns the optimized poses.

    Node updates are right perturbations ``T <- T exp(delta)``. Edge Jacobians
    are central differences of the residual. ``trace``, if a list, receives the
    cost after every accepted step (starting with the initial cost).
    """
    if not g.is_connected():
        raise DisconnectedGraphError("pose graph is not connected")
    poses = dict(g.nodes)
    free = [k for k in sorted(poses) if k != g.anchor]
    if not free or not g.edges:
        return poses
    col = {k: 6 * n for n, k in enumerate(free)}
    nvar = 6 * len(free)
    cost = graph_cost(g, poses)
    if trace is not None:
        trace.append(cost)
    lam = 1e-4
    h = 1e-6
    for _ in range(max_iter):
        if cost <= FIXPOINT_COST:
            break
        H = np.zeros((nvar, nvar))
        b = np.zeros(nvar)
        for i, j, Z, Om in g.edges:
            r = _residual(poses[i], poses[j], Z)
            blocks = {}
            for node in (i, j):
                if node not in col:
                    continue
                J = np.empty((6, 6))
                for k in range(6):
                    e = np.zeros(6)
                    e[k] = h
                    plus, minus = dict(poses), dict(poses)
                    plus[node] = poses[node] @ se3_exp(e)
                    minus[node] = poses[node] @ se3_exp(-e)
                    J[:, k] = (_residual(plus[i], plus[j], Z) - _residual(minus[i], minus[j], Z)) / (2 * h)
                blocks[node] = J
            for a, Ja in blocks.items():
                b[col[a] : col[a] + 6] += Ja.T @ Om @ r
                for c, Jc in blocks.items():
                    H[col[a] : col[a] + 6, col[c] : col[c] + 6] += Ja.T @ Om @ Jc
        improved = False
        while lam < 1e12:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            delta = np.linalg.solve(A, -b)
            cand = dict(poses)
            for k in free:
                cand[k] = poses[k] @ se3_exp(delta[col[k] : col[k] + 6])
            new_cost = graph_cost(g, cand)
            if new_cost < cost:
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
        change = (cost - new_cost) / cost
        poses, cost = cand, new_cost
        if trace is not None:
            trace.append(cost)
        if change < rel_tol:
            break
    return poses


def close_loop(keyframes: dict, odometry_edges, loop_edges, gmap: GaussianMap, max_iter: int = 50) -> dict:
    """Optimize keyframe poses and move each keyframe's Gaussians rigidly with it.

    ``keyframes`` maps ID to :class:`Keyframe`; poses are updated in place.
    Returns the applied correction ``T_new * T_old^-1`` per keyframe.
    """
    g = PoseGraph()
    for kid in sorted(keyframes):
        g.add_node(kid, keyframes[kid].pose)
    for e in list(odometry_edges) + list(loop_edges):
        g.add_edge(e.i, e.j, e.Z, e.information)
    new = optimize_pose_graph(g, max_iter)
    deltas = {}
    for kid, kf in keyframes.items():
        if new[kid] == kf.pose:
            deltas[kid] = Pose.identity()
            continue
        delta = new[kid] @ kf.pose.inverse()
        deltas[kid] = delta
        if kid in gmap.keyframe_ids:
            apply_rigid_correction(gmap, kid, delta)
        kf.pose = new[kid]
    return deltas

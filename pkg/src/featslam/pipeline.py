"""Online SLAM orchestration: track, insert, optimize, prune, close loops, evaluate."""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import CodecParams, adapt_encoder, decode, pretrain, save_codec
from .config import RunConfig
from .datasets import Dataset, write_trajectory
from .gaussians import GaussianMap, Keyframe, coverage_mask, insert_from_keyframe, serialize
from .geometry import Pose, so3_exp
from .gicp import GICPConfig, TrackingLostError, depth_cloud, is_keyframe, sample_map_targets, track_frame
from .loop import (
    Codebook,
    LoopConfig,
    LoopEdge,
    build_codebook,
    close_loop,
    compute_signature,
    detect_candidates,
    save_codebook,
    verify_candidate,
)
from .mapping import OptimizerState, encoder_gate, mapping_round, psnr, select_window, ssim
from .metrics import ate_rmse, miou_accuracy
from .pruning import PruneConfig, prune
from .query import encode_labels, segment
from .render import render
from .synthetic import feature_corpus

EXIT_OK, EXIT_TRACKING_LOST, EXIT_CONFIG, EXIT_DATASET = 0, 2, 3, 4


@dataclass
class RunResult:
    trajectory: list
    keyframes: list
    gmap: GaussianMap
    codec: CodecParams | None
    codebook: Codebook | None
    metrics_rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    loop_log: list = field(default_factory=list)
    prune_log: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    exit_code: int = EXIT_OK
    message: str = ""
    fps: float = 0.0
    map_hash: str = ""
    run: object = None


def gicp_config(cfg: RunConfig) -> GICPConfig:
    return GICPConfig(
        max_corr_dist=cfg.gicp_max_corr_dist,
        max_iter=cfg.gicp_max_iter,
        k_neighbors=cfg.gicp_neighbors,
        voxel_size=cfg.gicp_voxel,
    )


def prune_config(cfg: RunConfig) -> PruneConfig:
    return PruneConfig(cfg.prune_k, cfg.prune_tau_dist, cfg.prune_tau_sim, cfg.prune_alpha_min,
                       cfg.prune_scale_max, cfg.prune_period)


def loop_config(cfg: RunConfig) -> LoopConfig:
    return LoopConfig(cfg.loop_recency_gap, cfg.loop_radius, cfg.loop_similarity, cfg.loop_candidates,
                      cfg.loop_min_inlier, cfg.loop_max_rmse)


def learning_rates(cfg: RunConfig) -> dict:
    return dict(positions=cfg.lr_position, rotations=cfg.lr_rotation, log_scales=cfg.lr_log_scale,
                opacity_logits=cfg.lr_opacity, colors=cfg.lr_color, features=cfg.lr_feature)


def pretraining_corpus(cfg: RunConfig, dataset: Dataset):
    """Teacher features for offline codec and codebook fitting.

    Synthetic scenes are sampled from views off the trajectory; other datasets
    fall back to pixels from every tenth frame.
    """
    if dataset.spec is not None:
        return feature_corpus(dataset.spec, n_views=cfg.pretrain_views, seed=cfg.seed + 123)
    rng = np.random.default_rng(cfg.seed + 123)
    chunks = []
    for f in dataset.frames[::10]:
        X = f["feat"].reshape(-1, f["feat"].shape[-1])
        X = X[np.any(X != 0, axis=1)]
        chunks.append(X[rng.choice(len(X), size=min(512, len(X)), replace=False)])
    return np.concatenate(chunks)


def prepare_models(cfg: RunConfig, dataset: Dataset):
    """Pretrained codec and codebook, or ``(None, None)`` for feature-less data."""
    if not dataset.has_features:
        return None, None
    corpus = pretraining_corpus(cfg, dataset)
    codec = pretrain(corpus, epochs=cfg.pretrain_epochs, seed=cfg.seed, d=cfg.feature_dim, H=cfg.codec_hidden)
    return codec, build_codebook(corpus, cfg.codebook_k, cfg.seed)


DRIFT_DIRECTION = np.array([1.0, 0.0, 0.0])


def drift_increment(cfg: RunConfig, rel: Pose):
    """World-frame drift (rotation vector, translation) one tracked step adds."""
    step = float(np.linalg.norm(rel.t))
    return (np.array([0.0, 0.0, np.radians(cfg.drift_yaw_deg)]),
            cfg.drift_translation * step * DRIFT_DIRECTION)


def apply_drift(pose: Pose, omega, shift) -> Pose:
    """Rotate ``pose`` about its own center by world ``omega`` then shift it."""
    return Pose((Pose(so3_exp(omega)) @ Pose(pose.q)).q, pose.t + shift)


class SlamRun:
    """Incremental state of one online run; feed frames with :meth:`process`."""

    def __init__(self, cfg: RunConfig, K, codec=None, codebook=None):
        self.cfg = cfg
        self.K = K
        self.codec = codec
        self.codebook = codebook
        self.gmap = GaussianMap(codec.d if codec is not None else cfg.feature_dim)
        self.state = OptimizerState(lr=learning_rates(cfg), seed=cfg.seed)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.gicp_cfg = gicp_config(cfg)
        self.prune_cfg = prune_config(cfg)
        self.loop_cfg = loop_config(cfg)
        self.drift_omega = np.zeros(3)
        self.drift_shift = np.zeros(3)
        self.last_rmse = 0.0
        self.keyframes: list[Keyframe] = []
        self.odometry: list[LoopEdge] = []
        self.loop_edges: list[LoopEdge] = []
        self.frame_refs: list = []  # (timestamp, keyframe id, pose relative to it)
        self.pose: Pose | None = None
        self.kf_since_adapt = 0
        self.adaptations = 0
        self.loop_log: list = []
        self.prune_log: list = []
        self.loss_trace: list = []
        self.w_feat = cfg.w_feat if codec is not None else 0.0

    # ------------------------------------------------------------ tracking

    def _track(self, frame, source):
        cloud, _ = sample_map_targets(self.gmap.positions, self.gmap.rotations, self.gmap.log_scales, self.pose,
                                      self.K, self.cfg.map_samples, self.rng)
        res, _ = track_frame(frame["depth"], self.K, cloud, self.pose, self.gicp_cfg, source)
        self.last_rmse = res.rmse
        if not (self.cfg.drift_translation or self.cfg.drift_yaw_deg):
            return res, res.pose
        # Re-registration to the map cancels drift on the tracked pose, so it
        # is carried separately and only enters the map through keyframes.
        omega, shift = drift_increment(self.cfg, self.pose.inverse() @ res.pose)
        self.drift_omega += omega
        self.drift_shift += shift
        return res, apply_drift(res.pose, self.drift_omega, self.drift_shift)

    def process(self, i: int, frame: dict):
        """Track one frame and, for keyframes, run mapping, adaptation and loop closure."""
        source = depth_cloud(frame["depth"], self.K, self.gicp_cfg.voxel_size, self.gicp_cfg.k_neighbors)
        if i == 0 or self.pose is None:
            gt = frame.get("gt_pose")
            self.pose = gt if (self.cfg.init_from_gt and gt is not None) else Pose.identity()
            new_kf = True
        else:
            res, self.pose = self._track(frame, source)
            new_kf = is_keyframe(res, self.cfg.keyframe_threshold)
        if new_kf:
            self.drift_omega[:] = 0.0
            self.drift_shift[:] = 0.0
            self._keyframe(i, frame, source)
        ref = self.keyframes[-1]
        self.frame_refs.append((frame["timestamp"], ref.id, ref.pose.inverse() @ self.pose))

    # ------------------------------------------------------------ mapping

    def _keyframe(self, i, frame, source):
        feat = frame.get("feat") if self.codec is not None else None
        kf = Keyframe(len(self.keyframes), self.pose, frame["rgb"], frame["depth"], feat, frame_index=i, source=source)
        if self.codebook is not None and feat is not None:
            kf.signature = compute_signature(feat, self.codebook)
        if self.keyframes:
            self.odometry.append(self._odometry_edge(self.keyframes[-1], kf))
        self.keyframes.append(kf)
        self._insert(kf, source)
        window = select_window(self.keyframes, self.rng, self.cfg.window_recent, self.cfg.window_older)
        mapping_round(self.gmap, window, self.cfg.mapping_iterations, self.codec, self.state, self.K,
                      self.cfg.w_depth, self.w_feat, trace=self.loss_trace, on_iteration=self._maybe_prune)
        self.kf_since_adapt += 1
        if self.codec is not None and encoder_gate(self.state.iterations, self.kf_since_adapt,
                                                   self.cfg.encoder_warmup, self.cfg.encoder_period):
            self._adapt(kf)
        if self.cfg.loop and kf.signature is not None:
            self._loop(kf)

    def _odometry_edge(self, prev: Keyframe, kf: Keyframe) -> LoopEdge:
        # the edge records the estimates as tracking produced them, drift included
        info = np.eye(6) / max(self.last_rmse, self.loop_cfg.min_info_rmse) ** 2
        return LoopEdge(prev.id, kf.id, prev.pose.inverse() @ kf.pose, info)

    def _insert(self, kf: Keyframe, source):
        if len(self.gmap):
            out = render(self.gmap, kf.pose, self.K)
            cov = coverage_mask(out.acc_alpha, out.depth, kf.depth)
        else:
            cov = kf.depth > 0
        codec = self.codec if self.cfg.feature_init == "encoder" else None
        new = insert_from_keyframe(self.gmap, kf, source, cov, codec)
        if len(new) and self.codec is not None and self.cfg.feature_init == "random":
            sel = self.gmap.index_of(new)
            self.gmap.features[sel] = self.rng.normal(0.0, 1.0, size=(len(new), self.gmap.feature_dim))
        if len(new) and self.cfg.duplicate_insertion:
            sel = self.gmap.index_of(new)
            g = self.gmap
            jitter = self.rng.uniform(-0.002, 0.002, size=(len(new), 3))
            g.add(g.positions[sel] + jitter, g.rotations[sel], g.log_scales[sel], g.opacity_logits[sel],
                  g.colors[sel], g.features[sel], kf.id)

    def _maybe_prune(self, iteration):
        if not self.cfg.prune or iteration % self.cfg.prune_period:
            return
        rep = prune(self.gmap, self.prune_cfg, self.state, self.cfg.prune_language, self.cfg.prune_geometric)
        self.prune_log.append(dict(iteration=iteration, removed_language=len(rep.removed_language),
                                   removed_geometric=len(rep.removed_geometric), kept=rep.kept))

    def _adapt(self, kf: Keyframe):
        out = render(self.gmap, kf.pose, self.K)
        ok = (out.acc_alpha > 0.5) & np.any(kf.feat_gt != 0, axis=-1)
        if ok.sum() < 16:
            return
        self.codec = adapt_encoder(self.codec, kf.feat_gt[ok], out.feat[ok], self.cfg.encoder_steps,
                                   self.cfg.encoder_lr)
        self.kf_since_adapt = 0
        self.adaptations += 1

    # --------------------------------------------------------- loop closure

    def _loop(self, kf: Keyframe):
        cands = detect_candidates(kf, self.keyframes[:-1], self.loop_cfg)
        ids = [k.id for k in self.keyframes]
        accepted = []
        for cid, sim in cands:
            edge, info = verify_candidate(kf, self.keyframes[cid], ids, self.gmap, kf.source, self.loop_cfg,
                                          self.gicp_cfg)
            self.loop_log.append(dict(frame=kf.frame_index, candidate=self.keyframes[cid].frame_index,
                                      similarity=sim, accepted=edge is not None, rmse=info["rmse"]))
            if edge is not None:
                edge.similarity = sim
                accepted.append(edge)
        if not accepted:
            return
        self.loop_edges.extend(accepted)
        close_loop({k.id: k for k in self.keyframes}, self.odometry, self.loop_edges, self.gmap,
                   self.cfg.loop_max_iter)
        self.pose = kf.pose

    # ---------------------------------------------------------- results

    def trajectory(self):
        return [(t, self.keyframes[k].pose @ rel) for t, k, rel in self.frame_refs]


def map_digest(gmap: GaussianMap) -> str:
    return hashlib.sha256(gmap.state_bytes()).hexdigest()


def evaluate(run: SlamRun, dataset: Dataset) -> tuple[list, dict]:
    """Per-keyframe image and feature metrics plus trajectory and segmentation summaries."""
    rows = []
    preds, gts = [], []
    queries = None
    if run.codec is not None and dataset.spec is not None:
        classes = dataset.spec.class_names()
        queries = encode_labels(run.codec, [dataset.spec.classes[c] for c in classes])
        class_of = np.asarray(classes)
    for kf in run.keyframes:
        out = render(run.gmap, kf.pose, run.K)
        row = dict(frame=kf.frame_index, psnr=psnr(out.rgb, kf.rgb), ssim=ssim(out.rgb, kf.rgb),
                   l_feat=float("nan"), gaussian_count=len(run.gmap))
        if run.codec is not None and kf.feat_gt is not None:
            row["l_feat"] = float(np.mean(np.abs(decode(run.codec, out.feat) - kf.feat_gt)))
        rows.append(row)
        labels = dataset.frames[kf.frame_index].get("labels")
        if queries is not None and labels is not None:
            lab = segment(out, queries)
            preds.append(np.where(lab >= 0, class_of[np.maximum(lab, 0)], -1))
            gts.append(labels)
    summary = dict(ate_rmse=float("nan"), miou=float("nan"), accuracy=float("nan"))
    gt = dataset.ground_truth()
    if len(gt) == len(dataset.frames) and len(run.frame_refs) >= 3:
        summary["ate_rmse"] = ate_rmse(run.trajectory(), gt[: len(run.frame_refs)])
    if preds:
        g = np.stack(gts)
        summary["miou"], summary["accuracy"] = miou_accuracy(np.stack(preds), g, g < 0)
    return rows, summary


def write_artifacts(out_dir, run: SlamRun, result: RunResult):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.cfg.to_text())
    if run.frame_refs:
        write_trajectory(out / "trajectory.txt", run.trajectory())
    serialize(run.gmap, out / "map.bin")
    if run.codec is not None:
        save_codec(run.codec, out / "codec.bin")
    if run.codebook is not None:
        save_codebook(run.codebook, out / "codebook.bin")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "psnr", "ssim", "l_feat", "gaussian_count"])
        for r in result.metrics_rows:
            w.writerow([r["frame"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}", f"{r['l_feat']:.6f}", r["gaussian_count"]])
        s = result.summary
        w.writerow(["summary", "ate_rmse", "miou", "accuracy"])
        w.writerow(["summary", f"{s.get('ate_rmse', float('nan')):.6f}", f"{s.get('miou', float('nan')):.6f}",
                    f"{s.get('accuracy', float('nan')):.6f}"])
    # wall-clock figures live apart from metrics.csv so that file stays reproducible
    (out / "timing.csv").write_text(f"frames,seconds,fps\n{len(run.frame_refs)},{result.summary.get('seconds', 0):.3f},"
                                    f"{result.fps:.4f}\n")
    with open(out / "loop_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "candidate", "similarity", "accepted", "rmse"])
        for r in run.loop_log:
            w.writerow([r["frame"], r["candidate"], f"{r['similarity']:.6f}", int(r["accepted"]), f"{r['rmse']:.6f}"])
    with open(out / "prune_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "removed_language", "removed_geometric", "kept"])
        for r in run.prune_log:
            w.writerow([r["iteration"], r["removed_language"], r["removed_geometric"], r["kept"]])
    if run.cfg.save_renders:
        (out / "renders").mkdir(exist_ok=True)
        for kf in run.keyframes:
            img = render(run.gmap, kf.pose, run.K).rgb
            Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)).save(
                out / "renders" / f"kf_{kf.frame_index:05d}.png")


def run_pipeline(cfg: RunConfig, dataset: Dataset, output_dir=None, codec=None, codebook=None,
                 n_frames: int | None = None, evaluate_run: bool = True) -> RunResult:
    """Run online SLAM over ``dataset`` and, if ``output_dir`` is set, write every artifact.

    Tracking loss stops the run early; the partial state is still evaluated
    and written, and the result carries exit code 2.
    """
    if codec is None and codebook is None:
        codec, codebook = prepare_models(cfg, dataset)
    run = SlamRun(cfg, dataset.intrinsics, codec, codebook)
    frames = dataset.frames[: n_frames or len(dataset.frames)]
    exit_code, message = EXIT_OK, ""
    t0 = time.perf_counter()
    for i, frame in enumerate(frames):
        try:
            run.process(i, frame)
        except TrackingLostError as exc:
            exit_code, message = EXIT_TRACKING_LOST, f"tracking lost at frame {i}: {exc}"
            break
    seconds = time.perf_counter() - t0
    result = RunResult(run.trajectory(), run.keyframes, run.gmap, run.codec, run.codebook,
                       loop_log=run.loop_log, prune_log=run.prune_log, loss_trace=run.loss_trace,
                       exit_code=exit_code, message=message)
    result.fps = len(run.frame_refs) / seconds if seconds > 0 else 0.0
    before = map_digest(run.gmap)
    if evaluate_run and run.keyframes:
        sub = Dataset(frames[: len(run.frame_refs)], dataset.intrinsics, dataset.spec, dataset.meta)
        result.metrics_rows, result.summary = evaluate(run, sub)
    if map_digest(run.gmap) != before:
        raise RuntimeError("evaluation modified the online map")
    result.map_hash = before
    result.summary["seconds"] = seconds
    result.summary["keyframes"] = len(run.keyframes)
    result.summary["adaptations"] = run.adaptations
    if output_dir is not None:
        write_artifacts(output_dir, run, result)
    result.run = run
    return result

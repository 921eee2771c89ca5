"""Command-line entry point: generate, pretrain, run, query, eval."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .codec import CodecFormatError, encode_query, load_codec, save_codec
from .config import ConfigError, RunConfig, load_config
from .datasets import (
    DatasetError,
    load_synthetic_dataset,
    load_tum_rgbd,
    read_trajectory,
    write_synthetic_dataset,
)
from .gaussians import MapFormatError, deserialize
from .loop import CodebookFormatError, load_codebook, save_codebook
from .mapping import psnr
from .metrics import ate_rmse, miou_accuracy
from .pipeline import EXIT_CONFIG, EXIT_DATASET, EXIT_OK, prepare_models, run_pipeline
from .query import encode_labels, localize_3d, relevancy_map, save_localization_csv, save_relevancy_png, segment
from .render import render
from .synthetic import generate_sequence, room_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    if getattr(args, "no_loop", False):
        over["loop"] = False
    if getattr(args, "no_prune", False):
        over["prune"] = False
    if getattr(args, "feature_dim", None) is not None:
        over["feature_dim"] = args.feature_dim
    return cfg.replace(**over)


def _scene(cfg: RunConfig):
    return room_scene(
        n_classes=cfg.scene_classes,
        D=cfg.scene_feature_dim,
        n_frames=cfg.scene_frames,
        trajectory=cfg.scene_trajectory,
        width=cfg.scene_width,
        height=cfg.scene_height,
        depth_sigma=cfg.scene_depth_sigma,
        feature_sigma=cfg.scene_feature_sigma,
        nuisance_amplitude=cfg.scene_nuisance_amplitude,
        nuisance_rank=cfg.scene_nuisance_rank,
        seed=cfg.seed,
    )


def _load_dataset(cfg: RunConfig, path):
    if path is None:
        raise DatasetError("--dataset is required")
    return load_tum_rgbd(path) if cfg.mode == "tum" else load_synthetic_dataset(path)


def cmd_generate(args):
    cfg = _config(args)
    spec = _scene(cfg)
    frames = generate_sequence(spec, cfg.seed)
    write_synthetic_dataset(args.output, spec, frames)
    print(f"wrote {len(frames)} frames to {args.output}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _config(args)
    ds = _load_dataset(cfg, args.dataset)
    codec, cb = prepare_models(cfg, ds)
    if codec is None:
        raise DatasetError("dataset carries no feature maps to pretrain on")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out / "codec.bin")
    save_codebook(cb, out / "codebook.bin")
    print(f"codec L1 {codec.final_l1:.5f}, codebook k={cb.k}; wrote {out}")
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    ds = _load_dataset(cfg, args.dataset)
    codec = load_codec(args.codec) if args.codec else None
    cb = load_codebook(args.codebook) if args.codebook else None
    if (codec is None) != (cb is None):
        raise ConfigError("--codec and --codebook must be given together")
    res = run_pipeline(cfg, ds, args.output, codec, cb)
    s = res.summary
    print(f"frames {len(res.trajectory)}  keyframes {s.get('keyframes')}  gaussians {len(res.gmap)}  "
          f"ATE {s.get('ate_rmse', float('nan')):.4f} m  mIoU {s.get('miou', float('nan')):.3f}  fps {res.fps:.2f}")
    if res.message:
        print(res.message, file=sys.stderr)
    return res.exit_code


def _run_artifacts(run_dir):
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    gmap = deserialize(run_dir / "map.bin")
    codec = load_codec(run_dir / "codec.bin")
    traj = read_trajectory(run_dir / "trajectory.txt")
    return cfg, gmap, codec, traj


def _query_vector(args, ds, codec):
    if args.query_file:
        q = np.loadtxt(args.query_file, dtype=np.float64).ravel()
    elif args.query_class is not None:
        if ds.spec is None or args.query_class not in ds.spec.classes:
            raise ConfigError(f"class {args.query_class} is not in the dataset scene")
        q = ds.spec.classes[args.query_class]
    else:
        raise ConfigError("give --query-class or --query-file")
    return encode_query(codec, q)


def cmd_query(args):
    cfg, gmap, codec, traj = _run_artifacts(args.run)
    ds = _load_dataset(cfg, args.dataset)
    q = _query_vector(args, ds, codec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    frame = min(args.frame, len(traj) - 1)
    rel = relevancy_map(render(gmap, traj[frame][1], ds.intrinsics), q)
    save_relevancy_png(rel, out / f"relevancy_{frame:05d}.png")
    loc = localize_3d(gmap, q, args.threshold)
    save_localization_csv(loc, gmap, out / "localization.csv")
    c = "none" if loc.centroid is None else " ".join(f"{v:.3f}" for v in loc.centroid)
    print(f"{len(loc)} Gaussians above {args.threshold}; centroid {c}")
    return EXIT_OK


def cmd_eval(args):
    cfg, gmap, codec, traj = _run_artifacts(args.run)
    ds = _load_dataset(cfg, args.dataset)
    gt = ds.ground_truth()
    ate = ate_rmse(traj, gt) if len(gt) >= 3 else float("nan")
    step = max(1, args.stride)
    idx = list(range(0, len(traj), step))
    psnrs, preds, gts = [], [], []
    queries = None
    if ds.spec is not None:
        classes = ds.spec.class_names()
        queries = encode_labels(codec, [ds.spec.classes[c] for c in classes])
        class_of = np.asarray(classes)
    for i in idx:
        out = render(gmap, traj[i][1], ds.intrinsics)
        psnrs.append(psnr(out.rgb, ds.frames[i]["rgb"]))
        if queries is not None and ds.frames[i].get("labels") is not None:
            lab = segment(out, queries)
            preds.append(np.where(lab >= 0, class_of[np.maximum(lab, 0)], -1))
            gts.append(ds.frames[i]["labels"])
    miou = acc = float("nan")
    if preds:
        g = np.stack(gts)
        miou, acc = miou_accuracy(np.stack(preds), g, g < 0)
    path = Path(args.output) if args.output else Path(args.run) / "eval.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ate_rmse", "mean_psnr", "miou", "accuracy", "frames_evaluated"])
        w.writerow([f"{ate:.6f}", f"{np.mean(psnrs):.6f}", f"{miou:.6f}", f"{acc:.6f}", len(idx)])
    print(f"ATE {ate:.4f} m  PSNR {np.mean(psnrs):.2f} dB  mIoU {miou:.3f}  acc {acc:.3f}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="featslam", description="Desk-scale feature-embedded Gaussian splatting SLAM.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=("synthetic", "tum"))
        if dataset:
            sp.add_argument("--dataset", help="dataset directory")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g, dataset=False)
    g.add_argument("--output", required=True)
    g.set_defaults(func=cmd_generate)

    pt = sub.add_parser("pretrain", help="fit the codec and codebook")
    common(pt)
    pt.add_argument("--feature-dim", type=int)
    pt.add_argument("--output", required=True)
    pt.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="run online SLAM")
    common(r)
    r.add_argument("--output", required=True)
    r.add_argument("--no-loop", action="store_true")
    r.add_argument("--no-prune", action="store_true")
    r.add_argument("--feature-dim", type=int)
    r.add_argument("--codec")
    r.add_argument("--codebook")
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("query", help="relevancy map and 3D localization on a saved run")
    common(q)
    q.add_argument("--run", required=True, help="directory written by `run`")
    q.add_argument("--output", required=True)
    q.add_argument("--query-class", type=int)
    q.add_argument("--query-file", help="text file holding one high-dimensional query vector")
    q.add_argument("--frame", type=int, default=0)
    q.add_argument("--threshold", type=float, default=0.6)
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", help="metrics from run artifacts")
    common(e)
    e.add_argument("--run", required=True)
    e.add_argument("--output")
    e.add_argument("--stride", type=int, default=10)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, MapFormatError, CodecFormatError, CodebookFormatError, FileNotFoundError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET


if __name__ == "__main__":
    sys.exit(main())

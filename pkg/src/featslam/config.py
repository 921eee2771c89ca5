"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "synthetic"  # synthetic | tum

    # synthetic scene (used by `generate` and in-memory runs)
    scene_classes: int = 4
    scene_feature_dim: int = 32
    scene_frames: int = 200
    scene_trajectory: str = "orbit"
    scene_width: int = 64
    scene_height: int = 64
    scene_depth_sigma: float = 0.001
    scene_feature_sigma: float = 0.01
    scene_nuisance_amplitude: float = 0.0
    scene_nuisance_rank: int = 0

    # codec and codebook
    feature_dim: int = 16
    codec_hidden: int = 64
    pretrain_epochs: int = 60
    pretrain_views: int = 24
    codebook_k: int = 64
    feature_init: str = "encoder"  # encoder | random

    # tracking
    gicp_max_corr_dist: float = 0.1
    gicp_max_iter: int = 30
    gicp_voxel: float = 0.05
    gicp_neighbors: int = 10
    keyframe_threshold: float = 0.8
    map_samples: int = 20000
    init_from_gt: bool = True

    # mapping
    mapping_iterations: int = 60
    window_recent: int = 8
    window_older: int = 4
    w_depth: float = 0.5
    w_feat: float = 1.0
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_feature: float = 2.5e-3
    encoder_warmup: int = 500
    encoder_period: int = 10
    encoder_steps: int = 50
    encoder_lr: float = 1e-4
    duplicate_insertion: bool = False

    # pruning
    prune: bool = True
    prune_language: bool = True
    prune_geometric: bool = True
    prune_period: int = 200
    prune_k: int = 8
    prune_tau_dist: float = 0.02
    prune_tau_sim: float = 0.9
    prune_alpha_min: float = 0.05
    prune_scale_max: float = 0.5

    # loop closure
    loop: bool = True
    loop_recency_gap: int = 20
    loop_radius: float = 3.0
    loop_similarity: float = 0.7
    loop_candidates: int = 2
    loop_min_inlier: float = 0.6
    loop_max_rmse: float = 0.05
    loop_max_iter: int = 50

    # drift injection (loop-closure ablation): every tracked frame adds
    # drift_translation x its translation along world +x, plus drift_yaw_deg
    drift_translation: float = 0.0
    drift_yaw_deg: float = 0.0

    # artifacts
    save_renders: bool = True

    def __post_init__(self):
        if self.mode not in ("synthetic", "tum"):
            raise ConfigError(f"mode must be 'synthetic' or 'tum', got {self.mode!r}")
        if self.feature_init not in ("encoder", "random"):
            raise ConfigError(f"feature_init must be 'encoder' or 'random', got {self.feature_init!r}")
        if self.feature_dim < 1 or self.codebook_k < 2:
            raise ConfigError("feature_dim must be positive and codebook_k at least 2")
        if self.prune_period < 1 or self.mapping_iterations < 0:
            raise ConfigError("prune_period must be >= 1 and mapping_iterations >= 0")

    def replace(self, **kw) -> "RunConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(name, raw, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    base = base or RunConfig()
    types = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return base.replace(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)

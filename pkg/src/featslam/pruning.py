"""Map compaction: geometric heuristics plus language-feature redundancy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import GaussianMap


@dataclass
class PruneConfig:
    k_neighbors: int = 8
    tau_dist: float = 0.02
    tau_sim: float = 0.9
    alpha_min: float = 0.05
    scale_max: float = 0.5
    period: int = 200

    def __post_init__(self):
        if not -1.0 < self.tau_sim <= 1.0:
            raise ValueError("tau_sim must lie in (-1, 1]")
        if self.tau_dist <= 0:
            raise ValueError("tau_dist must be positive")
        if self.period < 1:
            raise ValueError("period must be at least 1")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")


@dataclass
class PruneReport:
    removed_language: set
    removed_geometric: set
    kept: int

    @property
    def removed(self) -> set:
        return self.removed_language | self.removed_geometric


def _unit_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def find_language_redundant(gmap: GaussianMap, cfg: PruneConfig) -> set:
    """Greedy sweep in ascending ID; a marked Gaussian can no longer mark others.

    A live Gaussian marks each of its K nearest live neighbors that lies closer
    than ``tau_dist`` with feature cosine above ``tau_sim``.
    """
    n = len(gmap)
    if n < 2:
        return set()
    # Only neighbors within tau_dist can be marked, and they always rank among
    # the K nearest live ones before anything farther, so a radius query is exact.
    balls = cKDTree(gmap.positions).query_ball_point(gmap.positions, cfg.tau_dist)
    f = _unit_rows(gmap.features)
    alive = np.ones(n, dtype=bool)
    for i in np.argsort(gmap.ids, kind="stable"):
        if not alive[i] or len(balls[i]) < 2:
            continue
        cand = np.asarray(balls[i], dtype=np.int64)
        cand = cand[(cand != i) & alive[cand]]
        if len(cand) == 0:
            continue
        d = np.linalg.norm(gmap.positions[cand] - gmap.positions[i], axis=1)
        keep = np.lexsort((gmap.ids[cand], d))[: cfg.k_neighbors]
        cand, d = cand[keep], d[keep]
        sim = f[cand] @ f[i]
        alive[cand[(d < cfg.tau_dist) & (sim > cfg.tau_sim)]] = False
    return set(gmap.ids[~alive].tolist())


def find_geometric(gmap: GaussianMap, cfg: PruneConfig) -> set:
    """Low opacity or any axis longer than ``scale_max``."""
    if len(gmap) == 0:
        return set()
    bad = (gmap.opacities < cfg.alpha_min) | (np.exp(gmap.log_scales).max(axis=1) > cfg.scale_max)
    return set(gmap.ids[bad].tolist())


def prune(gmap: GaussianMap, cfg: PruneConfig, state=None, language=True, geometric=True) -> PruneReport:
    """Delete the union of both rules in place; optimizer rows follow the survivors."""
    geo = find_geometric(gmap, cfg) if geometric else set()
    lang = find_language_redundant(gmap, cfg) if language else set()
    lang -= geo
    removed = geo | lang
    if removed:
        mask = ~np.isin(gmap.ids, np.fromiter(removed, dtype=np.int64, count=len(removed)))
        if state is not None:
            state.sync(gmap)
            state.keep_rows(mask)
        gmap.keep(mask)
    return PruneReport(lang, geo, len(gmap))

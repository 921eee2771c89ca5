"""Open-vocabulary queries against rendered compact features and the Gaussian map."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .codec import CodecParams, encode_query
from .gaussians import GaussianMap

VOID = -1
FEAT_EPS = 1e-6


def _unit_query(q):
    q = np.asarray(q, dtype=np.float64).ravel()
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("query vector must be nonzero")
    return q / n


def _feature_field(out_or_feat):
    feat = getattr(out_or_feat, "feat", out_or_feat)
    return np.asarray(feat, dtype=np.float64)


def relevancy_map(out, q):
    """Per-pixel cosine between rendered features and ``q``; empty pixels score 0.

    ``out`` is a :class:`RenderOutput` or an ``(H, W, d)`` feature image.
    """
    feat = _feature_field(out)
    q = _unit_query(q)
    if feat.shape[-1] != len(q):
        raise ValueError(f"query has {len(q)} channels, features have {feat.shape[-1]}")
    norm = np.linalg.norm(feat, axis=-1)
    dots = feat @ q
    rel = np.divide(dots, norm, out=np.zeros_like(dots), where=norm >= FEAT_EPS)
    return np.clip(rel, -1.0, 1.0)


@dataclass
class Localization3D:
    ids: np.ndarray
    scores: np.ndarray
    centroid: np.ndarray | None

    def __len__(self):
        return len(self.ids)


def gaussian_scores(gmap: GaussianMap, q):
    q = _unit_query(q)
    if gmap.feature_dim != len(q):
        raise ValueError(f"query has {len(q)} channels, map features have {gmap.feature_dim}")
    n = np.linalg.norm(gmap.features, axis=1)
    dots = gmap.features @ q
    return np.clip(np.divide(dots, n, out=np.zeros_like(dots), where=n >= FEAT_EPS), -1.0, 1.0)


def localize_3d(gmap: GaussianMap, q, threshold: float = 0.6) -> Localization3D:
    """Gaussians scoring above ``threshold`` and their opacity-weighted centroid."""
    scores = gaussian_scores(gmap, q)
    sel = scores > threshold
    centroid = None
    if sel.any():
        w = gmap.opacities[sel]
        centroid = (w[:, None] * gmap.positions[sel]).sum(0) / w.sum()
    return Localization3D(gmap.ids[sel], scores[sel], centroid)


def segment(out, label_queries):
    """Arg-max cosine label per pixel (ties to the lowest index); empty pixels get ``VOID``."""
    if len(label_queries) == 0:
        raise ValueError("at least one label query is required")
    feat = _feature_field(out)
    Q = np.stack([_unit_query(q) for q in label_queries], axis=1)
    if feat.shape[-1] != Q.shape[0]:
        raise ValueError("label queries and features differ in dimension")
    norm = np.linalg.norm(feat, axis=-1)
    # dividing by the pixel norm does not change the arg-max
    labels = np.argmax(feat @ Q, axis=-1)
    return np.where(norm < FEAT_EPS, VOID, labels)


def encode_labels(codec: CodecParams, prototypes):
    """Compact label queries from high-dimensional prototypes."""
    return [encode_query(codec, p) for p in np.asarray(prototypes, dtype=np.float64)]


def save_relevancy_png(rel, path):
    img = (np.clip(rel, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(path)


def save_localization_csv(loc: Localization3D, gmap: GaussianMap, path):
    idx = gmap.index_of(loc.ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "x", "y", "z"])
        for gid, s, p in zip(loc.ids, loc.scores, gmap.positions[idx]):
            w.writerow([int(gid), f"{s:.6f}", f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}"])

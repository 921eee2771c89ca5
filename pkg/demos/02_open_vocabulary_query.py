"""
Querying the map with high-dimensional vectors
==============================================

Each Gaussian stores a compact feature. A query vector from the teacher's
space is pushed through the scene-adaptive encoder, then compared by cosine
against rendered features (2D relevancy) or Gaussian features (3D
localization). Here the query is the sphere class prototype.
"""

import numpy as np

from featslam.config import RunConfig
from featslam.codec import encode_query
from featslam.datasets import synthetic_dataset
from featslam.pipeline import run_pipeline
from featslam.query import localize_3d, relevancy_map, segment, encode_labels
from featslam.render import render
from featslam.synthetic import room_scene

spec = room_scene(n_frames=60, trajectory_params=dict(sweep=np.pi / 2))
dataset = synthetic_dataset(spec, seed=0)
result = run_pipeline(RunConfig(), dataset)
codec, gmap = result.codec, result.gmap

SPHERE = 2
q = encode_query(codec, spec.classes[SPHERE])

# 2D: relevancy in the last keyframe view
kf = result.keyframes[-1]
out = render(gmap, kf.pose, dataset.intrinsics)
rel = relevancy_map(out, q)
truth = dataset.frames[kf.frame_index]["labels"] == SPHERE
print(f"mean relevancy on sphere pixels {rel[truth].mean():.3f}, elsewhere {rel[~truth].mean():.3f}")

# Scaling the query leaves relevancy unchanged (bitwise for powers of two)
assert np.array_equal(relevancy_map(out, 8.0 * q), rel)
print(f"max change under 7.5x query scale {np.abs(relevancy_map(out, 7.5 * q) - rel).max():.1e}")

# 3D: Gaussians above a cosine threshold. The class covers the central
# ball and the smaller balls hung on the walls, so check each selected
# Gaussian against the nearest surface of any sphere of that class.
loc = localize_3d(gmap, q, threshold=0.6)
balls = [p for p in spec.primitives if p.shape == "sphere" and p.class_id == SPHERE]
pos = gmap.positions[np.isin(gmap.ids, loc.ids)]
gap = np.min([np.abs(np.linalg.norm(pos - b.pose.t, axis=1) - b.size[0]) for b in balls], axis=0)
print(f"{len(loc)} Gaussians selected over {len(balls)} balls, "
      f"{np.mean(gap < 0.05):.1%} within 5 cm of a ball surface")

# Closed-set segmentation with every class prototype as a label query
queries = encode_labels(codec, [spec.classes[c] for c in spec.class_names()])
labels = segment(out, queries)
valid = dataset.frames[kf.frame_index]["labels"] >= 0
acc = np.mean(labels[valid] == dataset.frames[kf.frame_index]["labels"][valid])
print(f"segmentation accuracy in this view {acc:.3f}")

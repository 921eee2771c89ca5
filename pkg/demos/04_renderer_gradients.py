"""
Checking the splat renderer's analytic gradients
================================================

A handful of random Gaussians in front of a 16x16 camera. We backpropagate a
random cotangent through the analytic backward pass and compare it with
central finite differences, one attribute group at a time.
"""

import numpy as np

from featslam.gaussians import GaussianMap
from featslam.geometry import CameraIntrinsics, Pose
from featslam.render import render, render_backward

rng = np.random.default_rng(3)
K = CameraIntrinsics(16.0, 16.0, 7.5, 7.5, 16, 16)
n, d = 12, 8

g = GaussianMap(d)
g.add(
    np.c_[rng.uniform(-0.4, 0.4, (n, 2)), rng.uniform(1.0, 2.0, n)],
    rng.normal(size=(n, 4)),
    np.log(rng.uniform(0.05, 0.2, (n, 3))),
    rng.normal(0, 1.5, n),
    rng.uniform(0, 1, (n, 3)),
    rng.normal(size=(n, d)),
    0,
)
pose = Pose.identity()

out = render(g, pose, K)
c_rgb, c_depth, c_feat = rng.normal(size=out.rgb.shape), rng.normal(size=out.depth.shape), rng.normal(size=out.feat.shape)
grads = render_backward(g, out, c_rgb, c_depth, c_feat)


def objective():
    # Replay with the same sort order and splat footprints as the base pass
    o = render(g, pose, K, freeze=out)
    return np.sum(o.rgb * c_rgb) + np.sum(o.depth * c_depth) + np.sum(o.feat * c_feat)


h = 1e-4
for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors", "features"):
    x = getattr(g, name)
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        keep = x[idx]
        x[idx] = keep + h
        up = objective()
        x[idx] = keep - h
        dn = objective()
        x[idx] = keep
        fd[idx] = (up - dn) / (2 * h)
    err = np.linalg.norm(grads[name] - fd) / np.linalg.norm(fd)
    print(f"{name:15s} relative error {err:.2e}")

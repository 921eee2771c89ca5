"""Joint map optimization: photometric, depth and feature-distillation losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .codec import Adam, CodecParams, decode, decode_backward
from .gaussians import GaussianMap, Keyframe
from .geometry import CameraIntrinsics
from .render import RenderOutput, render, render_backward

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

DEFAULT_LR = {
    "positions": 1.6e-4,
    "rotations": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "colors": 2.5e-3,
    "features": 2.5e-3,
}
MAX_LOG_SCALE = np.log(5.0)


@lru_cache(maxsize=16)
def _window_matrix(n):
    """Valid-mode correlation with the normalized 11-tap Gaussian as a matrix."""
    half = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / SSIM_SIGMA) ** 2)
    k /= k.sum()
    m = n - SSIM_WINDOW + 1
    if m < 1:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    G = np.zeros((m, n))
    for i in range(m):
        G[i, i : i + SSIM_WINDOW] = k
    return G


def _filter(G_h, G_w, x):
    # x: (H, W, C) -> (H', W', C)
    return np.einsum("ih,hwc,jw->ijc", G_h, x, G_w, optimize=True)


def _filter_adjoint(G_h, G_w, y):
    return np.einsum("ih,ijc,jw->hwc", G_h, y, G_w, optimize=True)


def _as3(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim(a, b, return_grad=False):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), channel-averaged.

    With ``return_grad`` also returns d(ssim)/d(a).
    """
    x, y = _as3(a), _as3(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    Gh, Gw = _window_matrix(x.shape[0]), _window_matrix(x.shape[1])
    mx, my = _filter(Gh, Gw, x), _filter(Gh, Gw, y)
    exx, eyy, exy = _filter(Gh, Gw, x * x), _filter(Gh, Gw, y * y), _filter(Gh, Gw, x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    A1, A2 = 2 * mx * my + SSIM_C1, 2 * cxy + SSIM_C2
    B1, B2 = mx * mx + my * my + SSIM_C1, vx + vy + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    val = float(S.mean())
    if not return_grad:
        return val
    n = S.size
    dmx = (2 * my * A2 - 2 * my * A1) / (B1 * B2) - S * (2 * mx / B1 - 2 * mx / B2)
    dexx = -S / B2
    dexy = 2 * A1 / (B1 * B2)
    g = (
        _filter_adjoint(Gh, Gw, dmx / n)
        + 2 * x * _filter_adjoint(Gh, Gw, dexx / n)
        + y * _filter_adjoint(Gh, Gw, dexy / n)
    )
    return val, g.reshape(np.shape(a))


@dataclass
class LossBreakdown:
    l_rgb: float
    l_depth: float
    l_feat: float
    l_total: float
    w_depth: float
    w_feat: float


def loss_and_grads(out: RenderOutput, kf: Keyframe, codec: CodecParams | None, w_depth=0.5, w_feat=1.0,
                   need_grads=True):
    """Weighted total loss and its cotangents on the rendered images.

    Returns ``(LossBreakdown, g_rgb, g_depth, g_feat)``; cotangents are
    ``None`` when ``need_grads`` is False.
    """
    if out.rgb.shape != kf.rgb.shape or out.depth.shape != kf.depth.shape:
        raise ValueError("render and keyframe sizes disagree")
    diff = out.rgb - kf.rgb
    if need_grads:
        s, g_ssim = ssim(out.rgb, kf.rgb, return_grad=True)
    else:
        s = ssim(out.rgb, kf.rgb)
    l_rgb = 0.8 * float(np.mean(np.abs(diff))) + 0.2 * (1.0 - s) / 2.0

    mask = (kf.depth > 0) & (out.acc_alpha > 0.5)
    n_mask = int(mask.sum())
    ddiff = out.depth - kf.depth
    l_depth = float(np.abs(ddiff[mask]).sum() / n_mask) if n_mask else 0.0

    l_feat = 0.0
    g_feat = None
    if codec is not None and kf.feat_gt is not None:
        if kf.feat_gt.shape[-1] != codec.D or out.feat.shape[-1] != codec.d:
            raise ValueError("feature dimensions disagree with the codec")
        dec = decode(codec, out.feat)
        fdiff = dec - kf.feat_gt
        l_feat = float(np.mean(np.abs(fdiff)))
        if need_grads:
            g_feat = (
                decode_backward(codec, out.feat, np.sign(fdiff) / fdiff.size) * w_feat
                if w_feat != 0
                else np.zeros_like(out.feat)
            )
    total = l_rgb + w_depth * l_depth + w_feat * l_feat
    lb = LossBreakdown(l_rgb, l_depth, l_feat, total, w_depth, w_feat)
    if not need_grads:
        return lb, None, None, None
    g_rgb = 0.8 * np.sign(diff) / diff.size - 0.1 * g_ssim
    g_depth = np.where(mask, np.sign(ddiff), 0.0) * (w_depth / n_mask if n_mask else 0.0)
    if g_feat is None:
        g_feat = np.zeros_like(out.feat)
    return lb, g_rgb, g_depth, g_feat


def compute_losses(out: RenderOutput, kf: Keyframe, codec, w_depth=0.5, w_feat=1.0) -> LossBreakdown:
    return loss_and_grads(out, kf, codec, w_depth, w_feat, need_grads=False)[0]


@dataclass
class OptimizerState:
    """Adam moments per attribute group, kept aligned with the live Gaussian IDs."""

    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    seed: int = 0
    adam: Adam = None
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rng: np.random.Generator = None
    iterations: int = 0

    def __post_init__(self):
        if self.adam is None:
            self.adam = Adam(self.lr)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def sync(self, gmap: GaussianMap):
        """Re-index moments to ``gmap.ids``; unseen Gaussians start at zero."""
        if np.array_equal(self.ids, gmap.ids):
            return
        if len(self.ids):
            pos = np.minimum(np.searchsorted(self.ids, gmap.ids), len(self.ids) - 1)
            known = self.ids[pos] == gmap.ids
        else:
            pos, known = np.zeros(len(gmap), dtype=np.int64), np.zeros(len(gmap), dtype=bool)
        for name in list(self.adam.m):
            for store in (self.adam.m, self.adam.v):
                old = store[name]
                new = np.zeros((len(gmap),) + old.shape[1:])
                new[known] = old[pos[known]]
                store[name] = new
        self.ids = gmap.ids.copy()

    def keep_rows(self, mask):
        for name in list(self.adam.m):
            self.adam.keep_rows(name, mask)
        self.ids = self.ids[mask]


def map_params(gmap: GaussianMap) -> dict:
    return {name: getattr(gmap, name) for name in DEFAULT_LR}


def optimization_step(gmap: GaussianMap, kf: Keyframe, K: CameraIntrinsics, codec, state: OptimizerState,
                      w_depth=0.5, w_feat=1.0):
    """Render one keyframe, backpropagate and apply one Adam step."""
    state.sync(gmap)
    out = render(gmap, kf.pose, K)
    lb, g_rgb, g_depth, g_feat = loss_and_grads(out, kf, codec, w_depth, w_feat)
    grads = render_backward(gmap, out, g_rgb, g_depth, g_feat)
    params = map_params(gmap)
    state.adam.step(params, grads)
    norms = np.linalg.norm(gmap.rotations, axis=1, keepdims=True)
    gmap.rotations /= norms
    np.minimum(gmap.log_scales, MAX_LOG_SCALE, out=gmap.log_scales)
    state.iterations += 1
    return lb, out


def mapping_round(gmap: GaussianMap, window: list, iterations: int, codec, state: OptimizerState,
                  K: CameraIntrinsics, w_depth=0.5, w_feat=1.0, trace=None, on_iteration=None):
    """Optimize the map on keyframes drawn uniformly from ``window``.

    The codec is only read. ``trace``, when a list, receives a
    :class:`LossBreakdown` per iteration. ``on_iteration`` is called after each
    step with the global iteration count (used for periodic pruning).
    """
    if not window:
        raise ValueError("mapping window is empty")
    for _ in range(iterations):
        kf = window[int(state.rng.integers(len(window)))]
        lb, _ = optimization_step(gmap, kf, K, codec, state, w_depth, w_feat)
        if trace is not None:
            trace.append(lb)
        if on_iteration is not None:
            on_iteration(state.iterations)
    return state


def encoder_gate(global_iteration: int, keyframes_since_adapt: int, warmup=500, period=10) -> bool:
    return global_iteration >= warmup and keyframes_since_adapt >= period


def select_window(keyframes: list, rng: np.random.Generator, recent=8, older=4) -> list:
    """Most recent keyframes plus a few uniformly drawn older ones."""
    if len(keyframes) <= recent:
        return list(keyframes)
    old = keyframes[:-recent]
    pick = rng.choice(len(old), size=min(older, len(old)), replace=False)
    return [old[i] for i in sorted(pick)] + list(keyframes[-recent:])


def psnr(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, -10.0 * np.log10(mse))

"""Per-pixel feature encoder/decoder (two 1x1 layers each way) and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CODEC_MAGIC = b"LEGOCODEC1"
_LAYERS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")
ENCODER_KEYS = _LAYERS[:4]
DECODER_KEYS = _LAYERS[4:]


class CodecFormatError(ValueError):
    pass


@dataclass
class CodecParams:
    enc_w1: np.ndarray  # (D, H)
    enc_b1: np.ndarray  # (H,)
    enc_w2: np.ndarray  # (H, d)
    enc_b2: np.ndarray  # (d,)
    dec_w1: np.ndarray  # (d, H)
    dec_b1: np.ndarray  # (H,)
    dec_w2: np.ndarray  # (H, D)
    dec_b2: np.ndarray  # (D,)
    final_l1: float | None = field(default=None, compare=False)

    def __post_init__(self):
        D, H = self.enc_w1.shape
        d = self.enc_w2.shape[1]
        expected = {
            "enc_b1": (H,), "enc_w2": (H, d), "enc_b2": (d,),
            "dec_w1": (d, H), "dec_b1": (H,), "dec_w2": (H, D), "dec_b2": (D,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def D(self):
        return self.enc_w1.shape[0]

    @property
    def H(self):
        return self.enc_w1.shape[1]

    @property
    def d(self):
        return self.enc_w2.shape[1]

    @property
    def param_count(self):
        return sum(getattr(self, k).size for k in _LAYERS)

    def as_dict(self):
        return {k: getattr(self, k) for k in _LAYERS}

    def copy(self):
        return CodecParams(**{k: v.copy() for k, v in self.as_dict().items()}, final_l1=self.final_l1)

    def encode_vectors(self, x):
        return encode_vectors(self, x)

    def decode_vectors(self, y):
        return decode_vectors(self, y)


def init_codec(D: int, d: int = 16, H: int = 64, seed: int = 0, zero_bias: bool = True) -> CodecParams:
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    return CodecParams(
        enc_w1=he(D, H), enc_b1=np.zeros(H), enc_w2=he(H, d), enc_b2=np.zeros(d),
        dec_w1=he(d, H), dec_b1=np.zeros(H), dec_w2=he(H, D), dec_b2=np.zeros(D),
    )


def _mlp(x, w1, b1, w2, b2):
    # einsum keeps each row's result independent of the batch it sits in
    # (BLAS blocking does not), so encoding a map equals encoding its pixels.
    pre = np.einsum("ni,ij->nj", x, w1) + b1
    h = np.maximum(pre, 0.0)
    return np.einsum("ni,ij->nj", h, w2) + b2, (x, pre, h)


def _mlp_backward(g_out, cache, w1, w2, need_input_grad=True):
    x, pre, h = cache
    g_w2 = h.T @ g_out
    g_b2 = g_out.sum(axis=0)
    g_h = g_out @ w2.T
    g_pre = g_h * (pre > 0)
    g_w1 = x.T @ g_pre
    g_b1 = g_pre.sum(axis=0)
    g_x = g_pre @ w1.T if need_input_grad else None
    return (g_w1, g_b1, g_w2, g_b2), g_x


def _check_channels(x, n, what):
    if x.shape[-1] != n:
        raise ValueError(f"{what} expects {n} channels, got {x.shape[-1]}")


def encode_vectors(p: CodecParams, x):
    x = np.asarray(x, dtype=np.float64)
    _check_channels(x, p.D, "encoder")
    flat = x.reshape(-1, p.D)
    return _mlp(flat, p.enc_w1, p.enc_b1, p.enc_w2, p.enc_b2)[0].reshape(x.shape[:-1] + (p.d,))


def decode_vectors(p: CodecParams, y):
    y = np.asarray(y, dtype=np.float64)
    _check_channels(y, p.d, "decoder")
    flat = y.reshape(-1, p.d)
    return _mlp(flat, p.dec_w1, p.dec_b1, p.dec_w2, p.dec_b2)[0].reshape(y.shape[:-1] + (p.D,))


def encode(p: CodecParams, fmap):
    """Encode an ``(H, W, D)`` feature map to ``(H, W, d)``."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    return encode_vectors(p, fmap)


def decode(p: CodecParams, fmap):
    """Decode an ``(H, W, d)`` feature map to ``(H, W, D)``."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    return decode_vectors(p, fmap)


def encode_query(p: CodecParams, q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (p.D,):
        raise ValueError(f"query must have {p.D} entries, got shape {q.shape}")
    return encode(p, q.reshape(1, 1, -1))[0, 0]


def decode_backward(p: CodecParams, y, g_out):
    """Gradient of ``<g_out, decode(y)>`` with respect to ``y`` (decoder frozen)."""
    flat = np.asarray(y, dtype=np.float64).reshape(-1, p.d)
    _, cache = _mlp(flat, p.dec_w1, p.dec_b1, p.dec_w2, p.dec_b2)
    _, g_y = _mlp_backward(g_out.reshape(-1, p.D), cache, p.dec_w1, p.dec_w2)
    return g_y.reshape(np.shape(y))


class Adam:
    """Adam over a dict of named arrays, with per-name learning rates."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def _lr(self, name):
        return self.lr[name] if isinstance(self.lr, dict) else self.lr

    def step(self, params: dict, grads: dict):
        """Update ``params`` in place from ``grads`` (only names present in grads)."""
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            params[name] -= self._lr(name) * mhat / (np.sqrt(vhat) + self.eps)

    def keep_rows(self, name, mask):
        if name in self.m:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]

    def append_rows(self, name, n):
        if name in self.m:
            shape = (n,) + self.m[name].shape[1:]
            self.m[name] = np.concatenate([self.m[name], np.zeros(shape)])
            self.v[name] = np.concatenate([self.v[name], np.zeros(shape)])


def reconstruction_l1(p: CodecParams, x):
    x = np.asarray(x, dtype=np.float64).reshape(-1, p.D)
    return float(np.mean(np.abs(decode_vectors(p, encode_vectors(p, x)) - x)))


def _autoencoder_grads(p: CodecParams, xb):
    y, enc_cache = _mlp(xb, p.enc_w1, p.enc_b1, p.enc_w2, p.enc_b2)
    xr, dec_cache = _mlp(y, p.dec_w1, p.dec_b1, p.dec_w2, p.dec_b2)
    diff = xr - xb
    loss = np.mean(np.abs(diff))
    g = np.sign(diff) / diff.size
    g_dec, g_y = _mlp_backward(g, dec_cache, p.dec_w1, p.dec_w2)
    g_enc, _ = _mlp_backward(g_y, enc_cache, p.enc_w1, p.enc_w2, need_input_grad=False)
    return loss, dict(zip(_LAYERS, g_enc + g_dec))


def pretrain(
    corpus,
    epochs: int = 50,
    seed: int = 0,
    d: int = 16,
    H: int = 64,
    lr: float = 1e-3,
    batch: int = 1024,
    final_lr: float = 1e-5,
) -> CodecParams:
    """Fit the autoencoder to minimize L1 reconstruction of ``corpus`` (N, D).

    Uses Adam without momentum (``beta1 = 0``) starting at ``lr`` and cosine
    annealed to ``final_lr`` by the last epoch; sign-valued L1 gradients keep
    Adam's step at the learning rate, so annealing sets the reconstruction
    floor. The final full-corpus L1 is stored on the result as ``final_l1``.
    """
    X = np.asarray(corpus, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("pretraining corpus is empty")
    p = init_codec(X.shape[1], d, H, seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(lr, beta1=0.0)
    params = p.as_dict()
    for epoch in range(epochs):
        frac = epoch / max(epochs - 1, 1)
        opt.lr = final_lr + 0.5 * (lr - final_lr) * (1 + np.cos(np.pi * frac))
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch):
            _, grads = _autoencoder_grads(p, X[order[start : start + batch]])
            opt.step(params, grads)
    p.final_l1 = reconstruction_l1(p, X)
    return p


def encoder_loss(p: CodecParams, F_gt, F_render):
    """L1 between the encoded teacher features and the rendered compact features."""
    return float(np.mean(np.abs(encode(p, F_gt) - F_render)))


def adapt_encoder(p: CodecParams, F_gt, F_render, steps: int, lr: float = 1e-4, trace=None) -> CodecParams:
    """Fit only the encoder so that ``encode(F_gt)`` matches ``F_render``.

    Returns a new :class:`CodecParams`; the decoder arrays are shared with the
    input unchanged. ``trace``, if a list, receives the loss before each step
    and after the last one.
    """
    F_gt = np.asarray(F_gt, dtype=np.float64)
    F_render = np.asarray(F_render, dtype=np.float64)
    if F_gt.shape[:-1] != F_render.shape[:-1]:
        raise ValueError("teacher and rendered feature maps differ in size")
    _check_channels(F_gt, p.D, "encoder")
    _check_channels(F_render, p.d, "rendered features")
    out = CodecParams(
        **{k: (getattr(p, k).copy() if k in ENCODER_KEYS else getattr(p, k)) for k in _LAYERS},
        final_l1=p.final_l1,
    )
    if steps <= 0:
        return out
    X = F_gt.reshape(-1, p.D)
    target = F_render.reshape(-1, p.d)
    params = {k: getattr(out, k) for k in ENCODER_KEYS}
    opt = Adam(lr)
    for _ in range(steps):
        y, cache = _mlp(X, out.enc_w1, out.enc_b1, out.enc_w2, out.enc_b2)
        diff = y - target
        if trace is not None:
            trace.append(float(np.mean(np.abs(diff))))
        g, _ = _mlp_backward(np.sign(diff) / diff.size, cache, out.enc_w1, out.enc_w2, need_input_grad=False)
        opt.step(params, dict(zip(ENCODER_KEYS, g)))
    if trace is not None:
        trace.append(encoder_loss(out, F_gt, F_render))
    return out


_CODEC_HEADER = struct.Struct("<10sIII")


def codec_to_bytes(p: CodecParams) -> bytes:
    body = b"".join(np.ascontiguousarray(getattr(p, k), dtype="<f4").tobytes() for k in _LAYERS)
    return _CODEC_HEADER.pack(CODEC_MAGIC, p.D, p.H, p.d) + body


def codec_from_bytes(data: bytes) -> CodecParams:
    if len(data) < _CODEC_HEADER.size:
        raise CodecFormatError("file shorter than the codec header")
    magic, D, H, d = _CODEC_HEADER.unpack_from(data)
    if magic != CODEC_MAGIC:
        raise CodecFormatError(f"bad magic {magic!r}")
    shapes = [(D, H), (H,), (H, d), (d,), (d, H), (H,), (H, D), (D,)]
    need = _CODEC_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != need:
        raise CodecFormatError(f"codec payload has {len(data)} bytes, expected {need}")
    arrays, off = {}, _CODEC_HEADER.size
    for k, s in zip(_LAYERS, shapes):
        n = int(np.prod(s))
        arrays[k] = np.frombuffer(data, "<f4", n, off).astype(np.float64).reshape(s)
        off += 4 * n
    return CodecParams(**arrays)


def save_codec(p: CodecParams, path):
    with open(path, "wb") as fh:
        fh.write(codec_to_bytes(p))


def load_codec(path) -> CodecParams:
    with open(path, "rb") as fh:
        return codec_from_bytes(fh.read())

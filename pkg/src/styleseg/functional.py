"""Differentiable kernels used by the segmentation network.

All activations are laid out N, C, H, W. Convolutions are
cross-correlations (no kernel flip), as in every mainstream framework.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, DimensionError, Tensor, _as_tensor, make_result

INSTANCE_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01


def _check_nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected a 4-d N,C,H,W tensor, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    pad = kernel // 2 if padding == "same" else 0
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-d cross-correlation with an odd square kernel.

    ``padding="same"`` zero-pads by ``k // 2`` on every side, so stride 1
    keeps H, W and stride 2 gives ``ceil(H / 2)``.
    """
    _check_nchw(x, "conv2d input")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight: expected K,C,kh,kw, got shape {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv2d: channel axis mismatch, input C={c} but weight C={cw}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes must be equal and odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d bias: expected shape ({k},), got {bias.shape}")

    pad = kh // 2 if padding == "same" else 0
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d: spatial axes {h}x{w} too small for a {kh}x{kw} valid kernel")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    # channel-major padded copy, then im2col laid out (kh, kw, C, N, Ho, Wo)
    # so the forward and both backward products are single matmuls
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    xp[:, :, pad:pad + h, pad:pad + w] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    del xp
    cols2d = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(k, kh * kw * c)
    out = wmat @ cols2d
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gx = gw = gb = None
        gt = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        if weight.requires_grad:
            gw = (gt @ cols2d.T).reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, _bw, "conv2d")


def conv_transpose2x(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel (exact 2x upsample).

    ``weight`` is laid out C_in, C_out, 2, 2. Output pixel (2i+a, 2j+b)
    receives ``sum_c x[c, i, j] * weight[c, :, a, b]``.
    """
    _check_nchw(x, "conv_transpose2x input")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise DimensionError(f"conv_transpose2x weight: expected ({c}, K, 2, 2), got {weight.shape}")
    k = weight.shape[1]
    t = np.tensordot(x.data, weight.data, axes=([1], [0]))  # n,h,w,k,2,2
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, k, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g6 = g.reshape(n, k, h, 2, w, 2)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(g6, weight.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 2, 4]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, _bw, "conv_transpose2x")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_nchw(x, "upsample_nearest2x input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), _bw, "upsample_nearest2x")


def instance_stats(z, eps: float = INSTANCE_NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-(item, channel) spatial mean and ``sqrt(population var + eps)``."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=DTYPE)
    if data.ndim != 4:
        raise DimensionError(f"instance_stats: expected N,C,H,W, got shape {data.shape}")
    if data.shape[2] * data.shape[3] < 1:
        raise DimensionError("instance_stats: empty spatial extent")
    if eps <= 0:
        raise ValueError(f"instance_stats: eps must be positive, got {eps}")
    mu = data.mean(axis=(2, 3))
    var = ((data - mu[:, :, None, None]) ** 2).mean(axis=(2, 3))
    return mu, np.sqrt(var + eps)


def instance_norm(z: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """``(z - mu) / sigma`` per item and channel, with no affine part."""
    mu, sigma = instance_stats(z, eps)
    inv = 1.0 / sigma[:, :, None, None]
    u = (z.data - mu[:, :, None, None]) * inv

    def _bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gum = (g * u).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - u * gum),)

    return make_result(u, (z,), _bw, "instance_norm")


def modulate(u: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-item, per-channel affine: ``gamma[n, c] * u + beta[n, c]``."""
    n, c = u.shape[:2]
    if gamma.shape != (n, c) or beta.shape != (n, c):
        raise DimensionError(
            f"modulate: gamma/beta must be ({n}, {c}), got {gamma.shape} and {beta.shape}")
    out = gamma.data[:, :, None, None] * u.data + beta.data[:, :, None, None]

    def _bw(g):
        gu = g * gamma.data[:, :, None, None] if u.requires_grad else None
        gg = (g * u.data).sum(axis=(2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(2, 3)) if beta.requires_grad else None
        return gu, gg, gb

    return make_result(out, (u, gamma, beta), _bw, "modulate")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError(f"leaky_relu: slope must be in (0, 1), got {slope}")
    out = np.maximum(x.data, slope * x.data)

    def _bw(g):
        return (g * np.where(x.data >= 0, 1.0, slope),)

    return make_result(out, (x,), _bw, "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor | np.ndarray:
    """Logistic function; plain arrays in, plain arrays out."""
    if not isinstance(x, Tensor):
        return _sigmoid(np.asarray(x, dtype=DTYPE))
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits, in the fused log-sigmoid form.

    ``max(x, 0) - x*t + log1p(exp(-|x|))`` never forms a probability of
    exactly 0 or 1, so saturated logits stay finite.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_loss: logits {logits.shape} and targets {t.shape} differ")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce_loss: targets must be 0 or 1")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    count = x.size

    def _bw(g):
        return (g * (_sigmoid(x) - t) / count,)

    return make_result(np.asarray(per.mean()), (logits,), _bw, "bce_loss")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, unbiased in train mode."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nchw(x, "global_avg_pool input")
    n, c, h, w = x.shape

    def _bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), _bw, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape N, L and weight O, L."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return make_result(out, parents, _bw, "linear")


def as_tensor(x) -> Tensor:
    return _as_tensor(x)

"""Dense layer kernels with hand-written backward passes.

Every layer takes ``C x H x W`` or batched ``N x C x H x W`` arrays and
returns an output plus a cache object consumed by the matching
``*_backward`` function. Arrays keep the dtype they arrive with: float32
for training and inference, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    weight_grad: np.ndarray | None = None
    bias_grad: np.ndarray | None = None


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractError(f"expected a C x H x W or N x C x H x W array, got shape {x.shape}")


def _unbatch(y: np.ndarray, squeeze: bool) -> np.ndarray:
    return y[0] if squeeze else y


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------- channels-last kernels
#
# The networks run in N x H x W x C layout (im2col gathers contiguous channel
# runs, which is markedly faster than gathering from N x C x H x W). The
# public C x H x W functions further down wrap these same kernels.


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, hp, wp, c = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if kh == 1 and kw == 1:
        return xp.reshape(n * ho * wo, c)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if not (ph or pw):
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


# im2col is evaluated a few images at a time so each column block stays in
# cache; this roughly halves conv time against one batch-sized column matrix
_CHUNK_FLOATS = 1 << 18


def _chunk(n: int, rows_per_image: int, row_len: int) -> int:
    return max(1, min(n, _CHUNK_FLOATS // max(1, rows_per_image * row_len)))


def conv_nhwc(x, weights, bias, padding=(0, 0)):
    """Stride-1 correlation on N x H x W x C input; ``weights`` is O x C x Kh x Kw."""
    o, c, kh, kw = weights.shape
    if x.shape[-1] != c:
        raise ContractError(f"input has {x.shape[-1]} channels but kernel expects {c}")
    ph, pw = padding
    xp = _pad_hw(x, ph, pw)
    n, hp, wp, _ = xp.shape
    if hp < kh or wp < kw:
        raise ContractError("kernel larger than padded input")
    ho, wo = hp - kh + 1, wp - kw + 1
    wmat_t = np.ascontiguousarray(weights.transpose(2, 3, 1, 0).reshape(-1, o))
    out = np.empty((n, ho, wo, o), dtype=np.result_type(x.dtype, weights.dtype))
    flat = out.reshape(n * ho * wo, o)
    step = _chunk(n, ho * wo, kh * kw * c)
    for i in range(0, n, step):
        j = min(n, i + step)
        np.matmul(_im2col(xp[i:j], kh, kw), wmat_t, out=flat[i * ho * wo : j * ho * wo])
    out += bias
    return out, (xp, x.shape, weights, (ph, pw))


def conv_nhwc_backward(dy, cache, need_input_grad=True) -> LayerGrad:
    xp, xshape, w, (ph, pw) = cache
    o, c, kh, kw = w.shape
    n, ho, wo, _ = dy.shape
    dmat = dy.reshape(-1, o)
    wgrad_t = np.zeros((kh * kw * c, o), dtype=np.result_type(dy.dtype, xp.dtype))
    step = _chunk(n, ho * wo, kh * kw * c)
    for i in range(0, n, step):
        j = min(n, i + step)
        wgrad_t += _im2col(xp[i:j], kh, kw).T @ dmat[i * ho * wo : j * ho * wo]
    wgrad = wgrad_t.T.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
    bgrad = dmat.sum(axis=0)
    dx = None
    if need_input_grad:
        # full correlation of dy with the flipped, channel-swapped kernel
        qh, qw = kh - 1 - ph, kw - 1 - pw
        if qh < 0 or qw < 0:
            raise ContractError("padding larger than kernel-1 is not supported")
        wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv_nhwc(dy, wflip, np.zeros(c, dtype=dy.dtype), (qh, qw))
        if dx.shape != tuple(xshape):
            raise ContractError(f"internal shape mismatch {dx.shape} vs {xshape}")
    return LayerGrad(dx, np.ascontiguousarray(wgrad), bgrad)


def deconv_nhwc(x, weights, bias=None):
    """Stride-2 kernel-2 transposed convolution; ``weights`` is C x O x 2 x 2."""
    c, o = weights.shape[:2]
    if x.shape[-1] != c:
        raise ContractError(f"input has {x.shape[-1]} channels but kernel expects {c}")
    n, h, w, _ = x.shape
    xmat = x.reshape(-1, c)
    wmat = weights.transpose(0, 2, 3, 1).reshape(c, 4 * o)  # columns ordered (a, b, o)
    out = (xmat @ wmat).reshape(n, h, w, 2, 2, o).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(n, 2 * h, 2 * w, o)
    if bias is not None:
        out += bias
    return out, (xmat, x.shape, weights)


def deconv_nhwc_backward(dy, cache) -> LayerGrad:
    xmat, xshape, w = cache
    c, o = w.shape[:2]
    n, h, wd, _ = xshape
    dmat = dy.reshape(n, h, 2, wd, 2, o).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * o)
    wmat = w.transpose(0, 2, 3, 1).reshape(c, 4 * o)
    dx = (dmat @ wmat.T).reshape(xshape)
    wgrad = (xmat.T @ dmat).reshape(c, 2, 2, o).transpose(0, 3, 1, 2)
    bgrad = dy.sum(axis=(0, 1, 2))
    return LayerGrad(dx, np.ascontiguousarray(wgrad), bgrad)


def maxpool_nhwc(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    # argmax returns the first maximum, i.e. the row-major-first window element
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool_nhwc_backward(dy, cache):
    idx, (n, h, w, c) = cache
    blocks = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    dx = blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(n, h, w, c)


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------- public C x H x W ops


def conv2d(x, weights, bias, padding=(0, 0)):
    """Stride-1 2-D cross-correlation with zero padding.

    ``x`` is C x H x W (or N x C x H x W), ``weights`` O x C x Kh x Kw.
    Returns ``(output, cache)``.
    """
    xb, squeeze = _as_batch(x)
    if weights.ndim != 4 or bias.shape != (weights.shape[0],):
        raise ContractError(f"bad conv parameters {weights.shape} / {bias.shape}")
    if xb.shape[1] != weights.shape[1]:
        raise ContractError(
            f"input has {xb.shape[1]} channels but kernel expects {weights.shape[1]}"
        )
    _check_finite(xb, "conv2d input")
    y, cache = conv_nhwc(to_nhwc(xb), weights, bias, _pair(padding))
    return _unbatch(to_nchw(y), squeeze), (cache, squeeze)


def conv2d_backward(dy, cache) -> LayerGrad:
    cache, squeeze = cache
    dyb = dy[None] if squeeze else dy
    g = conv_nhwc_backward(to_nhwc(dyb), cache)
    return LayerGrad(_unbatch(to_nchw(g.input_grad), squeeze), g.weight_grad, g.bias_grad)


def deconv2d(x, weights, bias=None):
    """Stride-2, kernel-2 transposed convolution.

    ``weights`` has shape ``C x O x 2 x 2``. Each input pixel writes its own
    disjoint 2x2 output block, so the output is exactly twice the input size.
    """
    xb, squeeze = _as_batch(x)
    if weights.ndim != 4 or weights.shape[2:] != (2, 2):
        raise ContractError(f"deconv kernel must be C x O x 2 x 2, got {weights.shape}")
    if xb.shape[1] != weights.shape[0]:
        raise ContractError(
            f"input has {xb.shape[1]} channels but kernel expects {weights.shape[0]}"
        )
    _check_finite(xb, "deconv2d input")
    y, cache = deconv_nhwc(to_nhwc(xb), weights, bias)
    return _unbatch(to_nchw(y), squeeze), (cache, squeeze)


def deconv2d_backward(dy, cache) -> LayerGrad:
    cache, squeeze = cache
    dyb = dy[None] if squeeze else dy
    g = deconv_nhwc_backward(to_nhwc(dyb), cache)
    return LayerGrad(_unbatch(to_nchw(g.input_grad), squeeze), g.weight_grad, g.bias_grad)


def maxpool2(x):
    """2x2 max pooling with stride 2; ties go to the row-major-first element.

    Returns ``(output, cache)``; ``maxpool2_indices(cache)`` exposes the argmax.
    """
    xb, squeeze = _as_batch(x)
    y, cache = maxpool_nhwc(to_nhwc(xb))
    return _unbatch(to_nchw(y), squeeze), (cache, squeeze)


def maxpool2_backward(dy, cache):
    cache, squeeze = cache
    dyb = dy[None] if squeeze else dy
    dx = maxpool_nhwc_backward(to_nhwc(dyb), cache)
    return _unbatch(to_nchw(dx), squeeze)


def maxpool2_indices(cache) -> np.ndarray:
    """Argmax position (0..3, row-major) of each window, shaped like the output."""
    (idx, _), squeeze = cache
    idx = idx.transpose(0, 3, 1, 2)
    return idx[0] if squeeze else idx


# ---------------------------------------------------------------- relu


def relu(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dy, mask):
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


# ---------------------------------------------------------------- resize


def _interp_axis(n_in: int, n_out: int):
    # source coordinate of output sample i is i * n_in / n_out
    src = np.arange(n_out, dtype=np.float64) * (n_in / n_out)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = np.where(i1 > i0, src - i0, 0.0)
    return i0, i1, frac


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, frac = _interp_axis(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x, target):
    """Bilinear resampling to ``target = (H_t, W_t)``.

    Output sample ``(i, j)`` reads the source at ``(i * H / H_t, j * W / W_t)``,
    so a point at ``p`` in the source lands at ``p * scale`` in the output.
    Samples past the last row/column replicate the border.
    """
    ht, wt = int(target[0]), int(target[1])
    if ht <= 0 or wt <= 0:
        raise ContractError(f"resize target must be positive, got {target}")
    h, w = x.shape[-2:]
    if (h, w) == (ht, wt):
        return x.copy()
    dtype = x.dtype
    y0, y1, fy = _interp_axis(h, ht)
    x0, x1, fx = _interp_axis(w, wt)
    fy = fy.astype(dtype)[:, None]
    fx = fx.astype(dtype)
    top = x[..., y0, :]
    rows = top + fy * (x[..., y1, :] - top)
    left = rows[..., x0]
    return (left + fx * (rows[..., x1] - left)).astype(dtype, copy=False)


def bilinear_resize_backward(dy, in_hw):
    h, w = in_hw
    ht, wt = dy.shape[-2:]
    if (h, w) == (ht, wt):
        return dy.copy()
    rh = _interp_matrix(h, ht).astype(dy.dtype)
    rw = _interp_matrix(w, wt).astype(dy.dtype)
    return rh.T @ dy @ rw


# ---------------------------------------------------------------- optimizer


def sgd_step(weights, grads, momentum_buf, lr, momentum, weight_decay):
    """One SGD-momentum update.

    ``v <- momentum * v - lr * (g + weight_decay * w)``; ``w <- w + v``.
    Returns the new ``(weights, momentum_buf)``.
    """
    if not (weights.shape == grads.shape == momentum_buf.shape):
        raise ContractError(
            f"sgd_step shape mismatch {weights.shape} / {grads.shape} / {momentum_buf.shape}"
        )
    dtype = weights.dtype
    v = momentum_buf * dtype.type(momentum) - dtype.type(lr) * (
        grads + dtype.type(weight_decay) * weights
    )
    return (weights + v).astype(dtype, copy=False), v.astype(dtype, copy=False)


# ---------------------------------------------------------------- gradient oracle


def finite_diff_check(
    func: Callable[..., tuple[np.ndarray, Callable[[np.ndarray], Sequence[np.ndarray]]]],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``func(*inputs)`` must return ``(output, backward)`` where
    ``backward(upstream)`` yields one gradient per input. The scalar probed is
    ``sum(output * R)`` for a fixed random ``R``; a scalar output is used as is.
    All inputs must be float64.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out, backward = func(*inputs)
    out = np.asarray(out)
    rng = np.random.default_rng(seed)
    proj = np.ones_like(out) if out.ndim == 0 else rng.standard_normal(out.shape)
    analytic = [np.asarray(g, dtype=np.float64) for g in backward(proj)]

    def scalar() -> float:
        return float(np.sum(np.asarray(func(*inputs)[0]) * proj))

    worst = 0.0
    for arr, grad in zip(inputs, analytic):
        if grad.shape != arr.shape:
            raise ContractError(f"gradient shape {grad.shape} != input shape {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar()
            flat[i] = orig - eps
            fm = scalar()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst

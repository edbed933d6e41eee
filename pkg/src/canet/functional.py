"""Differentiable layers for NCHW tensors.

Convolutions run channels-last internally: an im2col patch matrix with the
channel axis innermost feeds one BLAS matmul per call.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autograd import Tensor, as_tensor, make, branch, reshape

BN_EPS = 1e-5


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects an NCHW tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of a padded NHWC array: rows (n, i, j), columns (kh, kw, c)."""
    n, _, _, c = xp.shape
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n * ho * wo, c)
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, kh, kw, c), (s0, s1 * stride, s2 * stride, s1, s2, s3),
                      writeable=False)
    return np.ascontiguousarray(view).reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns back into an NHWC array."""
    n, hp, wp, c = shape
    if kh == kw == 1 and stride == 1:
        return cols.reshape(shape)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    if stride == kh == kw and hp == ho * kh and wp == wo * kw:
        # non-overlapping patches tile the output exactly
        return cols.transpose(0, 1, 3, 2, 4, 5).reshape(shape)
    out = np.zeros(shape, dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, a:a + stride * ho:stride, b:b + stride * wo:stride, :] += cols[:, :, :, a, b, :]
    return out


def _to_nhwc(a: np.ndarray, pad: int = 0) -> np.ndarray:
    n, c, h, w = a.shape
    if not pad:
        return np.ascontiguousarray(a.transpose(0, 2, 3, 1))
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=a.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = a.transpose(0, 2, 3, 1)
    return out


def _to_nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def _conv_geometry(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, pad: int):
    _check_4d(x, "conv2d")
    if weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    h, w = x.shape[2:]
    o, _, kh, kw = weight.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {weight.shape} does not fit input {x.shape} with pad {pad}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    return ho, wo


class _ConvCore:
    """Channels-last matmul form of a convolution, shared by :func:`conv2d` and :func:`conv_bn_act`."""

    def __init__(self, x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, pad: int):
        self.x, self.weight, self.bias = x, weight, bias
        self.stride, self.pad = stride, pad
        self.ho, self.wo = _conv_geometry(x, weight, bias, stride, pad)
        n, c = x.shape[:2]
        o, _, kh, kw = weight.shape
        self.xp = _to_nhwc(x.data, pad)
        self.cols = _im2col(self.xp, kh, kw, stride, self.ho, self.wo)
        self.wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)

    def forward(self) -> np.ndarray:
        """Output as a (N*Ho*Wo, O) matrix."""
        out = self.cols @ self.wmat
        if self.bias is not None:
            out += self.bias.data
        return out

    def nchw(self, out2: np.ndarray) -> np.ndarray:
        return _to_nchw(out2.reshape(self.x.shape[0], self.ho, self.wo, -1))

    def backward(self, g2: np.ndarray):
        """Gradients for (x, weight, bias) from the output gradient in (N*Ho*Wo, O) form."""
        x, weight, bias = self.x, self.weight, self.bias
        n, c, h, w = x.shape
        o, _, kh, kw = weight.shape
        pad, stride, ho, wo = self.pad, self.stride, self.ho, self.wo
        gw = None
        if weight.requires_grad:
            gw = (self.cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad and stride == 1 and kh == kw and 2 * pad == kh - 1:
            # d/dx of a "same" stride-1 conv is a conv of g with the flipped kernel
            gp = np.zeros((n, h + 2 * pad, w + 2 * pad, o), dtype=g2.dtype)
            gp[:, pad:pad + h, pad:pad + w, :] = g2.reshape(n, h, w, o)
            flipped = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            gx = _to_nchw((_im2col(gp, kh, kw, 1, h, w) @ flipped).reshape(n, h, w, c))
        elif x.requires_grad:
            gx = _col2im(g2 @ self.wmat.T, self.xp.shape, kh, kw, stride, ho, wo)
            gx = _to_nchw(gx[:, pad:pad + h, pad:pad + w, :])
        gb = _colsum(g2) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    @property
    def parents(self) -> tuple[Tensor, ...]:
        return (self.x, self.weight) if self.bias is None else (self.x, self.weight, self.bias)


def _nhwc_rows(g: np.ndarray) -> np.ndarray:
    n, o, h, w = g.shape
    return g.transpose(0, 2, 3, 1).reshape(n * h * w, o)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation with OIHW weights and zero padding."""
    core = _ConvCore(x, weight, bias, stride, pad)
    out = core.nchw(core.forward())

    def fn(g):
        gx, gw, gb = core.backward(_nhwc_rows(g))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make(out, core.parents, fn)


def conv_bn_act(x: Tensor, weight: Tensor, bias: Tensor | None, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray, training: bool, stride: int = 1,
                slope: float = 0.2, momentum: float = 0.1) -> Tensor:
    """Fused same-padded conv -> batch_norm -> leaky_relu.

    Numerically the composition of :func:`conv2d`, :func:`batch_norm` and
    :func:`leaky_relu`, but the intermediate maps stay in channels-last
    matrix form, which avoids two layout round trips per layer.
    """
    o = weight.shape[0]
    if gamma.shape != (o,) or beta.shape != (o,):
        raise ValueError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} vs {o} channels")
    core = _ConvCore(x, weight, bias, stride, weight.shape[2] // 2)
    z = core.forward()
    dtype = z.dtype
    rows = z.shape[0]
    if training:
        mu = _colsum(z) / rows
        z -= mu
        var = _colsum(z * z) / rows
        _update_running(running_mean, running_var, mu, var, rows, momentum)
    else:
        mu, var = running_mean, running_var
        z -= mu.astype(dtype)
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(dtype)
    xhat = z
    xhat *= inv_std
    y = xhat * gamma.data + beta.data
    sel = branch(lambda: y >= 0)
    if sel is None:
        out = np.maximum(y, y * slope) if slope else np.maximum(y, 0)
        factor = _leaky_factor(y >= 0, slope, dtype)
    else:
        factor = _leaky_factor(sel, slope, dtype)
        out = y * factor
    del y

    def fn(g):
        gy = _nhwc_rows(g) * factor
        gg = _colsum(gy * xhat) if gamma.requires_grad else None
        gb = _colsum(gy) if beta.requires_grad else None
        gz = gy * gamma.data
        if training:
            gz -= _colsum(gz) / rows
            gz -= xhat * (_colsum(gz * xhat) / rows)
        gz *= inv_std
        return (*core.backward(gz), gg, gb)

    parents = (x, weight, bias if bias is not None else Tensor(np.zeros(o, dtype)), gamma, beta)
    return make(core.nchw(out), parents, fn)


def _colsum(a: np.ndarray) -> np.ndarray:
    # a BLAS matrix-vector product is far faster than a strided axis-0 reduction on narrow matrices
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _leaky_factor(positive: np.ndarray, slope: float, dtype) -> np.ndarray:
    """Per-element derivative of leaky_relu: exactly 1 or exactly ``slope``."""
    return np.maximum(positive.astype(dtype), slope)


def _update_running(running_mean, running_var, mu, var, count: int, momentum: float) -> None:
    unbiased = var * (count / (count - 1)) if count > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Transposed convolution with IOHW weights (the adjoint of conv2d)."""
    _check_4d(x, "conv_transpose2d")
    if weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv_transpose2d needs stride >= 1, got {stride}")
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv_transpose2d bias shape {bias.shape} does not match weight {weight.shape}")
    xf = _to_nhwc(x.data).reshape(n * h * w, c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c, kh * kw * o)
    out = _col2im(xf @ wmat, (n, ho, wo, o), kh, kw, stride, h, w)
    if bias is not None:
        out += bias.data
    out = _to_nchw(out)

    def fn(g):
        gcols = _im2col(_to_nhwc(g), kh, kw, stride, h, w)
        gx = _to_nchw((gcols @ wmat.T).reshape(n, h, w, c)) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (xf.T @ gcols).reshape(c, kh, kw, o).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the running buffers are updated in place (unbiased
    variance, exponential moving average).
    """
    _check_4d(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    shape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        _update_running(running_mean, running_var, mu, var, x.data.size // c, momentum)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype).reshape(shape)
    xhat = (x.data - mu.astype(x.dtype).reshape(shape)) * inv_std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                gx = inv_std * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = gxhat * inv_std
        return gx, gg, gb

    return make(out, (x, gamma, beta), fn)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    sel = branch(lambda: x.data >= 0)
    if sel is None:
        out = np.maximum(x.data, x.data * slope) if slope else np.maximum(x.data, 0)
    else:
        out = x.data * _leaky_factor(sel, slope, x.dtype)

    def fn(g):
        return (g * _leaky_factor(x.data >= 0 if sel is None else sel, slope, x.dtype),)

    return make(out, (x,), fn)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity (the same tensor) in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize, half-pixel centres (align_corners=False) with edge clamping."""
    _check_4d(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    rh = _resize_matrix(h, out_h, x.dtype)
    rw = _resize_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return make(out, (x,), lambda g: (np.matmul(np.matmul(rh.T, g), rw),))


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties go to the first element in scan order."""
    _check_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d: spatial size {h}x{w} is not divisible by {k}")
    win = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // k, w // k, k * k)
    idx = win.argmax(axis=-1)
    replayed = branch(lambda: idx)
    if replayed is not None:
        idx = replayed
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(x.shape),)

    return make(out, (x,), fn)


def concat_channels(inputs: list[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs:
        _check_4d(t, "concat_channels")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels spatial mismatch: {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]
    out = np.concatenate([t.data for t in inputs], axis=1)
    return make(out, tuple(inputs), lambda g: tuple(np.split(g, splits, axis=1)))


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(x: Tensor, size: int = 5, sigma: float = 1.5) -> Tensor:
    """Per-channel Gaussian blur with a normalised kernel and zero padding."""
    _check_4d(x, "gaussian_blur")
    n, c, h, w = x.shape
    kernel = Tensor(gaussian_kernel(size, sigma).astype(x.dtype)[None, None])
    flat = reshape(x, (n * c, 1, h, w)) if c != 1 else x
    out = conv2d(flat, kernel, None, stride=1, pad=size // 2)
    return reshape(out, x.shape) if c != 1 else out


def kaiming_normal(shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


__all__ = [
    "as_tensor", "batch_norm", "bilinear_resize", "concat_channels", "conv2d",
    "conv_transpose2d", "dropout", "gaussian_blur", "gaussian_kernel", "global_avg_pool",
    "kaiming_normal", "leaky_relu", "max_pool2d", "relu", "sigmoid",
]

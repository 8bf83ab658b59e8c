"""Layer forward/backward primitives.

Activations are NHWC arrays. Every ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward`` takes ``(dout, cache)``.

Conv weights are stored as ``(out_ch, in_ch, kh, kw)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    n, h, w, c = x.shape
    out = np.full((n, h + 2 * pad, w + 2 * pad, c), value, dtype=x.dtype)
    out[:, pad:-pad, pad:-pad, :] = x
    return out


def _windows(xp, kh, kw, stride, ho, wo):
    # (N, Ho, Wo, C, kh, kw) view
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    # columns ordered (kh, kw, C)
    n, _, _, c = xp.shape
    win = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(n * ho * wo, kh * kw * c)


def conv_forward(x, w, stride=1, pad=0):
    n, h, wd, c = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv expects {ci} input channels, got {c}")
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    xp = _pad(x, pad)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    return out, (xp.shape, cols, w, stride, pad)


def conv_backward(dout, cache):
    xp_shape, cols, w, stride, pad = cache
    n, ho, wo, o = dout.shape
    _, ci, kh, kw = w.shape
    d2 = dout.reshape(-1, o)
    dw = (cols.T @ d2).T.reshape(o, kh, kw, ci).transpose(0, 3, 1, 2)
    dcols = (d2 @ w.transpose(0, 2, 3, 1).reshape(o, -1)).reshape(n, ho, wo, kh, kw, ci)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp, np.ascontiguousarray(dw)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel batch normalization over the N, H, W axes.

    In train mode the running statistics are updated in place (unbiased
    variance, PyTorch convention) unless ``update_stats`` is false.
    """
    if train:
        axes = tuple(range(x.ndim - 1))
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if update_stats:
            m = x.size // x.shape[-1]
            unbiased = var * m / max(m - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        return xhat * gamma + beta, (xhat, inv, gamma)
    scale = gamma / np.sqrt(running_var + eps)
    out = x * scale
    out += beta - running_mean * scale
    return out, None


def batchnorm_backward(dout, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    m = dout.size // dout.shape[-1]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x, k=3, stride=2, pad=1):
    n, h, w, c = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    xp = _pad(x, pad, -np.inf)
    win = _windows(xp, k, k, stride, ho, wo).reshape(n, ho, wo, c, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (xp.shape, arg, k, stride, pad)


def maxpool_backward(dout, cache):
    xp_shape, arg, k, stride, pad = cache
    n, ho, wo, c = dout.shape
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    di, dj = np.divmod(arg, k)
    nn, hh, ww, cc = np.indices((n, ho, wo, c), sparse=True)
    np.add.at(dxp, (nn, hh * stride + di, ww * stride + dj, cc), dout)
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, shape):
    n, h, w, c = shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), shape).copy()


def linear_forward(x, w, b):
    """``w`` is ``(out, in)``."""
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n

"""Batched layer primitives (NCHW) with explicit backward passes."""
import numpy as np

from .. import _kernels


def _im2col3(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + h, kj:kj + w]
    return cols.reshape(n, c * 9, h * w)


def conv3x3(x, w, b):
    """Zero-padded 'same' 3x3 cross-correlation. x: (N,C,H,W), w: (O,C,3,3)."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    out = np.matmul(w.reshape(o, c * 9), _im2col3(x))
    out += b[None, :, None]
    return out.reshape(n, o, h, wd)


def conv3x3_backward(dout, x, w):
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col3(x)
    d2 = dout.reshape(n, o, h * wd)
    # batched matmul then reduce; tensordot over (0, 2) forces a large transpose copy
    dw = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, c * 9).T, d2)
    return _kernels.col2im3(dcols, (n, c, h, wd)), dw, db


def conv1x1(x, w, b):
    """x: (N,C,H,W), w: (O,C)."""
    return np.einsum("oc,nchw->nohw", w, x) + b[None, :, None, None]


def conv1x1_backward(dout, x, w):
    dw = np.einsum("nohw,nchw->oc", dout, x)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.einsum("oc,nohw->nchw", w, dout)
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def maxpool2(x):
    """2x2 max pooling; returns output and the argmax cache (first max wins)."""
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dout, idx):
    n, c, h2, w2 = dout.shape
    dxr = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    return dxr.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dout):
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def avgpool(x, s):
    """Mean over s x s blocks of the last two axes."""
    *lead, h, w = x.shape
    return x.reshape(*lead, h // s, s, w // s, s).mean(axis=(-3, -1))


def avgpool_backward(dout, s):
    return dout.repeat(s, axis=-2).repeat(s, axis=-1) / (s * s)


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dprob, prob, axis=1):
    return prob * (dprob - (dprob * prob).sum(axis=axis, keepdims=True))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(x, h, c, wx, wh, b):
    """One LSTM step, gate order (input, forget, candidate, output)."""
    nh = h.shape[1]
    z = x @ wx.T + h @ wh.T + b
    i = sigmoid(z[:, :nh])
    f = sigmoid(z[:, nh:2 * nh])
    g = np.tanh(z[:, 2 * nh:3 * nh])
    o = sigmoid(z[:, 3 * nh:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def lstm_backward(dh, dc, cache, wx, wh):
    x, h, c, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di, df, dg = dc * g, dc * c, dc * i
    dc_prev = dc * f
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
    dwx = dz.T @ x
    dwh = dz.T @ h
    db = dz.sum(axis=0)
    return dz @ wx, dz @ wh, dc_prev, dwx, dwh, db

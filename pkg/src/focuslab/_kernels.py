"""Hot image kernels with a numba path and a pure-numpy fallback.

Set ``FOCUSLAB_DISABLE_NUMBA=1`` before import to force the numpy path (also
used automatically when numba is not importable). Both paths use edge
replication at the borders and produce results equal to within rounding.
"""
import os

import numpy as np

_DISABLE = os.environ.get("FOCUSLAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLE:
        raise ImportError("numba disabled by FOCUSLAB_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"

# Sobel-type stencils with the printed x weights; the y stencil is its transpose.
GX = np.array([[2.0, 0.0, -2.0], [4.0, 0.0, -4.0], [2.0, 0.0, -2.0]])
GY = GX.T.copy()


# ---------------------------------------------------------------- numpy path

def _np_separable(image, taps):
    r = taps.shape[0] // 2
    if r == 0:
        return image * taps[0]
    h, w = image.shape
    padded = np.pad(image, ((0, 0), (r, r)), mode="edge")
    tmp = np.zeros((h, w))
    for k in range(taps.shape[0]):
        tmp += taps[k] * padded[:, k:k + w]
    padded = np.pad(tmp, ((r, r), (0, 0)), mode="edge")
    out = np.zeros((h, w))
    for k in range(taps.shape[0]):
        out += taps[k] * padded[k:k + h, :]
    return out


def _np_convolve2d(image, kernel):
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    padded = np.pad(image, ((ry, ry), (rx, rx)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    # true convolution: flip the kernel
    return np.einsum("ijkl,kl->ij", windows, kernel[::-1, ::-1])


def _np_gradient_magnitude(image):
    gx = _np_convolve2d(image, GX)
    gy = _np_convolve2d(image, GY)
    return np.sqrt(gx * gx + gy * gy)


def _np_shift(image, dx, dy):
    h, w = image.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return image[rows[:, None], cols[None, :]]


def _np_col2im3(dcols, shape):
    n, c, h, w = shape
    d = dcols.reshape(n, c, 3, 3, h, w)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + h, kj:kj + w] += d[:, :, ki, kj]
    return dxp[:, :, 1:-1, 1:-1]


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_separable(image, taps):
        h, w = image.shape
        n = taps.shape[0]
        r = n // 2
        tmp = np.empty((h, w))
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for k in range(n):
                    jj = j + k - r
                    if jj < 0:
                        jj = 0
                    elif jj > w - 1:
                        jj = w - 1
                    acc += taps[k] * image[i, jj]
                tmp[i, j] = acc
        out = np.empty((h, w))
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for k in range(n):
                    ii = i + k - r
                    if ii < 0:
                        ii = 0
                    elif ii > h - 1:
                        ii = h - 1
                    acc += taps[k] * tmp[ii, j]
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _nb_convolve2d(image, kernel):
        h, w = image.shape
        kh, kw = kernel.shape
        ry, rx = kh // 2, kw // 2
        out = np.empty((h, w))
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for a in range(kh):
                    ii = i + ry - a
                    if ii < 0:
                        ii = 0
                    elif ii > h - 1:
                        ii = h - 1
                    for b in range(kw):
                        jj = j + rx - b
                        if jj < 0:
                            jj = 0
                        elif jj > w - 1:
                            jj = w - 1
                        acc += kernel[a, b] * image[ii, jj]
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _nb_gradient_magnitude(image):
        h, w = image.shape
        out = np.empty((h, w))
        for i in range(h):
            im = i - 1 if i > 0 else 0
            ip = i + 1 if i < h - 1 else h - 1
            for j in range(w):
                jm = j - 1 if j > 0 else 0
                jp = j + 1 if j < w - 1 else w - 1
                # convolution with GX / GY written out
                gx = (2.0 * (image[im, jp] - image[im, jm])
                      + 4.0 * (image[i, jp] - image[i, jm])
                      + 2.0 * (image[ip, jp] - image[ip, jm]))
                gy = (2.0 * (image[ip, jm] - image[im, jm])
                      + 4.0 * (image[ip, j] - image[im, j])
                      + 2.0 * (image[ip, jp] - image[im, jp]))
                out[i, j] = np.sqrt(gx * gx + gy * gy)
        return out

    @njit(cache=True)
    def _nb_shift(image, dx, dy):
        h, w = image.shape
        out = np.empty((h, w))
        for i in range(h):
            ii = i - dy
            if ii < 0:
                ii = 0
            elif ii > h - 1:
                ii = h - 1
            for j in range(w):
                jj = j - dx
                if jj < 0:
                    jj = 0
                elif jj > w - 1:
                    jj = w - 1
                out[i, j] = image[ii, jj]
        return out

    @njit(cache=True)
    def _nb_col2im3(dcols, n, c, h, w):
        out = np.zeros((n, c, h, w), dtype=dcols.dtype)
        for a in range(n):
            for ch in range(c):
                for ki in range(3):
                    for kj in range(3):
                        row = ch * 9 + ki * 3 + kj
                        for i in range(h):
                            ii = i + ki - 1
                            if ii < 0 or ii >= h:
                                continue
                            for j in range(w):
                                jj = j + kj - 1
                                if 0 <= jj < w:
                                    out[a, ch, ii, jj] += dcols[a, row, i * w + j]
        return out


# ---------------------------------------------------------------- dispatch

def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def separable_convolve(image, taps, backend=None):
    """Convolve with ``outer(taps, taps)``; ``taps`` must be odd-length and symmetric."""
    image, taps = _as_f64(image), _as_f64(taps)
    if (backend or BACKEND) == "numba":
        return _nb_separable(image, taps)
    return _np_separable(image, taps)


def convolve2d(image, kernel, backend=None):
    image, kernel = _as_f64(image), _as_f64(kernel)
    if (backend or BACKEND) == "numba":
        return _nb_convolve2d(image, kernel)
    return _np_convolve2d(image, kernel)


def gradient_magnitude(image, backend=None):
    """Per-pixel sqrt((GX*I)^2 + (GY*I)^2) with edge replication."""
    image = _as_f64(image)
    if (backend or BACKEND) == "numba":
        return _nb_gradient_magnitude(image)
    return _np_gradient_magnitude(image)


def shift_image(image, dx, dy, backend=None):
    """Translate by whole pixels (dx right, dy down), replicating edges."""
    image = _as_f64(image)
    dx, dy = int(round(dx)), int(round(dy))
    if dx == 0 and dy == 0:
        return image.copy()
    if (backend or BACKEND) == "numba":
        return _nb_shift(image, dx, dy)
    return _np_shift(image, dx, dy)


def col2im3(dcols, shape, backend=None):
    """Scatter-add 3x3 patch gradients (N, C*9, H*W) back to a zero-padded (N, C, H, W) input."""
    dcols = np.ascontiguousarray(dcols)
    if (backend or BACKEND) == "numba":
        n, c, h, w = shape
        return _nb_col2im3(dcols, n, c, h, w)
    return _np_col2im3(dcols, shape)


def available_backends():
    return ("numba", "numpy") if HAVE_NUMBA else ("numpy",)

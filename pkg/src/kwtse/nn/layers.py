"""Layer primitives with explicit backward passes.

Feature maps are batched ``(N, H, W, C)`` arrays: H is space, W is time.
Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes that cache.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# masked convolution
# ---------------------------------------------------------------------------

def _support(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.nonzero(mask)
    return a, b


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, mask: np.ndarray,
                 need_input_grad: bool = True):
    """Same-size masked cross-correlation.

    ``out[n, h, w, c] = bias[c] + sum_{k, (a, b) in mask} xpad[n, h+a, w+b, k] * weight[c, k, a, b]``

    Layers with few output channels use an output-side scheme (one GEMM
    against the padded input, then shifted accumulation); the rest use im2col
    over the mask support only.
    """
    n, h, w, c_in = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ValueError(f"input has {c_in} channels, layer expects {c_in_w}")
    if mask.shape != (kh, kw):
        raise ValueError(f"mask shape {mask.shape} does not match kernel {(kh, kw)}")
    ph, pw = kh // 2, kw // 2
    xp = _pad(x, ph, pw)
    a, b = _support(mask)
    s = a.size
    # (S, C_in, C_out)
    w_s = weight[:, :, a, b].transpose(2, 1, 0)
    if 4 * c_out <= c_in:
        hp, wp = h + 2 * ph, w + 2 * pw
        w_all = w_s.transpose(1, 0, 2).reshape(c_in, s * c_out)
        z = (xp.reshape(-1, c_in) @ w_all).reshape(n, hp, wp, s, c_out)
        out = np.empty((n, h, w, c_out), dtype=x.dtype)
        out[...] = bias
        for k in range(s):
            out += z[:, a[k]:a[k] + h, b[k]:b[k] + w, k, :]
        cache = ("out", xp, x.shape, weight.shape, a, b, w_s, need_input_grad)
        return out, cache
    if s == kh * kw:
        # full kernel: one strided-view copy is much faster than per-tap slicing
        view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        cols = np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3))
    else:
        cols = np.empty((n, h, w, s, c_in), dtype=x.dtype)
        for k in range(s):
            cols[:, :, :, k, :] = xp[:, a[k]:a[k] + h, b[k]:b[k] + w, :]
    cols = cols.reshape(n * h * w, s * c_in)
    out = cols @ w_s.reshape(s * c_in, c_out)
    out += bias
    cache = ("cols", cols, x.shape, weight.shape, a, b, w_s, need_input_grad)
    return out.reshape(n, h, w, c_out), cache


def conv_backward(dout: np.ndarray, cache):
    """Returns ``(dx or None, dweight, dbias)``. ``dweight`` is zero off the mask support."""
    kind, buf, x_shape, w_shape, a, b, w_s, need_dx = cache
    n, h, w, c_in = x_shape
    c_out, _, kh, kw = w_shape
    ph, pw = kh // 2, kw // 2
    s = a.size
    d2 = dout.reshape(-1, c_out)
    dbias = d2.sum(axis=0)
    dweight = np.zeros(w_shape, dtype=dout.dtype)
    dx = None
    if kind == "cols":
        cols = buf
        dws = (cols.T @ d2).reshape(s, c_in, c_out)
        dweight[:, :, a, b] = dws.transpose(2, 1, 0)
        if need_dx:
            dcols = (d2 @ w_s.reshape(s * c_in, c_out).T).reshape(n, h, w, s, c_in)
            dxp = np.zeros((n, h + 2 * ph, w + 2 * pw, c_in), dtype=dout.dtype)
            for k in range(s):
                dxp[:, a[k]:a[k] + h, b[k]:b[k] + w, :] += dcols[:, :, :, k, :]
            dx = dxp[:, ph:ph + h, pw:pw + w, :]
    else:
        xp = buf
        hp, wp = h + 2 * ph, w + 2 * pw
        g = np.zeros((n, hp, wp, s, c_out), dtype=dout.dtype)
        for k in range(s):
            g[:, a[k]:a[k] + h, b[k]:b[k] + w, k, :] = dout
        g2 = g.reshape(-1, s * c_out)
        dw_all = xp.reshape(-1, c_in).T @ g2  # (C_in, S*C_out)
        dweight[:, :, a, b] = dw_all.reshape(c_in, s, c_out).transpose(2, 0, 1)
        if need_dx:
            w_all = w_s.transpose(1, 0, 2).reshape(c_in, s * c_out)
            dxp = (g2 @ w_all.T).reshape(n, hp, wp, c_in)
            dx = dxp[:, ph:ph + h, pw:pw + w, :]
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# pointwise / resampling layers
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0)
    return out, out > 0


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout * cache


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2, ceil mode (odd sides padded with -inf)."""
    n, h, w, c = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    if (h2 * 2, w2 * 2) != (h, w):
        xp = np.full((n, h2 * 2, w2 * 2, c), -np.inf, dtype=x.dtype)
        xp[:, :h, :w, :] = x
    else:
        xp = x
    blocks = xp.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, (n, h, w, c) = cache
    h2, w2 = idx.shape[1], idx.shape[2]
    blocks = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    dxp = blocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, c)
    return dxp[:, :h, :w, :]


def upsample2_forward(x: np.ndarray):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def upsample2_backward(dout: np.ndarray, cache) -> np.ndarray:
    n, h, w, c = cache
    return dout.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


def crop_forward(x: np.ndarray, h: int, w: int):
    """Top-left ``h x w`` slice."""
    if h > x.shape[1] or w > x.shape[2]:
        raise ValueError(f"cannot crop {x.shape[1]}x{x.shape[2]} to {h}x{w}")
    return x[:, :h, :w, :], x.shape


def crop_backward(dout: np.ndarray, cache) -> np.ndarray:
    dx = np.zeros(cache, dtype=dout.dtype)
    dx[:, : dout.shape[1], : dout.shape[2], :] = dout
    return dx

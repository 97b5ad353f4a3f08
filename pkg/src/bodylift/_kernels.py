"""Fused elementwise kernels for the mixer (numba, single-threaded).

tanh stays in numpy, whose SIMD implementation is far faster than the scalar
libm call numba would emit.
"""
import numpy as np
from numba import njit

GELU_K = float(np.sqrt(2.0 / np.pi))
GELU_C = 0.044715


@njit(cache=True)
def _gelu_arg(x, out):
    xf, of = x.ravel(), out.ravel()
    for i in range(xf.size):
        v = xf[i]
        of[i] = GELU_K * (v + GELU_C * v * v * v)


@njit(cache=True)
def _gelu_out(x, th, out):
    xf, tf, of = x.ravel(), th.ravel(), out.ravel()
    for i in range(xf.size):
        of[i] = 0.5 * xf[i] * (1.0 + tf[i])


def gelu(x):
    """tanh-form GELU of a C-contiguous array; returns (activation, tanh term)."""
    x = np.ascontiguousarray(x)
    th = np.empty_like(x)
    _gelu_arg(x, th)
    np.tanh(th, out=th)
    out = np.empty_like(x)
    _gelu_out(x, th, out)
    return out, th


@njit(cache=True)
def _gelu_backward(d, x, th):
    df, xf, tf = d.ravel(), x.ravel(), th.ravel()
    for i in range(xf.size):
        v = xf[i]
        t = tf[i]
        df[i] *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)


def gelu_backward(d, x, th):
    """Multiply upstream gradient ``d`` in place by GELU'(x); returns it."""
    d = np.ascontiguousarray(d)
    _gelu_backward(d, x, th)
    return d


@njit(cache=True)
def _ln_forward(h, g, b, eps, y, xhat, rstd):
    n, c = h.shape
    for i in range(n):
        mu = 0.0
        for j in range(c):
            mu += h[i, j]
        mu /= c
        var = 0.0
        for j in range(c):
            dv = h[i, j] - mu
            var += dv * dv
        var /= c
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(c):
            xh = (h[i, j] - mu) * r
            xhat[i, j] = xh
            y[i, j] = xh * g[j] + b[j]


def layer_norm(h, g, b, eps):
    """LayerNorm over the last axis; returns (y, xhat, rstd)."""
    shape = h.shape
    h2 = np.ascontiguousarray(h).reshape(-1, shape[-1])
    y = np.empty_like(h2)
    xhat = np.empty_like(h2)
    rstd = np.empty(h2.shape[0], dtype=h2.dtype)
    _ln_forward(h2, g, b, eps, y, xhat, rstd)
    return y.reshape(shape), xhat.reshape(shape), rstd


@njit(cache=True)
def _ln_backward(dy, xhat, rstd, g, dh, dg, db):
    n, c = dy.shape
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            dx = dy[i, j] * g[j]
            m1 += dx
            m2 += dx * xhat[i, j]
            dg[j] += dy[i, j] * xhat[i, j]
            db[j] += dy[i, j]
        m1 /= c
        m2 /= c
        r = rstd[i]
        for j in range(c):
            dh[i, j] = r * (dy[i, j] * g[j] - m1 - xhat[i, j] * m2)


def layer_norm_backward(dy, xhat, rstd, g):
    """Returns (dh, dgain, dbias)."""
    shape = dy.shape
    dy2 = np.ascontiguousarray(dy).reshape(-1, shape[-1])
    xh2 = xhat.reshape(-1, shape[-1])
    dh = np.empty_like(dy2)
    # accumulate parameter grads in float64 for a deterministic, accurate sum
    dg = np.zeros(shape[-1])
    db = np.zeros(shape[-1])
    _ln_backward(dy2, xh2, rstd, g, dh, dg, db)
    return dh.reshape(shape), dg.astype(dy.dtype), db.astype(dy.dtype)

"""NumPy reference implementations of the 1-D convolution kernels.

These are the fallback backend: im2col views plus BLAS matmuls.  The
compiled backend in ``_conv.pyx`` implements the same three entry points
with identical semantics; ``revoice.kernels`` picks one at import time.

All functions work on single clips (no batch axis).  Padding is the
caller's job — these kernels only ever see the padded signal.
"""

from __future__ import annotations

import numpy as np


def _patches(x: np.ndarray, kernel_size: int, stride: int, dilation: int, t_out: int) -> np.ndarray:
    """Strided view of shape (channels, kernel_size, t_out) — no copy."""
    sc, st = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(x.shape[0], kernel_size, t_out),
        strides=(sc, st * dilation, st * stride),
        writeable=False,
    )


def conv1d_forward(x, w, stride=1, dilation=1, groups=1):
    """Cross-correlate x (c_in, T) with w (c_out, c_in/groups, k).

    Returns (c_out, t_out) with t_out = (T - dilation*(k-1) - 1)//stride + 1.
    """
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    c_in, t_in = x.shape
    c_out, cpg, k = w.shape
    t_out = (t_in - dilation * (k - 1) - 1) // stride + 1
    opg = c_out // groups
    y = np.empty((c_out, t_out), dtype=x.dtype)
    for g in range(groups):
        xg = x[g * cpg : (g + 1) * cpg]
        cols = _patches(xg, k, stride, dilation, t_out).reshape(cpg * k, t_out)
        wg = w[g * opg : (g + 1) * opg].reshape(opg, cpg * k)
        y[g * opg : (g + 1) * opg] = wg @ cols
    return y


def conv1d_grad_input(gy, w, stride, dilation, groups, input_length):
    """Adjoint of conv1d_forward with respect to the input signal."""
    gy = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(w)
    c_out, t_out = gy.shape
    _, cpg, k = w.shape
    c_in = cpg * groups
    opg = c_out // groups
    gx = np.zeros((c_in, input_length), dtype=gy.dtype)
    for g in range(groups):
        gyg = gy[g * opg : (g + 1) * opg]
        wg = w[g * opg : (g + 1) * opg]
        dst = gx[g * cpg : (g + 1) * cpg]
        for j in range(k):
            # every output tap t pulled from input position t*stride + j*dilation
            contrib = wg[:, :, j].T @ gyg
            lo = j * dilation
            dst[:, lo : lo + (t_out - 1) * stride + 1 : stride] += contrib
    return gx


def conv1d_grad_weight(x, gy, stride, dilation, groups, kernel_size):
    """Adjoint of conv1d_forward with respect to the weight."""
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    c_in, _ = x.shape
    c_out, t_out = gy.shape
    cpg = c_in // groups
    opg = c_out // groups
    gw = np.empty((c_out, cpg, kernel_size), dtype=x.dtype)
    for g in range(groups):
        xg = x[g * cpg : (g + 1) * cpg]
        cols = _patches(xg, kernel_size, stride, dilation, t_out)
        gyg = gy[g * opg : (g + 1) * opg]
        gw[g * opg : (g + 1) * opg] = np.tensordot(gyg, cols, axes=([1], [2]))
    return gw

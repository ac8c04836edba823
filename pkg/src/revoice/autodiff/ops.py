"""Differentiable operations.

Every function takes/returns ``Tensor`` and records a backward closure
on the active tape.  Gradients for inputs that cannot receive one
(constants, frozen parameters) are neither computed nor stored.

Convolutions dispatch to ``revoice.kernels`` (compiled or NumPy backend);
everything else is plain NumPy.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from .. import kernels
from .tensor import Tensor, active_tape, astensor

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _pair(a, b):
    """Coerce a binary-op operand pair; bare Python/NumPy scalars adopt
    the other side's dtype so float32 graphs stay float32."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return astensor(a), astensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes that broadcasting expanded, back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)
    tape = active_tape()
    if tape is not None and (tape.needs(a) or tape.needs(b)):
        na, nb = tape.needs(a), tape.needs(b)

        def bw(g):
            return (
                _unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(g, b.data.shape) if nb else None,
            )

        tape.record(out, (a, b), bw)
    return out


def sub(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)
    tape = active_tape()
    if tape is not None and (tape.needs(a) or tape.needs(b)):
        na, nb = tape.needs(a), tape.needs(b)

        def bw(g):
            return (
                _unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(-g, b.data.shape) if nb else None,
            )

        tape.record(out, (a, b), bw)
    return out


def mul(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)
    tape = active_tape()
    if tape is not None and (tape.needs(a) or tape.needs(b)):
        na, nb = tape.needs(a), tape.needs(b)
        ad, bd = a.data, b.data

        def bw(g):
            return (
                _unbroadcast(g * bd, ad.shape) if na else None,
                _unbroadcast(g * ad, bd.shape) if nb else None,
            )

        tape.record(out, (a, b), bw)
    return out


def div(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data)
    tape = active_tape()
    if tape is not None and (tape.needs(a) or tape.needs(b)):
        na, nb = tape.needs(a), tape.needs(b)
        ad, bd, od = a.data, b.data, out.data

        def bw(g):
            return (
                _unbroadcast(g / bd, ad.shape) if na else None,
                _unbroadcast(-g * od / bd, bd.shape) if nb else None,
            )

        tape.record(out, (a, b), bw)
    return out


def neg(a):
    a = astensor(a)
    out = Tensor(-a.data)
    tape = active_tape()
    if tape is not None and tape.needs(a):
        tape.record(out, (a,), lambda g: (-g,))
    return out


# ----------------------------------------------------------------------
# elementwise nonlinear
# ----------------------------------------------------------------------

def exp(a):
    a = astensor(a)
    out = Tensor(np.exp(a.data))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        od = out.data
        tape.record(out, (a,), lambda g: (g * od,))
    return out


def log(a):
    a = astensor(a)
    out = Tensor(np.log(a.data))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        ad = a.data
        tape.record(out, (a,), lambda g: (g / ad,))
    return out


def sqrt(a, grad_eps: float = 1e-12):
    """Exact forward; backward divides by max(2*sqrt(x), eps).

    The clamp keeps magnitude-style losses finite at exact zeros (the
    forward value is untouched, so a zero input still maps to zero).
    """
    a = astensor(a)
    out = Tensor(np.sqrt(a.data))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        denom = np.maximum(2.0 * out.data, grad_eps)
        tape.record(out, (a,), lambda g: (g / denom,))
    return out


def square(a):
    a = astensor(a)
    out = Tensor(a.data * a.data)
    tape = active_tape()
    if tape is not None and tape.needs(a):
        ad = a.data
        tape.record(out, (a,), lambda g: (2.0 * g * ad,))
    return out


def abs_(a):
    a = astensor(a)
    out = Tensor(np.abs(a.data))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        sign = np.sign(a.data)
        tape.record(out, (a,), lambda g: (g * sign,))
    return out


def maximum(a, const: float):
    """Elementwise max with a scalar constant (log-floor clamping)."""
    a = astensor(a)
    out = Tensor(np.maximum(a.data, const))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        mask = (a.data > const).astype(a.data.dtype)
        tape.record(out, (a,), lambda g: (g * mask,))
    return out


def tanh(a):
    a = astensor(a)
    out = Tensor(np.tanh(a.data))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        od = out.data
        tape.record(out, (a,), lambda g: (g * (1.0 - od * od),))
    return out


def sigmoid(a):
    a = astensor(a)
    out = Tensor(expit(a.data))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        od = out.data
        tape.record(out, (a,), lambda g: (g * od * (1.0 - od),))
    return out


def gelu(a):
    """Gaussian error linear unit, exact erf form: x * Phi(x)."""
    a = astensor(a)
    ad = a.data
    phi = 0.5 * (1.0 + erf(ad / _SQRT2))
    out = Tensor(ad * phi)
    tape = active_tape()
    if tape is not None and tape.needs(a):
        dens = _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)
        local = phi + ad * dens

        def bw(g):
            return (g * local.astype(ad.dtype, copy=False),)

        tape.record(out, (a,), bw)
    return out


def leaky_relu(a, negative_slope: float = 0.2):
    a = astensor(a)
    ad = a.data
    out = Tensor(np.where(ad >= 0, ad, negative_slope * ad))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        slope = np.where(ad >= 0, 1.0, negative_slope).astype(ad.dtype)
        tape.record(out, (a,), lambda g: (g * slope,))
    return out


def log_sigmoid(a):
    """Numerically stable log(sigmoid(x)); the adversarial-loss atom."""
    a = astensor(a)
    ad = a.data
    out = Tensor(np.where(ad >= 0, -np.log1p(np.exp(-np.abs(ad))),
                          ad - np.log1p(np.exp(-np.abs(ad)))))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        local = expit(-ad)  # 1 - sigmoid(x)
        tape.record(out, (a,), lambda g: (g * local,))
    return out


def logsumexp(a):
    """log(sum(exp(x))) over all elements -> scalar; grad is softmax(x)."""
    a = astensor(a)
    ad = a.data
    m = np.max(ad)
    out = Tensor(np.asarray(np.log(np.sum(np.exp(ad - m))) + m, dtype=ad.dtype))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        soft = np.exp(ad - m)
        soft = soft / soft.sum()

        def bw(g):
            return (g * soft,)

        tape.record(out, (a,), bw)
    return out


_ACTIVATIONS = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "leaky_relu": leaky_relu,
    "gated_tanh": None,  # filled in below
}


def gated_tanh(a):
    """Split channels [a; b] in half: tanh(a) * sigmoid(b)."""
    a = astensor(a)
    c = a.shape[0]
    if c % 2:
        raise ValueError(f"gated_tanh needs an even channel count, got {c}")
    half = c // 2
    return mul(tanh(slice_(a, np.s_[:half])), sigmoid(slice_(a, np.s_[half:])))


_ACTIVATIONS["gated_tanh"] = gated_tanh


def activation(a, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; options: {sorted(_ACTIVATIONS)}")
    return fn(a)


# ----------------------------------------------------------------------
# reductions and shape
# ----------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = astensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        shape = a.data.shape

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, shape),)
            gk = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gk, shape),)

        tape.record(out, (a,), bw)
    return out


def mean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = astensor(a)
    out = Tensor(a.data.reshape(shape))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        orig = a.data.shape
        tape.record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def slice_(a, key):
    """Basic (view) slicing; backward scatters into a zero tensor."""
    a = astensor(a)
    out = Tensor(a.data[key])
    tape = active_tape()
    if tape is not None and tape.needs(a):
        shape, dtype = a.data.shape, a.data.dtype

        def bw(g):
            gx = np.zeros(shape, dtype)
            gx[key] = g
            return (gx,)

        tape.record(out, (a,), bw)
    return out


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = active_tape()
    if tape is not None and any(tape.needs(t) for t in tensors):
        needs = [tape.needs(t) for t in tensors]
        splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

        def bw(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple(p if n else None for p, n in zip(pieces, needs))

        tape.record(out, tuple(tensors), bw)
    return out


# ----------------------------------------------------------------------
# padding / framing
# ----------------------------------------------------------------------

def _reflect_index(length: int, left: int, right: int) -> np.ndarray:
    """Source index for each padded position; handles pad >= length by
    reflecting repeatedly (mirror style, edge sample not duplicated)."""
    if length == 1:
        return np.zeros(left + 1 + right, dtype=np.intp)
    pos = np.arange(-left, length + right)
    period = 2 * (length - 1)
    m = np.mod(pos, period)
    return np.where(m < length, m, period - m).astype(np.intp)


def pad1d(a, left: int, right: int, mode: str = "zero"):
    """Pad the last axis. mode 'zero' or 'reflect'."""
    a = astensor(a)
    if left < 0 or right < 0:
        raise ValueError("pad widths must be >= 0")
    if left == 0 and right == 0:
        return a
    length = a.data.shape[-1]
    tape = active_tape()

    if mode == "zero":
        width = [(0, 0)] * (a.data.ndim - 1) + [(left, right)]
        out = Tensor(np.pad(a.data, width))
        if tape is not None and tape.needs(a):
            def bw(g):
                return (g[..., left:left + length],)

            tape.record(out, (a,), bw)
        return out

    if mode == "reflect":
        idx = _reflect_index(length, left, right)
        out = Tensor(np.ascontiguousarray(a.data[..., idx]))
        if tape is not None and tape.needs(a):
            lidx, ridx = idx[:left], idx[left + length:]

            def bw(g):
                gx = np.ascontiguousarray(g[..., left:left + length])
                if left:
                    np.add.at(gx.T, lidx, g[..., :left].T)
                if right:
                    np.add.at(gx.T, ridx, g[..., left + length:].T)
                return (gx,)

            tape.record(out, (a,), bw)
        return out

    raise ValueError(f"unknown pad mode {mode!r}")


def frame(a, frame_length: int, hop: int):
    """Column-major framing of a 1-D signal: (T,) -> (frame_length, n_frames).

    Column m is a[m*hop : m*hop + frame_length].
    """
    a = astensor(a)
    if a.ndim != 1:
        raise ValueError(f"frame expects a 1-D signal, got shape {a.shape}")
    t = a.data.shape[0]
    if t < frame_length:
        raise ValueError(f"signal length {t} shorter than frame {frame_length}")
    n = (t - frame_length) // hop + 1
    st = a.data.strides[0]
    view = np.lib.stride_tricks.as_strided(
        a.data, shape=(frame_length, n), strides=(st, hop * st), writeable=False
    )
    out = Tensor(np.ascontiguousarray(view))
    tape = active_tape()
    if tape is not None and tape.needs(a):
        def bw(g):
            gx = np.zeros(t, dtype=g.dtype)
            for m in range(n):
                gx[m * hop : m * hop + frame_length] += g[:, m]
            return (gx,)

        tape.record(out, (a,), bw)
    return out


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a, b):
    """a @ b for 2-D a with 2-D or 1-D b."""
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data @ b.data)
    tape = active_tape()
    if tape is not None and (tape.needs(a) or tape.needs(b)):
        na, nb = tape.needs(a), tape.needs(b)
        ad, bd = a.data, b.data

        def bw(g):
            if bd.ndim == 1:
                ga = np.outer(g, bd) if na else None
                gb = ad.T @ g if nb else None
            else:
                ga = g @ bd.T if na else None
                gb = ad.T @ g if nb else None
            return (ga, gb)

        tape.record(out, (a, b), bw)
    return out


def conv1d(x, w, stride: int = 1, dilation: int = 1, groups: int = 1):
    """Cross-correlation of x (c_in, T) with w (c_out, c_in/groups, k).

    No implicit padding — compose with pad1d.  Output length is
    (T - dilation*(k-1) - 1)//stride + 1.
    """
    x, w = astensor(x), astensor(w)
    out = Tensor(kernels.conv1d_forward(x.data, w.data, stride, dilation, groups))
    tape = active_tape()
    if tape is not None and (tape.needs(x) or tape.needs(w)):
        nx, nw = tape.needs(x), tape.needs(w)
        xd, wd = x.data, w.data
        t_in, k = xd.shape[1], wd.shape[2]

        def bw(g):
            g = np.ascontiguousarray(g)
            gx = kernels.conv1d_grad_input(g, wd, stride, dilation, groups, t_in) if nx else None
            gw = kernels.conv1d_grad_weight(xd, g, stride, dilation, groups, k) if nw else None
            return (gx, gw)

        tape.record(out, (x, w), bw)
    return out


def conv_transpose1d(x, w, stride: int = 1):
    """Transposed convolution of x (c_in, T) with w (c_in, c_out, k).

    Output length (T-1)*stride + k (padding is cropped by the caller).
    Forward/backward reuse the conv kernels through the adjoint
    relationship: this op *is* conv1d_grad_input run forwards.
    """
    x, w = astensor(x), astensor(w)
    xd, wd = x.data, w.data
    if xd.shape[0] != wd.shape[0]:
        raise ValueError(
            f"conv_transpose1d weight expects {wd.shape[0]} input channels, got {xd.shape[0]}"
        )
    t_in, k = xd.shape[1], wd.shape[2]
    t_out = (t_in - 1) * stride + k
    out = Tensor(kernels.conv1d_grad_input(xd, wd, stride, 1, 1, t_out))
    tape = active_tape()
    if tape is not None and (tape.needs(x) or tape.needs(w)):
        nx, nw = tape.needs(x), tape.needs(w)

        def bw(g):
            g = np.ascontiguousarray(g)
            gx = kernels.conv1d_forward(g, wd, stride, 1, 1) if nx else None
            gw = kernels.conv1d_grad_weight(g, xd, stride, 1, 1, k) if nw else None
            return (gx, gw)

        tape.record(out, (x, w), bw)
    return out


_POOL_WEIGHTS: dict = {}


def avg_pool1d(x, kernel_size: int, stride: int):
    """Non-padded average pooling over the last axis of (C, T)."""
    x = astensor(x)
    c, t = x.data.shape
    if t < kernel_size:
        raise ValueError(f"avg_pool1d: length {t} shorter than kernel {kernel_size}")
    key = (c, kernel_size, x.data.dtype.str)
    wd = _POOL_WEIGHTS.get(key)
    if wd is None:
        wd = np.full((c, 1, kernel_size), 1.0 / kernel_size, dtype=x.data.dtype)
        _POOL_WEIGHTS[key] = wd
    out = Tensor(kernels.conv1d_forward(x.data, wd, stride, 1, c))
    tape = active_tape()
    if tape is not None and tape.needs(x):
        def bw(g):
            return (kernels.conv1d_grad_input(np.ascontiguousarray(g), wd, stride, 1, c, t),)

        tape.record(out, (x,), bw)
    return out

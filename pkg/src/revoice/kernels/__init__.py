"""Convolution kernel backend selection.

Two interchangeable backends implement the same three primitives:

* ``_conv`` — Cython + OpenMP, built at install time (hot path)
* ``_ref``  — pure NumPy (im2col + BLAS), always available

The compiled one is preferred when importable.  Set ``REVOICE_KERNELS``
to ``compiled``, ``numpy``, or ``auto`` (default) to override; asking
for ``compiled`` when the extension is missing is an error rather than
a silent slowdown.

Every other module calls convolutions through the wrappers below, which
validate geometry and normalise dtype/contiguity before dispatching.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _ref

_choice = os.environ.get("REVOICE_KERNELS", "auto")
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(
        f"REVOICE_KERNELS must be 'auto', 'compiled' or 'numpy', got {_choice!r}"
    )

_compiled = None
if _choice in ("auto", "compiled"):
    try:
        from . import _conv as _compiled
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "REVOICE_KERNELS=compiled but the compiled extension is not "
                "built; reinstall the package or use REVOICE_KERNELS=numpy"
            )

_impl = _compiled if _compiled is not None else _ref

#: Name of the backend actually in use ("compiled" or "numpy").
BACKEND = "compiled" if _compiled is not None else "numpy"


def available_backends() -> dict:
    """Importable backend modules keyed by name (for tests and benchmarks)."""
    out = {"numpy": _ref}
    try:
        from . import _conv

        out["compiled"] = _conv
    except ImportError:
        pass
    return out


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route all kernel dispatch to the named backend."""
    global _impl, BACKEND
    backends = available_backends()
    if name not in backends:
        raise ValueError(
            f"backend {name!r} not available; have {sorted(backends)}")
    prev = _impl, BACKEND
    _impl, BACKEND = backends[name], name
    try:
        yield
    finally:
        _impl, BACKEND = prev


def _prep(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if not a.flags.writeable:  # typed memoryviews reject read-only buffers
        a = a.copy()
    if a.dtype not in (np.float32, np.float64):
        raise TypeError(f"kernels support float32/float64, got {a.dtype}")
    return a


def conv_output_length(t_in: int, kernel_size: int, stride: int, dilation: int) -> int:
    return (t_in - dilation * (kernel_size - 1) - 1) // stride + 1


def _check_geometry(c_in, t_in, w_shape, stride, dilation, groups):
    c_out, cpg, k = w_shape
    if stride < 1 or dilation < 1 or groups < 1:
        raise ValueError("stride, dilation and groups must be >= 1")
    if c_in % groups or c_out % groups:
        raise ValueError(
            f"groups={groups} must divide both c_in={c_in} and c_out={c_out}"
        )
    if cpg != c_in // groups:
        raise ValueError(
            f"weight expects {cpg} input channels per group, signal has {c_in // groups}"
        )
    t_out = conv_output_length(t_in, k, stride, dilation)
    if t_out < 1:
        raise ValueError(
            f"input length {t_in} too short for kernel {k} (dilation {dilation})"
        )
    return t_out


def conv1d_forward(x, w, stride=1, dilation=1, groups=1, backend=None):
    x, w = _prep(x), _prep(w)
    if x.dtype != w.dtype:
        raise TypeError(f"dtype mismatch: x {x.dtype} vs w {w.dtype}")
    _check_geometry(x.shape[0], x.shape[1], w.shape, stride, dilation, groups)
    impl = available_backends()[backend] if backend else _impl
    return impl.conv1d_forward(x, w, stride, dilation, groups)


def conv1d_grad_input(gy, w, stride, dilation, groups, input_length, backend=None):
    gy, w = _prep(gy), _prep(w)
    impl = available_backends()[backend] if backend else _impl
    return impl.conv1d_grad_input(gy, w, stride, dilation, groups, input_length)


def conv1d_grad_weight(x, gy, stride, dilation, groups, kernel_size, backend=None):
    x, gy = _prep(x), _prep(gy)
    impl = available_backends()[backend] if backend else _impl
    return impl.conv1d_grad_weight(x, gy, stride, dilation, groups, kernel_size)

"""Reverse-mode automatic differentiation on NumPy arrays.

A ``Tape`` records operations in execution order while it is active;
``Tape.backward`` replays them in reverse and accumulates gradients into
the ``.grad`` slot of every tensor on the path.  Tensors are treated as
immutable once created — ops never write through their inputs.

Float32 is the working precision throughout the package; every op also
accepts float64 so numerical oracles can run the same graphs in double
precision.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED = True


class Tensor:
    """An ndarray plus a gradient slot.

    ``requires_grad=True`` marks a leaf (parameter): backward passes
    accumulate into its ``.grad`` until it is reset to ``None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut off from gradient flow."""
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- operators (implemented in ops.py) ------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops

        return ops.slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def astensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(_DEFAULT_DTYPE)
    return Tensor(arr)


class Tape:
    """Execution-order record of differentiable operations.

    Usage::

        tape = Tape()
        with tape:
            loss = model_and_loss(...)
        tape.backward(loss)

    A tape can be consumed by ``backward`` exactly once; building
    higher-order graphs on top of a backward pass is not supported.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, object]] = []
        self._tracked: set[int] = set()
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def needs(self, t) -> bool:
        """Does gradient have to flow into this op input?"""
        return isinstance(t, Tensor) and (t.requires_grad or id(t) in self._tracked)

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        self._nodes.append((out, inputs, backward_fn))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Reverse walk: accumulate d(loss)/d(tensor) into .grad slots."""
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self.consumed = True
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None:
                    continue
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad = inp.grad + gi
        self._nodes.clear()
        self._tracked.clear()


def active_tape() -> Tape | None:
    """The tape ops should record onto, or None while not recording."""
    if not _GRAD_ENABLED or not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


@contextmanager
def no_grad():
    """Suspend recording (inference, detached fake generation)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


@contextmanager
def frozen(params):
    """Temporarily clear requires_grad on ``params``.

    Gradients still flow *through* ops that use the frozen tensors, but
    nothing is accumulated into them — this is how the discriminator is
    held fixed during generator updates.
    """
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s

"""Weight-normalized building blocks.

Every trainable layer here separates direction from magnitude:
``W = v * g / ||v||`` with the norm taken per output channel.  The
normalization is part of the forward graph, so gradients flow into both
``v`` and ``g``.  Initialization picks ``g = ||v||``, making the initial
effective weight equal to ``v``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, ops


def _walk(name, value):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


class Module:
    """Minimal parameter container with named traversal."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            yield from _walk(f"{prefix}{attr}", value)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class WnConv1d(Module):
    """1-D convolution with weight normalization and built-in padding.

    Weight layout (c_out, c_in/groups, k); ``pad`` samples are added on
    both sides ('reflect' or 'zero') before the kernel is applied.
    """

    def __init__(self, c_in, c_out, kernel_size, *, stride=1, dilation=1, groups=1,
                 pad=0, pad_mode="reflect", rng: np.random.Generator,
                 dtype=np.float32):
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.pad, self.pad_mode = pad, pad_mode
        fan_in = (c_in // groups) * kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        v = _uniform(rng, bound, (c_out, c_in // groups, kernel_size), dtype)
        self.v = Parameter(v)
        self.g = Parameter(np.linalg.norm(v.reshape(c_out, -1), axis=1)
                           .reshape(c_out, 1, 1).astype(dtype))
        self.bias = Parameter(_uniform(rng, bound, (c_out, 1), dtype))

    def weight(self) -> Tensor:
        norm = ops.sqrt(ops.sum_(ops.square(self.v), axis=(1, 2), keepdims=True))
        return ops.mul(self.v, ops.div(self.g, norm))

    def __call__(self, x: Tensor) -> Tensor:
        if self.pad:
            x = ops.pad1d(x, self.pad, self.pad, self.pad_mode)
        y = ops.conv1d(x, self.weight(), stride=self.stride,
                       dilation=self.dilation, groups=self.groups)
        return ops.add(y, self.bias)


class WnConvTranspose1d(Module):
    """Transposed 1-D convolution with weight normalization.

    Weight layout (c_in, c_out, k); output length (T-1)*stride - 2*pad + k
    (``pad`` is cropped symmetrically from the raw deconv output).
    """

    def __init__(self, c_in, c_out, kernel_size, *, stride=1, pad=0,
                 rng: np.random.Generator, dtype=np.float32):
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        self.stride, self.pad = stride, pad
        fan_in = max(1, c_in * kernel_size // stride)
        bound = 1.0 / np.sqrt(fan_in)
        v = _uniform(rng, bound, (c_in, c_out, kernel_size), dtype)
        self.v = Parameter(v)
        self.g = Parameter(np.linalg.norm(v.transpose(1, 0, 2).reshape(c_out, -1), axis=1)
                           .reshape(1, c_out, 1).astype(dtype))
        self.bias = Parameter(_uniform(rng, bound, (c_out, 1), dtype))

    def weight(self) -> Tensor:
        norm = ops.sqrt(ops.sum_(ops.square(self.v), axis=(0, 2), keepdims=True))
        return ops.mul(self.v, ops.div(self.g, norm))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv_transpose1d(x, self.weight(), stride=self.stride)
        if self.pad:
            y = ops.slice_(y, np.s_[:, self.pad:y.shape[1] - self.pad])
        return ops.add(y, self.bias)


class WnDense(Module):
    """Weight-normalized affine map for 1-D feature vectors."""

    def __init__(self, c_in, c_out, *, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(c_in)
        v = _uniform(rng, bound, (c_out, c_in), dtype)
        self.v = Parameter(v)
        self.g = Parameter(np.linalg.norm(v, axis=1, keepdims=True).astype(dtype))
        self.bias = Parameter(_uniform(rng, bound, (c_out,), dtype))

    def weight(self) -> Tensor:
        norm = ops.sqrt(ops.sum_(ops.square(self.v), axis=1, keepdims=True))
        return ops.mul(self.v, ops.div(self.g, norm))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(self.weight(), x), self.bias)

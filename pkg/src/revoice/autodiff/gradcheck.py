"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def grad_check(fn, point, step: float = 1e-5, sample: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between tape and finite-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor and must be deterministic
    (freeze any sampling before calling).  The check perturbs one
    coordinate at a time: with ``sample`` set, only that many
    coordinates are probed (chosen reproducibly), which keeps large
    tensors affordable.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-12).
    """
    base = np.array(point.data if isinstance(point, Tensor) else point)
    x = Tensor(base.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        out = fn(x)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued fn")
    tape.backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    analytic = np.asarray(analytic).reshape(-1)

    n = base.size
    if sample is not None and sample < n:
        idxs = np.random.default_rng(seed).choice(n, size=sample, replace=False)
        idxs.sort()
    else:
        idxs = np.arange(n)

    flat = base.reshape(-1)
    worst = 0.0
    for i in idxs:
        keep = flat[i]
        flat[i] = keep + step
        f_plus = float(fn(Tensor(base)).data)
        flat[i] = keep - step
        f_minus = float(fn(Tensor(base)).data)
        flat[i] = keep
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst

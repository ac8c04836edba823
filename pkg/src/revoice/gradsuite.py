"""Finite-difference verification of every training loss.

Each check compares analytic gradients against central finite
differences on a miniature model configuration, in both precisions:

* the 64-bit leg differentiates a float64 graph and must agree with
  float64 finite differences to better than 1e-6 relative error;
* the 32-bit leg differentiates a float32 graph holding identical
  parameter values and is compared against the same float64 finite
  differences to better than 1e-4 (a float32 central difference would
  drown in cancellation noise, so the reference is always float64).

Used by the ``grad-check`` CLI command and the acceptance tests.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import data, losses
from .autodiff import Tape, no_grad
from .autodiff.tensor import Tensor
from .dsp import spectral_loss_configs
from .losses import LossWeights
from .model import ModelConfig, SpeakerPosterior, VoiceConverter

TOL64 = 1e-6
TOL32 = 1e-4


@dataclasses.dataclass
class CheckResult:
    name: str
    err64: float
    err32: float
    coords: int
    seconds: float
    tol64: float = TOL64
    tol32: float = TOL32

    @property
    def passed(self) -> bool:
        return self.err64 < self.tol64 and self.err32 < self.tol32

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<24} rel_err64={self.err64:.3e} "
                f"(tol {self.tol64:.0e})  rel_err32={self.err32:.3e} "
                f"(tol {self.tol32:.0e})  coords={self.coords} "
                f"[{self.seconds:.1f}s]")


class _Check:
    """One loss function exposed as value/gradient callables over a flat
    float64 coordinate vector."""

    tol64_early = 0.1 * TOL64
    tol32_early = 0.1 * TOL32

    def __init__(self, name, theta0, eval64, grad64, grad32, sample, h=1e-5):
        self.name = name
        self.theta0 = np.asarray(theta0, dtype=np.float64)
        self.eval64 = eval64
        self.grad64 = grad64
        self.grad32 = grad32
        self.sample = sample
        self.h = h

    def run(self, seed: int = 0, corrupt: bool = False) -> CheckResult:
        t0 = time.time()
        a64 = np.asarray(self.grad64(self.theta0), dtype=np.float64)
        a32 = np.asarray(self.grad32(self.theta0), dtype=np.float64)
        if corrupt:  # harness-sanity hook: a deliberately wrong gradient
            a64 = a64 + 0.05 * (np.abs(a64).max() + 1.0)
            a32 = a32 + 0.05 * (np.abs(a32).max() + 1.0)
        # The 64-bit leg is judged per coordinate (near-zero coordinates
        # measured against 0.1% of the gradient's dominant magnitude).
        # The 32-bit leg is judged in the max-norm: a float32 graph
        # cannot resolve an ill-conditioned coordinate — one whose large
        # opposing path contributions cancel to a small net value — to a
        # fine fraction of itself, so its tolerance applies to the
        # deviation relative to the gradient's overall scale.
        norm = max(np.abs(a64).max(), 1e-12)
        floor = max(1e-3 * norm, 1e-12)
        f0 = self.eval64(self.theta0)
        # Balance secant truncation against cancellation in f(θ+h) − f(θ−h):
        # optimum grows with the cube root of the loss magnitude.
        h0 = max(self.h, 4.0 * (1.1e-16 * max(1.0, abs(f0))) ** (1.0 / 3.0))
        n = self.theta0.size
        k = min(self.sample, n)
        idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
        err64 = err32 = 0.0
        for i in idx:
            best64, best32 = np.inf, np.inf
            # A kink (e.g. a leaky-rectifier crossing) inside one secant
            # window wrecks that single estimate, and cancellation noise
            # scales as 1/h; a genuinely wrong gradient disagrees at
            # every step size.
            for scale_h in (1.0, 0.125, 8.0, 0.015625, 64.0):
                h = h0 * scale_h * max(1.0, abs(self.theta0[i]))
                plus = self.theta0.copy()
                plus[i] += h
                minus = self.theta0.copy()
                minus[i] -= h
                fd = (self.eval64(plus) - self.eval64(minus)) / (2.0 * h)
                best64 = min(best64, abs(a64[i] - fd) / max(abs(a64[i]), abs(fd), floor))
                best32 = min(best32, abs(a32[i] - fd) / norm)
                if best64 < self.tol64_early and best32 < self.tol32_early:
                    break
            err64 = max(err64, best64)
            err32 = max(err32, best32)
        self.eval64(self.theta0)  # restore any written state
        return CheckResult(self.name, err64, err32, k, time.time() - t0)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


# ----------------------------------------------------------------------
# flat parameter plumbing
# ----------------------------------------------------------------------

def _flatten(named_params) -> tuple[np.ndarray, list]:
    spec, chunks = [], []
    for name, p in named_params:
        spec.append((name, p, p.data.shape, p.data.size))
        chunks.append(p.data.reshape(-1).astype(np.float64))
    return np.concatenate(chunks), spec


def _write(spec, theta: np.ndarray, dtype) -> None:
    pos = 0
    for _, p, shape, size in spec:
        p.data = theta[pos:pos + size].reshape(shape).astype(dtype)
        pos += size


def _gather_grads(spec) -> np.ndarray:
    out = []
    for name, p, shape, size in spec:
        if p.grad is None:
            out.append(np.zeros(size))
        else:
            out.append(p.grad.reshape(-1).astype(np.float64))
    return np.concatenate(out)


def _micro_models(seed: int = 0):
    cfg64 = ModelConfig(n_speakers=2, d_speaker=32, width_divisor=16,
                        blocks_per_stack=1, dtype="float64")
    cfg32 = dataclasses.replace(cfg64, dtype="float32")
    m64 = VoiceConverter(cfg64, seed=seed)
    m32 = VoiceConverter(cfg32, seed=seed)
    for (n64, p64), (n32, p32) in zip(m64.named_parameters(),
                                      m32.named_parameters()):
        assert n64 == n32
        p32.data = p64.data.astype(np.float32)
    return m64, m32


def _noisy_clip(speaker: int, length: int, rng) -> np.ndarray:
    """Toy tone plus broadband noise.

    The noise keeps every mel bin far above the log floor: at a silent
    bin the clamp makes the loss piecewise, and a finite difference (or
    a float32 forward that rounds across the boundary) lands on the
    wrong branch.  Gradient checks need interior points.
    """
    tone = data.synth_toy_clip(speaker, length, rng)
    noise = rng.uniform(-0.18, 0.18, length)
    return np.clip(0.75 * tone + noise, -0.97, 0.97)


def _micro_batch(clip_length: int, batch: int = 2, seed: int = 3):
    rng = np.random.default_rng(seed)
    clips = [_noisy_clip(i % 2, clip_length, rng) for i in range(batch)]
    b = data.make_batch(clips, [i % 2 for i in range(batch)], clip_length,
                        rng, augmented=False)
    return b


def _batch_as(b: data.Batch, dtype) -> data.Batch:
    return data.Batch(inputs=b.inputs.astype(dtype),
                      labels=b.labels.copy(),
                      targets=b.targets.astype(dtype),
                      speaker_views=b.speaker_views.astype(dtype),
                      ref_indices=b.ref_indices.copy())


# ----------------------------------------------------------------------
# the suite
# ----------------------------------------------------------------------

def _loss_grad(loss_fn, leaf: Tensor) -> np.ndarray:
    tape = Tape()
    with tape:
        loss = loss_fn(leaf)
    tape.backward(loss)
    return leaf.grad.reshape(-1).astype(np.float64)


def _input_check(name, x0, loss64, loss32, sample, h=1e-5) -> _Check:
    """Check d loss / d input for a waveform- or vector-valued input."""
    shape = x0.shape

    def eval64(theta):
        with no_grad():
            return float(loss64(Tensor(theta.reshape(shape))).data)

    def grad64(theta):
        return _loss_grad(loss64, Tensor(theta.reshape(shape), requires_grad=True))

    def grad32(theta):
        leaf = Tensor(theta.reshape(shape).astype(np.float32), requires_grad=True)
        return _loss_grad(loss32, leaf)

    return _Check(name, x0.reshape(-1), eval64, grad64, grad32, sample, h)


def _param_check(name, spec64, spec32, loss64, loss32, sample, h=1e-5) -> _Check:
    """Check d loss / d parameters over a flattened parameter vector."""
    theta0 = np.concatenate([p.data.reshape(-1).astype(np.float64)
                             for _, p, _, _ in spec64])

    def eval64(theta):
        _write(spec64, theta, np.float64)
        with no_grad():
            return float(loss64().data)

    def grad64(theta):
        _write(spec64, theta, np.float64)
        for _, p, _, _ in spec64:
            p.grad = None
        tape = Tape()
        with tape:
            loss = loss64()
        tape.backward(loss)
        return _gather_grads(spec64)

    def grad32(theta):
        _write(spec32, theta, np.float32)
        for _, p, _, _ in spec32:
            p.grad = None
        tape = Tape()
        with tape:
            loss = loss32()
        tape.backward(loss)
        return _gather_grads(spec32)

    return _Check(name, theta0, eval64, grad64, grad32, sample, h)


def build_suite(sample: int = 24, seed: int = 0) -> list[_Check]:
    m64, m32 = _micro_models(seed)
    weights = LossWeights()
    rng = np.random.default_rng(seed + 1)

    checks: list[_Check] = []

    # KL w.r.t. (mu, logvar)
    d = 8
    mv0 = rng.standard_normal(2 * d) * 0.7

    def kl_as(dtype):
        def fn(leaf):
            mu = leaf[0:d]
            lv = leaf[d:2 * d]
            return losses.kl_loss(SpeakerPosterior(mu=mu, logvar=lv))
        return fn

    checks.append(_input_check("kl", mv0, kl_as(np.float64), kl_as(np.float32),
                               sample))

    # content preservation w.r.t. the converted code
    code_src = rng.standard_normal((4, 16))
    code0 = rng.standard_normal((4, 16))

    def cpl64(leaf):
        return losses.content_preservation_loss(Tensor(code_src), leaf)

    def cpl32(leaf):
        return losses.content_preservation_loss(
            Tensor(code_src.astype(np.float32)), leaf)

    checks.append(_input_check("content_preservation", code0, cpl64, cpl32,
                               sample))

    # spectral loss at each resolution w.r.t. the generated waveform
    t_spe = 4096
    ref = _noisy_clip(0, t_spe, rng).astype(np.float64)
    x_spe = _noisy_clip(1, t_spe, rng).astype(np.float64)
    for cfg in spectral_loss_configs(weights.fft_sizes):
        def spe_as(ref_arr, c):
            def fn(leaf):
                return losses.spectral_loss(Tensor(ref_arr), leaf, c)
            return fn

        checks.append(_input_check(
            f"spectral_{cfg.fft_size}", x_spe,
            spe_as(ref, cfg), spe_as(ref.astype(np.float32), cfg), sample))

    # discriminator-mediated losses w.r.t. the fake waveform
    x_fake = _noisy_clip(1, t_spe, rng).astype(np.float64)
    x_real64 = ref
    x_real32 = ref.astype(np.float32)

    def fm_as(model, x_real):
        def fn(leaf):
            with no_grad():
                real_outs = model.discriminate(Tensor(x_real))
            return losses.feature_matching_loss(real_outs, model.discriminate(leaf))
        return fn

    checks.append(_input_check("feature_matching", x_fake,
                               fm_as(m64, x_real64), fm_as(m32, x_real32),
                               sample))

    def advg_as(model, non_sat):
        def fn(leaf):
            return losses.adv_loss_generator(model.discriminate(leaf), 1, non_sat)
        return fn

    checks.append(_input_check("adv_generator", x_fake,
                               advg_as(m64, False), advg_as(m32, False), sample))
    checks.append(_input_check("adv_generator_ns", x_fake,
                               advg_as(m64, True), advg_as(m32, True), sample))

    def rec_as(model, x_real):
        def fn(leaf):
            return losses.reconstruction_loss(model, Tensor(x_real), leaf, weights)
        return fn

    checks.append(_input_check("reconstruction", x_fake,
                               rec_as(m64, x_real64), rec_as(m32, x_real32),
                               sample))

    # adversarial D term w.r.t. discriminator parameters
    spec_d64 = _flatten(m64.named_discriminator_parameters())[1]
    spec_d32 = _flatten(m32.named_discriminator_parameters())[1]

    def advd_as(model, x_real, x_f):
        def fn():
            total = None
            for r, f in zip(model.discriminate(Tensor(x_real)),
                            model.discriminate(Tensor(x_f))):
                term = losses.adv_loss_discriminator(r, 0, f, 1)
                total = term if total is None else losses.ops.add(total, term)
            return total
        return fn

    checks.append(_param_check("adv_discriminator", spec_d64, spec_d32,
                               advd_as(m64, x_real64, x_fake),
                               advd_as(m32, x_real32,
                                       x_fake.astype(np.float32)), sample))

    # full objectives w.r.t. their own parameter sets
    t_total = 8192
    batch = _micro_batch(t_total)
    b64, b32 = _batch_as(batch, np.float64), _batch_as(batch, np.float32)

    def total_d_as(model, b):
        def fn():
            return losses.total_discriminator_loss(
                model, b, np.random.default_rng(99))[0]
        return fn

    checks.append(_param_check("total_discriminator", spec_d64, spec_d32,
                               total_d_as(m64, b64), total_d_as(m32, b32),
                               sample))

    spec_g64 = _flatten(m64.named_conversion_parameters())[1]
    spec_g32 = _flatten(m32.named_conversion_parameters())[1]

    def total_g_as(model, b):
        def fn():
            return losses.total_generator_loss(
                model, b, weights, np.random.default_rng(99))[0]
        return fn

    checks.append(_param_check("total_generator", spec_g64, spec_g32,
                               total_g_as(m64, b64), total_g_as(m32, b32),
                               sample))
    return checks


def run_suite(sample: int = 24, seed: int = 0, corrupt: bool = False,
              echo=None) -> list[CheckResult]:
    results = []
    for check in build_suite(sample=sample, seed=seed):
        res = check.run(seed=seed, corrupt=corrupt)
        results.append(res)
        if echo:
            echo(res.line())
    return results

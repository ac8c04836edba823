"""Waveform augmentations.

All four transforms are label-preserving for speaker identity and
operate on plain float32 arrays (no gradients — they run before clips
enter the networks):

* sign flip and amplitude scaling on the network input
* temporal jitter on the reconstruction target only
* segment shuffling on the speaker-encoder view only

Each function takes an rng and optional forcing arguments so tests can
pin the random draw.
"""

from __future__ import annotations

import numpy as np

SAMPLE_RATE = 22050
AMP_RANGE = (0.25, 1.0)
JITTER_MAX = 30
SEGMENT_SECONDS = (0.35, 0.45)


def random_sign_flip(x: np.ndarray, rng: np.random.Generator,
                     flip: bool | None = None) -> np.ndarray:
    """Negate the waveform with probability 1/2."""
    if flip is None:
        flip = bool(rng.integers(0, 2))
    return -x if flip else x.copy()


def random_amplitude_scale(x: np.ndarray, rng: np.random.Generator,
                           scale: float | None = None) -> np.ndarray:
    """Multiply by a scale drawn uniformly from [0.25, 1]."""
    if scale is None:
        scale = float(rng.uniform(*AMP_RANGE))
    if not AMP_RANGE[0] <= scale <= AMP_RANGE[1]:
        raise ValueError(f"amplitude scale {scale} outside {AMP_RANGE}")
    return (x * x.dtype.type(scale)).astype(x.dtype, copy=False)


def temporal_jitter(x: np.ndarray, rng: np.random.Generator,
                    shift: int | None = None) -> np.ndarray:
    """Shift by an integer drawn from {-30, ..., 30}, zero-filling the
    vacated samples.  Applied to reconstruction targets, so the
    generator never gets punished for sub-hop misalignment."""
    if x.shape[-1] <= 2 * JITTER_MAX:
        raise ValueError(
            f"clip of {x.shape[-1]} samples is too short to jitter by +-{JITTER_MAX}"
        )
    if shift is None:
        shift = int(rng.integers(-JITTER_MAX, JITTER_MAX + 1))
    if not -JITTER_MAX <= shift <= JITTER_MAX:
        raise ValueError(f"jitter shift {shift} outside +-{JITTER_MAX}")
    out = np.zeros_like(x)
    if shift > 0:
        out[shift:] = x[:-shift]
    elif shift < 0:
        out[:shift] = x[-shift:]
    else:
        out[:] = x
    return out


def _segment_lengths(total: int, rng: np.random.Generator) -> list[int]:
    lo = int(round(SEGMENT_SECONDS[0] * SAMPLE_RATE))
    hi = int(round(SEGMENT_SECONDS[1] * SAMPLE_RATE))
    lengths, remaining = [], total
    while remaining > 0:
        seg = int(rng.integers(lo, hi + 1))
        if seg >= remaining:
            lengths.append(remaining)  # final remainder stays a segment
            break
        lengths.append(seg)
        remaining -= seg
    return lengths


def shuffle_segments(x: np.ndarray, rng: np.random.Generator,
                     permutation: np.ndarray | None = None) -> np.ndarray:
    """Cut into 0.35-0.45 s pieces and permute them.

    Destroys linguistic order while keeping speaker timbre, which is why
    only the speaker encoder sees the result.  Clips shorter than one
    maximum segment come back unchanged.
    """
    hi = int(round(SEGMENT_SECONDS[1] * SAMPLE_RATE))
    if x.shape[-1] < hi:
        return x.copy()
    lengths = _segment_lengths(x.shape[-1], rng)
    if permutation is None:
        permutation = rng.permutation(len(lengths))
    elif sorted(permutation) != list(range(len(lengths))):
        raise ValueError("permutation must reorder exactly the drawn segments")
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    pieces = [x[bounds[i]:bounds[i + 1]] for i in range(len(lengths))]
    return np.concatenate([pieces[j] for j in permutation])

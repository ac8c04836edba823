"""Differentiable spectral features: STFT magnitude, mel filterbank, log-mel.

The DFT is expressed as two constant matmuls (cosine and sine bases), so
spectrograms sit on the autodiff tape like any other op.  Signals are
reflect-padded by fft_size/2 on each side, giving exactly
floor(T / hop) + 1 frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, astensor, ops


@dataclass(frozen=True)
class SpectrogramConfig:
    fft_size: int = 1024
    window_size: int = 1024
    hop: int = 256
    n_mels: int = 80
    sample_rate: int = 22050
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.window_size > self.fft_size:
            raise ValueError(
                f"window_size {self.window_size} exceeds fft_size {self.fft_size}"
            )
        if self.hop < 1 or self.fft_size < 2 or self.n_mels < 1:
            raise ValueError("hop, fft_size and n_mels must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def frame_count(self, length: int) -> int:
        return length // self.hop + 1


def spectral_loss_configs(fft_sizes=(2048, 1024, 512), n_mels=80,
                          sample_rate=22050) -> list[SpectrogramConfig]:
    """One config per resolution: window = fft, hop = fft/4."""
    return [
        SpectrogramConfig(fft_size=w, window_size=w, hop=w // 4,
                          n_mels=n_mels, sample_rate=sample_rate)
        for w in fft_sizes
    ]


def hann_window(n: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window: 0.5 - 0.5*cos(2*pi*k/n)."""
    k = np.arange(n, dtype=np.float64)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)).astype(dtype)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectrogramConfig, dtype=np.float32) -> np.ndarray:
    """Triangular filters (n_mels, fft_size//2 + 1) spanning 0..sr/2."""
    edges_mel = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0),
                            cfg.n_mels + 2)
    edges_hz = mel_to_hz(edges_mel)
    bin_hz = np.arange(cfg.n_bins) * (cfg.sample_rate / cfg.fft_size)
    lo, center, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - lo) / (center - lo)
    falling = (hi - bin_hz) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    return fb.astype(dtype)


_DFT_CACHE: dict = {}
_FB_CACHE: dict = {}


def _dft_matrices(fft_size: int, window_size: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin analysis bases with the (centered) Hann window folded in."""
    key = (fft_size, window_size, np.dtype(dtype).str)
    hit = _DFT_CACHE.get(key)
    if hit is not None:
        return hit
    n = np.arange(fft_size)
    k = np.arange(fft_size // 2 + 1)
    angle = 2.0 * np.pi * np.outer(k, n) / fft_size
    win = np.zeros(fft_size)
    off = (fft_size - window_size) // 2
    win[off:off + window_size] = hann_window(window_size)
    cos_m = (np.cos(angle) * win).astype(dtype)
    sin_m = (-np.sin(angle) * win).astype(dtype)
    _DFT_CACHE[key] = (cos_m, sin_m)
    return cos_m, sin_m


def _filterbank_cached(cfg: SpectrogramConfig, dtype) -> np.ndarray:
    key = (cfg.fft_size, cfg.n_mels, cfg.sample_rate, np.dtype(dtype).str)
    hit = _FB_CACHE.get(key)
    if hit is None:
        hit = mel_filterbank(cfg, dtype)
        _FB_CACHE[key] = hit
    return hit


def stft_magnitude(x, cfg: SpectrogramConfig) -> Tensor:
    """Magnitude spectrogram (fft_size//2 + 1, floor(T/hop) + 1).

    Differentiable; a zero signal maps to exactly zero magnitudes (the
    sqrt backward is clamped instead of the forward).
    """
    x = astensor(x)
    if x.ndim != 1:
        raise ValueError(f"stft expects a 1-D signal, got shape {x.shape}")
    if x.shape[0] < cfg.window_size:
        raise ValueError(
            f"signal length {x.shape[0]} shorter than window {cfg.window_size}"
        )
    half = cfg.fft_size // 2
    padded = ops.pad1d(x, half, half, "reflect")
    frames = ops.frame(padded, cfg.fft_size, cfg.hop)  # (fft, M)
    cos_m, sin_m = _dft_matrices(cfg.fft_size, cfg.window_size, x.dtype)
    re = ops.matmul(Tensor(cos_m), frames)
    im = ops.matmul(Tensor(sin_m), frames)
    return ops.sqrt(ops.add(ops.square(re), ops.square(im)))


def log_mel_spectrogram(x, cfg: SpectrogramConfig) -> Tensor:
    """log(max(mel @ |STFT|, log_floor)) — shape (n_mels, frames)."""
    x = astensor(x)
    mag = stft_magnitude(x, cfg)
    fb = Tensor(_filterbank_cached(cfg, x.dtype))
    return ops.log(ops.maximum(ops.matmul(fb, mag), cfg.log_floor))

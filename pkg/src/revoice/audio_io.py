"""WAV file I/O for mono 22,050 Hz PCM16 audio.

Strict on read: anything other than single-channel 16-bit PCM at the
expected rate raises, naming both the found and expected values.
Write quantizes with round-half-away and clips to the int16 range.
"""

from __future__ import annotations

import warnings
import wave

import numpy as np

SAMPLE_RATE = 22050
_SCALE = 32768.0


def load_wav(path: str, expect_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono PCM16 WAV into float32 in [-1, 1) (−32768 maps to −1.0)."""
    with wave.open(path, "rb") as wav:
        channels = wav.getnchannels()
        width = wav.getsampwidth()
        rate = wav.getframerate()
        frames = wav.readframes(wav.getnframes())
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise ValueError(
            f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    if rate != expect_rate:
        raise ValueError(
            f"{path}: sample rate is {rate} Hz, expected {expect_rate} Hz")
    pcm = np.frombuffer(frames, dtype="<i2")
    return (pcm.astype(np.float32) / _SCALE).astype(np.float32)


def save_wav(path: str, samples: np.ndarray,
             rate: int = SAMPLE_RATE) -> None:
    """Write float samples as mono PCM16; values outside [-1, 1] are clipped
    with a warning."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D sample array, got shape {x.shape}")
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > 1.0:
        warnings.warn(f"{path}: peak amplitude {peak:.3f} exceeds 1.0; "
                      "clipping to full scale", stacklevel=2)
    pcm = np.clip(np.floor(x * _SCALE + 0.5), -32768, 32767).astype("<i2")
    with wave.open(path, "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(rate)
        wav.writeframes(pcm.tobytes())

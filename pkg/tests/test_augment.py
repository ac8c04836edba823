"""Waveform augmentations: ranges, invariances, structure preservation."""

import numpy as np
import pytest

from revoice import augment, dsp


def clip(length=32768, seed=0):
    return (0.4 * np.random.default_rng(seed).standard_normal(length)
            ).astype(np.float32)


class TestSignFlip:
    def test_involution(self):
        x = clip()
        rng = np.random.default_rng(0)
        twice = augment.random_sign_flip(
            augment.random_sign_flip(x, rng, flip=True), rng, flip=True)
        assert np.array_equal(twice, x)

    def test_forced_identity(self):
        x = clip()
        out = augment.random_sign_flip(x, np.random.default_rng(0), flip=False)
        assert np.array_equal(out, x)
        assert out is not x  # always a fresh array

    def test_flip_negates(self):
        x = clip()
        out = augment.random_sign_flip(x, np.random.default_rng(0), flip=True)
        assert np.array_equal(out, -x)

    def test_both_outcomes_occur(self):
        x = np.ones(4, dtype=np.float32)
        rng = np.random.default_rng(1)
        signs = {float(augment.random_sign_flip(x, rng)[0]) for _ in range(64)}
        assert signs == {1.0, -1.0}

    def test_log_mel_invariant(self):
        x = clip(8192)
        flipped = augment.random_sign_flip(x, np.random.default_rng(0), flip=True)
        cfg = dsp.SpectrogramConfig()
        assert np.array_equal(dsp.log_mel_spectrogram(x, cfg).data,
                              dsp.log_mel_spectrogram(flipped, cfg).data)


class TestAmplitudeScale:
    def test_draw_range_over_many_samples(self):
        x = np.ones(8, dtype=np.float32)
        rng = np.random.default_rng(2)
        peaks = np.array([
            float(np.abs(augment.random_amplitude_scale(x, rng)).max())
            for _ in range(10_000)
        ])
        assert peaks.min() >= augment.AMP_RANGE[0] - 1e-7
        assert peaks.max() <= augment.AMP_RANGE[1] + 1e-7
        assert peaks.max() > 0.9 and peaks.min() < 0.3  # spans the range

    def test_forced_identity(self):
        x = clip()
        out = augment.random_amplitude_scale(x, np.random.default_rng(0), scale=1.0)
        assert np.array_equal(out, x)

    def test_out_of_range_scale_rejected(self):
        x = clip(128)
        with pytest.raises(ValueError):
            augment.random_amplitude_scale(x, np.random.default_rng(0), scale=1.5)
        with pytest.raises(ValueError):
            augment.random_amplitude_scale(x, np.random.default_rng(0), scale=0.1)

    def test_preserves_dtype(self):
        x = clip(128)
        out = augment.random_amplitude_scale(x, np.random.default_rng(3))
        assert out.dtype == np.float32

    def test_commutes_with_sign_flip(self):
        x = clip(1024)
        rng = np.random.default_rng(4)
        a = augment.random_amplitude_scale(
            augment.random_sign_flip(x, rng, flip=True), rng, scale=0.5)
        b = augment.random_sign_flip(
            augment.random_amplitude_scale(x, rng, scale=0.5), rng, flip=True)
        assert np.allclose(a, b, atol=1e-7)


class TestTemporalJitter:
    def test_shift_range_over_many_draws(self):
        x = clip(256)
        rng = np.random.default_rng(5)
        shifts = set()
        for _ in range(10_000):
            out = augment.temporal_jitter(x, rng)
            lead = np.flatnonzero(out != 0)
            shifts.add(int(lead[0]) if lead.size and lead[0] > 0 else 0)
        assert max(shifts) <= augment.JITTER_MAX

    def test_forced_shift_values(self):
        x = np.arange(1, 101, dtype=np.float32)
        fwd = augment.temporal_jitter(x, np.random.default_rng(0), shift=3)
        assert np.all(fwd[:3] == 0)
        assert np.array_equal(fwd[3:], x[:-3])
        back = augment.temporal_jitter(x, np.random.default_rng(0), shift=-3)
        assert np.all(back[-3:] == 0)
        assert np.array_equal(back[:-3], x[3:])

    def test_zero_shift_identity(self):
        x = clip(128)
        out = augment.temporal_jitter(x, np.random.default_rng(0), shift=0)
        assert np.array_equal(out, x)

    def test_length_preserved(self):
        x = clip(500)
        out = augment.temporal_jitter(x, np.random.default_rng(6))
        assert out.shape == x.shape

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            augment.temporal_jitter(clip(60), np.random.default_rng(0))

    def test_out_of_range_shift_rejected(self):
        with pytest.raises(ValueError):
            augment.temporal_jitter(clip(256), np.random.default_rng(0), shift=31)


class TestShuffleSegments:
    def test_length_preserved(self):
        x = clip(32768)
        out = augment.shuffle_segments(x, np.random.default_rng(7))
        assert out.shape == x.shape

    def test_multiset_of_samples_preserved(self):
        x = clip(32768, seed=8)
        out = augment.shuffle_segments(x, np.random.default_rng(8))
        assert np.array_equal(np.sort(out), np.sort(x))

    def test_segment_lengths_in_range(self):
        rng = np.random.default_rng(9)
        lo = int(round(augment.SEGMENT_SECONDS[0] * augment.SAMPLE_RATE))
        hi = int(round(augment.SEGMENT_SECONDS[1] * augment.SAMPLE_RATE))
        for total in (32768, 65536, 100_000):
            lengths = augment._segment_lengths(total, rng)
            assert sum(lengths) == total
            for seg in lengths[:-1]:
                assert lo <= seg <= hi
            assert 0 < lengths[-1] <= hi

    def test_identity_permutation(self):
        x = clip(32768)
        rng = np.random.default_rng(10)
        lengths = augment._segment_lengths(len(x), np.random.default_rng(10))
        out = augment.shuffle_segments(x, rng,
                                       permutation=np.arange(len(lengths)))
        assert np.array_equal(out, x)

    def test_too_short_returned_unchanged(self):
        x = clip(8192)  # < 0.45 s at 22.05 kHz
        out = augment.shuffle_segments(x, np.random.default_rng(11))
        assert np.array_equal(out, x)
        assert out is not x

    def test_bad_permutation_rejected(self):
        x = clip(32768)
        with pytest.raises(ValueError):
            augment.shuffle_segments(x, np.random.default_rng(12),
                                     permutation=np.array([0, 0, 1]))

    def test_actually_reorders(self):
        """Across seeds the shuffle cannot always be the identity."""
        x = np.arange(32768, dtype=np.float32)
        moved = any(
            not np.array_equal(
                augment.shuffle_segments(x, np.random.default_rng(s)), x)
            for s in range(8)
        )
        assert moved


class TestDeterminism:
    def test_same_seed_same_output(self):
        x = clip(32768, seed=13)
        a = augment.shuffle_segments(x, np.random.default_rng(42))
        b = augment.shuffle_segments(x, np.random.default_rng(42))
        assert np.array_equal(a, b)
        c = augment.temporal_jitter(x, np.random.default_rng(42))
        d = augment.temporal_jitter(x, np.random.default_rng(42))
        assert np.array_equal(c, d)

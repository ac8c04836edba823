"""Manifests, batch assembly, and the synthetic two-speaker corpus."""

import os

import numpy as np
import pytest

from revoice import data
from revoice.audio_io import load_wav


def write_manifest(tmp_path, rows, name="m.tsv"):
    p = tmp_path / name
    p.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return str(p)


class TestManifest:
    def test_parses_and_resolves_relative_paths(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\tspk0\ttrain", "b.wav\tspk1\ttest"])
        ds = data.load_manifest(m)
        assert len(ds.utterances) == 2
        assert ds.utterances[0].path == str(tmp_path / "a.wav")
        assert ds.speakers == ["spk0", "spk1"]
        assert ds.n_speakers == 2

    def test_absolute_paths_kept(self, tmp_path):
        m = write_manifest(tmp_path, ["/abs/x.wav\ts\ttrain"])
        ds = data.load_manifest(m)
        assert ds.utterances[0].path == "/abs/x.wav"

    def test_labels_follow_sorted_speakers(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\tzeta\ttrain", "b.wav\talpha\ttrain"])
        ds = data.load_manifest(m)
        assert ds.label("alpha") == 0
        assert ds.label("zeta") == 1

    def test_split_filter(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\ts\ttrain", "b.wav\ts\ttest",
                                      "c.wav\ts\ttrain"])
        ds = data.load_manifest(m)
        assert len(ds.split("train")) == 2
        assert len(ds.split("test")) == 1

    def test_wrong_field_count_names_line(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\ts\ttrain", "broken line"])
        with pytest.raises(ValueError, match=":2:"):
            data.load_manifest(m)

    def test_bad_split_names_line(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\ts\tvalidation"])
        with pytest.raises(ValueError, match="split"):
            data.load_manifest(m)

    def test_empty_field_rejected(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\t\ttrain"])
        with pytest.raises(ValueError, match="empty field"):
            data.load_manifest(m)

    def test_duplicate_paths_rejected(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\ts\ttrain", "a.wav\ts\ttest"])
        with pytest.raises(ValueError, match="duplicate"):
            data.load_manifest(m)

    def test_empty_manifest_rejected(self, tmp_path):
        m = write_manifest(tmp_path, ["", "   "])
        with pytest.raises(ValueError, match="no utterances"):
            data.load_manifest(m)

    def test_blank_lines_skipped(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\ts\ttrain", "", "b.wav\ts\ttest"])
        assert len(data.load_manifest(m).utterances) == 2


class TestCropOrTile:
    def test_exact_length_copied(self):
        x = np.arange(8, dtype=np.float32)
        out = data.crop_or_tile(x, 8, np.random.default_rng(0))
        assert np.array_equal(out, x)
        assert out is not x

    def test_crop_is_contiguous_window(self):
        x = np.arange(100, dtype=np.float32)
        out = data.crop_or_tile(x, 10, np.random.default_rng(1))
        start = int(out[0])
        assert np.array_equal(out, x[start:start + 10])

    def test_short_clip_tiles_cyclically(self):
        x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        out = data.crop_or_tile(x, 7, np.random.default_rng(2))
        assert out.shape == (7,)
        tiled = np.tile(x, 3)
        found = any(np.array_equal(out, tiled[s:s + 7]) for s in range(3))
        assert found

    def test_crop_randomness_covers_offsets(self):
        x = np.arange(50, dtype=np.float32)
        rng = np.random.default_rng(3)
        starts = {int(data.crop_or_tile(x, 10, rng)[0]) for _ in range(200)}
        assert len(starts) > 10


class TestDerangement:
    def test_no_fixed_points_over_many_draws(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            perm = data.draw_derangement(n, rng)
            assert sorted(perm) == list(range(n))
            assert not np.any(perm == np.arange(n))

    def test_needs_two_items(self):
        with pytest.raises(ValueError):
            data.draw_derangement(1, np.random.default_rng(0))

    def test_two_items_always_swap(self):
        perm = data.draw_derangement(2, np.random.default_rng(5))
        assert list(perm) == [1, 0]


class TestMakeBatch:
    def clips(self, n=4, length=32768, seed=6):
        rng = np.random.default_rng(seed)
        return [0.3 * rng.standard_normal(length).astype(np.float32)
                for _ in range(n)]

    def test_fields_and_shapes(self):
        batch = data.make_batch(self.clips(), [0, 0, 1, 1], 16384,
                                np.random.default_rng(7))
        assert batch.inputs.shape == (4, 16384)
        assert batch.targets.shape == (4, 16384)
        assert batch.speaker_views.shape == (4, 16384)
        assert batch.labels.tolist() == [0, 0, 1, 1]
        assert batch.size == 4

    def test_ref_properties_follow_derangement(self):
        batch = data.make_batch(self.clips(), [0, 1, 0, 1], 8192,
                                np.random.default_rng(8))
        assert not np.any(batch.ref_indices == np.arange(4))
        assert np.array_equal(batch.ref_labels,
                              batch.labels[batch.ref_indices])
        assert np.array_equal(batch.ref_views,
                              batch.speaker_views[batch.ref_indices])

    def test_unaugmented_views_are_raw_crops(self):
        batch = data.make_batch(self.clips(), [0, 1, 0, 1], 8192,
                                np.random.default_rng(9), augmented=False)
        assert np.array_equal(batch.inputs, batch.targets)
        assert np.array_equal(batch.inputs, batch.speaker_views)

    def test_augmented_views_differ_but_share_energy(self):
        batch = data.make_batch(self.clips(length=40000), [0, 1, 0, 1], 32768,
                                np.random.default_rng(10))
        # jittered target differs from input only by a small shift
        assert batch.inputs.shape == batch.targets.shape
        # shuffled speaker view keeps the sample multiset of its input
        for i in range(batch.size):
            assert np.array_equal(np.sort(batch.speaker_views[i]),
                                  np.sort(batch.inputs[i]))

    def test_single_item_rejected(self):
        with pytest.raises(ValueError):
            data.make_batch(self.clips(n=1), [0], 8192,
                            np.random.default_rng(0))

    def test_reproducible_with_seed(self):
        a = data.make_batch(self.clips(), [0, 1, 0, 1], 8192,
                            np.random.default_rng(11))
        b = data.make_batch(self.clips(), [0, 1, 0, 1], 8192,
                            np.random.default_rng(11))
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.targets, b.targets)
        assert np.array_equal(a.speaker_views, b.speaker_views)
        assert np.array_equal(a.ref_indices, b.ref_indices)


class TestSampleTrainingBatch:
    def test_draws_from_requested_split(self, toy_dataset):
        batch = data.sample_training_batch(toy_dataset, "train", 4, 8192,
                                           np.random.default_rng(12))
        assert batch.size == 4
        assert set(batch.labels.tolist()) <= {0, 1}

    def test_cache_is_filled_and_reused(self, toy_dataset):
        cache = {}
        data.sample_training_batch(toy_dataset, "train", 4, 8192,
                                   np.random.default_rng(13), cache=cache)
        n_first = len(cache)
        assert n_first >= 1
        marker = {k: v.copy() for k, v in cache.items()}
        data.sample_training_batch(toy_dataset, "train", 4, 8192,
                                   np.random.default_rng(13), cache=cache)
        for k in marker:
            assert np.array_equal(cache[k], marker[k])

    def test_empty_split_rejected(self, tmp_path):
        m = write_manifest(tmp_path, ["a.wav\ts\ttrain"])
        ds = data.load_manifest(m)
        with pytest.raises(ValueError, match="test"):
            data.sample_training_batch(ds, "test", 2, 8192,
                                       np.random.default_rng(0))

    def test_small_batch_rejected(self, toy_dataset):
        with pytest.raises(ValueError):
            data.sample_training_batch(toy_dataset, "train", 1, 8192,
                                       np.random.default_rng(0))


class TestToyCorpus:
    def test_files_and_manifest(self, toy_corpus, toy_dataset):
        root = os.path.dirname(toy_corpus)
        train = toy_dataset.split("train")
        test = toy_dataset.split("test")
        assert len(train) == 8  # 4 per speaker
        assert len(test) == 2   # 1 per speaker
        for u in train + test:
            assert os.path.exists(u.path), u.path
            wav = load_wav(u.path)
            assert wav.shape == (32768,)
            assert wav.dtype == np.float32
            assert float(np.abs(wav).max()) <= 1.0

    def test_speakers_have_distinct_registers(self, toy_dataset):
        """Speaker 1 has most energy well above speaker 0 (higher f0)."""
        from revoice import dsp
        cfg = dsp.SpectrogramConfig()
        centroids = {0: [], 1: []}
        for u in toy_dataset.split("train"):
            wav = load_wav(u.path)
            mel = np.exp(dsp.log_mel_spectrogram(wav[:8192], cfg).data)
            weights = mel.mean(axis=1)
            centroid = float((np.arange(80) * weights).sum() / weights.sum())
            centroids[toy_dataset.label(u.speaker)].append(centroid)
        assert max(centroids[0]) < min(centroids[1])

    def test_same_seed_same_corpus(self, tmp_path):
        m1 = data.build_toy_corpus(str(tmp_path / "a"), clips_per_speaker=1,
                                   length=8192, seed=99)
        m2 = data.build_toy_corpus(str(tmp_path / "b"), clips_per_speaker=1,
                                   length=8192, seed=99)
        d1, d2 = data.load_manifest(m1), data.load_manifest(m2)
        for u1, u2 in zip(d1.utterances, d2.utterances):
            assert np.array_equal(load_wav(u1.path), load_wav(u2.path))

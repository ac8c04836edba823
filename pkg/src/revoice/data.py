"""Datasets, manifests, and training batch assembly.

A dataset is a TSV manifest (``path<TAB>speaker<TAB>split``) pointing at
mono 22,050 Hz PCM16 WAV files.  Batches carry the augmented views the
losses expect: network inputs, jittered reconstruction targets,
segment-shuffled speaker views, and a derangement pairing every item
with a reference from another position.

Also home to the synthetic two-speaker corpus used by tests and smoke
runs: band-limited harmonic tones whose melodic content is shared
between speakers while the spectral envelope (register + brightness)
separates them linearly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import augment
from .audio_io import load_wav

SAMPLE_RATE = 22050


@dataclass(frozen=True)
class Utterance:
    path: str
    speaker: str
    split: str


@dataclass
class Dataset:
    utterances: list[Utterance]
    speakers: list[str]  # sorted; index = integer label

    def label(self, speaker: str) -> int:
        return self.speakers.index(speaker)

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)


def load_manifest(path: str) -> Dataset:
    """Parse a TSV manifest; malformed rows raise with their line number."""
    utterances = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated fields "
                    f"(path, speaker, split), got {len(fields)}"
                )
            wav, speaker, split = (f.strip() for f in fields)
            if not wav or not speaker or not split:
                raise ValueError(f"{path}:{lineno}: empty field in manifest row")
            if split not in ("train", "test"):
                raise ValueError(
                    f"{path}:{lineno}: split must be 'train' or 'test', "
                    f"got {split!r}"
                )
            if not os.path.isabs(wav):
                wav = os.path.join(base, wav)
            utterances.append(Utterance(path=wav, speaker=speaker, split=split))
    if not utterances:
        raise ValueError(f"{path}: manifest contains no utterances")
    paths = [u.path for u in utterances]
    if len(set(paths)) != len(paths):
        dupes = sorted({p for p in paths if paths.count(p) > 1})
        raise ValueError(f"{path}: duplicate manifest paths: {dupes[:3]}")
    return Dataset(utterances=utterances,
                   speakers=sorted({u.speaker for u in utterances}))


def crop_or_tile(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop to ``length``; shorter clips are tiled cyclically first."""
    if x.shape[0] < length:
        reps = -(-length // x.shape[0])
        x = np.tile(x, reps)
    if x.shape[0] == length:
        return x.copy()
    start = int(rng.integers(0, x.shape[0] - length + 1))
    return x[start:start + length].copy()


def draw_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """A permutation of range(n) with no fixed point (needs n >= 2)."""
    if n < 2:
        raise ValueError("derangement needs at least 2 items")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


@dataclass
class Batch:
    """Everything one optimization step consumes."""

    inputs: np.ndarray        # (B, T) augmented network inputs
    labels: np.ndarray        # (B,)
    targets: np.ndarray       # (B, T) jitter-augmented reconstruction targets
    speaker_views: np.ndarray  # (B, T) segment-shuffled views for the speaker encoder
    ref_indices: np.ndarray   # (B,) derangement: item i converts toward ref_indices[i]

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def ref_views(self) -> np.ndarray:
        return self.speaker_views[self.ref_indices]

    @property
    def ref_labels(self) -> np.ndarray:
        return self.labels[self.ref_indices]


def make_batch(clips: list[np.ndarray], labels: list[int], clip_length: int,
               rng: np.random.Generator, augmented: bool = True) -> Batch:
    """Crop, augment, and pair a list of raw clips into a Batch.

    With ``augmented=False`` the views are the raw crops (targets
    included) — used by deterministic oracles.
    """
    if len(clips) < 2:
        raise ValueError("a batch needs at least 2 items for derangement pairing")
    inputs, targets, speaker_views = [], [], []
    for clip in clips:
        crop = crop_or_tile(np.asarray(clip, dtype=np.float32), clip_length, rng)
        if augmented:
            x = augment.random_amplitude_scale(
                augment.random_sign_flip(crop, rng), rng)
            inputs.append(x)
            targets.append(augment.temporal_jitter(x, rng))
            speaker_views.append(augment.shuffle_segments(x, rng))
        else:
            inputs.append(crop)
            targets.append(crop.copy())
            speaker_views.append(crop.copy())
    return Batch(
        inputs=np.stack(inputs),
        labels=np.asarray(labels, dtype=np.int64),
        targets=np.stack(targets),
        speaker_views=np.stack(speaker_views),
        ref_indices=draw_derangement(len(clips), rng),
    )


def sample_training_batch(dataset: Dataset, split: str, batch_size: int,
                          clip_length: int, rng: np.random.Generator,
                          cache: dict | None = None,
                          augmented: bool = True) -> Batch:
    """Draw utterances (uniformly, with replacement) and build a Batch."""
    utts = dataset.split(split)
    if not utts:
        raise ValueError(f"dataset has no utterances in split {split!r}")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    picks = [utts[int(i)] for i in rng.integers(0, len(utts), size=batch_size)]
    clips, labels = [], []
    for u in picks:
        if cache is not None and u.path in cache:
            wav = cache[u.path]
        else:
            wav = load_wav(u.path)
            if cache is not None:
                cache[u.path] = wav
        clips.append(wav)
        labels.append(dataset.label(u.speaker))
    return make_batch(clips, labels, clip_length, rng, augmented=augmented)


# ----------------------------------------------------------------------
# synthetic two-speaker corpus
# ----------------------------------------------------------------------

#: (fundamental multiplier, harmonic list, per-harmonic decay) per speaker.
#: Speaker 0 is a low dark voice, speaker 1 a high bright one — linearly
#: separable in any spectral feature while sharing melodic content.
_TOY_TIMBRES = {
    0: dict(f0_scale=1.0, harmonics=(1, 2, 3, 4), decay=1.6),
    1: dict(f0_scale=2.8, harmonics=(1, 2, 3, 4, 5, 6), decay=0.4),
}

_TOY_NOTES = (110.0, 123.47, 138.59, 146.83, 164.81, 174.61)  # A2..F3-ish


def synth_toy_clip(speaker: int, length: int, rng: np.random.Generator,
                   segment: int = 4096) -> np.ndarray:
    """One harmonic-tone clip: a random melody rendered in the speaker's
    register and brightness, RMS-normalized, amplitude 0.5."""
    timbre = _TOY_TIMBRES[speaker]
    t = np.arange(length) / SAMPLE_RATE
    n_segments = -(-length // segment)
    f0_track = np.repeat(
        [ _TOY_NOTES[int(i)] for i in rng.integers(0, len(_TOY_NOTES), n_segments) ],
        segment)[:length] * timbre["f0_scale"]
    phase = 2.0 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE
    wave = np.zeros(length)
    for h in timbre["harmonics"]:
        amp = h ** -timbre["decay"]
        wave += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    fade = min(256, length // 4)
    envelope = np.ones(length)
    envelope[:fade] = np.linspace(0, 1, fade)
    envelope[-fade:] = np.linspace(1, 0, fade)
    wave *= envelope
    wave *= 0.5 / max(np.sqrt(np.mean(wave ** 2)), 1e-9)
    return np.clip(wave, -0.95, 0.95).astype(np.float32)


def build_toy_corpus(directory: str, clips_per_speaker: int = 4,
                     length: int = 32768, seed: int = 1234,
                     test_clips_per_speaker: int = 1) -> str:
    """Write WAVs + manifest for the 2-speaker toy set; returns manifest path."""
    from .audio_io import save_wav

    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for speaker in (0, 1):
        for i in range(clips_per_speaker + test_clips_per_speaker):
            split = "train" if i < clips_per_speaker else "test"
            name = f"spk{speaker}_{split}_{i:02d}.wav"
            save_wav(os.path.join(directory, name),
                     synth_toy_clip(speaker, length, rng))
            rows.append(f"{name}\tspk{speaker}\t{split}")
    manifest = os.path.join(directory, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return manifest

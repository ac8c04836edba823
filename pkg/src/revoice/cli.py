"""Command-line surface for the voice-conversion system.

Subcommands: train, convert, embed, sample, reconstruct, eval-spoof,
bench, grad-check.  Every command validates its inputs before heavy
compute and reports failures as a single ``error: ...`` line on stderr
with a nonzero exit status.  All randomness in a command flows from its
``--seed`` flag, so identical invocations are bitwise reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import statistics
import sys
import time

import numpy as np

from . import data, kernels
from .audio_io import load_wav, save_wav
from .autodiff import no_grad
from .config import load_run_config
from .model import ModelConfig, VoiceConverter
from .training import (Trainer, TrainingError, load_checkpoint,
                       load_embedding, save_embedding, train_spoof_classifier)

HOP = 256  # content-code hop: model lengths are multiples of this
FULL_SCALE_REFERENCE_KHZ = 7.49  # published single-core CPU figure, full scale


# ----------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------

def _load_model(path: str, seed: int = 0):
    """Restore a model (and its checkpoint record) from disk."""
    if not os.path.exists(path):
        raise ValueError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    return ckpt.build_model(seed=seed), ckpt


def _crop_to_hop(x: np.ndarray, what: str) -> np.ndarray:
    """Crop a waveform to the largest multiple of the model hop.

    Dropping the sub-hop tail (< 12 ms) avoids the padding artifacts a
    zero-padded tail would synthesize.
    """
    usable = (len(x) // HOP) * HOP
    if usable == 0:
        raise ValueError(
            f"{what} is too short: {len(x)} samples < one hop of {HOP}")
    return x[:usable] if usable != len(x) else x


def _load_source(path: str, model: VoiceConverter) -> np.ndarray:
    x = load_wav(path, expect_rate=model.cfg.sample_rate)
    return _crop_to_hop(x, path)


def _posterior_mu(model: VoiceConverter, clip: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.speaker_encode(clip).mu.data.copy()


def _resolve_target(model: VoiceConverter, target: str, seed: int,
                    sample_posterior: bool) -> np.ndarray:
    """Turn a --target argument into a speaker embedding vector.

    Accepts the literal ``prior`` (draw z from the standard normal),
    a saved embedding file, or a reference WAV (posterior mean by
    default, a posterior sample with --sample-posterior).
    """
    if target == "prior":
        rng = np.random.default_rng(seed)
        return model.sample_prior(rng)
    if not os.path.exists(target):
        raise ValueError(f"conversion target not found: {target}")
    with open(target, "rb") as fh:
        magic = fh.read(4)
    if target.endswith(".emb") or magic == b"RVCE":
        emb = load_embedding(target)
        if emb.shape[0] != model.cfg.d_speaker:
            raise ValueError(
                f"{target}: embedding has {emb.shape[0]} dimensions, "
                f"model expects {model.cfg.d_speaker}")
        return emb.astype(model.cfg.np_dtype)
    ref = load_wav(target, expect_rate=model.cfg.sample_rate)
    with no_grad():
        post = model.speaker_encode(ref)
        if sample_posterior:
            return post.sample(np.random.default_rng(seed)).data.copy()
        return post.mu.data.copy()


def _speaker_embeddings(model: VoiceConverter, dataset: data.Dataset,
                        split: str) -> dict:
    """Mean posterior embedding per speaker over a manifest split."""
    sums: dict = {}
    counts: dict = {}
    for utt in dataset.split(split):
        clip = load_wav(utt.path, expect_rate=model.cfg.sample_rate)
        mu = _posterior_mu(model, clip)
        sums[utt.speaker] = sums.get(utt.speaker, 0.0) + mu
        counts[utt.speaker] = counts.get(utt.speaker, 0) + 1
    return {spk: sums[spk] / counts[spk] for spk in sums}


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_train(args) -> int:
    run = load_run_config(args.config)
    train_cfg = run.train
    model_cfg = run.model
    if args.steps is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps, epochs=None)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.desk_scale:
        model_cfg = dataclasses.replace(model_cfg, width_divisor=4,
                                        blocks_per_stack=2)
    out_dir = args.out if args.out is not None else run.out_dir

    dataset = data.load_manifest(run.manifest)
    for split in ("train", "test"):
        if not dataset.split(split):
            raise ValueError(
                f"{run.manifest}: split {split!r} is empty; training needs "
                "both train and test entries")
    if dataset.n_speakers != model_cfg.n_speakers:
        raise ValueError(
            f"manifest has {dataset.n_speakers} speakers, model config "
            f"declares {model_cfg.n_speakers}")

    model = VoiceConverter(model_cfg, seed=train_cfg.seed)
    trainer = Trainer(model, train_cfg, augmented=run.augment)
    if args.resume is not None:
        trainer.load(args.resume)
        print(f"resumed from {args.resume} at step {trainer.step_count}")
    counts = model.count_parameters()
    print(f"model parameters: conversion={counts['conversion_total']:,} "
          f"discriminator={counts['discriminator']:,} total={counts['total']:,}")
    print(f"training to step {trainer.cfg.step_budget(len(dataset.split('train')))} "
          f"(batch {train_cfg.batch_size}, clip {train_cfg.clip_length}, "
          f"seed {train_cfg.seed}) -> {out_dir}")
    trainer.fit(dataset, out_dir=out_dir, echo=print)
    print(f"done at step {trainer.step_count}; "
          f"checkpoint: {os.path.join(out_dir, 'latest.ckpt')}")
    return 0


def cmd_convert(args) -> int:
    model, _ = _load_model(args.checkpoint)
    source = _load_source(args.source, model)
    embedding = _resolve_target(model, args.target, args.seed,
                                args.sample_posterior)
    out = model.convert(source, embedding)
    save_wav(args.out, np.asarray(out, dtype=np.float64))
    print(f"wrote {args.out}: {len(out)} samples "
          f"({len(out) / model.cfg.sample_rate:.2f} s)")
    return 0


def cmd_embed(args) -> int:
    model, _ = _load_model(args.checkpoint)
    if not args.references:
        raise ValueError("embed needs at least one reference WAV")
    mus = []
    for path in args.references:
        clip = load_wav(path, expect_rate=model.cfg.sample_rate)
        mus.append(_posterior_mu(model, clip))
    embedding = np.mean(mus, axis=0)
    save_embedding(args.out, embedding)
    print(f"wrote {args.out}: {embedding.shape[0]}-dimensional embedding "
          f"averaged over {len(mus)} reference clip(s)")
    return 0


def cmd_sample(args) -> int:
    model, _ = _load_model(args.checkpoint)
    z = model.sample_prior(np.random.default_rng(args.seed))
    save_embedding(args.out, z)
    print(f"wrote {args.out}: {z.shape[0]}-dimensional embedding drawn "
          f"from the standard-normal prior (seed {args.seed})")
    return 0


def cmd_reconstruct(args) -> int:
    model, _ = _load_model(args.checkpoint)
    source = _load_source(args.source, model)
    out = model.reconstruct(source)
    save_wav(args.out, np.asarray(out, dtype=np.float64))
    print(f"wrote {args.out}: {len(out)} samples reconstructed through "
          "content code + own speaker embedding")
    return 0


def cmd_eval_spoof(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    dataset = data.load_manifest(args.manifest)
    if dataset.n_speakers != model.cfg.n_speakers:
        raise ValueError(
            f"manifest has {dataset.n_speakers} speakers, checkpoint model "
            f"has {model.cfg.n_speakers}")
    train_utts = dataset.split("train")
    if not train_utts:
        raise ValueError(f"{args.manifest}: no train-split utterances")

    clips = [load_wav(u.path, expect_rate=model.cfg.sample_rate)
             for u in train_utts]
    labels = [dataset.label(u.speaker) for u in train_utts]
    clf = train_spoof_classifier(clips, labels, ckpt.config,
                                 epochs=args.epochs, seed=args.seed,
                                 echo=print if args.verbose else None)
    hits = sum(clf.predict(c) == l for c, l in zip(clips, labels))
    print(f"classifier train accuracy: {100.0 * hits / len(clips):.1f}% "
          f"({hits}/{len(clips)})")

    embeddings = _speaker_embeddings(model, dataset, "train")
    converted, targets = [], []
    for utt, clip in zip(train_utts, clips):
        cropped = _crop_to_hop(clip, utt.path)
        for target_speaker in dataset.speakers:
            if target_speaker == utt.speaker:
                continue
            converted.append(model.convert(cropped, embeddings[target_speaker]))
            targets.append(dataset.label(target_speaker))
    predictions = [clf.predict(c) for c in converted]
    spoofed = sum(p == t for p, t in zip(predictions, targets))
    rate = 100.0 * spoofed / len(targets)
    print(f"conversions: {len(targets)} "
          f"({len(train_utts)} clips x {dataset.n_speakers - 1} target(s))")
    print(f"spoofing success: {rate:.1f}% classified as the target speaker")
    return 0


def cmd_bench(args) -> int:
    model, _ = _load_model(args.checkpoint)
    if args.repeats < 1:
        raise ValueError("--repeats must be >= 1")
    if args.duration <= 0:
        raise ValueError("--duration must be positive")
    requested = int(round(args.duration * model.cfg.sample_rate))
    usable = max((requested // HOP) * HOP, HOP)
    x = (0.1 * np.random.default_rng(args.seed)
         .standard_normal(usable)).astype(model.cfg.np_dtype)

    counts = model.count_parameters()
    print(f"parameters: content_encoder={counts['content_encoder']:,} "
          f"speaker_encoder={counts['speaker_encoder']:,} "
          f"generator={counts['generator']:,} "
          f"conversion_total={counts['conversion_total']:,}")
    print(f"requested samples: {requested} ({args.duration:g} s at "
          f"{model.cfg.sample_rate} Hz); synthesizing {usable}")

    embedding = model.sample_prior(np.random.default_rng(args.seed + 1))
    results = {}
    backends = (list(kernels.available_backends())
                if args.compare_backends else [kernels.BACKEND])
    for backend in backends:
        with kernels.use_backend(backend):
            n_out = len(model.convert(x, embedding))  # warm-up, untimed
            rates = []
            for i in range(args.repeats):
                t0 = time.perf_counter()
                out = model.convert(x, embedding)
                dt = time.perf_counter() - t0
                rates.append(len(out) / dt / 1000.0)
                print(f"backend={backend} run={i + 1} seconds={dt:.3f} "
                      f"kHz={rates[-1]:.2f}")
        median = statistics.median(rates)
        results[backend] = median
        print(f"backend={backend} median={median:.2f} kHz over "
              f"{args.repeats} run(s), spread [{min(rates):.2f}, "
              f"{max(rates):.2f}], {n_out} samples per run")
    if len(results) > 1 and "numpy" in results and "compiled" in results:
        print(f"compiled/numpy speedup: "
              f"{results['compiled'] / results['numpy']:.2f}x")
    print(f"reference point (full-scale architecture, single CPU core): "
          f"{FULL_SCALE_REFERENCE_KHZ} kHz -- reported for context, "
          "not a pass/fail threshold")
    return 0


def cmd_grad_check(args) -> int:
    from . import gradsuite  # heavy import; keep CLI startup light
    results = gradsuite.run_suite(sample=args.sample, seed=args.seed,
                                  corrupt=args.corrupt, echo=print)
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks "
          f"passed in {total:.1f}s")
    return 1 if failed else 0


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revoice",
        description="Adversarial any-to-any voice conversion on raw waveforms.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="run config file (YAML)")
    p.add_argument("--steps", type=int, default=None,
                   help="override the step budget from the config")
    p.add_argument("--seed", type=int, default=None,
                   help="override the training seed from the config")
    p.add_argument("--out", default=None,
                   help="override the output directory from the config")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="resume from a checkpoint (bitwise continuation)")
    p.add_argument("--desk-scale", action="store_true",
                   help="shrink the model to desk scale regardless of config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert",
                       help="convert a source clip to a target voice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source WAV")
    p.add_argument("--target", required=True,
                   help="reference WAV, saved .emb file, or the literal "
                        "'prior' to draw a new voice")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for 'prior' / --sample-posterior draws")
    p.add_argument("--sample-posterior", action="store_true",
                   help="sample the reference posterior instead of using "
                        "its mean")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("embed",
                       help="average reference clips into a speaker embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .emb path")
    p.add_argument("references", nargs="+", help="reference WAV file(s)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("sample",
                       help="draw a new speaker embedding from the prior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .emb path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct",
                       help="re-synthesize a clip through its own embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source WAV")
    p.add_argument("--out", required=True, help="output WAV path")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval-spoof",
                       help="train a spoof classifier and score conversions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="dataset manifest (TSV)")
    p.add_argument("--epochs", type=int, default=30,
                   help="classifier training epochs (default 30)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true",
                   help="print per-epoch classifier progress")
    p.set_defaults(func=cmd_eval_spoof)

    p = sub.add_parser("bench",
                       help="measure end-to-end synthesis speed (kHz)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--duration", type=float, default=1.0,
                   help="synthetic input duration in seconds (default 1.0)")
    p.add_argument("--repeats", type=int, default=5,
                   help="timed runs per backend; median reported (default 5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-backend-compare", dest="compare_backends",
                   action="store_false",
                   help="time only the active kernel backend")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of every loss gradient")
    p.add_argument("--sample", type=int, default=24,
                   help="coordinates sampled per check (default 24)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true",
                   help="deliberately corrupt gradients (harness self-test; "
                        "must fail)")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())

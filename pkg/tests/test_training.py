"""Optimizer math, GAN update scoping, persistence, determinism, and the
spoofing classifier."""

import dataclasses
import math
import os

import numpy as np
import pytest

from revoice import data, training
from revoice.autodiff import Tape, ops
from revoice.autodiff.tensor import Parameter
from revoice.losses import (LossWeights, total_discriminator_loss,
                            total_generator_loss)
from revoice.model import ModelConfig, VoiceConverter


def micro_train_cfg(**overrides):
    kwargs = dict(batch_size=2, clip_length=8192, steps=4, seed=3,
                  log_every=1, checkpoint_every=0)
    kwargs.update(overrides)
    return training.TrainConfig(**kwargs)


class TestTrainConfig:
    def test_clip_length_must_align(self):
        with pytest.raises(ValueError, match="multiple of 256"):
            micro_train_cfg(clip_length=1000)

    def test_batch_size_floor(self):
        with pytest.raises(ValueError, match="batch_size"):
            micro_train_cfg(batch_size=1)

    def test_lr_positive(self):
        with pytest.raises(ValueError, match="lr"):
            micro_train_cfg(lr=0.0)

    def test_beta_range(self):
        with pytest.raises(ValueError, match="adam_beta1"):
            micro_train_cfg(adam_beta1=1.0)

    def test_step_budget_from_steps(self):
        assert micro_train_cfg(steps=123).step_budget(8) == 123

    def test_step_budget_from_epochs(self):
        cfg = micro_train_cfg(steps=None, epochs=3, batch_size=3)
        assert cfg.step_budget(8) == 3 * 3  # ceil(8/3) = 3 batches per epoch

    def test_step_budget_requires_one(self):
        cfg = micro_train_cfg(steps=None, epochs=None)
        with pytest.raises(ValueError, match="steps nor epochs"):
            cfg.step_budget(8)


class TestAdam:
    def test_no_grad_leaves_params_untouched(self):
        p = Parameter(np.array([1.0, 2.0], dtype=np.float32))
        opt = training.Adam([("p", p)], lr=0.1)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)
        assert opt.t == 1
        assert np.all(opt.m["p"] == 0) and np.all(opt.v["p"] == 0)

    def test_first_step_is_signed_lr(self):
        """With bias correction, step one moves by lr * g/(|g| + eps)."""
        p = Parameter(np.array([0.0], dtype=np.float64))
        opt = training.Adam([("p", p)], lr=1e-3, epsilon=1e-8)
        p.grad = np.array([2.0])
        opt.step()
        want = -1e-3 * 2.0 / (math.sqrt(4.0) + 1e-8)
        assert abs(float(p.data[0]) - want) < 1e-15

    def test_duplicate_names_rejected(self):
        p = Parameter(np.zeros(1))
        with pytest.raises(ValueError, match="duplicate"):
            training.Adam([("p", p), ("p", p)])

    def test_gradient_shape_mismatch_rejected(self):
        p = Parameter(np.zeros(3))
        opt = training.Adam([("p", p)])
        p.grad = np.zeros(4)
        with pytest.raises(ValueError, match="shape"):
            opt.step()

    def test_zero_grad_clears(self):
        p = Parameter(np.zeros(2))
        p.grad = np.ones(2)
        training.Adam([("p", p)]).zero_grad()
        assert p.grad is None

    def test_state_round_trip(self):
        p = Parameter(np.array([1.0, -1.0]))
        opt = training.Adam([("p", p)], lr=0.01)
        for _ in range(3):
            p.grad = np.array([0.5, -0.25])
            opt.step()
        other = training.Adam([("p", Parameter(np.zeros(2)))], lr=0.01)
        other.load_state(opt.state())
        assert other.t == 3
        assert np.array_equal(other.m["p"], opt.m["p"])
        assert np.array_equal(other.v["p"], opt.v["p"])

    def test_load_state_validates(self):
        p = Parameter(np.zeros(2))
        opt = training.Adam([("p", p)])
        with pytest.raises(ValueError, match="missing"):
            opt.load_state({"t": 1, "m": {}, "v": {}})
        bad = {"t": 1, "m": {"p": np.zeros(3)}, "v": {"p": np.zeros(3)}}
        with pytest.raises(ValueError, match="shape"):
            opt.load_state(bad)

    def test_descends_quadratic(self):
        p = Parameter(np.array([3.0]))
        opt = training.Adam([("p", p)], lr=0.05)
        for _ in range(200):
            opt.zero_grad()
            p.grad = 2.0 * p.data
            opt.step()
        assert abs(float(p.data[0])) < 0.5


@pytest.fixture(scope="module")
def trained_once(toy_dataset, micro_cfg):
    """One (model, trainer, batch) triple after a single optimization step,
    plus pre-step parameter snapshots for scoping assertions."""
    model = VoiceConverter(micro_cfg, seed=0)
    trainer = training.Trainer(model, micro_train_cfg(), augmented=False)
    batch = trainer.sample_batch(toy_dataset)
    return model, trainer, batch


class TestUpdateScoping:
    def test_phases_touch_disjoint_parameter_sets(self, toy_dataset, micro_cfg):
        model = VoiceConverter(micro_cfg, seed=0)
        trainer = training.Trainer(model, micro_train_cfg(), augmented=False)
        batch = trainer.sample_batch(toy_dataset)

        conv0 = {n: p.data.copy() for n, p in model.named_conversion_parameters()}
        trainer.opt_d.zero_grad()
        tape = Tape()
        with tape:
            d_loss, _ = total_discriminator_loss(model, batch, trainer.rng)
        tape.backward(d_loss)
        trainer.opt_d.step()

        # discriminator phase: conversion nets bitwise untouched
        for n, p in model.named_conversion_parameters():
            assert np.array_equal(p.data, conv0[n]), n
        disc_after_d = {n: p.data.copy()
                        for n, p in model.named_discriminator_parameters()}
        # most discriminator weights moved (compare against a fresh
        # re-initialization with the same seed)
        fresh = VoiceConverter(model.cfg, seed=0)
        fresh_disc = dict(fresh.named_discriminator_parameters())
        moved = sum(not np.array_equal(disc_after_d[n], fresh_disc[n].data)
                    for n in disc_after_d)
        assert moved / len(disc_after_d) > 0.9

        trainer.opt_g.zero_grad()
        tape = Tape()
        with tape:
            g_loss, _ = total_generator_loss(model, batch, LossWeights(),
                                             trainer.rng)
        tape.backward(g_loss)
        trainer.opt_g.step()

        # generator phase: discriminator bitwise untouched
        for n, p in model.named_discriminator_parameters():
            assert np.array_equal(p.data, disc_after_d[n]), n
        conv_moved = sum(
            not np.array_equal(p.data, conv0[n])
            for n, p in model.named_conversion_parameters())
        total = len(conv0)
        assert conv_moved / total > 0.9

    def test_train_step_returns_all_components(self, trained_once, toy_dataset):
        _, trainer, batch = trained_once
        parts = trainer.train_step(batch)
        for key in ("d_total", "g_total", "adv", "rec", "con", "kl"):
            assert key in parts
            assert np.isfinite(parts[key])
        assert trainer.step_count >= 1

    def test_nan_parameter_raises_training_error(self, toy_dataset, micro_cfg):
        model = VoiceConverter(micro_cfg, seed=0)
        trainer = training.Trainer(model, micro_train_cfg(), augmented=False)
        batch = trainer.sample_batch(toy_dataset)
        poisoned = dict(model.named_conversion_parameters())["gen.conv_out.v"]
        poisoned.data[:] = np.nan
        with pytest.raises(training.TrainingError) as exc_info:
            trainer.train_step(batch)
        assert exc_info.value.parts  # diagnostic payload present
        assert any(not np.isfinite(v) for v in exc_info.value.parts.values())


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path, toy_dataset, micro_cfg):
        model = VoiceConverter(micro_cfg, seed=0)
        trainer = training.Trainer(model, micro_train_cfg(), augmented=False)
        trainer.train_step(trainer.sample_batch(toy_dataset))
        path = str(tmp_path / "a.ckpt")
        trainer.save(path)

        ckpt = training.load_checkpoint(path)
        assert ckpt.step == 1
        assert ckpt.config == micro_cfg
        restored = ckpt.build_model(seed=99)
        for name, p in model.named_parameters():
            assert np.array_equal(dict(restored.named_parameters())[name].data,
                                  p.data), name
        for tag, opt in (("opt_g", trainer.opt_g), ("opt_d", trainer.opt_d)):
            st = ckpt.opt_states[tag]
            assert st["t"] == opt.t
            for name in opt.m:
                assert np.array_equal(st["m"][name], opt.m[name]), name
                assert np.array_equal(st["v"][name], opt.v[name]), name
        assert ckpt.rng_state == trainer.rng.bit_generator.state

    def test_next_step_after_reload_is_bitwise_identical(
            self, tmp_path, toy_dataset, micro_cfg):
        path = str(tmp_path / "b.ckpt")

        model_a = VoiceConverter(micro_cfg, seed=0)
        trainer_a = training.Trainer(model_a, micro_train_cfg(), augmented=False)
        trainer_a.train_step(trainer_a.sample_batch(toy_dataset))
        trainer_a.save(path)
        parts_a = trainer_a.train_step(trainer_a.sample_batch(toy_dataset))

        model_b = VoiceConverter(micro_cfg, seed=0)
        trainer_b = training.Trainer(model_b, micro_train_cfg(), augmented=False)
        trainer_b.load(path)
        parts_b = trainer_b.train_step(trainer_b.sample_batch(toy_dataset))

        assert parts_a == parts_b  # bitwise float equality

    def test_config_mismatch_names_fields(self, tmp_path, micro_cfg):
        model = VoiceConverter(micro_cfg, seed=0)
        path = str(tmp_path / "c.ckpt")
        training.save_checkpoint(path, model)
        other_cfg = dataclasses.replace(micro_cfg, d_speaker=64)
        other = VoiceConverter(other_cfg, seed=0)
        with pytest.raises(ValueError, match="d_speaker"):
            training.load_checkpoint(path).restore_model(other)

    def test_corrupted_digest_rejected(self, tmp_path, micro_cfg):
        model = VoiceConverter(micro_cfg, seed=0)
        path = str(tmp_path / "d.ckpt")
        training.save_checkpoint(path, model)
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(ValueError, match="digest"):
            training.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = str(tmp_path / "e.ckpt")
        open(path, "wb").write(b"RVCK123")
        with pytest.raises(ValueError, match="truncated"):
            training.load_checkpoint(path)

    def test_wrong_magic_rejected(self, tmp_path, micro_cfg):
        model = VoiceConverter(micro_cfg, seed=0)
        path = str(tmp_path / "f.ckpt")
        training.save_checkpoint(path, model)
        blob = bytearray(open(path, "rb").read())
        body = bytearray(blob[:-32])
        body[:4] = b"XXXX"
        import hashlib
        open(path, "wb").write(bytes(body) + hashlib.sha256(bytes(body)).digest())
        with pytest.raises(ValueError, match="magic"):
            training.load_checkpoint(path)

    def test_desk_scale_checkpoint_under_50mb(self, tmp_path):
        cfg = ModelConfig.desk_scale(n_speakers=2)
        model = VoiceConverter(cfg, seed=0)
        trainer = training.Trainer(model, micro_train_cfg())
        path = str(tmp_path / "g.ckpt")
        trainer.save(path)
        assert os.path.getsize(path) < 50 * 1024 * 1024


class TestDeterminism:
    def test_fixed_seed_trajectories_bitwise_equal(self, toy_dataset, micro_cfg):
        histories = []
        for _ in range(2):
            model = VoiceConverter(micro_cfg, seed=0)
            trainer = training.Trainer(model, micro_train_cfg(), augmented=True)
            hist = [trainer.train_step(trainer.sample_batch(toy_dataset))
                    for _ in range(2)]
            histories.append(hist)
        assert histories[0] == histories[1]

    def test_resumed_run_matches_unbroken(self, tmp_path, toy_dataset, micro_cfg):
        n_total, n_break = 4, 2
        model_a = VoiceConverter(micro_cfg, seed=0)
        trainer_a = training.Trainer(model_a, micro_train_cfg(), augmented=True)
        full = [trainer_a.train_step(trainer_a.sample_batch(toy_dataset))
                for _ in range(n_total)]

        model_b = VoiceConverter(micro_cfg, seed=0)
        trainer_b = training.Trainer(model_b, micro_train_cfg(), augmented=True)
        for _ in range(n_break):
            trainer_b.train_step(trainer_b.sample_batch(toy_dataset))
        path = str(tmp_path / "resume.ckpt")
        trainer_b.save(path)

        model_c = VoiceConverter(micro_cfg, seed=0)
        trainer_c = training.Trainer(model_c, micro_train_cfg(), augmented=True)
        trainer_c.load(path)
        assert trainer_c.step_count == n_break
        resumed = [trainer_c.train_step(trainer_c.sample_batch(toy_dataset))
                   for _ in range(n_total - n_break)]
        assert resumed == full[n_break:]


class TestLogLines:
    def test_format_parse_round_trip(self):
        parts = {"d_total": 1.375, "g_total": 22.5, "adv": -2.0794415416798357}
        line = training.format_log_line(17, parts, 1e-4, 3.25)
        back = training.parse_log_line(line)
        assert back["step"] == 17
        assert back["lr"] == pytest.approx(1e-4)
        assert back["wall"] == pytest.approx(3.25)
        for k, v in parts.items():
            assert back[k] == pytest.approx(v, rel=1e-5)

    def test_line_is_single_spaced_key_values(self):
        line = training.format_log_line(1, {"kl": 0.5}, 2e-4, 0.1)
        assert "\n" not in line
        assert all("=" in f for f in line.split())


class TestEmbeddingFiles:
    def test_round_trip_exact(self, tmp_path):
        vec = np.random.default_rng(0).standard_normal(32).astype(np.float32)
        path = str(tmp_path / "spk.emb")
        training.save_embedding(path, vec)
        assert np.array_equal(training.load_embedding(path), vec)

    def test_rejects_non_vector(self, tmp_path):
        with pytest.raises(ValueError, match="1-D"):
            training.save_embedding(str(tmp_path / "x.emb"), np.zeros((2, 2)))

    def test_rejects_bad_magic(self, tmp_path):
        path = str(tmp_path / "junk.emb")
        open(path, "wb").write(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError, match="magic"):
            training.load_embedding(path)

    def test_rejects_truncation(self, tmp_path):
        vec = np.zeros(16, dtype=np.float32)
        path = str(tmp_path / "t.emb")
        training.save_embedding(path, vec)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-4])
        with pytest.raises(ValueError, match="truncated"):
            training.load_embedding(path)


@pytest.fixture(scope="module")
def toy_clips(toy_dataset):
    from revoice.audio_io import load_wav
    clips, labels = [], []
    for u in toy_dataset.split("train"):
        clips.append(load_wav(u.path)[:8192])
        labels.append(toy_dataset.label(u.speaker))
    return clips, labels


class TestSpoofClassifier:
    def test_classifier_learns_toy_speakers(self, toy_clips, micro_cfg):
        clips, labels = toy_clips
        clf = training.train_spoof_classifier(clips, labels, micro_cfg,
                                              epochs=10, seed=0)
        acc = training.classifier_accuracy(clf, clips, labels)
        assert acc >= 0.75
        assert clf.n_classes == 2

    def test_cross_entropy_uniform_logits(self):
        from revoice.autodiff import Tensor
        ce = training.cross_entropy(Tensor(np.zeros(2)), 0)
        assert abs(float(ce.data) - math.log(2)) < 1e-12

    def test_cross_entropy_label_validation(self):
        from revoice.autodiff import Tensor
        with pytest.raises(ValueError):
            training.cross_entropy(Tensor(np.zeros(2)), 2)

    def test_classifier_input_validation(self, micro_cfg):
        with pytest.raises(ValueError, match="equal length"):
            training.train_spoof_classifier([np.zeros(8192)], [0, 1], micro_cfg)
        with pytest.raises(ValueError, match="2 speaker classes"):
            training.train_spoof_classifier(
                [np.zeros(8192), np.zeros(8192)], [0, 0], micro_cfg)

    def test_accuracy_empty_set_rejected(self, micro_cfg):
        clf = training.SpoofClassifier(micro_cfg)
        with pytest.raises(ValueError):
            training.classifier_accuracy(clf, [], [])

    def test_evaluate_spoofing_is_percentage(self, toy_clips, micro_cfg):
        clips, labels = toy_clips
        clf = training.SpoofClassifier(micro_cfg, seed=0)
        preds = [clf.predict(c) for c in clips]
        pct = training.evaluate_spoofing(clf, clips, preds)
        assert pct == 100.0

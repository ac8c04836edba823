"""Optimization: Adam, the alternating GAN loop, checkpoints, and the
spoof-classifier trainer used for objective conversion evaluation.

Determinism contract: every random draw of a run (batch sampling,
augmentation, posterior noise) flows through one ``numpy`` Generator
whose bit-generator state is checkpointed, so a resumed run continues
bitwise-identically to an unbroken one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import time

import numpy as np

from . import data, losses
from .autodiff import Tape, no_grad, ops
from .autodiff.tensor import Parameter, Tensor
from .dsp import SpectrogramConfig
from .layers import Module, WnDense
from .losses import LossWeights, total_discriminator_loss, total_generator_loss
from .model import _SPEAKER_WIDTHS, ModelConfig, SpeakerEncoder, VoiceConverter

CHECKPOINT_MAGIC = b"RVCK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss; carries the last
    component values as a diagnostic payload."""

    def __init__(self, message: str, parts: dict | None = None):
        super().__init__(message)
        self.parts = dict(parts or {})


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_epsilon: float = 1e-8
    batch_size: int = 8
    clip_length: int = 32768
    epochs: int | None = None   # budget in passes over the train split
    steps: int | None = None    # explicit step budget; overrides epochs
    seed: int = 0
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.clip_length % 256:
            raise ValueError(
                f"clip_length must be a multiple of 256, got {self.clip_length}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (reference pairing)")
        if not 0 < self.lr:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must be in [0, 1), got {b}")

    def step_budget(self, n_train_utterances: int) -> int:
        """Total optimizer steps implied by this config."""
        if self.steps is not None:
            return self.steps
        if self.epochs is not None:
            per_epoch = -(-n_train_utterances // self.batch_size)
            return self.epochs * per_epoch
        raise ValueError("config sets neither steps nor epochs")


class Adam:
    """Bias-corrected Adam over a fixed, named parameter list.

    Parameters whose ``.grad`` is None at ``step()`` are skipped
    (their moments stay untouched); the shared step counter still
    advances once per call.
    """

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.9, epsilon: float = 1e-8):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        seen = set()
        for name, _ in self.params:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.lr = lr
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name!r} shape {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / c1
            v_hat = v / c2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for name, _ in self.params:
            for buf, src in ((self.m, state["m"]), (self.v, state["v"])):
                if name not in src:
                    raise ValueError(f"optimizer state missing buffer {name!r}")
                if src[name].shape != buf[name].shape:
                    raise ValueError(
                        f"optimizer buffer {name!r}: stored shape "
                        f"{src[name].shape} vs expected {buf[name].shape}")
                buf[name] = src[name].astype(buf[name].dtype, copy=True)


# ----------------------------------------------------------------------
# checkpoint format:
#   RVCK | u32 version | u64 header_len | header JSON | raw blobs | sha256
# The header maps each named array to (dtype, shape, offset) inside the
# blob region; all scalars live in the JSON.  Digest covers everything
# before itself.
# ----------------------------------------------------------------------

def _config_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["dilations"] = list(d["dilations"])
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["mel"] = SpectrogramConfig(**d["mel"])
    d["dilations"] = tuple(d["dilations"])
    return ModelConfig(**d)


def save_checkpoint(path: str, model: VoiceConverter, opt_g: Adam | None = None,
                    opt_d: Adam | None = None, rng: np.random.Generator | None = None,
                    step: int = 0) -> None:
    arrays: list[tuple[str, np.ndarray]] = [
        (f"param.{name}", p.data) for name, p in model.named_parameters()]
    opt_meta = {}
    for tag, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        if opt is None:
            continue
        st = opt.state()
        opt_meta[tag] = {"t": st["t"]}
        arrays.extend((f"{tag}.m.{k}", a) for k, a in st["m"].items())
        arrays.extend((f"{tag}.v.{k}", a) for k, a in st["v"].items())

    records, blobs, offset = [], [], 0
    for name, arr in arrays:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        records.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "model_config": _config_dict(model.cfg),
        "step": int(step),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "arrays": records,
        "optimizers": opt_meta,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    body = (CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header_bytes))
            + header_bytes + b"".join(blobs))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)


@dataclasses.dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    rng_state: dict | None
    params: dict          # name -> ndarray
    opt_states: dict      # "opt_g"/"opt_d" -> {"t", "m": {...}, "v": {...}}

    def build_model(self, seed: int = 0) -> VoiceConverter:
        model = VoiceConverter(self.config, seed=seed)
        self.restore_model(model)
        return model

    def restore_model(self, model: VoiceConverter) -> None:
        if model.cfg != self.config:
            diffs = [
                f"{f.name}: checkpoint {getattr(self.config, f.name)!r} "
                f"vs model {getattr(model.cfg, f.name)!r}"
                for f in dataclasses.fields(ModelConfig)
                if getattr(model.cfg, f.name) != getattr(self.config, f.name)]
            raise ValueError("checkpoint config incompatible with model: "
                             + "; ".join(diffs))
        named = dict(model.named_parameters())
        missing = sorted(set(named) - set(self.params))
        extra = sorted(set(self.params) - set(named))
        if missing or extra:
            raise ValueError(
                f"checkpoint parameter mismatch: missing {missing[:3]}, "
                f"unexpected {extra[:3]}")
        for name, p in named.items():
            arr = self.params[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape "
                                 f"{arr.shape} vs model {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 + 32:
        raise ValueError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checkpoint digest mismatch (corrupt file)")
    if body[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<IQ", body[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} unsupported "
                         f"(expected {CHECKPOINT_VERSION})")
    header = json.loads(body[16:16 + header_len].decode("utf-8"))
    blob = body[16 + header_len:]

    params: dict = {}
    opt_states: dict = {tag: {"t": meta["t"], "m": {}, "v": {}}
                        for tag, meta in header["optimizers"].items()}
    for rec in header["arrays"]:
        dt = np.dtype(rec["dtype"]).newbyteorder("<")
        count = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count,
                            offset=rec["offset"]).reshape(rec["shape"])
        arr = arr.astype(np.dtype(rec["dtype"]), copy=True)
        name = rec["name"]
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        else:
            tag, kind, pname = name.split(".", 2)
            opt_states[tag][kind][pname] = arr
    return Checkpoint(config=_config_from_dict(header["model_config"]),
                      step=int(header["step"]),
                      rng_state=header["rng_state"],
                      params=params, opt_states=opt_states)


# ----------------------------------------------------------------------
# speaker-embedding files
# ----------------------------------------------------------------------

EMBEDDING_MAGIC = b"RVCE"


def save_embedding(path: str, vec: np.ndarray) -> None:
    """Write a speaker embedding as magic | u32 dim | float32 LE values."""
    vec = np.asarray(vec)
    if vec.ndim != 1:
        raise ValueError(f"embedding must be 1-D, got shape {vec.shape}")
    payload = vec.astype("<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(EMBEDDING_MAGIC + struct.pack("<I", vec.shape[0]) + payload)
    os.replace(tmp, path)


def load_embedding(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: not a speaker-embedding file (bad magic)")
    (dim,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 4 * dim:
        raise ValueError(f"{path}: embedding file truncated "
                         f"(header says {dim} values)")
    return np.frombuffer(raw, dtype="<f4", count=dim, offset=8).astype(
        np.float32, copy=True)


# ----------------------------------------------------------------------
# trainer
# ----------------------------------------------------------------------

class Trainer:
    """Alternating GAN optimization: one discriminator step, then one
    generator-side step (content encoder, speaker encoder, generator
    jointly) per batch."""

    def __init__(self, model: VoiceConverter, cfg: TrainConfig,
                 augmented: bool = True):
        self.model = model
        self.cfg = cfg
        self.augmented = augmented
        adam_args = dict(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                         epsilon=cfg.adam_epsilon)
        self.opt_g = Adam(model.named_conversion_parameters(), **adam_args)
        self.opt_d = Adam(model.named_discriminator_parameters(), **adam_args)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self._cache: dict = {}

    # -- single optimization step ---------------------------------------
    def train_step(self, batch: data.Batch) -> dict:
        self.opt_d.zero_grad()
        tape = Tape()
        with tape:
            d_loss, d_parts = total_discriminator_loss(self.model, batch, self.rng)
        self._check_finite(d_parts)
        tape.backward(d_loss)
        self.opt_d.step()

        self.opt_g.zero_grad()
        tape = Tape()
        with tape:
            g_loss, g_parts = total_generator_loss(
                self.model, batch, self.cfg.weights, self.rng)
        self._check_finite(g_parts)
        tape.backward(g_loss)
        self.opt_g.step()

        self.step_count += 1
        return {**d_parts, **g_parts}

    def _check_finite(self, parts: dict):
        bad = {k: v for k, v in parts.items() if not np.isfinite(v)}
        if bad:
            raise TrainingError(
                f"non-finite loss at step {self.step_count}: {bad}", parts)

    def sample_batch(self, dataset: data.Dataset,
                     augmented: bool | None = None) -> data.Batch:
        if augmented is None:
            augmented = self.augmented
        return data.sample_training_batch(
            dataset, "train", self.cfg.batch_size, self.cfg.clip_length,
            self.rng, cache=self._cache, augmented=augmented)

    # -- persistence ------------------------------------------------------
    def save(self, path: str):
        save_checkpoint(path, self.model, self.opt_g, self.opt_d,
                        self.rng, self.step_count)

    def load(self, path: str):
        ckpt = load_checkpoint(path)
        ckpt.restore_model(self.model)
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            if tag not in ckpt.opt_states:
                raise ValueError(f"checkpoint lacks optimizer state {tag!r}")
            opt.load_state(ckpt.opt_states[tag])
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.step_count = ckpt.step

    # -- full loop ---------------------------------------------------------
    def fit(self, dataset: data.Dataset, steps: int | None = None,
            out_dir: str | None = None, echo=None) -> list[dict]:
        """Train up to a total of ``steps`` optimizer steps (continuing
        from ``step_count`` if restored).  Writes ``train.log`` and
        periodic + final ``latest.ckpt`` under ``out_dir`` if given.
        Returns the per-step loss records."""
        total = steps if steps is not None else self.cfg.step_budget(
            len(dataset.split("train")))
        log_fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            log_fh = open(os.path.join(out_dir, "train.log"), "a", encoding="utf-8")
        history = []
        t0 = time.time()
        try:
            while self.step_count < total:
                batch = self.sample_batch(dataset)
                parts = self.train_step(batch)
                history.append(parts)
                line = format_log_line(self.step_count, parts, self.cfg.lr,
                                       time.time() - t0)
                if log_fh and (self.step_count % self.cfg.log_every == 0
                               or self.step_count == total):
                    log_fh.write(line + "\n")
                    log_fh.flush()
                if echo and self.step_count % self.cfg.log_every == 0:
                    echo(line)
                if out_dir and self.cfg.checkpoint_every and (
                        self.step_count % self.cfg.checkpoint_every == 0):
                    self.save(os.path.join(out_dir, f"step_{self.step_count:07d}.ckpt"))
                    self.save(os.path.join(out_dir, "latest.ckpt"))
            if out_dir:
                self.save(os.path.join(out_dir, "latest.ckpt"))
        finally:
            if log_fh:
                log_fh.close()
        return history


def format_log_line(step: int, parts: dict, lr: float, wall: float) -> str:
    fields = [f"step={step}"]
    fields += [f"{k}={parts[k]:.6g}" for k in sorted(parts)]
    fields += [f"lr={lr:.6g}", f"wall={wall:.3f}"]
    return " ".join(fields)


def parse_log_line(line: str) -> dict:
    out = {}
    for field in line.split():
        key, _, value = field.partition("=")
        out[key] = float(value) if key != "step" else int(value)
    return out


# ----------------------------------------------------------------------
# spoofing classifier
# ----------------------------------------------------------------------

class SpoofClassifier(Module):
    """Speaker-verification head: the speaker-encoder trunk plus a
    linear softmax layer over speaker classes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = SpeakerEncoder(cfg, rng)
        self.head = WnDense(cfg.scaled(_SPEAKER_WIDTHS)[-1], cfg.n_speakers,
                            rng=rng, dtype=cfg.np_dtype)

    @property
    def n_classes(self) -> int:
        return self.cfg.n_speakers

    def logits(self, clip) -> Tensor:
        pooled = self.encoder.features(clip)
        flat = ops.reshape(pooled, (pooled.shape[0],))
        return self.head(flat)

    def predict(self, clip) -> int:
        with no_grad():
            return int(np.argmax(self.logits(clip).data))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed via logsumexp."""
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} outside 0..{n - 1}")
    return ops.sub(ops.logsumexp(logits),
                   ops.reshape(logits[label:label + 1], ()))


def train_spoof_classifier(clips: list[np.ndarray], labels: list[int],
                           cfg: ModelConfig, epochs: int = 30,
                           lr: float = 5e-4, lr_decay: float = 0.99,
                           seed: int = 0, echo=None) -> SpoofClassifier:
    """Supervised speaker classification on real clips: Adam, exponential
    learning-rate decay per epoch."""
    if len(clips) != len(labels):
        raise ValueError("clips and labels must have equal length")
    if len(set(labels)) < 2:
        raise ValueError("spoof classifier needs at least 2 speaker classes")
    clf = SpoofClassifier(cfg, seed=seed)
    opt = Adam(clf.named_parameters(), lr=lr, beta1=0.5, beta2=0.9)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(clips))
        correct, total_loss = 0, 0.0
        for i in order:
            opt.zero_grad()
            tape = Tape()
            with tape:
                logit = clf.logits(clips[i])
                loss = cross_entropy(logit, labels[i])
            correct += int(np.argmax(logit.data)) == labels[i]
            total_loss += float(loss.data)
            tape.backward(loss)
            opt.step()
        opt.lr *= lr_decay
        if echo:
            echo(f"epoch={epoch + 1} ce={total_loss / len(clips):.4f} "
                 f"train_acc={correct / len(clips):.3f} lr={opt.lr:.3g}")
    return clf


def classifier_accuracy(clf: SpoofClassifier, clips, labels) -> float:
    if not len(clips):
        raise ValueError("empty evaluation set")
    hits = sum(clf.predict(c) == y for c, y in zip(clips, labels))
    return hits / len(clips)


def evaluate_spoofing(clf: SpoofClassifier, converted_clips,
                      target_labels) -> float:
    """Percentage of conversions classified as their target speaker."""
    return 100.0 * classifier_accuracy(clf, converted_clips, target_labels)

"""Run configuration files.

A run config is one YAML document with four sections — ``model``,
``train``, ``loss``, ``data`` — plus ``out_dir`` and an optional
``augment`` toggle.  Every field is validated on load (ranges via the
underlying dataclass constructors, names via an unknown-key check) so
bad configs fail before any compute.

Example::

    model:
      n_speakers: 2
      desk_scale: true
    train:
      steps: 2000
      batch_size: 8
      clip_length: 32768
      seed: 7
    loss:
      lambda_rec: 10.0
    data:
      manifest: corpus/manifest.tsv
    out_dir: runs/demo
"""

from __future__ import annotations

import dataclasses
import os

import yaml

from .dsp import SpectrogramConfig
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    manifest: str
    out_dir: str
    augment: bool = True


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ValueError(
            f"config section {section!r}: unknown keys {unknown}; "
            f"allowed: {sorted(allowed)}")


def _model_from_section(section: dict) -> ModelConfig:
    section = dict(section)
    desk = bool(section.pop("desk_scale", False))
    if "mel" in section:
        mel = section.pop("mel")
        _check_keys("model.mel", mel,
                    [f.name for f in dataclasses.fields(SpectrogramConfig)])
        section["mel"] = SpectrogramConfig(**mel)
    if "dilations" in section:
        section["dilations"] = tuple(section["dilations"])
    fields = [f.name for f in dataclasses.fields(ModelConfig)]
    _check_keys("model", section, fields)
    if "n_speakers" not in section:
        raise ValueError("config section 'model': n_speakers is required")
    if desk:
        return ModelConfig.desk_scale(**section)
    return ModelConfig(**section)


_TRAIN_FLOATS = ("lr", "adam_beta1", "adam_beta2", "adam_epsilon")
_LOSS_FLOATS = ("lambda_rec", "lambda_con", "lambda_kl", "beta")


def _coerce_floats(section: str, given: dict, names) -> None:
    # YAML reads unadorned scientific notation ("1e-4") as a string
    for name in names:
        if name in given:
            try:
                given[name] = float(given[name])
            except (TypeError, ValueError) as exc:
                raise ValueError(
                    f"config section {section!r}: {name} must be a number, "
                    f"got {given[name]!r}") from exc


def _train_from_section(section: dict, loss_section: dict) -> TrainConfig:
    section = dict(section)
    _check_keys("loss", loss_section,
                [f.name for f in dataclasses.fields(LossWeights)])
    loss_section = dict(loss_section)
    _coerce_floats("train", section, _TRAIN_FLOATS)
    _coerce_floats("loss", loss_section, _LOSS_FLOATS)
    if "fft_sizes" in loss_section:
        loss_section["fft_sizes"] = tuple(loss_section["fft_sizes"])
    fields = [f.name for f in dataclasses.fields(TrainConfig)]
    _check_keys("train", section, fields)
    section["weights"] = LossWeights(**loss_section)
    return TrainConfig(**section)


def load_run_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    _check_keys("<root>", doc, ("model", "train", "loss", "data", "out_dir",
                                "augment"))
    for required in ("model", "data", "out_dir"):
        if required not in doc:
            raise ValueError(f"{path}: missing required section {required!r}")
    data_section = dict(doc["data"])
    _check_keys("data", data_section, ("manifest",))
    if "manifest" not in data_section:
        raise ValueError(f"{path}: data.manifest is required")

    try:
        model = _model_from_section(doc["model"] or {})
        train = _train_from_section(doc.get("train") or {}, doc.get("loss") or {})
    except TypeError as exc:  # wrong type reached a dataclass field
        raise ValueError(f"{path}: {exc}") from exc

    manifest = data_section["manifest"]
    if not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(path)), manifest)
    out_dir = doc["out_dir"]
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(os.path.dirname(os.path.abspath(path)), out_dir)
    return RunConfig(model=model, train=train, manifest=manifest,
                     out_dir=out_dir, augment=bool(doc.get("augment", True)))


def save_run_config(path: str, cfg: RunConfig) -> None:
    model = dataclasses.asdict(cfg.model)
    model["mel"] = dict(model["mel"])
    model["dilations"] = list(model["dilations"])
    train = dataclasses.asdict(cfg.train)
    loss = train.pop("weights")
    loss["fft_sizes"] = list(loss["fft_sizes"])
    doc = {"model": model, "train": train, "loss": loss,
           "data": {"manifest": cfg.manifest}, "out_dir": cfg.out_dir,
           "augment": cfg.augment}
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)

"""Training objectives.

The generator side minimizes

    L_G = L_adv + lambda_rec * L_rec + lambda_con * L_con + lambda_kl * L_kl

where L_rec combines discriminator feature matching with multi-resolution
log-mel distances, L_con penalizes content drift through a conversion
round-trip, and L_kl pulls speaker posteriors toward the unit Gaussian.
The discriminator maximizes the per-speaker-branch patch objective it
shares with L_adv.

Patch logits are aggregated as the mean of per-patch log terms; batch
aggregation is the mean over items.  All log-probabilities go through
the stable log-sigmoid op, never through probabilities directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, astensor, frozen, no_grad, ops
from .dsp import log_mel_spectrogram, spectral_loss_configs
from .model import ScaleOutput, SpeakerPosterior, VoiceConverter


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 10.0
    lambda_con: float = 10.0
    lambda_kl: float = 0.02
    beta: float = 1.0
    fft_sizes: tuple = (2048, 1024, 512)
    #: False = saturating generator loss (minimize log(1 - D));
    #: True  = minimize -log D instead.
    non_saturating: bool = False

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_con", "lambda_kl", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _branch(out: ScaleOutput, speaker: int) -> Tensor:
    """Patch logits of one speaker branch: (n_patches,)."""
    n = out.logits.shape[0]
    if not 0 <= speaker < n:
        raise ValueError(f"speaker index {speaker} outside 0..{n - 1}")
    return ops.reshape(out.logits[speaker : speaker + 1, :], (out.logits.shape[1],))


def adv_loss_discriminator(real_out: ScaleOutput, real_speaker: int,
                           fake_out: ScaleOutput, fake_speaker: int) -> Tensor:
    """One scale of the discriminator objective.

    -mean log D(x)[y] - mean log(1 - D(x_fake)[y_fake]); perfect
    separation drives it to 0, a coin-flip discriminator sits at 2 ln 2.
    The fake must already be detached from the generator.
    """
    real_term = ops.mean(ops.log_sigmoid(_branch(real_out, real_speaker)))
    fake_term = ops.mean(ops.log_sigmoid(ops.neg(_branch(fake_out, fake_speaker))))
    return ops.neg(ops.add(real_term, fake_term))


def adv_loss_generator(fake_outs: list[ScaleOutput], fake_speaker: int,
                       non_saturating: bool = False) -> Tensor:
    """Sum over scales of the generator's adversarial term.

    Saturating (default): mean log(1 - D(fake)[y]) per scale, minimized.
    Non-saturating: -mean log D(fake)[y] per scale instead.
    """
    total = None
    for out in fake_outs:
        logits = _branch(out, fake_speaker)
        if non_saturating:
            term = ops.neg(ops.mean(ops.log_sigmoid(logits)))
        else:
            term = ops.mean(ops.log_sigmoid(ops.neg(logits)))
        total = term if total is None else ops.add(total, term)
    return total


def feature_matching_loss(real_outs: list[ScaleOutput],
                          fake_outs: list[ScaleOutput]) -> Tensor:
    """Sum over scales and depths of mean |feat(x) - feat(fake)|.

    The real-side features are treated as constants; compute them under
    no_grad (the discriminator itself must be frozen by the caller when
    this feeds a generator update).
    """
    total = None
    for real_out, fake_out in zip(real_outs, fake_outs):
        if not real_out.features or not fake_out.features:
            raise ValueError("feature matching needs nonempty feature lists")
        for fr, ff in zip(real_out.features, fake_out.features):
            term = ops.mean(ops.abs_(ops.sub(ff, fr.detach())))
            total = term if total is None else ops.add(total, term)
    return total


def spectral_loss(reference, generated, cfg) -> Tensor:
    """Squared l2 distance between log-mel spectrograms at one resolution."""
    ref_mel = log_mel_spectrogram(astensor(reference), cfg)
    gen_mel = log_mel_spectrogram(astensor(generated), cfg)
    return ops.sum_(ops.square(ops.sub(ref_mel, gen_mel)))


def multi_spectral_loss(reference, generated, weights: LossWeights) -> Tensor:
    total = None
    for cfg in spectral_loss_configs(weights.fft_sizes):
        term = spectral_loss(reference, generated, cfg)
        total = term if total is None else ops.add(total, term)
    return total


def reconstruction_loss(model: VoiceConverter, target, generated,
                        weights: LossWeights) -> Tensor:
    """Feature matching against the target plus beta * spectral terms."""
    with no_grad():
        target_outs = model.discriminate(target)
    fake_outs = model.discriminate(generated)
    fm = feature_matching_loss(target_outs, fake_outs)
    spe = multi_spectral_loss(astensor(target).detach(), generated, weights)
    return ops.add(fm, ops.mul(spe, weights.beta))


def content_preservation_loss(code_source: Tensor, code_converted: Tensor) -> Tensor:
    """Squared l2 between unit-column content codes.

    With both codes column-normalized this is bounded by 4 * n_columns.
    """
    if code_source.shape != code_converted.shape:
        raise ValueError(
            f"code shapes differ: {code_source.shape} vs {code_converted.shape}"
        )
    return ops.sum_(ops.square(ops.sub(code_source, code_converted)))


def kl_loss(posterior: SpeakerPosterior) -> Tensor:
    """KL(q || N(0, I)) in closed form: 0.5 * sum(mu^2 + var - 1 - log var)."""
    var = ops.exp(posterior.logvar)
    inner = ops.sub(ops.add(ops.square(posterior.mu), var),
                    ops.add(posterior.logvar, 1.0))
    return ops.mul(ops.sum_(inner), 0.5)


def _batch_mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(terms))


def total_discriminator_loss(model: VoiceConverter, batch, rng) -> tuple[Tensor, dict]:
    """Mean over the batch of the summed per-scale discriminator losses.

    Fakes are conversions toward each item's derangement partner,
    generated without gradient flow (the generator side sees nothing).
    """
    per_item = []
    for i in range(batch.size):
        with no_grad():
            code = model.content_encode(batch.inputs[i])
            ref_post = model.speaker_encode(batch.ref_views[i])
            fake = model.generate(code, ref_post.sample(rng)).data
        real_outs = model.discriminate(batch.inputs[i])
        fake_outs = model.discriminate(fake)
        y, y_ref = int(batch.labels[i]), int(batch.ref_labels[i])
        item_total = None
        for r, f in zip(real_outs, fake_outs):
            term = adv_loss_discriminator(r, y, f, y_ref)
            item_total = term if item_total is None else ops.add(item_total, term)
        per_item.append(item_total)
    loss = _batch_mean(per_item)
    return loss, {"d_total": float(loss.data)}


def total_generator_loss(model: VoiceConverter, batch, weights: LossWeights,
                         rng) -> tuple[Tensor, dict]:
    """The full generator-side objective on one batch.

    Returns (scalar loss, float components).  The discriminator is
    frozen for the duration — gradients flow through it into the
    generator but never into its own weights.
    """
    adv_terms, rec_terms, con_terms, kl_terms = [], [], [], []
    with frozen(model.discriminator.parameters()):
        posts = [model.speaker_encode(batch.speaker_views[i])
                 for i in range(batch.size)]
        for i in range(batch.size):
            code = model.content_encode(batch.inputs[i])
            z_own = posts[i].sample(rng)
            recon = model.generate(code, z_own)
            z_ref = posts[batch.ref_indices[i]].sample(rng)
            converted = model.generate(code, z_ref)

            fake_outs = model.discriminate(converted)
            adv_terms.append(adv_loss_generator(
                fake_outs, int(batch.ref_labels[i]), weights.non_saturating))
            rec_terms.append(reconstruction_loss(
                model, batch.targets[i], recon, weights))
            con_terms.append(content_preservation_loss(
                code, model.content_encode(converted)))
            kl_terms.append(kl_loss(posts[i]))

    adv = _batch_mean(adv_terms)
    rec = _batch_mean(rec_terms)
    con = _batch_mean(con_terms)
    kl = _batch_mean(kl_terms)
    total = ops.add(
        ops.add(adv, ops.mul(rec, weights.lambda_rec)),
        ops.add(ops.mul(con, weights.lambda_con), ops.mul(kl, weights.lambda_kl)),
    )
    parts = {
        "g_total": float(total.data),
        "adv": float(adv.data),
        "rec": float(rec.data),
        "con": float(con.data),
        "kl": float(kl.data),
    }
    return total, parts

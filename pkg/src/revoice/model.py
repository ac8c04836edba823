"""The conversion networks.

Four weight-normalized convolutional nets operate on single clips:

* ContentEncoder   — waveform (T,) -> content code (d_content, T/256),
                     columns l2-normalized
* SpeakerEncoder   — waveform -> diagonal Gaussian over speaker embeddings
* Generator        — (content code, speaker embedding) -> waveform (T,)
* MultiScaleDiscriminator — waveform -> per-scale patch logits (one branch
                     per speaker) plus intermediate feature maps

Conversion is G(E_content(source), z_target): content is speaker-agnostic
by construction pressure, so swapping the embedding swaps the voice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, astensor, no_grad, ops
from .dsp import SpectrogramConfig, log_mel_spectrogram
from .layers import Module, WnConv1d, WnConvTranspose1d

_ENCODER_WIDTHS = (32, 64, 128, 256, 512)
_GENERATOR_WIDTHS = (512, 256, 128, 64, 32)
_SPEAKER_WIDTHS = (32, 64, 128, 256, 512, 512)
_DISC_WIDTHS = (16, 64, 256, 1024, 1024)
_DISC_GROUPS = (4, 16, 64, 256)
# (kernel, stride, pad) per downsampling stage; generator mirrors them.
_DOWN_GEOMETRY = ((4, 2, 1), (4, 2, 1), (16, 8, 4), (16, 8, 4))

TOTAL_DOWNSAMPLE = 256  # product of encoder strides
MIN_SPEAKER_FRAMES = 32  # five halvings of the mel axis need 2**5 frames


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``width_divisor`` shrinks every channel width (1 = full size); the
    desk-scale preset divides widths by 4 and keeps 2 residual blocks
    per stack so experiments fit on a CPU.
    """

    n_speakers: int
    d_content: int = 4
    d_speaker: int = 128
    width_divisor: int = 1
    blocks_per_stack: int = 4
    dilations: tuple = (1, 3, 9, 27)
    sample_rate: int = 22050
    mel: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_speakers < 1:
            raise ValueError("n_speakers must be >= 1")
        if self.d_content < 1 or self.d_speaker < 1:
            raise ValueError("d_content and d_speaker must be >= 1")
        if not 1 <= self.blocks_per_stack <= len(self.dilations):
            raise ValueError(
                f"blocks_per_stack must be in 1..{len(self.dilations)}"
            )
        for w in _ENCODER_WIDTHS + _DISC_WIDTHS:
            if w % self.width_divisor:
                raise ValueError(
                    f"width_divisor {self.width_divisor} does not divide channel width {w}"
                )
        for k, s, _ in _DOWN_GEOMETRY:
            assert k % s == 0, "up/downsample kernels must be stride multiples"
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def stack_dilations(self) -> tuple:
        return tuple(self.dilations[: self.blocks_per_stack])

    def scaled(self, widths) -> tuple:
        return tuple(w // self.width_divisor for w in widths)

    @property
    def min_speaker_length(self) -> int:
        return (MIN_SPEAKER_FRAMES - 1) * self.mel.hop

    @classmethod
    def desk_scale(cls, n_speakers: int, **overrides) -> "ModelConfig":
        overrides.setdefault("width_divisor", 4)
        overrides.setdefault("blocks_per_stack", 2)
        return cls(n_speakers=n_speakers, **overrides)


class ResidualBlock(Module):
    """Gated dilated residual unit.

    x + 1x1(tanh(a) * sigmoid(b)) where [a; b] is a dilated k3 conv of x,
    optionally shifted per-channel by a 1x1 projection of the speaker
    embedding (the conditioning path of the generator).
    """

    def __init__(self, channels, dilation, *, cond_dim=None, rng, dtype):
        self.dilated = WnConv1d(channels, 2 * channels, 3, dilation=dilation,
                                pad=dilation, pad_mode="reflect", rng=rng, dtype=dtype)
        self.cond = (WnConv1d(cond_dim, 2 * channels, 1, rng=rng, dtype=dtype)
                     if cond_dim else None)
        self.proj = WnConv1d(channels, channels, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, z: Tensor | None = None) -> Tensor:
        h = self.dilated(x)
        if self.cond is not None:
            if z is None:
                raise ValueError("conditioned residual block needs an embedding")
            h = ops.add(h, self.cond(z))
        return ops.add(x, self.proj(ops.gated_tanh(h)))


class ContentEncoder(Module):
    """Waveform -> speaker-agnostic code at 1/256 temporal rate."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        widths = cfg.scaled(_ENCODER_WIDTHS)
        self.conv_in = WnConv1d(1, widths[0], 7, pad=3, rng=rng, dtype=dt)
        self.stacks, self.downs = [], []
        for i, (k, s, p) in enumerate(_DOWN_GEOMETRY):
            self.stacks.append([
                ResidualBlock(widths[i], d, rng=rng, dtype=dt)
                for d in cfg.stack_dilations
            ])
            self.downs.append(WnConv1d(widths[i], widths[i + 1], k, stride=s,
                                       pad=p, rng=rng, dtype=dt))
        self.conv_a = WnConv1d(widths[4], cfg.d_content, 7, pad=3, rng=rng, dtype=dt)
        self.conv_b = WnConv1d(cfg.d_content, cfg.d_content, 7, pad=3, rng=rng, dtype=dt)

    def __call__(self, x: Tensor) -> Tensor:
        t = x.shape[-1]
        if t <= 0 or t % TOTAL_DOWNSAMPLE:
            raise ValueError(
                f"content encoder needs a positive multiple of {TOTAL_DOWNSAMPLE} "
                f"samples, got {t}"
            )
        h = self.conv_in(ops.reshape(x, (1, t)))
        for blocks, down in zip(self.stacks, self.downs):
            for blk in blocks:
                h = blk(h)
            h = down(h)
        h = self.conv_b(ops.gelu(self.conv_a(h)))
        norm = ops.sqrt(ops.sum_(ops.square(h), axis=0, keepdims=True))
        return ops.div(h, ops.maximum(norm, 1e-8))


@dataclass
class SpeakerPosterior:
    """Diagonal Gaussian over speaker embeddings, parameterized by
    mean and log-variance (so the std is positive by construction)."""

    mu: Tensor
    logvar: Tensor

    @classmethod
    def from_moments(cls, mu, sigma) -> "SpeakerPosterior":
        mu = astensor(mu)
        sig = np.asarray(astensor(sigma).data)
        if np.any(sig <= 0):
            raise ValueError("speaker posterior std must be positive")
        return cls(mu=mu, logvar=Tensor(2.0 * np.log(sig)))

    def sigma(self) -> Tensor:
        return ops.exp(ops.mul(self.logvar, 0.5))

    def sample(self, rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> Tensor:
        """Reparameterized draw mu + sigma * eps (eps=0 gives the mean)."""
        if eps is None:
            if rng is None:
                raise ValueError("sample needs either rng or an explicit eps")
            eps = rng.standard_normal(self.mu.shape[0])
        eps = np.asarray(eps, dtype=self.mu.dtype)
        return ops.add(self.mu, ops.mul(self.sigma(), Tensor(eps)))


class SpeakerEncoder(Module):
    """Log-mel front end, strided conv pyramid, temporal average, two
    1x1 heads for the posterior mean and log-variance."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        widths = cfg.scaled(_SPEAKER_WIDTHS)
        self.mel_cfg = cfg.mel
        self.conv_in = WnConv1d(cfg.mel.n_mels, widths[0], 3, pad=1,
                                pad_mode="zero", rng=rng, dtype=dt)
        self.convs = [
            WnConv1d(widths[i], widths[i + 1], 3, pad=1, pad_mode="zero",
                     rng=rng, dtype=dt)
            for i in range(5)
        ]
        self.mu_head = WnConv1d(widths[5], cfg.d_speaker, 1, rng=rng, dtype=dt)
        self.logvar_head = WnConv1d(widths[5], cfg.d_speaker, 1, rng=rng, dtype=dt)

    def features(self, x: Tensor) -> Tensor:
        """Temporally pooled body output, shape (width, 1) — the shared
        trunk reused by the spoofing classifier."""
        x = astensor(x)
        frames = self.mel_cfg.frame_count(x.shape[-1])
        if frames < MIN_SPEAKER_FRAMES:
            raise ValueError(
                f"speaker encoder needs >= {MIN_SPEAKER_FRAMES} mel frames "
                f"({(MIN_SPEAKER_FRAMES - 1) * self.mel_cfg.hop} samples), "
                f"got {frames} frames"
            )
        if x.ndim == 2:
            x = ops.reshape(x, (x.shape[-1],))
        h = self.conv_in(log_mel_spectrogram(x, self.mel_cfg))
        for conv in self.convs:
            h = ops.avg_pool1d(ops.leaky_relu(conv(h)), 2, 2)
        return ops.mean(h, axis=1, keepdims=True)

    def __call__(self, x: Tensor) -> SpeakerPosterior:
        pooled = self.features(x)
        d = self.mu_head.c_out
        mu = ops.reshape(self.mu_head(pooled), (d,))
        logvar = ops.reshape(self.logvar_head(pooled), (d,))
        return SpeakerPosterior(mu=mu, logvar=logvar)


class Generator(Module):
    """Content code + speaker embedding -> waveform in (-1, 1)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        widths = cfg.scaled(_GENERATOR_WIDTHS)
        self.d_speaker = cfg.d_speaker
        self.conv_in1 = WnConv1d(cfg.d_content, widths[0], 7, pad=3, rng=rng, dtype=dt)
        self.conv_in2 = WnConv1d(widths[0], widths[0], 7, pad=3, rng=rng, dtype=dt)
        self.ups, self.stacks = [], []
        for i, (k, s, p) in enumerate(reversed(_DOWN_GEOMETRY)):
            self.ups.append(WnConvTranspose1d(widths[i], widths[i + 1], k,
                                              stride=s, pad=p, rng=rng, dtype=dt))
            self.stacks.append([
                ResidualBlock(widths[i + 1], d, cond_dim=cfg.d_speaker,
                              rng=rng, dtype=dt)
                for d in cfg.stack_dilations
            ])
        self.conv_out = WnConv1d(widths[4], 1, 7, pad=3, rng=rng, dtype=dt)

    def __call__(self, code: Tensor, embedding: Tensor) -> Tensor:
        code = astensor(code)
        if code.ndim != 2:
            raise ValueError(f"content code must be 2-D, got shape {code.shape}")
        z = ops.reshape(astensor(embedding), (self.d_speaker, 1))
        h = self.conv_in2(self.conv_in1(code))
        for up, blocks in zip(self.ups, self.stacks):
            h = ops.gelu(up(h))
            for blk in blocks:
                h = blk(h, z)
        out = ops.tanh(self.conv_out(h))
        return ops.reshape(out, (out.shape[-1],))


@dataclass
class ScaleOutput:
    """One discriminator scale: per-speaker patch logits + feature maps."""

    logits: Tensor           # (n_speakers, n_patches)
    features: list           # post-activation maps, shallow to deep


class ScaleDiscriminator(Module):
    """PatchGAN body with grouped strided convs and per-speaker 1x1 heads."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        widths = cfg.scaled(_DISC_WIDTHS)
        groups = [max(1, g // cfg.width_divisor) for g in _DISC_GROUPS]
        for w_in, w_out, g in zip(widths[:4], widths[1:], groups):
            if w_in % g or w_out % g:
                raise ValueError(
                    f"discriminator groups {g} incompatible with widths {w_in}->{w_out}"
                )
        self.body = [WnConv1d(1, widths[0], 15, pad=7, pad_mode="zero",
                              rng=rng, dtype=dt)]
        chain_in = widths[0]
        for w_out, g in zip(widths[1:], groups):
            self.body.append(WnConv1d(chain_in, w_out, 41, stride=4, pad=20,
                                      pad_mode="zero", groups=g, rng=rng, dtype=dt))
            chain_in = w_out
        self.body.append(WnConv1d(chain_in, chain_in, 5, pad=2, pad_mode="zero",
                                  rng=rng, dtype=dt))
        self.head = WnConv1d(chain_in, cfg.n_speakers, 1, rng=rng, dtype=dt)

    def __call__(self, x: Tensor) -> ScaleOutput:
        feats = []
        h = x
        for conv in self.body:
            h = ops.leaky_relu(conv(h))
            feats.append(h)
        return ScaleOutput(logits=self.head(h), features=feats)


class MultiScaleDiscriminator(Module):
    """Three scale discriminators on 1x, 2x and 4x average-pooled audio."""

    N_SCALES = 3

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.scales = [ScaleDiscriminator(cfg, rng) for _ in range(self.N_SCALES)]

    def __call__(self, x: Tensor) -> list[ScaleOutput]:
        x = astensor(x)
        if x.ndim == 1:
            x = ops.reshape(x, (1, x.shape[0]))
        outs = []
        for i, disc in enumerate(self.scales):
            if i:
                x = ops.avg_pool1d(x, 4, 2)
            outs.append(disc(x))
        return outs


class VoiceConverter(Module):
    """The full system: three conversion networks plus the critic."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.content_encoder = ContentEncoder(cfg, rng)
        self.speaker_encoder = SpeakerEncoder(cfg, rng)
        self.generator = Generator(cfg, rng)
        self.discriminator = MultiScaleDiscriminator(cfg, rng)

    # -- the four network ops ------------------------------------------
    def content_encode(self, x) -> Tensor:
        return self.content_encoder(self._clip(x))

    def speaker_encode(self, x) -> SpeakerPosterior:
        return self.speaker_encoder(self._clip(x))

    def generate(self, code, embedding) -> Tensor:
        return self.generator(code, embedding)

    def discriminate(self, x) -> list[ScaleOutput]:
        return self.discriminator(self._clip(x))

    # -- parameter bookkeeping ------------------------------------------
    _NETS = (("content", "content_encoder"), ("speaker", "speaker_encoder"),
             ("gen", "generator"), ("disc", "discriminator"))

    def named_parameters(self):
        """All parameters with globally unique dotted names."""
        for prefix, attr in self._NETS:
            for name, p in getattr(self, attr).named_parameters():
                yield f"{prefix}.{name}", p

    def named_conversion_parameters(self):
        """Named parameters of the generator-side nets (E_c, E_s, G)."""
        for prefix, attr in self._NETS[:3]:
            for name, p in getattr(self, attr).named_parameters():
                yield f"{prefix}.{name}", p

    def named_discriminator_parameters(self):
        for name, p in self.discriminator.named_parameters():
            yield f"disc.{name}", p

    def conversion_parameters(self) -> list:
        """Everything the generator-side optimizer updates."""
        return (self.content_encoder.parameters()
                + self.speaker_encoder.parameters()
                + self.generator.parameters())

    def count_parameters(self) -> dict:
        counts = {
            "content_encoder": self.content_encoder.num_parameters(),
            "speaker_encoder": self.speaker_encoder.num_parameters(),
            "generator": self.generator.num_parameters(),
            "discriminator": self.discriminator.num_parameters(),
        }
        counts["conversion_total"] = (counts["content_encoder"]
                                      + counts["speaker_encoder"]
                                      + counts["generator"])
        counts["total"] = counts["conversion_total"] + counts["discriminator"]
        return counts

    # -- inference helpers ------------------------------------------------
    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.cfg.d_speaker).astype(self.cfg.np_dtype)

    def convert(self, source, embedding) -> np.ndarray:
        """G(E_content(source), embedding) — length preserved exactly."""
        with no_grad():
            code = self.content_encode(source)
            out = self.generate(code, astensor(embedding))
        return out.data

    def reconstruct(self, x) -> np.ndarray:
        """Round-trip through content code + posterior mean embedding."""
        with no_grad():
            post = self.speaker_encode(x)
            return self.convert(x, post.mu)

    def _clip(self, x) -> Tensor:
        t = astensor(x)
        if t.ndim != 1:
            raise ValueError(f"expected a mono waveform (T,), got shape {t.shape}")
        if t.dtype != self.cfg.np_dtype:
            t = Tensor(t.data.astype(self.cfg.np_dtype))
        return t

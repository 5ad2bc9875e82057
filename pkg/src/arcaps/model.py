"""Full network assembly, loss functions and the parameter-count breakdown."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InputDataError
from .layers import ConvBlock, Decoder, FullyConvCaps, PrimaryCaps, ConvCaps
from .optim import ParameterStore


@dataclass(frozen=True)
class ConvCapsSpec:
    dim: int
    channels: int
    stride: int = 1
    residual: bool = False


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture description.

    The default values build the 28x28 grayscale 10-class network: a two
    convolution stem of width 64, a primary layer of eight 16-dimensional
    capsule channels, one stride-2 capsule layer and a ten-channel
    32-dimensional output layer with a (512, 512) reconstruction decoder.
    """

    input_width: int = 28
    input_height: int = 28
    input_channels: int = 1
    stem_width: int = 64
    primary_dim: int = 16
    primary_channels: int = 8
    conv_caps: tuple[ConvCapsSpec, ...] = (ConvCapsSpec(dim=32, channels=8, stride=2),)
    out_dim: int = 32
    classes: int = 10
    decoder_widths: tuple[int, ...] = (512, 512)
    m_plus: float = 0.9
    m_minus: float = 0.1
    loss_lambda: float = 0.5
    recon_scale: float = 0.3
    keep_prob: float = 0.5

    @property
    def pixels(self):
        return self.input_width * self.input_height * self.input_channels

    def spatial_chain(self):
        """(W, H) entering each capsule layer: primary output, then each
        conv caps output, ending with the fully conv caps input."""
        w = -(-self.input_width // 2)
        h = -(-self.input_height // 2)
        chain = [(w, h)]
        for spec in self.conv_caps:
            w = -(-w // spec.stride)
            h = -(-h // spec.stride)
            chain.append((w, h))
        return chain

    def validate(self):
        if self.classes < 1:
            raise ConfigurationError("classes must be >= 1")
        for name in ("input_width", "input_height", "input_channels", "stem_width",
                     "primary_dim", "primary_channels", "out_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigurationError("keep_prob must be in (0, 1]")
        prev_dim, prev_ch = self.primary_dim, self.primary_channels
        for i, spec in enumerate(self.conv_caps):
            if spec.stride not in (1, 2):
                raise ConfigurationError(f"conv_caps[{i}].stride must be 1 or 2")
            if spec.residual and (
                spec.stride != 1 or spec.dim != prev_dim or spec.channels != prev_ch
            ):
                raise ConfigurationError(
                    f"conv_caps[{i}].residual requires stride 1 and matching "
                    f"dim/channels (got {prev_dim}x{prev_ch} -> {spec.dim}x{spec.channels})"
                )
            prev_dim, prev_ch = spec.dim, spec.channels
        return self


def standard_stack(count, dim, channels, residual=True):
    """Capsule-layer stack used throughout: the first layer halves the
    spatial extent; later layers keep it and (optionally) add residually."""
    specs = []
    for i in range(count):
        if i == 0:
            specs.append(ConvCapsSpec(dim=dim, channels=channels, stride=2))
        else:
            specs.append(ConvCapsSpec(dim=dim, channels=channels, stride=1,
                                      residual=residual))
    return tuple(specs)


class ForwardResult:
    """Outputs of one forward pass (graph tensors)."""

    __slots__ = ("scores", "capsules", "reconstruction", "predictions")

    def __init__(self, scores, capsules, reconstruction, predictions):
        self.scores = scores
        self.capsules = capsules
        self.reconstruction = reconstruction
        self.predictions = predictions


class ArCapsNet:
    """The assembled network: stem, capsule stack, decoder."""

    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.store = ParameterStore()
        rng = np.random.default_rng(np.random.SeedSequence([0x_A2C, seed]))

        c = config.input_channels
        self.stem = []
        for i in range(2):
            self.stem.append(ConvBlock(
                self.store, f"stem{i}", c, config.stem_width, rng, dtype))
            c = config.stem_width

        self.primary = PrimaryCaps(
            self.store, "primary", c, config.primary_dim, config.primary_channels,
            rng, dtype)

        chain = config.spatial_chain()
        dim, ch = config.primary_dim, config.primary_channels
        self.caps_layers = []
        for i, spec in enumerate(config.conv_caps):
            self.caps_layers.append(ConvCaps(
                self.store, f"convcaps{i}", dim, ch, spec.dim, spec.channels,
                rng, stride=spec.stride, residual=spec.residual,
                keep_prob=config.keep_prob, dtype=dtype))
            dim, ch = spec.dim, spec.channels

        self.fully = FullyConvCaps(
            self.store, "fullycaps", dim, ch, config.out_dim, config.classes,
            chain[-1], rng, keep_prob=config.keep_prob, dtype=dtype)

        self.decoder = Decoder(
            self.store, "decoder", config.out_dim * config.classes,
            config.decoder_widths, config.pixels, rng, dtype)

    # -- forward -----------------------------------------------------------

    def capsule_forward(self, images, train=False, rng=None):
        """Images (B, W, H, C) through to output capsules (B, D, N)."""
        if images.ndim == 3:
            images = images[..., None]
        expect = (self.config.input_width, self.config.input_height,
                  self.config.input_channels)
        if images.shape[1:] != expect:
            raise ConfigurationError(
                f"input images {images.shape[1:]} do not match configured {expect}")
        x = T.leaf(images.astype(self.dtype, copy=False))
        for block in self.stem:
            x = block.forward(x, train)
        caps = self.primary.forward(x, train)
        for layer in self.caps_layers:
            caps = layer.forward(caps, train, rng)
        caps = self.fully.forward(caps, train, rng)
        b = caps.shape[0]
        return T.reshape(caps, (b, self.config.out_dim, self.config.classes))

    def forward(self, images, labels=None, train=False, rng=None):
        """Full pass: scores, output capsules, reconstruction.

        Train mode masks the decoder input with the true labels (required);
        otherwise with ``labels`` when given, else with the predictions.
        """
        capsules = self.capsule_forward(images, train, rng)
        scores = normalized_length(capsules)
        predictions = np.argmax(scores.data, axis=1)
        if train:
            if labels is None:
                raise ConfigurationError("train-mode forward needs labels for masking")
            mask_labels = labels
        else:
            mask_labels = labels if labels is not None else predictions
        recon = self.decode(capsules, mask_labels)
        return ForwardResult(scores, capsules, recon, predictions)

    def decode(self, capsules, labels):
        """Zero every non-target class capsule, flatten, run the decoder."""
        b, d, n = capsules.shape
        labels = np.asarray(labels)
        if labels.shape != (b,):
            raise InputDataError(f"labels shape {labels.shape} != ({b},)")
        if labels.min() < 0 or labels.max() >= n:
            raise InputDataError(
                f"label out of range [0, {n}): {labels.min()}..{labels.max()}")
        mask = np.zeros((b, 1, n), dtype=capsules.dtype)
        mask[np.arange(b), 0, labels] = 1.0
        masked = T.scale_by(capsules, mask)
        return self.decoder.forward(T.reshape(masked, (b, d * n)))

    def loss(self, images, labels, train=False, rng=None):
        """Total, margin and reconstruction loss tensors plus the result."""
        result = self.forward(images, labels, train=train, rng=rng)
        cfg = self.config
        margin = margin_loss(result.scores, labels, cfg.classes,
                             cfg.m_plus, cfg.m_minus, cfg.loss_lambda)
        flat = images.reshape(images.shape[0], -1).astype(self.dtype, copy=False)
        recon = reconstruction_loss(result.reconstruction, flat)
        total = T.add(margin, T.affine(recon, cfg.recon_scale))
        return total, margin, recon, result


def normalized_length(capsules):
    """Class scores in [0, 1]: capsule norm over sqrt(D)."""
    d = capsules.shape[1]
    return T.affine(T.capsule_norm(capsules), 1.0 / np.sqrt(d))


def margin_loss(scores, labels, classes, m_plus=0.9, m_minus=0.1, lam=0.5):
    """Two-sided hinge-squared loss on class scores, averaged over the batch.

    Present classes are pushed above m_plus, absent ones below m_minus
    (down-weighted by lam).
    """
    b = scores.shape[0]
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise InputDataError(
            f"label out of range [0, {classes}): {labels.min()}..{labels.max()}")
    present = np.zeros((b, classes), dtype=scores.dtype)
    present[np.arange(b), labels] = 1.0
    pos = T.square(T.relu(T.affine(scores, -1.0, m_plus)))
    neg = T.square(T.relu(T.affine(scores, 1.0, -m_minus)))
    per_class = T.add(T.scale_by(pos, present), T.scale_by(neg, lam * (1.0 - present)))
    return T.affine(T.sum_all(per_class), 1.0 / b)


def reconstruction_loss(decoded, target_pixels):
    """Mean squared error over every pixel of the batch."""
    if decoded.shape != target_pixels.shape:
        raise InputDataError(
            f"reconstruction shape {decoded.shape} != target {target_pixels.shape}")
    diff = T.add(decoded, T.leaf(-target_pixels))
    return T.mean_all(T.square(diff))


# ---------------------------------------------------------------------------
# parameter counting


def count_parameters(config: ModelConfig):
    """Exact trainable-parameter count with a per-layer breakdown.

    Batchnorm scale/shift count as trainable; running statistics do not.
    Computed arithmetically from the configuration, independently of model
    construction (the test suite cross-checks both routes).
    """
    config.validate()
    rows = []

    cin = config.input_channels
    for i in range(2):
        w = config.stem_width
        rows.append((f"stem{i}", 9 * cin * w + w + 2 * w))
        cin = w

    d0, n0 = config.primary_dim, config.primary_channels
    conv = (9 * cin * d0 + d0) * n0
    act = n0 * (d0 * d0 + d0)
    rows.append(("primary", conv + act))

    chain = config.spatial_chain()
    dim, ch = d0, n0
    for i, spec in enumerate(config.conv_caps):
        transform = spec.channels * ch * 9 * dim * spec.dim
        attention = spec.channels * spec.dim * ch
        act = spec.channels * (spec.dim * spec.dim + spec.dim)
        rows.append((f"convcaps{i}", transform + attention + act))
        dim, ch = spec.dim, spec.channels

    w, h = chain[-1]
    transform = config.classes * ch * w * h * dim * config.out_dim
    attention = config.classes * config.out_dim * ch
    act = config.classes * (config.out_dim * config.out_dim + config.out_dim)
    rows.append(("fullycaps", transform + attention + act))

    dims = [config.out_dim * config.classes, *config.decoder_widths, config.pixels]
    dec = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    rows.append(("decoder", dec))

    return sum(n for _, n in rows), rows

"""Capsule layer algebra: primary caps, convolutional transform, attention
routing, capsule activation and their composites.

Capsule tensors are laid out (batch, width, height, capsule-dim, channel).
A layer owns its parameters by registering them in a shared
:class:`~arcaps.optim.ParameterStore` under a dotted name prefix, so the
optimizer and the checkpoint writer see one flat namespace.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError


def squash(vec):
    """Classic capsule nonlinearity: shrink the norm into [0,1), keep direction.

    out = (||v||^2 / (1 + ||v||^2)) * v / ||v||, with squash(0) = 0.
    Accepts a 1-d numpy vector; this is a reference activation used for
    property contrast, not a graph op.
    """
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return np.zeros_like(vec)
    return (norm * norm / (1.0 + norm * norm)) * vec / norm


def squash_exp(vec):
    """Exponential squash variant: out = (1 - exp(-||v||)) * v / ||v||."""
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return np.zeros_like(vec)
    return (1.0 - np.exp(-norm)) * vec / norm


def uniform_init(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ConvBlock:
    """3x3 stride-1 same-padding convolution + batchnorm + relu (stem unit)."""

    def __init__(self, store, name, cin, cout, rng, dtype=np.float32,
                 bn_eps=1e-5, bn_momentum=0.9):
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.kernel = store.add(
            name + ".kernel",
            uniform_init(rng, (3, 3, cin, cout), 9 * cin, 9 * cout, dtype),
        )
        self.bias = store.add(name + ".bias", np.zeros(cout, dtype=dtype))
        self.gamma = store.add(name + ".bn.gamma", np.ones(cout, dtype=dtype))
        self.beta = store.add(name + ".bn.beta", np.zeros(cout, dtype=dtype))
        self.running_mean = store.add(
            name + ".bn.running_mean", np.zeros(cout, dtype=dtype), trainable=False
        )
        self.running_var = store.add(
            name + ".bn.running_var", np.ones(cout, dtype=dtype), trainable=False
        )

    def forward(self, x, train):
        y = T.conv2d(x, self.kernel, self.bias, stride=1, padding="same")
        y, mu, var = T.batchnorm(
            y, self.gamma, self.beta,
            self.running_mean.data, self.running_var.data,
            train, eps=self.bn_eps,
        )
        if train:
            m = self.bn_momentum
            self.running_mean.data = (m * self.running_mean.data + (1 - m) * mu).astype(
                self.running_mean.dtype
            )
            self.running_var.data = (m * self.running_var.data + (1 - m) * var).astype(
                self.running_var.dtype
            )
        return T.relu(y)


class CapsuleActivation:
    """Shared per-channel affine map followed by tanh.

    Equivalent to a 1x1 convolution per capsule channel: every capsule of
    channel n is multiplied by the same (D x E) matrix and shifted by the
    same bias, then squeezed elementwise through tanh. Capsule-wise, but
    not orientation preserving.
    """

    def __init__(self, store, name, channels, dim_in, dim_out, rng, dtype=np.float32):
        self.weight = store.add(
            name + ".weight",
            uniform_init(rng, (channels, dim_in, dim_out), dim_in, dim_out, dtype),
        )
        self.bias = store.add(name + ".bias", np.zeros((channels, dim_out), dtype=dtype))

    def forward(self, s):
        return T.tanh(T.channel_affine(s, self.weight, self.bias))


class PrimaryCaps:
    """First capsule layer: N independent strided convolutions over features.

    Implemented as one 3x3 stride-2 convolution of N*D filters followed by a
    reshape to (B, W', H', D, N); filter f maps to (dim, channel) =
    divmod(f, N), i.e. the N capsule channels are interleaved across the
    filter axis.
    """

    def __init__(self, store, name, cin, dim, channels, rng, dtype=np.float32):
        self.dim = dim
        self.channels = channels
        self.kernel = store.add(
            name + ".kernel",
            uniform_init(rng, (3, 3, cin, dim * channels), 9 * cin, 9 * dim, dtype),
        )
        self.bias = store.add(name + ".bias", np.zeros(dim * channels, dtype=dtype))
        self.activation = CapsuleActivation(
            store, name + ".activation", channels, dim, dim, rng, dtype
        )

    def forward(self, features, train):
        y = T.conv2d(features, self.kernel, self.bias, stride=2, padding="same")
        y = T.relu(y)
        b, wo, ho, _ = y.shape
        caps = T.reshape(y, (b, wo, ho, self.dim, self.channels))
        return self.activation.forward(caps)


def attention_route(stacks, reference):
    """One-pass routing of transformed capsule stacks.

    stacks: list over output channel n of (B, W, H, E, M) tensors;
    reference: (N, E, M) attention kernel tensor. Per n and spatial
    position, the logit for input channel m is the scalar product of the
    transformed capsule with reference[n, :, m]; softmax over m gives the
    routing weights; the output capsule is the weighted sum. Everything is
    local to a spatial position.

    Returns the pre-activation capsule tensor (B, W, H, E, N).
    """
    n_out = reference.shape[0]
    if len(stacks) != n_out:
        raise ConfigurationError(
            f"attention_route() got {len(stacks)} stacks for {n_out} output channels"
        )
    routed = []
    for n in range(n_out):
        ref_n = T.slice_axis0(reference, n)
        logits = T.channelwise_dot3d(stacks[n], ref_n)
        weights = T.softmax_axis(logits, -1)
        routed.append(T.route_combine(stacks[n], weights))
    return T.stack_last(routed)


class ConvCaps:
    """Capsule layer: dropout -> convolutional transform -> attention routing
    -> optional residual -> capsule activation.

    The convolutional transform holds one (kw, kh, D_in, D_out) kernel per
    (output channel n, input channel m) pair, shared across space and
    applied without bias; the per-n kernel banks are stored as rank-5
    parameters (M, kw, kh, D_in, D_out).
    """

    def __init__(self, store, name, in_dim, in_channels, dim, channels, rng,
                 stride=1, residual=False, ksize=(3, 3), padding="same",
                 keep_prob=0.5, dtype=np.float32):
        self.stride = stride
        self.residual = residual
        self.ksize = ksize
        self.padding = padding
        self.keep_prob = keep_prob
        self.in_dim = in_dim
        self.in_channels = in_channels
        self.dim = dim
        self.channels = channels
        kw, kh = ksize
        patch = kw * kh * in_dim
        if residual and (stride != 1 or dim != in_dim or channels != in_channels):
            raise ConfigurationError(
                f"{name}: residual connection needs matching shapes, got "
                f"stride={stride}, dims {in_dim}->{dim}, channels "
                f"{in_channels}->{channels}"
            )
        self.banks = [
            store.add(
                f"{name}.transform.{n}",
                uniform_init(
                    rng, (in_channels, kw, kh, in_dim, dim),
                    kw * kh * in_dim, kw * kh * dim, dtype,
                ),
            )
            for n in range(channels)
        ]
        self.attention = store.add(
            name + ".attention",
            uniform_init(rng, (channels, dim, in_channels), dim, 1, dtype),
        )
        self.activation = CapsuleActivation(
            store, name + ".activation", channels, dim, dim, rng, dtype
        )
        self._patch = patch

    def transform(self, caps):
        """Per-channel transformed capsule stacks (pre-routing)."""
        cols = T.im2col_capsules(caps, self.ksize, self.stride, self.padding)
        stacks = []
        for bank in self.banks:
            flat = T.reshape(bank, (self.in_channels, self._patch, self.dim))
            stacks.append(T.channel_affine(cols, flat))
        return stacks

    def forward(self, caps, train, rng=None):
        dropped = T.dropout(caps, self.keep_prob, train, rng)
        pre = attention_route(self.transform(dropped), self.attention)
        if self.residual:
            pre = T.add(pre, caps)
        return self.activation.forward(pre)


class FullyConvCaps(ConvCaps):
    """Output capsule layer: the transform kernel covers the whole spatial
    extent with valid padding, so routing sees a single position."""

    def __init__(self, store, name, in_dim, in_channels, dim, channels,
                 spatial, rng, keep_prob=0.5, dtype=np.float32):
        super().__init__(
            store, name, in_dim, in_channels, dim, channels, rng,
            stride=1, residual=False, ksize=spatial, padding="valid",
            keep_prob=keep_prob, dtype=dtype,
        )

    def forward(self, caps, train, rng=None):
        kw, kh = self.ksize
        if caps.shape[1] != kw or caps.shape[2] != kh:
            raise ConfigurationError(
                f"fully conv caps kernel {self.ksize} does not cover input "
                f"spatial extent {caps.shape[1:3]}"
            )
        return super().forward(caps, train, rng)


class Decoder:
    """Reconstruction decoder: three dense layers, relu hidden, sigmoid out."""

    def __init__(self, store, name, in_width, widths, pixels, rng, dtype=np.float32):
        dims = [in_width, *widths, pixels]
        self.weights = []
        self.biases = []
        for i in range(len(dims) - 1):
            self.weights.append(store.add(
                f"{name}.dense{i}.weight",
                uniform_init(rng, (dims[i], dims[i + 1]), dims[i], dims[i + 1], dtype),
            ))
            self.biases.append(store.add(
                f"{name}.dense{i}.bias", np.zeros(dims[i + 1], dtype=dtype)
            ))

    def forward(self, x):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.add_rowvec(T.matmul(x, w), b)
            x = T.sigmoid(x) if i == len(self.weights) - 1 else T.relu(x)
        return x

"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` is one node of the computation graph: a value array, a lazily
allocated gradient array of the same shape, references to the parent nodes
and a closure that routes the output gradient back to those parents.
Graphs are built eagerly by the functions in this module and torn down
with the batch; parameters are leaf tensors whose ``data`` the optimizer
updates in place between batches.

Values are float32 in normal operation. Creating leaves from float64
arrays switches the whole downstream graph to float64, which is how the
finite-difference gradient checks run (32-bit noise would drown the
h=1e-3 central differences).

Axis convention for capsule-valued tensors: (batch, width, height,
capsule-dim, channel).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ComputationError, ConfigurationError

MAX_RANK = 5


class Tensor:
    """A value in the autodiff graph."""

    __slots__ = ("data", "_grad", "parents", "backward_rule", "needs_grad")

    def __init__(self, data, parents=(), backward_rule=None, needs_grad=None):
        data = np.asarray(data)
        if data.ndim > MAX_RANK:
            raise ConfigurationError(
                f"tensor rank {data.ndim} exceeds the supported maximum {MAX_RANK}"
            )
        if data.ndim and min(data.shape) < 1:
            raise ConfigurationError(f"zero-sized extent in shape {data.shape}")
        self.data = data
        self._grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in self.parents)
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Accumulated gradient; zeros until backward() reaches this node."""
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def accumulate_grad(self, value):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += value

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def leaf(data, needs_grad=False, dtype=None):
    """Wrap a raw array as a graph leaf (input, parameter or constant)."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr, needs_grad=needs_grad)


def topo_order(root):
    """Reverse-topological order of the graph below ``root``.

    Iterative DFS; raises on cycles, which cannot arise from the public
    constructors but would make backward() silently wrong.
    """
    order = []
    state = {}  # id -> 1 in progress, 2 done
    stack = [(root, iter(root.parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            s = state.get(id(parent))
            if s == 1:
                raise ComputationError("cycle detected in computation graph")
            if s is None:
                state[id(parent)] = 1
                stack.append((parent, iter(parent.parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss):
    """Populate ``grad`` on every node reachable from ``loss``.

    ``loss`` must hold a single scalar. Gradients accumulate across calls;
    zero them (or rebuild the graph) before reusing nodes.
    """
    if loss.data.size != 1:
        raise ConfigurationError(
            f"backward() needs a scalar loss, got shape {loss.data.shape}"
        )
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo_order(loss)):
        if node.backward_rule is not None and node.needs_grad:
            node.backward_rule(node)


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"add() shape mismatch: {a.shape} vs {b.shape}")

    def rule(out):
        if a.needs_grad:
            a.accumulate_grad(out.grad)
        if b.needs_grad:
            b.accumulate_grad(out.grad)

    return Tensor(a.data + b.data, (a, b), rule)


def mul(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"mul() shape mismatch: {a.shape} vs {b.shape}")

    def rule(out):
        if a.needs_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.needs_grad:
            b.accumulate_grad(out.grad * a.data)

    return Tensor(a.data * b.data, (a, b), rule)


def affine(x, scale=1.0, shift=0.0):
    """scale * x + shift with python-scalar coefficients."""

    def rule(out):
        x.accumulate_grad(out.grad * scale)

    return Tensor(x.data * scale + shift, (x,), rule)


def scale_by(x, factor):
    """Multiply by a constant array broadcastable to ``x`` (not differentiated)."""
    factor = np.asarray(factor, dtype=x.dtype)

    def rule(out):
        x.accumulate_grad(out.grad * factor)

    return Tensor(x.data * factor, (x,), rule)


def relu(x):
    def rule(out):
        x.accumulate_grad(out.grad * (x.data > 0))

    return Tensor(np.maximum(x.data, 0), (x,), rule)


def tanh(x):
    y = np.tanh(x.data)

    def rule(out):
        x.accumulate_grad(out.grad * (1.0 - y * y))

    return Tensor(y, (x,), rule)


def sigmoid(x):
    # computed via tanh for stability at large |x|
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def rule(out):
        x.accumulate_grad(out.grad * y * (1.0 - y))

    return Tensor(y, (x,), rule)


def square(x):
    def rule(out):
        x.accumulate_grad(out.grad * (2.0 * x.data))

    return Tensor(x.data * x.data, (x,), rule)


def sum_all(x):
    def rule(out):
        x.accumulate_grad(np.full_like(x.data, out.grad.reshape(-1)[0]))

    return Tensor(x.data.sum(dtype=x.dtype).reshape(()), (x,), rule)


def mean_all(x):
    inv = 1.0 / x.data.size

    def rule(out):
        x.accumulate_grad(np.full_like(x.data, out.grad.reshape(-1)[0] * inv))

    return Tensor((x.data.sum(dtype=x.dtype) * inv).reshape(()).astype(x.dtype), (x,), rule)


def reshape(x, shape):
    def rule(out):
        x.accumulate_grad(out.grad.reshape(x.data.shape))

    return Tensor(x.data.reshape(shape), (x,), rule)


def slice_axis0(x, index):
    """x[index] along the leading axis, as a graph op."""

    def rule(out):
        g = np.zeros_like(x.data)
        g[index] = out.grad
        x.accumulate_grad(g)

    return Tensor(x.data[index], (x,), rule)


def stack_last(tensors):
    """Stack same-shaped tensors along a new trailing axis."""
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ConfigurationError("stack_last() needs equal shapes")

    def rule(out):
        for i, t in enumerate(tensors):
            if t.needs_grad:
                t.accumulate_grad(out.grad[..., i])

    return Tensor(np.stack([t.data for t in tensors], axis=-1), tuple(tensors), rule)


def softmax_axis(x, axis):
    """Numerically stable softmax along one axis."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ConfigurationError(f"softmax axis {axis} out of range for rank {x.data.ndim}")
    if not np.all(np.isfinite(x.data)):
        raise ComputationError("softmax_axis() received non-finite logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(out):
        inner = (out.grad * y).sum(axis=axis, keepdims=True)
        x.accumulate_grad(y * (out.grad - inner))

    return Tensor(y, (x,), rule)


# ---------------------------------------------------------------------------
# dense / matrix operations


def matmul(x, w):
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigurationError(f"matmul() shapes incompatible: {x.shape} @ {w.shape}")

    def rule(out):
        if x.needs_grad:
            x.accumulate_grad(out.grad @ w.data.T)
        if w.needs_grad:
            w.accumulate_grad(x.data.T @ out.grad)

    return Tensor(x.data @ w.data, (x, w), rule)


def add_rowvec(x, b):
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ConfigurationError(f"add_rowvec() shapes incompatible: {x.shape} + {b.shape}")

    def rule(out):
        if x.needs_grad:
            x.accumulate_grad(out.grad)
        if b.needs_grad:
            b.accumulate_grad(out.grad.sum(axis=0))

    return Tensor(x.data + b.data, (x, b), rule)


def capsule_norm(x):
    """Euclidean norm over axis 1 of a (batch, dim, channel) tensor.

    The gradient at an exactly-zero capsule is taken as zero (subgradient
    choice); everywhere else it is x / ||x||.
    """
    if x.data.ndim != 3:
        raise ConfigurationError(f"capsule_norm() expects rank 3, got {x.shape}")
    n = np.sqrt((x.data * x.data).sum(axis=1))

    def rule(out):
        safe = np.where(n > 0, n, 1.0)
        x.accumulate_grad(out.grad[:, None, :] * x.data / safe[:, None, :])

    return Tensor(n, (x,), rule)


# ---------------------------------------------------------------------------
# convolution machinery

_PADDINGS = ("same", "valid")


def _conv_geometry(size, k, stride, padding):
    """Output extent plus (before, after) zero padding for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    out = (size - k) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"valid convolution of kernel {k} over extent {size} has no output"
        )
    return out, 0, 0


def _im2col(x, kw, kh, stride, padding):
    """Patch matrix of a (B, W, H, *tail) array.

    Returns (cols, geometry) where cols has shape (B, Wo, Ho, kw, kh, *tail)
    as a contiguous copy and geometry carries the padding bookkeeping that
    _col2im needs to reverse the layout.
    """
    b, w, h = x.shape[:3]
    tail = x.shape[3:]
    wo, pw0, pw1 = _conv_geometry(w, kw, stride, padding)
    ho, ph0, ph1 = _conv_geometry(h, kh, stride, padding)
    if pw0 or pw1 or ph0 or ph1:
        pad = [(0, 0), (pw0, pw1), (ph0, ph1)] + [(0, 0)] * len(tail)
        xp = np.pad(x, pad)
    else:
        xp = x
    s = xp.strides
    view = as_strided(
        xp,
        shape=(b, wo, ho, kw, kh) + tail,
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2]) + s[3:],
    )
    geom = (xp.shape, (pw0, ph0), (w, h), stride, (kw, kh))
    return np.ascontiguousarray(view), geom


def _col2im(gcols, geom):
    """Scatter-add patch gradients back to the (unpadded) input layout."""
    padded_shape, (pw0, ph0), (w, h), stride, (kw, kh) = geom
    wo, ho = gcols.shape[1], gcols.shape[2]
    gx = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kw):
        wstop = i + stride * (wo - 1) + 1
        for j in range(kh):
            hstop = j + stride * (ho - 1) + 1
            gx[:, i:wstop:stride, j:hstop:stride] += gcols[:, :, :, i, j]
    return gx[:, pw0 : pw0 + w, ph0 : ph0 + h]


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """Cross-correlation of (B, W, H, Cin) with a (kw, kh, Cin, Cout) kernel."""
    if padding not in _PADDINGS:
        raise ConfigurationError(f"unknown padding {padding!r}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError(
            f"conv2d() expects rank-4 input and kernel, got {x.shape} and {kernel.shape}"
        )
    kw, kh, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ConfigurationError(
            f"conv2d() channel mismatch: input {x.shape} has {x.shape[3]} channels, "
            f"kernel {kernel.shape} expects {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d() bias shape {bias.shape} != ({cout},)")

    cols, geom = _im2col(x.data, kw, kh, stride, padding)
    b, wo, ho = cols.shape[:3]
    patch = kw * kh * cin
    cols_mat = cols.reshape(b * wo * ho, patch)
    kmat = kernel.data.reshape(patch, cout)
    out = cols_mat @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, wo, ho, cout)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(node):
        g = node.grad.reshape(b * wo * ho, cout)
        if kernel.needs_grad:
            kernel.accumulate_grad((cols_mat.T @ g).reshape(kernel.shape))
        if bias is not None and bias.needs_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if x.needs_grad:
            gcols = (g @ kmat.T).reshape(b, wo, ho, kw, kh, cin)
            x.accumulate_grad(_col2im(gcols, geom))

    return Tensor(out, parents, rule)


def im2col_capsules(x, ksize, stride, padding):
    """Patch extraction for a capsule tensor (B, W, H, D, M).

    Output shape (B, Wo, Ho, kw*kh*D, M): each spatial position carries the
    flattened receptive-field patch of every input channel m, which one
    matrix product per channel then maps to transformed capsules.
    """
    if padding not in _PADDINGS:
        raise ConfigurationError(f"unknown padding {padding!r}")
    if x.data.ndim != 5:
        raise ConfigurationError(f"im2col_capsules() expects rank 5, got {x.shape}")
    kw, kh = ksize
    d, m = x.shape[3], x.shape[4]
    cols, geom = _im2col(x.data, kw, kh, stride, padding)
    b, wo, ho = cols.shape[:3]
    # (b, wo, ho, kw, kh, d, m) -> (b, wo, ho, kw*kh*d, m): patch axes are
    # already adjacent and ahead of m, so this is a plain reshape.
    out = cols.reshape(b, wo, ho, kw * kh * d, m)

    def rule(node):
        if x.needs_grad:
            gcols = node.grad.reshape(b, wo, ho, kw, kh, d, m)
            x.accumulate_grad(_col2im(gcols, geom))

    return Tensor(out, (x,), rule)


def channel_affine(x, weight, bias=None):
    """Independent affine map per trailing channel.

    x: (B, W, H, K, M), weight: (M, K, E), bias: (M, E) or None
    out[..., e, m] = sum_k x[..., k, m] * weight[m, k, e] (+ bias[m, e])

    Used both for the convolutional transform (K = kw*kh*D patches) and for
    the per-channel 1x1 affine of the capsule activation (K = D).
    """
    if x.data.ndim != 5 or weight.data.ndim != 3:
        raise ConfigurationError(
            f"channel_affine() expects rank-5 input and rank-3 weight, "
            f"got {x.shape} and {weight.shape}"
        )
    b, w, h, k, m = x.shape
    if weight.shape[0] != m or weight.shape[1] != k:
        raise ConfigurationError(
            f"channel_affine() weight {weight.shape} does not match input {x.shape}: "
            f"need ({m}, {k}, E)"
        )
    e = weight.shape[2]
    if bias is not None and bias.shape != (m, e):
        raise ConfigurationError(f"channel_affine() bias shape {bias.shape} != ({m}, {e})")

    xt = np.ascontiguousarray(np.moveaxis(x.data, -1, 0)).reshape(m, b * w * h, k)
    out = xt @ weight.data  # (m, bwh, e)
    if bias is not None:
        out += bias.data[:, None, :]
    out = np.moveaxis(out.reshape(m, b, w, h, e), 0, -1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(node):
        gt = np.ascontiguousarray(np.moveaxis(node.grad, -1, 0)).reshape(m, b * w * h, e)
        if weight.needs_grad:
            weight.accumulate_grad(xt.transpose(0, 2, 1) @ gt)
        if bias is not None and bias.needs_grad:
            bias.accumulate_grad(gt.sum(axis=1))
        if x.needs_grad:
            gx = gt @ weight.data.transpose(0, 2, 1)  # (m, bwh, k)
            x.accumulate_grad(np.moveaxis(gx.reshape(m, b, w, h, k), 0, -1))

    return Tensor(np.ascontiguousarray(out), parents, rule)


def channelwise_dot3d(x, reference):
    """Per-channel scalar product against a reference vector.

    x: (B, W, H, D, M), reference: (D, M)
    out[b, w, h, m] = sum_d x[b, w, h, d, m] * reference[d, m]

    This is the 1x1xD depthwise 3D convolution that produces one routing
    logit per spatial position and input channel.
    """
    if x.data.ndim != 5 or reference.data.ndim != 2:
        raise ConfigurationError(
            f"channelwise_dot3d() expects rank-5 input and rank-2 reference, "
            f"got {x.shape} and {reference.shape}"
        )
    if reference.shape != x.shape[3:]:
        raise ConfigurationError(
            f"channelwise_dot3d() reference {reference.shape} does not match "
            f"input capsule block {x.shape[3:]}"
        )
    ref = reference.data

    def rule(node):
        if x.needs_grad:
            x.accumulate_grad(node.grad[:, :, :, None, :] * ref)
        if reference.needs_grad:
            reference.accumulate_grad(
                np.einsum("bwhm,bwhdm->dm", node.grad, x.data)
            )

    return Tensor((x.data * ref).sum(axis=3), (x, reference), rule)


def route_combine(stack, weights):
    """Convex combination of transformed capsules across input channels.

    stack: (B, W, H, D, M), weights: (B, W, H, M) -> (B, W, H, D)
    """
    if stack.shape[:3] != weights.shape[:3] or stack.shape[4] != weights.shape[3]:
        raise ConfigurationError(
            f"route_combine() shapes incompatible: {stack.shape} vs {weights.shape}"
        )

    def rule(node):
        if stack.needs_grad:
            stack.accumulate_grad(node.grad[..., None] * weights.data[:, :, :, None, :])
        if weights.needs_grad:
            weights.accumulate_grad((node.grad[..., None] * stack.data).sum(axis=3))

    return Tensor((stack.data * weights.data[:, :, :, None, :]).sum(axis=4), (stack, weights), rule)


# ---------------------------------------------------------------------------
# normalization / regularization


def batchnorm(x, gamma, beta, running_mean, running_var, train, eps=1e-5, momentum=0.9):
    """Per-channel batch normalization over the trailing axis.

    Train mode normalizes with the batch statistics (and the gradient flows
    through them); infer mode normalizes with the supplied running
    statistics. The caller owns updating the running statistics from the
    returned batch statistics.

    Returns (out, batch_mean, batch_var); the statistics are None in infer
    mode.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(
            f"batchnorm() parameter extents {gamma.shape}/{beta.shape} do not "
            f"match channel count {c}"
        )
    axes = tuple(range(x.data.ndim - 1))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std

        def rule(node):
            g = node.grad
            if gamma.needs_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=axes))
            if beta.needs_grad:
                beta.accumulate_grad(g.sum(axis=axes))
            if x.needs_grad:
                gxhat = g * gamma.data
                # closed-form gradient through the batch statistics
                t1 = gxhat.mean(axis=axes)
                t2 = (gxhat * xhat).mean(axis=axes)
                x.accumulate_grad(inv_std * (gxhat - t1 - xhat * t2))

        out = Tensor(gamma.data * xhat + beta.data, (x, gamma, beta), rule)
        return out, mu, var

    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv_std

    def rule(node):
        g = node.grad
        if gamma.needs_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.needs_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.needs_grad:
            x.accumulate_grad(g * (gamma.data * inv_std))

    out = Tensor(gamma.data * xhat + beta.data, (x, gamma, beta), rule)
    return out, None, None


def dropout(x, keep_prob, train, rng=None):
    """Inverted dropout: zero with probability 1-keep_prob, scale survivors."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigurationError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        def rule(node):
            x.accumulate_grad(node.grad)

        return Tensor(x.data, (x,), rule)
    if rng is None:
        raise ConfigurationError("dropout() in train mode needs an rng")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob

    def rule(node):
        x.accumulate_grad(node.grad * mask)

    return Tensor(x.data * mask, (x,), rule)

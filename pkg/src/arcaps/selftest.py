"""Built-in verification: gradient checks and oracle comparisons.

Runs the same independent checks the test suite relies on, packaged as a
CLI subcommand so a deployed build can prove its numerics in seconds. All
gradient checks run in float64.
"""

from __future__ import annotations

import numpy as np

from . import reference, tensor as T
from .analysis import align_vector, relative_ratios
from .errors import ComputationError
from .gradcheck import check_gradients, relative_error
from .layers import attention_route, squash, squash_exp
from .model import ArCapsNet, ConvCapsSpec, ModelConfig
from .optim import ParameterStore, RmspropState, rmsprop_step


def _rng(tag):
    return np.random.default_rng(np.random.SeedSequence([0x5E1F, tag]))


def _op_gradient_checks():
    rng = _rng(1)
    checks = []

    x = rng.standard_normal((2, 5, 5, 2))
    k = rng.standard_normal((3, 3, 2, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    for stride in (1, 2):
        for padding in ("same", "valid"):
            checks.append((f"conv2d k=3 stride={stride} {padding}", [x, k, b],
                           lambda ts, s=stride, p=padding: T.sum_all(
                               T.mul(T.conv2d(ts[0], ts[1], ts[2], s, p),
                                     T.leaf(_marker((2, _co(5, 3, s, p), _co(5, 3, s, p), 3))))),
                           ))

    caps = rng.standard_normal((2, 3, 3, 4, 3))
    ref = rng.standard_normal((4, 3))
    checks.append(("channelwise_dot3d", [caps, ref],
                   lambda ts: T.sum_all(T.mul(T.channelwise_dot3d(ts[0], ts[1]),
                                              T.leaf(_marker((2, 3, 3, 3)))))))

    wgt = rng.standard_normal((3, 4, 5)) * 0.5
    cb = rng.standard_normal((3, 5)) * 0.1
    checks.append(("channel_affine", [caps, wgt, cb],
                   lambda ts: T.sum_all(T.mul(T.channel_affine(ts[0], ts[1], ts[2]),
                                              T.leaf(_marker((2, 3, 3, 5, 3)))))))

    weights_in = rng.standard_normal((2, 3, 3, 3))
    checks.append(("route_combine", [caps, weights_in],
                   lambda ts: T.sum_all(T.mul(T.route_combine(ts[0], ts[1]),
                                              T.leaf(_marker((2, 3, 3, 4)))))))

    logits = rng.standard_normal((2, 4, 3))
    checks.append(("softmax_axis", [logits],
                   lambda ts: T.sum_all(T.mul(T.softmax_axis(ts[0], -1),
                                              T.leaf(_marker((2, 4, 3)))))))

    z = rng.standard_normal((3, 4)) * 2.0
    checks.append(("tanh", [z], lambda ts: T.sum_all(
        T.mul(T.tanh(ts[0]), T.leaf(_marker((3, 4)))))))
    checks.append(("sigmoid", [z], lambda ts: T.sum_all(
        T.mul(T.sigmoid(ts[0]), T.leaf(_marker((3, 4)))))))
    zr = z + 3.0  # keep clear of the relu kink for finite differences
    checks.append(("relu", [zr], lambda ts: T.sum_all(
        T.mul(T.relu(ts[0]), T.leaf(_marker((3, 4)))))))
    checks.append(("add/mul/affine", [z, rng.standard_normal((3, 4))],
                   lambda ts: T.sum_all(T.mul(T.add(T.affine(ts[0], 1.7, 0.3), ts[1]), ts[1]))))

    xb = rng.standard_normal((6, 3, 3, 4))
    gamma = 1.0 + 0.1 * rng.standard_normal(4)
    beta = 0.1 * rng.standard_normal(4)
    checks.append(("batchnorm train", [xb, gamma, beta],
                   lambda ts: T.sum_all(T.mul(
                       T.batchnorm(ts[0], ts[1], ts[2], None, None, True)[0],
                       T.leaf(_marker((6, 3, 3, 4)))))))
    checks.append(("batchnorm infer", [xb, gamma, beta],
                   lambda ts: T.sum_all(T.mul(
                       T.batchnorm(ts[0], ts[1], ts[2],
                                   np.zeros(4), np.ones(4), False)[0],
                       T.leaf(_marker((6, 3, 3, 4)))))))

    def dropout_loss(ts):
        return T.sum_all(T.mul(T.dropout(ts[0], 0.6, True, _rng(77)),
                               T.leaf(_marker((4, 5)))))

    checks.append(("dropout fixed-mask", [rng.standard_normal((4, 5))], dropout_loss))

    m1 = rng.standard_normal((3, 4))
    m2 = rng.standard_normal((4, 2))
    bias = rng.standard_normal(2)
    checks.append(("matmul+bias", [m1, m2, bias],
                   lambda ts: T.sum_all(T.mul(T.add_rowvec(T.matmul(ts[0], ts[1]), ts[2]),
                                              T.leaf(_marker((3, 2)))))))

    cv = rng.standard_normal((3, 4, 2)) + 0.5
    checks.append(("capsule_norm", [cv],
                   lambda ts: T.sum_all(T.mul(T.capsule_norm(ts[0]),
                                              T.leaf(_marker((3, 2)))))))

    caps5 = rng.standard_normal((1, 4, 4, 3, 2))
    checks.append(("im2col_capsules", [caps5],
                   lambda ts: T.sum_all(T.mul(
                       T.im2col_capsules(ts[0], (3, 3), 2, "same"),
                       T.leaf(_marker((1, 2, 2, 27, 2)))))))
    return checks


def _co(size, k, stride, padding):
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def _marker(shape):
    """Deterministic weighting so sum-based losses see every output element."""
    rng = np.random.default_rng(np.random.SeedSequence([0x3A6C, *shape]))
    return rng.standard_normal(shape)


def _tiny_model_check():
    cfg = ModelConfig(input_width=6, input_height=6, stem_width=2, primary_dim=2,
                      primary_channels=2,
                      conv_caps=(ConvCapsSpec(dim=2, channels=2, stride=2),),
                      out_dim=3, classes=2, decoder_widths=(4, 4))
    net = ArCapsNet(cfg, seed=3, dtype=np.float64)
    images = _rng(7).random((2, 6, 6, 1))
    labels = np.array([0, 1])

    def loss_value():
        total, *_ = net.loss(images, labels, train=True, rng=_rng(11))
        return total

    net.store.zero_grads()
    T.backward(loss_value())
    analytic = {n: t.grad.copy() for n, t in net.store.trainable_items()}
    h, worst = 1e-3, 0.0
    for name, t in net.store.trainable_items():
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value().item()
            flat[i] = orig - h
            fm = loss_value().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(analytic[name].reshape(-1), numeric))
    if worst > 1e-4:
        raise ComputationError(f"tiny-model gradient check failed: {worst:.2e}")
    return worst


def _conv_oracle_check():
    rng = _rng(21)
    worst = 0.0
    for k, stride, padding in ((3, 1, "same"), (3, 2, "same"), (3, 1, "valid"),
                               (1, 1, "same"), (5, 1, "valid")):
        x = rng.standard_normal((1, 5, 5, 2))
        kern = rng.standard_normal((k, k, 2, 3))
        bias = rng.standard_normal(3)
        fast = T.conv2d(T.leaf(x), T.leaf(kern), T.leaf(bias), stride, padding).data
        slow = reference.conv2d_loops(x, kern, bias, stride, padding)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    if worst > 1e-6:
        raise ComputationError(f"conv2d oracle mismatch: {worst:.2e}")
    return worst


def _routing_oracle_check():
    rng = _rng(22)
    b, w, h, d, m, n, e = 1, 2, 2, 4, 3, 2, 4
    u = rng.standard_normal((b, w, h, d, m))
    banks = [rng.standard_normal((m, 3, 3, d, e)) for _ in range(n)]
    ref = rng.standard_normal((n, e, m))

    cols = T.im2col_capsules(T.leaf(u), (3, 3), 1, "same")
    stacks = [T.channel_affine(cols, T.leaf(bank.reshape(m, 9 * d, e)))
              for bank in banks]
    fast = attention_route(stacks, T.leaf(ref)).data

    slow_stacks = reference.conv_transform_loops(u, banks, 1, "same")
    slow = reference.attention_route_loops(slow_stacks, ref)
    worst = float(np.max(np.abs(fast - slow)))
    if worst > 1e-6:
        raise ComputationError(f"attention routing oracle mismatch: {worst:.2e}")
    return worst


def _scalar_examples():
    s = squash(np.array([3.0, 4.0]))
    if np.max(np.abs(s - np.array([0.57692308, 0.76923077]))) > 1e-5:
        raise ComputationError(f"squash(3,4) = {s}")
    s = squash_exp(np.array([3.0, 4.0]))
    if np.max(np.abs(s - np.array([0.59595654, 0.79460872]))) > 1e-5:
        raise ComputationError(f"squash_exp(3,4) = {s}")
    soft = T.softmax_axis(T.leaf(np.array([1.0, 2.0, 3.0])), 0).data
    if np.max(np.abs(soft - np.array([0.09003057, 0.24472847, 0.66524096]))) > 1e-4:
        raise ComputationError(f"softmax(1,2,3) = {soft}")

    store = ParameterStore()
    p = store.add("p", np.full(3, 2.0, dtype=np.float32))
    state = RmspropState(store)
    p.accumulate_grad(np.ones(3, dtype=np.float32))
    rmsprop_step(store, state)
    expected = 2.0 - 0.001 / (np.sqrt(0.1) + 1e-7)
    if abs(float(p.data[0]) - expected) > 1e-6:
        raise ComputationError(f"rmsprop first step gave {p.data[0]!r}")
    state.step_count = 10000
    if abs(state.learning_rate() - 0.0005) > 1e-12:
        raise ComputationError("rmsprop decay schedule is off")


def _align_vector_check():
    rng = _rng(23)
    worst_val, worst_cos = 0.0, 1.0
    for _ in range(20):
        rows = rng.standard_normal((5, 8))
        v, coeffs = align_vector(rows)
        evals, evecs = reference.jacobi_eigh(rows.T @ rows)
        worst_val = max(worst_val, abs(float((coeffs ** 2).sum()) - evals[0]))
        worst_cos = min(worst_cos, abs(float(np.dot(v, evecs[:, 0]))))
        ratios, _ = relative_ratios(rows, v)
        if np.any(ratios < 0) or np.any(ratios > 1 + 1e-12):
            raise ComputationError("relative ratios escaped [0, 1]")
    if worst_val > 1e-8 or worst_cos < 1 - 1e-8:
        raise ComputationError(
            f"align vector disagrees with Jacobi oracle: value err {worst_val:.2e}, "
            f"cosine {worst_cos!r}")


def run(report=print):
    """Run every check; returns the number of failures (0 = clean build)."""
    failures = 0
    for name, arrays, build in _op_gradient_checks():
        try:
            worst = check_gradients(build, arrays)
            report(f"ok   gradient {name} (worst rel err {worst:.2e})")
        except (AssertionError, ComputationError) as exc:
            failures += 1
            report(f"FAIL gradient {name}: {exc}")
    for label, fn in (("conv2d vs loop oracle", _conv_oracle_check),
                      ("attention routing vs loop oracle", _routing_oracle_check),
                      ("scalar reference values", _scalar_examples),
                      ("align vector vs Jacobi oracle", _align_vector_check),
                      ("tiny-model end-to-end gradients", _tiny_model_check)):
        try:
            result = fn()
            suffix = f" (worst {result:.2e})" if isinstance(result, float) else ""
            report(f"ok   {label}{suffix}")
        except (AssertionError, ComputationError) as exc:
            failures += 1
            report(f"FAIL {label}: {exc}")
    return failures

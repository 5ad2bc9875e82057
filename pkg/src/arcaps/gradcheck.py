"""Central finite-difference gradient verification.

All checks run in float64: at 32 bits the truncation error of h=1e-3
central differences is indistinguishable from rounding noise.
"""

import numpy as np

from . import tensor as T


def numerical_gradient(fn, arrays, index, h=1e-3):
    """Central-difference gradient of ``fn(arrays) -> scalar`` w.r.t. one array.

    ``fn`` must be a pure function of the list of float64 arrays.
    """
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(arrays)
        flat[i] = orig - h
        fm = fn(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|) over all elements."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build, arrays, h=1e-3, tol=1e-4):
    """Verify autodiff gradients of a scalar-valued graph against finite differences.

    ``build`` receives a list of leaf Tensors (float64, needs_grad=True) and
    returns a scalar output Tensor. Returns the worst relative error across
    all inputs; raises AssertionError above ``tol``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [T.leaf(a.copy(), needs_grad=True) for a in arrays]
    loss = build(leaves)
    T.backward(loss)

    def eval_fn(arrs):
        ls = [T.leaf(a, needs_grad=False) for a in arrs]
        return build(ls).item()

    worst = 0.0
    for i, lf in enumerate(leaves):
        numeric = numerical_gradient(eval_fn, [a.copy() for a in arrays], i, h=h)
        err = relative_error(lf.grad, numeric)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient check failed for input {i}: relative error {err:.3e} > {tol:g}"
            )
    return worst

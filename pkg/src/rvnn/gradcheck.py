"""Central finite-difference gradient checking against the tape's gradients."""

import numpy as np

from .autodiff import Tape, backward, zero_grads

__all__ = ["numeric_gradient", "max_relative_error", "check_gradients"]


def numeric_gradient(f, x, eps=1e-5):
    """Central-difference gradient of scalar-valued f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric):
    """max|a - n| / (max|a| + max|n|), the usual gradient-check metric."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    num = np.abs(analytic - numeric).max()
    den = np.abs(analytic).max() + np.abs(numeric).max()
    if den == 0.0:
        return 0.0
    return float(num / den)


def check_gradients(build_loss, params, eps=1e-5, rel_tol=1e-4):
    """Compare tape gradients of ``build_loss()`` against finite differences.

    ``build_loss`` must construct the loss from scratch on each call (it is
    re-run for every perturbed parameter entry).  ``params`` are the leaf
    tensors to check; each must be float64 with requires_grad set.  Returns
    the worst relative error over all parameters.
    """
    zero_grads(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = build_loss()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        def eval_loss(x, _p=p):
            _p.data = x
            return float(build_loss().data)

        n = numeric_gradient(eval_loss, p.data, eps=eps)
        a = np.zeros_like(p.data) if a is None else a
        err = max_relative_error(a, n)
        if err > worst:
            worst = err
        if err >= rel_tol:
            raise AssertionError(
                f"gradient check failed for parameter of shape {p.data.shape}: "
                f"rel err {err:.3e} >= {rel_tol:.0e}"
            )
    return worst

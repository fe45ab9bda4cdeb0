"""Discrete class sampling and its differentiable surrogates.

A query over classes is a draw from categorical p. Training needs gradients
through that draw, so alongside the exact Gumbel-Max sampler this module
provides the tempered softmax relaxation and the straight-through estimator
(hard one-hot forward, softmax Jacobian backward).
"""

import numpy as np

from . import autodiff as ad

_EPS = 1e-12
_NEG_ONE = ad.tensor(-1.0)


def sample_gumbel(shape, rng):
    """Gumbel(0,1) noise: -log(-log(u)), u clamped away from {0, 1}."""
    u = np.clip(rng.uniform(size=shape), _EPS, 1.0 - _EPS)
    return -np.log(-np.log(u))


def _as_array(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def gumbel_max(log_p, g):
    """Exact categorical sample as a one-hot; not differentiable.

    argmax of g + log_p; ties go to the lowest index.
    """
    scores = _as_array(log_p) + _as_array(g)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ad.ShapeError(f"gumbel_max: need a non-empty vector, got shape {scores.shape}")
    hot = np.zeros_like(scores, dtype=np.float64)
    hot[int(np.argmax(scores))] = 1.0
    return ad.tensor(hot)


def gumbel_softmax(log_p, g, tau):
    """Tempered relaxation of gumbel_max; differentiable w.r.t. log_p."""
    if tau <= 0:
        raise ValueError(f"gumbel_softmax: tau must be positive, got {tau}")
    noisy = ad.add(log_p, ad.tensor(_as_array(g)))
    return ad.softmax(ad.mul(noisy, ad.tensor(1.0 / tau)))


def straight_through(log_p, g):
    """Hard one-hot forward with the soft distribution's backward.

    output = one_hot + (p - detach(p)) with p = softmax(log_p): the residual
    is exactly zero in value, so the forward is gumbel_max's one-hot, while
    the gradient w.r.t. log_p is the softmax Jacobian (and never sees g).
    """
    p = ad.softmax(log_p)
    hard = gumbel_max(log_p, g)
    return ad.add(hard, ad.add(p, ad.mul(p.detach(), _NEG_ONE)))


class TemperatureSchedule:
    """Exponential decay from tau_start to a tau_end floor over total_steps."""

    def __init__(self, total_steps, tau_start=1.0, tau_end=0.5):
        if total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {total_steps}")
        if not 0 < tau_end <= tau_start:
            raise ValueError(f"need 0 < tau_end <= tau_start, got {tau_end}, {tau_start}")
        self.total_steps = int(total_steps)
        self.tau_start = float(tau_start)
        self.tau_end = float(tau_end)
        self.rate = np.log(tau_start / tau_end) / total_steps

    def tau_at(self, step):
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        return max(self.tau_end, self.tau_start * np.exp(-self.rate * step))


def tau_at(schedule, step):
    return schedule.tau_at(step)

"""Parameterized building blocks: linear, conv, and GRU layers.

Weights are plain :class:`~rvnn.autodiff.Tensor` leaves initialized from a
caller-supplied rng; sharing a layer between two forward paths ties its
weights, and the tape accumulates both paths' gradients into the same buffers.
"""

import numpy as np

from . import autodiff as ad

_ONE = ad.tensor(1.0)
_NEG_ONE = ad.tensor(-1.0)


def _one_minus(t):
    return ad.add(_ONE, ad.mul(t, _NEG_ONE))


def uniform_fan_in(rng, fan_in, shape):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init values."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param_count(params):
    """Total scalar count over tensors; shared (tied) tensors counted once."""
    seen = set()
    total = 0
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            total += p.size
    return total


class Linear:
    """Affine map ``x @ w + b``; weight shape (in_features, out_features)."""

    def __init__(self, in_features, out_features, rng, name="linear"):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.w = ad.tensor(uniform_fan_in(rng, in_features, (in_features, out_features)), requires_grad=True)
        self.b = ad.zeros(out_features, requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def named_params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class Conv:
    """Valid-padding, stride-1 convolution layer over (C, H, W) inputs."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, name="conv"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.name = name
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.w = ad.tensor(uniform_fan_in(rng, fan_in, shape), requires_grad=True)
        self.b = ad.zeros(out_channels, requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b)

    def named_params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class GruCell:
    """GRU parameters; the update gate z weights the candidate state."""

    def __init__(self, input_size, hidden_size, rng, name="gru"):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.name = name

        def w_in():
            return ad.tensor(uniform_fan_in(rng, input_size, (input_size, hidden_size)), requires_grad=True)

        def w_state():
            return ad.tensor(uniform_fan_in(rng, hidden_size, (hidden_size, hidden_size)), requires_grad=True)

        self.w_z, self.u_z, self.b_z = w_in(), w_state(), ad.zeros(hidden_size, requires_grad=True)
        self.w_r, self.u_r, self.b_r = w_in(), w_state(), ad.zeros(hidden_size, requires_grad=True)
        self.w_h, self.u_h, self.b_h = w_in(), w_state(), ad.zeros(hidden_size, requires_grad=True)

    def __call__(self, x, h):
        return gru_step(x, h, self)

    def named_params(self):
        return [
            (f"{self.name}.{gate}", getattr(self, gate))
            for gate in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
        ]


def gru_step(x, h, cell):
    """One GRU update: h' = (1-z) * h + z * tanh(W_h x + U_h (r*h) + b_h)."""
    if x.shape != (cell.input_size,) or h.shape != (cell.hidden_size,):
        raise ad.ShapeError(
            f"gru_step: got x {x.shape}, h {h.shape}; cell expects ({cell.input_size},), ({cell.hidden_size},)"
        )
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, cell.w_z), ad.matmul(h, cell.u_z)), cell.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, cell.w_r), ad.matmul(h, cell.u_r)), cell.b_r))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, cell.w_h), ad.matmul(ad.mul(r, h), cell.u_h)), cell.b_h))
    return ad.add(ad.mul(_one_minus(z), h), ad.mul(z, cand))

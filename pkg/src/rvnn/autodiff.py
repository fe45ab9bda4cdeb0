"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

Everything differentiable in this package (conv/GRU layers, the Gumbel
relaxations, the episode loop) is built from the operations in this module.
Values are recorded on an explicit :class:`Tape`; outside a tape ops compute
plain values, which is what evaluation-mode forward passes use.
"""

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "zeros",
    "backward",
    "zero_grads",
    "add",
    "mul",
    "matmul",
    "concat",
    "reshape",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log_softmax",
    "conv2d",
    "maxpool2d",
    "weighted_sum",
    "nll_loss",
    "tsum",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's shape rule."""


class Tensor:
    """Dense n-d array with an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        """Value-only copy that no gradient will flow through."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self):
        return tsum(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


class _Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "out", "backward_fn", "out_grad", "tape")

    def __init__(self, inputs, out, backward_fn, tape):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.out_grad = None
        self.tape = tape


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations for one episode, in execution order.

    Execution order is topological by construction. ``with Tape():`` makes
    the tape active; ops executed inside record themselves when any input
    participates in gradient flow.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def _tracked(t):
    return t.requires_grad or t.tape_node is not None


def _record(out, inputs, backward_fn):
    tape = _ACTIVE_TAPE
    if tape is None or tape.consumed:
        return out
    if any(_tracked(t) for t in inputs):
        node = _Node(inputs, out, backward_fn, tape)
        out.tape_node = node
        out.requires_grad = True
        tape.nodes.append(node)
    return out


def backward(loss):
    """Populate grads of everything upstream of a scalar, tape-recorded loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    node = loss.tape_node
    if node is None:
        raise RuntimeError("loss is not recorded on a tape (empty tape or taping disabled)")
    tape = node.tape
    if tape.consumed:
        raise RuntimeError("backward already called on this tape; build a fresh tape")
    tape.consumed = True

    node.out_grad = np.ones_like(loss.data)
    for n in reversed(tape.nodes):
        g = n.out_grad
        if g is None:
            continue
        if n.out.requires_grad:
            n.out.grad = g
        in_grads = n.backward_fn(g)
        for t, ig in zip(n.inputs, in_grads):
            if ig is None:
                continue
            if t.tape_node is not None:
                if t.tape_node.out_grad is None:
                    # own the buffer: later accumulation must not write into
                    # arrays other nodes still reference
                    if ig is g or ig.base is not None:
                        ig = ig.copy()
                    t.tape_node.out_grad = ig
                else:
                    t.tape_node.out_grad += ig
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += ig
        n.out_grad = None


def zero_grads(params):
    """Reset grads on a list of tensors; idempotent, empty list is a no-op."""
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = Tensor(out_data)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bw)


def mul(a, b):
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = Tensor(out_data)
    a_data, b_data = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * b_data, a_data.shape) if _tracked(a) else None
        gb = _unbroadcast(g * a_data, b_data.shape) if _tracked(b) else None
        return ga, gb

    return _record(out, (a, b), bw)


def matmul(a, b):
    """Matrix product for 1-d/2-d operands (vectors promoted numpy-style)."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be 1-d or 2-d, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    def bw(g):
        a2 = ad if ad.ndim == 2 else ad[None, :]
        b2 = bd if bd.ndim == 2 else bd[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(ad.shape) if _tracked(a) else None
        gb = (a2.T @ g2).reshape(bd.shape) if _tracked(b) else None
        return ga, gb

    return _record(out, (a, b), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one input")
    shapes = [t.data.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(i != axis and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) if _tracked(t) else None
            for i, t in enumerate(tensors)
        )

    return _record(out, tuple(tensors), bw)


def reshape(t, shape):
    orig = t.data.shape
    try:
        out = Tensor(t.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {orig} as {tuple(shape)}")

    def bw(g):
        return (g.reshape(orig),)

    return _record(out, (t,), bw)


def relu(t):
    mask = t.data > 0  # gradient at exactly 0 is defined as 0
    out = Tensor(np.where(mask, t.data, 0.0))

    def bw(g):
        return (g * mask,)

    return _record(out, (t,), bw)


def sigmoid(t):
    x = t.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    out = Tensor(s)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _record(out, (t,), bw)


def tanh(t):
    y = np.tanh(t.data)
    out = Tensor(y)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _record(out, (t,), bw)


def softmax(t):
    """Softmax over the last axis."""
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _record(out, (t,), bw)


def log_softmax(t):
    """Log-softmax over the last axis."""
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (t,), bw)


def _im2col(x, k):
    # x: (C, H, W) -> (C*k*k, Ho*Wo) patch matrix, stride 1, valid padding
    c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(c, k, k, ho, wo), strides=(sc, sh, sw, sh, sw), writeable=False
    )
    return view.reshape(c * k * k, ho * wo)


def conv2d(x, w, bias=None):
    """2-d convolution, stride 1, no padding: (C_in,H,W) * (C_out,C_in,k,k)."""
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected input (C,H,W) and kernel (O,C,k,k), got {xd.shape}, {wd.shape}")
    c_out, c_in, k, k2 = wd.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if xd.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {xd.shape[0]} channels, kernel expects {c_in}")
    if xd.shape[1] < k or xd.shape[2] < k:
        raise ShapeError(f"conv2d: input {xd.shape[1:]} smaller than kernel {k}x{k}")
    ho, wo = xd.shape[1] - k + 1, xd.shape[2] - k + 1
    cols = np.ascontiguousarray(_im2col(xd, k))
    out_data = (wd.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")
        out_data += bias.data[:, None, None]
    out = Tensor(out_data)
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(wd.shape) if _tracked(w) else None
        gx = None
        if _tracked(x):
            # full correlation of the padded output grad with the flipped kernel
            gp = np.zeros((c_out, xd.shape[1] + k - 1, xd.shape[2] + k - 1), dtype=g.dtype)
            gp[:, k - 1 : k - 1 + ho, k - 1 : k - 1 + wo] = g.reshape(c_out, ho, wo)
            gcols = np.ascontiguousarray(_im2col(gp, k))
            wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gx = (wflip @ gcols).reshape(xd.shape)
        if bias is None:
            return gx, gw
        gb = g.reshape(c_out, -1).sum(axis=1) if _tracked(bias) else None
        return gx, gw, gb

    return _record(out, inputs, bw)


def maxpool2d(t):
    """2x2 max pooling, stride 2; ties route gradient to the first maximum."""
    x = t.data
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d: expected (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = windows.argmax(axis=-1)  # argmax takes the first maximum
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def bw(g):
        gw = np.zeros((c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return _record(out, (t,), bw)


def weighted_sum(weights, tensors):
    """sum_i weights[i] * tensors[i] over a list of same-shape tensors."""
    tensors = list(tensors)
    wd = weights.data
    if wd.ndim != 1 or len(tensors) != wd.shape[0]:
        raise ShapeError(f"weighted_sum: weights {wd.shape} vs {len(tensors)} tensors")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"weighted_sum: mixed shapes {shape} and {t.data.shape}")
    stack = np.stack([t.data for t in tensors])
    out = Tensor(np.tensordot(wd, stack, axes=1))

    def bw(g):
        gw = stack.reshape(len(tensors), -1) @ g.ravel() if _tracked(weights) else None
        gts = tuple(wd[i] * g if _tracked(t) else None for i, t in enumerate(tensors))
        return (gw,) + gts

    return _record(out, (weights, *tensors), bw)


def nll_loss(log_probs, target):
    """Negative log likelihood of integer targets under given log-probabilities.

    1-d input: scalar target. 2-d input (batch, classes): vector of targets,
    mean reduction.
    """
    lp = log_probs.data
    if lp.ndim == 1:
        t = int(target)
        if not 0 <= t < lp.shape[0]:
            raise ShapeError(f"nll_loss: target {t} out of range for {lp.shape[0]} classes")
        out = Tensor(np.asarray(-lp[t]))

        def bw(g):
            gl = np.zeros_like(lp)
            gl[t] = -g
            return (gl,)

    elif lp.ndim == 2:
        tgt = np.asarray(target, dtype=np.int64)
        if tgt.shape != (lp.shape[0],):
            raise ShapeError(f"nll_loss: targets {tgt.shape} vs batch {lp.shape[0]}")
        if tgt.min() < 0 or tgt.max() >= lp.shape[1]:
            raise ShapeError(f"nll_loss: target out of range for {lp.shape[1]} classes")
        rows = np.arange(lp.shape[0])
        out = Tensor(np.asarray(-lp[rows, tgt].mean()))

        def bw(g):
            gl = np.zeros_like(lp)
            gl[rows, tgt] = -g / lp.shape[0]
            return (gl,)

    else:
        raise ShapeError(f"nll_loss: expected 1-d or 2-d log-probs, got {lp.shape}")
    return _record(out, (log_probs,), bw)


def tsum(t):
    """Sum of all elements, as a scalar tensor."""
    shape = t.data.shape
    out = Tensor(np.asarray(t.data.sum()))

    def bw(g):
        return (np.broadcast_to(g, shape).astype(t.data.dtype, copy=True) if g.shape != shape else g,)

    return _record(out, (t,), bw)

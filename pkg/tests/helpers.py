"""Shared test builders.

`op_gradient_cases` drives the finite-difference battery: each case builds a
scalar loss from fresh random inputs, folded through a fixed random weighting
before summation so that uniform-gradient bugs (dropped transposes, wrong
axes) cannot hide.  `tagged_pools` builds synthetic support pools whose
images encode (class, member) in two pixels.
"""

import numpy as np

from rvnn import autodiff as ad


def tagged_pools(per_class=4, noise_seed=None):
    pools = []
    rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    for c in range(10):
        pool = np.zeros((per_class, 28, 28), dtype=np.float32)
        if rng is not None:
            pool += rng.standard_normal((per_class, 28, 28)).astype(np.float32) * 0.3
        pool[:, 0, 0] = c
        pool[:, 0, 1] = np.arange(per_class)
        pools.append(pool)
    return pools


def _fold(out, rng):
    const = ad.tensor(rng.standard_normal(out.shape))
    return ad.tsum(ad.mul(out, const))


def op_gradient_cases(seed):
    """Yield (name, build_loss, params) triples for every differentiable op."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return ad.tensor(rng.standard_normal(shape), requires_grad=True)

    a, b = leaf(3, 4), leaf(3, 4)
    yield "add", lambda: _fold(ad.add(a, b), np.random.default_rng(seed + 1)), [a, b]

    c, d = leaf(2, 3, 4), leaf(4)
    yield "add_broadcast", lambda: _fold(ad.add(c, d), np.random.default_rng(seed + 2)), [c, d]

    e, f = leaf(3, 4), leaf(3, 4)
    yield "mul", lambda: _fold(ad.mul(e, f), np.random.default_rng(seed + 3)), [e, f]

    m1, m2 = leaf(3, 4), leaf(4, 2)
    yield "matmul", lambda: _fold(ad.matmul(m1, m2), np.random.default_rng(seed + 4)), [m1, m2]

    mv, v = leaf(3, 4), leaf(4)
    yield "matmul_vec", lambda: _fold(ad.matmul(mv, v), np.random.default_rng(seed + 5)), [mv, v]

    u1, u2 = leaf(4), leaf(4)
    yield "matmul_dot", lambda: ad.matmul(u1, u2), [u1, u2]

    c1, c2, c3 = leaf(2, 3), leaf(2, 3), leaf(2, 3)
    yield (
        "concat",
        lambda: _fold(ad.concat([c1, c2, c3], axis=1), np.random.default_rng(seed + 6)),
        [c1, c2, c3],
    )

    r = leaf(4, 6)
    yield "reshape", lambda: _fold(ad.reshape(r, (2, 12)), np.random.default_rng(seed + 7)), [r]

    # keep relu inputs away from the kink: finite differences are invalid there
    rl = ad.tensor(rng.standard_normal((3, 5)) + np.sign(rng.standard_normal((3, 5))) * 0.2, requires_grad=True)
    yield "relu", lambda: _fold(ad.relu(rl), np.random.default_rng(seed + 8)), [rl]

    sg = leaf(3, 5)
    yield "sigmoid", lambda: _fold(ad.sigmoid(sg), np.random.default_rng(seed + 9)), [sg]

    th = leaf(3, 5)
    yield "tanh", lambda: _fold(ad.tanh(th), np.random.default_rng(seed + 10)), [th]

    sm = leaf(7)
    yield "softmax", lambda: _fold(ad.softmax(sm), np.random.default_rng(seed + 11)), [sm]

    sm2 = leaf(3, 5)
    yield "softmax_rows", lambda: _fold(ad.softmax(sm2), np.random.default_rng(seed + 12)), [sm2]

    ls = leaf(7)
    yield "log_softmax", lambda: _fold(ad.log_softmax(ls), np.random.default_rng(seed + 13)), [ls]

    cx, cw, cb = leaf(2, 6, 6), ad.tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True), leaf(3)
    yield (
        "conv2d",
        lambda: _fold(ad.conv2d(cx, cw, cb), np.random.default_rng(seed + 14)),
        [cx, cw, cb],
    )

    px = leaf(2, 6, 6)
    yield "maxpool2d", lambda: _fold(ad.maxpool2d(px), np.random.default_rng(seed + 15)), [px]

    ww = leaf(4)
    xs = [leaf(3, 3) for _ in range(4)]
    yield (
        "weighted_sum",
        lambda: _fold(ad.weighted_sum(ww, xs), np.random.default_rng(seed + 16)),
        [ww] + xs,
    )

    nl = leaf(5)
    yield "nll_loss", lambda: ad.nll_loss(ad.log_softmax(nl), 2), [nl]

    nb = leaf(4, 5)
    tgt = np.array([0, 2, 4, 1])
    yield "nll_loss_batch", lambda: ad.nll_loss(ad.log_softmax(nb), tgt), [nb]

    st = leaf(3, 4)
    yield "sum", lambda: ad.tsum(ad.mul(st, st)), [st]


BACKDROP = -0.1307 / 0.3081
BRIGHT = (1.0 - 0.1307) / 0.3081


def block_image(label, rng=None):
    """Class encoded as the position of a bright 6x4 block."""
    img = np.full((28, 28), BACKDROP)
    r = (label // 5) * 14 + 4
    c = (label % 5) * 5 + 1
    img[r : r + 6, c : c + 4] = BRIGHT
    if rng is not None:
        img = img + rng.normal(0.0, 0.05, size=(28, 28))
    return img


def block_dataset(per_class, seed):
    """Shuffled trivially-learnable images with one class per block position."""
    rng = np.random.default_rng(seed)
    X = np.stack([block_image(c, rng) for c in range(10) for _ in range(per_class)])
    y = np.array([c for c in range(10) for _ in range(per_class)], dtype=np.int64)
    order = rng.permutation(len(y))
    return X[order], y[order]


def block_pools(seed):
    rng = np.random.default_rng(seed)
    return [np.stack([block_image(c, rng) for _ in range(3)]) for c in range(10)]

"""Random gradient-check instances for every differentiable primitive and loss.

Each case maps a generator ``rng -> (fn, arrays)``; ``fn`` returns a scalar
tensor. Outputs are contracted with a fixed random weight so that gradients
are generic (a plain sum would, e.g., give softmax a zero gradient).
"""

import numpy as np

from latent_retinex.autodiff import Tensor, ops
from latent_retinex.training import losses

INSTANCES = 20


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=ndim))


def _weighted(out_fn, out_shape, rng):
    w = Tensor(rng.normal(size=out_shape))
    return lambda *xs: ops.sum(out_fn(*xs) * w)


def unary(op, lo=-2.0, hi=2.0, away_from_zero=False):
    def make(rng):
        shape = _shape(rng, ndim=int(rng.integers(1, 4)))
        x = rng.uniform(lo, hi, shape)
        if away_from_zero:
            x = np.where(np.abs(x) < 0.05, 0.3, x)
        return _weighted(op, shape, rng), [x]
    return make


def binary(op, positive_b=False):
    def make(rng):
        shape = _shape(rng, ndim=3)
        # broadcast the second operand along a random axis to exercise unbroadcast
        bshape = list(shape)
        bshape[int(rng.integers(0, 3))] = 1
        a = rng.normal(size=shape)
        b = rng.uniform(0.5, 2.0, bshape) if positive_b else rng.normal(size=bshape)
        return _weighted(op, shape, rng), [a, b]
    return make


def _reduction(op):
    def make(rng):
        shape = _shape(rng, ndim=3, lo=2)
        axis = int(rng.integers(0, 3))
        out = op(Tensor(np.zeros(shape)), axis).shape
        return _weighted(lambda x: op(x, axis), out, rng), [rng.normal(size=shape)]
    return make


def _conv(rng):
    n, ci, co = (int(v) for v in rng.integers(1, 3, size=3))
    kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(max(kh, 3), 6)), int(rng.integers(max(kw, 3), 6))
    x = rng.normal(size=(n, ci, h, w))
    k = rng.normal(size=(co, ci, kh, kw))
    b = rng.normal(size=(co,))
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).shape
    return _weighted(lambda x, k, b: ops.conv2d(x, k, b, stride, pad), out, rng), [x, k, b]


def _maxpool(rng):
    n, c = (int(v) for v in rng.integers(1, 3, size=2))
    h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.1  # distinct values, no ties
    return _weighted(lambda x: ops.max_pool2d(x, 2), (n, c, h // 2, w // 2), rng), [x]


def _upsample(rng):
    shape = _shape(rng, ndim=4)
    return _weighted(lambda x: ops.upsample_nearest(x, 2),
                     shape[:2] + (2 * shape[2], 2 * shape[3]), rng), [rng.normal(size=shape)]


def _spatial(op):
    def make(rng):
        shape = _shape(rng, ndim=4, lo=2)
        return _weighted(op, shape, rng), [rng.normal(size=shape)]
    return make


def _matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    return _weighted(ops.matmul, (m, n), rng), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _attention(rng):
    s, d = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    arrays = [rng.normal(size=(s, d)) for _ in range(3)]
    return _weighted(ops.attention, (s, d), rng), arrays


def _concat(rng):
    a = rng.normal(size=(2, int(rng.integers(1, 4)), 3, 3))
    b = rng.normal(size=(2, int(rng.integers(1, 4)), 3, 3))
    out = (2, a.shape[1] + b.shape[1], 3, 3)
    return _weighted(lambda a, b: ops.concat([a, b], axis=1), out, rng), [a, b]


def _reshape_transpose(rng):
    shape = _shape(rng, ndim=3)
    perm = tuple(int(p) for p in rng.permutation(3))
    out = tuple(shape[p] for p in perm)
    return _weighted(lambda x: ops.transpose(ops.reshape(x, (-1,)).reshape(shape), perm),
                     out, rng), [rng.normal(size=shape)]


def _index(rng):
    shape = _shape(rng, ndim=2, lo=2)
    return _weighted(lambda x: x[1:, ::2], (shape[0] - 1, (shape[1] + 1) // 2), rng), \
        [rng.normal(size=shape)]


def _layer_norm(rng):
    shape = _shape(rng, ndim=3, lo=2)
    return _weighted(lambda x: ops.layer_norm(x, axis=(1, 2)), shape, rng), \
        [rng.normal(size=shape)]


def _nchw(rng, c=None, hw=None):
    n = int(rng.integers(1, 3))
    c = c or int(rng.integers(1, 4))
    h, w = hw or (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    return (n, c, h, w)


def _loss_pair(loss):
    def make(rng):
        shape = _nchw(rng)
        return loss, [rng.normal(size=shape), rng.normal(size=shape)]
    return make


def _loss_con(rng):
    shape = _nchw(rng, c=3)
    arrays = [rng.uniform(0, 1, shape) for _ in range(4)]
    return lambda a, b, ra, rb: losses.loss_con([a, b], [ra, rb]), arrays


def _loss_rec(rng):
    n, c, h, w = _nchw(rng)
    feats = [rng.uniform(0, 1, (n, c, h, w)) for _ in range(2)]
    refl = [rng.uniform(0, 1, (n, c, h, w)) for _ in range(2)]
    illum = [rng.uniform(0.1, 1, (n, 1, h, w)) for _ in range(2)]
    return (lambda f1, f2, r1, r2, l1, l2: losses.loss_rec([f1, f2], [r1, r2], [l1, l2]),
            feats + refl + illum)


def _loss_ill(rng):
    n, c, h, w = _nchw(rng)
    illum = [rng.uniform(0.1, 1, (n, 1, h, w)) for _ in range(2)]
    refl = [rng.uniform(0, 1, (n, c, h, w)) for _ in range(2)]
    lam = float(rng.uniform(0.5, 10.0))
    return (lambda l1, l2, r1, r2: losses.loss_ill([l1, l2], [r1, r2], lam), illum + refl)


PRIMITIVES = {
    "add": binary(ops.add),
    "sub": binary(ops.sub),
    "mul": binary(ops.mul),
    "div": binary(ops.div, positive_b=True),
    "pow": unary(lambda x: ops.pow(x, 1.7), lo=0.2, hi=2.0),
    "exp": unary(ops.exp),
    "log": unary(ops.log, lo=0.2, hi=3.0),
    "sqrt": unary(ops.sqrt, lo=0.2, hi=3.0),
    "abs": unary(ops.abs, away_from_zero=True),
    "sigmoid": unary(ops.sigmoid),
    "relu": unary(ops.relu, away_from_zero=True),
    "silu": unary(ops.silu),
    "softplus": unary(lambda x: ops.softplus(x, beta=20.0), lo=-0.3, hi=0.3),
    "scalar_broadcast": unary(lambda x: x * 2.5 + 1.0),
    "sum": _reduction(lambda x, a: ops.sum(x, axis=a)),
    "mean": _reduction(lambda x, a: ops.mean(x, axis=a)),
    "channel_max": _reduction(lambda x, a: ops.max(x, axis=a, keepdims=True)),
    "rms": _reduction(lambda x, a: ops.rms(x, axis=a)),
    "reshape_transpose": _reshape_transpose,
    "index": _index,
    "concat": _concat,
    "matmul": _matmul,
    "softmax": unary(lambda x: ops.softmax(x, axis=-1)),
    "layer_norm": _layer_norm,
    "attention": _attention,
    "conv2d": _conv,
    "max_pool2d": _maxpool,
    "upsample_nearest": _upsample,
    "diff_x": _spatial(ops.diff_x),
    "diff_y": _spatial(ops.diff_y),
}

LOSSES = {
    "loss_diff": _loss_pair(losses.loss_diff),
    "loss_scc_l1": _loss_pair(losses.loss_scc),
    "loss_scc_squared": _loss_pair(lambda a, b: losses.loss_scc(a, b, squared=True)),
    "loss_ref": _loss_pair(losses.loss_ref),
    "loss_con": _loss_con,
    "loss_rec": _loss_rec,
    "loss_ill": _loss_ill,
}

ALL_CASES = {**PRIMITIVES, **LOSSES}


def worst_error(name: str, instances: int = INSTANCES, seed: int = 0) -> float:
    from latent_retinex.autodiff.gradcheck import check_gradients

    rng = np.random.default_rng([seed, sorted(ALL_CASES).index(name)])
    worst = 0.0
    for _ in range(instances):
        fn, arrays = ALL_CASES[name](rng)
        worst = max(worst, check_gradients(fn, arrays, step=1e-5))
    return worst

"""Finite-difference gradient cases for every differentiable engine op.

Each builder draws a random small shape, returns the float64 arrays to
differentiate and a function mapping their tensors to a scalar loss.
"""
import numpy as np

from dualinc.engine import (
    BatchNormState,
    Tensor,
    backward,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    leaky_relu,
    linear,
    mul,
    scale,
    soft_cross_entropy,
    softmax_cross_entropy,
    square,
    sum_all,
    take_columns,
    take_rows,
    add,
    mean_all,
)

from _oracles import numerical_grad, relative_error


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def case_linear(rng):
    n, d, k = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 5)
    arrays = [rng.standard_normal((n, d)), rng.standard_normal((d, k)), rng.standard_normal(k)]
    r = np.random.default_rng(int(rng.integers(1 << 30)))
    w = Tensor(r.standard_normal((n, k)))
    return arrays, lambda x, W, b: sum_all(mul(linear(x, W, b), w))


def case_conv2d(rng):
    n, c, k = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    h, w = rng.integers(3, 6), rng.integers(3, 6)
    stride = int(rng.integers(1, 3))
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((k, c, 3, 3)), rng.standard_normal(k)]
    ho, wo = (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1
    weights = Tensor(np.random.default_rng(int(rng.integers(1 << 30))).standard_normal((n, k, ho, wo)))
    return arrays, lambda x, K, b: sum_all(mul(conv2d(x, K, b, stride=stride), weights))


def case_batchnorm_train(rng):
    n, c, h, w = rng.integers(2, 4), rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal(c) + 1.5, rng.standard_normal(c)]
    weights = Tensor(np.random.default_rng(int(rng.integers(1 << 30))).standard_normal((n, c, h, w)))

    def fn(x, g, b):
        return sum_all(mul(batchnorm2d(x, g, b, BatchNormState(int(c)), "train"), weights))

    return arrays, fn


def case_batchnorm_eval(rng):
    n, c, h, w = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    state = BatchNormState(int(c), running_mean=rng.standard_normal(c), running_var=rng.uniform(0.5, 2, c))
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal(c), rng.standard_normal(c)]
    weights = Tensor(np.random.default_rng(int(rng.integers(1 << 30))).standard_normal((n, c, h, w)))
    return arrays, lambda x, g, b: sum_all(mul(batchnorm2d(x, g, b, state, "eval"), weights))


def case_leaky_relu(rng):
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    arrays = [_away_from_zero(rng, shape)]
    weights = Tensor(np.random.default_rng(int(rng.integers(1 << 30))).standard_normal(shape))
    return arrays, lambda x: sum_all(mul(leaky_relu(x), weights))


def case_global_avg_pool(rng):
    shape = (rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5))
    arrays = [rng.standard_normal(shape)]
    weights = Tensor(np.random.default_rng(int(rng.integers(1 << 30))).standard_normal(shape[:2]))
    return arrays, lambda x: sum_all(mul(global_avg_pool(x), weights))


def case_softmax_cross_entropy(rng):
    n, k = rng.integers(1, 6), rng.integers(2, 6)
    targets = rng.integers(0, k, size=n)
    return [rng.standard_normal((n, k)) * 2], lambda z: softmax_cross_entropy(z, targets)


def case_soft_cross_entropy(rng):
    n, k = rng.integers(1, 5), rng.integers(2, 6)
    q = rng.dirichlet(np.ones(k), size=n)
    t = float(rng.uniform(0.5, 4))
    return [rng.standard_normal((n, k)) * 2], lambda z: soft_cross_entropy(z, q, t)


def case_take_rows_columns(rng):
    n, k = rng.integers(2, 6), rng.integers(2, 6)
    rows = rng.integers(0, n, size=rng.integers(1, 2 * n))
    cols = int(rng.integers(1, k + 1))
    weights = Tensor(np.random.default_rng(int(rng.integers(1 << 30))).standard_normal((len(rows), cols)))
    return [rng.standard_normal((n, k))], lambda z: sum_all(mul(take_columns(take_rows(z, rows), cols), weights))


def case_arithmetic(rng):
    shape = tuple(rng.integers(1, 4, size=2))
    a = float(rng.uniform(-2, 2))
    return [rng.standard_normal(shape), rng.standard_normal(shape)], lambda x, y: mean_all(
        add(square(x), scale(mul(x, y), a))
    )


def case_composite(rng, margin=0.05):
    """A miniature backbone + head + loss, the shape of the real model.

    Redrawn until every pre-activation sits ``margin`` away from the leaky-ReLU
    kink, where central differences are not meaningful.
    """
    while True:
        n, c, k = 2, int(rng.integers(1, 3)), int(rng.integers(2, 4))
        side = int(rng.integers(3, 5))
        classes = int(rng.integers(2, 4))
        targets = rng.integers(0, classes, size=n)
        arrays = [
            rng.standard_normal((n, c, side, side)),
            rng.standard_normal((k, c, 3, 3)) * 0.5,
            rng.standard_normal(k) * 0.1,
            rng.standard_normal(k) + 1.5,
            rng.standard_normal(k) * 0.1,
            rng.standard_normal((k, classes)),
            rng.standard_normal(classes) * 0.1,
        ]

        def pre_activation(x, K, b, g, beta):
            return batchnorm2d(conv2d(x, K, b), g, beta, BatchNormState(k), "train")

        pre = pre_activation(*[Tensor(a) for a in arrays[:5]]).data
        if np.abs(pre).min() > margin:
            break

    def fn(x, K, b, g, beta, W, wb):
        h = leaky_relu(pre_activation(x, K, b, g, beta))
        return softmax_cross_entropy(linear(global_avg_pool(h), W, wb), targets)

    return arrays, fn


GRAD_CASES = {
    "linear": case_linear,
    "conv2d": case_conv2d,
    "batchnorm2d_train": case_batchnorm_train,
    "batchnorm2d_eval": case_batchnorm_eval,
    "leaky_relu": case_leaky_relu,
    "global_avg_pool": case_global_avg_pool,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "soft_cross_entropy": case_soft_cross_entropy,
    "take_rows_columns": case_take_rows_columns,
    "arithmetic": case_arithmetic,
    "composite": case_composite,
}


def max_grad_error(builder, seed, h=1e-3):
    """Relative error between the analytic and central-difference gradient.

    Measured over the concatenation of all input gradients, so an input whose
    true gradient is exactly zero (a conv bias ahead of batchnorm) does not
    turn round-off into a spurious relative error.
    """
    rng = np.random.default_rng(seed)
    arrays, fn = builder(rng)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*tensors))

    def value():
        return fn(*[Tensor(a) for a in arrays]).item()

    numeric = numerical_grad(value, arrays, h=h)
    analytic = np.concatenate([t.grad.ravel() for t in tensors])
    return relative_error(analytic, np.concatenate([g.ravel() for g in numeric]))

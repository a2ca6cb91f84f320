"""Central finite-difference gradient checking for the autodiff primitives.

Each case builds float64 inputs from a seed and returns the primitive's
output tensor. The output is projected onto a fixed random direction so the
whole Jacobian participates in a single scalar check.
"""

import numpy as np

from entr import functional as F
from entr.functional import Mode, RunningStats
from entr.tensor import Tensor

H = 1e-5


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def _case_add(rng):
    return [rng.standard_normal((3, 4)), rng.standard_normal((4,))], lambda a, b: a + b


def _case_sub(rng):
    return [rng.standard_normal((2, 3)), rng.standard_normal((2, 1))], lambda a, b: a - b


def _case_mul(rng):
    return [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))], lambda a, b: a * b


def _case_sum(rng):
    return [rng.standard_normal((2, 3, 2))], lambda a: a.sum()


def _case_mean(rng):
    return [rng.standard_normal((4, 5))], lambda a: a.mean()


def _case_reshape(rng):
    return [rng.standard_normal((2, 6))], lambda a: a.reshape(3, 4)


def _case_conv2d(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    size = int(rng.integers(k, 7))
    inputs = [rng.standard_normal((n, c, size, size)), rng.standard_normal((f, c, k, k)), rng.standard_normal(f)]
    return inputs, lambda x, w, b: F.conv2d(x, w, b, stride, pad)


def _case_batchnorm(rng):
    x = rng.standard_normal((3, 2, 3, 3)) * 2 + 1
    inputs = [x, rng.standard_normal(2) + 1.5, rng.standard_normal(2)]

    def f(x, g, b):
        return F.batchnorm2d(x, g, b, RunningStats.initialized(2, np.float64), Mode.TRAIN)

    return inputs, f


def _case_batchnorm_eval(rng):
    running = RunningStats(rng.standard_normal(2), rng.uniform(0.5, 2.0, 2))
    inputs = [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2), rng.standard_normal(2)]
    return inputs, lambda x, g, b: F.batchnorm2d(x, g, b, running, Mode.EVAL)


def _case_relu(rng):
    return [_away_from_zero(rng, (3, 5))], F.relu


def _case_gap(rng):
    return [rng.standard_normal((2, 3, 4, 5))], F.global_avg_pool


def _case_flatten(rng):
    return [rng.standard_normal((2, 3, 2, 2))], F.flatten


def _case_linear(rng):
    inputs = [rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)]
    return inputs, F.linear


def _case_dropout(rng):
    seed = int(rng.integers(1 << 30))
    # a fresh generator per call keeps the mask fixed across perturbed evaluations
    return [rng.standard_normal((4, 6))], lambda x: F.dropout(x, 0.5, Mode.TRAIN, np.random.default_rng(seed))


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    return [rng.standard_normal((5, 4)) * 2], lambda z: F.softmax_cross_entropy(z, labels)


PRIMITIVES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "conv2d": _case_conv2d,
    "batchnorm2d_train": _case_batchnorm,
    "batchnorm2d_eval": _case_batchnorm_eval,
    "relu": _case_relu,
    "global_avg_pool": _case_gap,
    "flatten": _case_flatten,
    "linear": _case_linear,
    "dropout": _case_dropout,
    "softmax_cross_entropy": _case_cross_entropy,
}


def _scalar(fn, arrays, direction):
    out = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).numpy()
    return float(np.sum(out * direction))


def max_relative_error(name: str, seed: int) -> float:
    """Worst relative error between analytic and numeric gradients over all inputs."""
    rng = np.random.default_rng(seed)
    arrays, fn = PRIMITIVES[name](rng)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [_t(a) for a in arrays]
    out = fn(*tensors)
    direction = rng.standard_normal(out.shape)
    (out * Tensor(direction, dtype=np.float64)).sum().backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus, minus = [x.copy() for x in arrays], [x.copy() for x in arrays]
            plus[i][idx] += H
            minus[i][idx] -= H
            numeric[idx] = (_scalar(fn, plus, direction) - _scalar(fn, minus, direction)) / (2 * H)
        analytic = tensors[i].grad
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst

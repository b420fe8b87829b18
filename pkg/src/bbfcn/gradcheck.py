"""Finite-difference gradient suite over the differentiable primitives."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import heatmaps as hm
from . import numeric as nm

TOLERANCE = 1e-4


def _separated(rng, shape, margin=0.05):
    """Values with no two entries (and no entry and zero) closer than ``margin``."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * (2 * margin)
    vals += rng.uniform(-0.2, 0.2, size=n) * margin
    return vals.reshape(shape)


def case_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    pad = int(rng.integers(0, k // 2 + 1))
    x = rng.standard_normal((2, c, 6, 5))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)

    def f(x, w, b):
        y, cache = nm.conv2d(x, w, b, pad)
        def back(dy):
            g = nm.conv2d_backward(dy, cache)
            return g.input_grad, g.weight_grad, g.bias_grad
        return y, back

    return nm.finite_diff_check(f, [x, w, b], seed=seed)


def case_deconv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.standard_normal((2, c, 4, 3))
    w = rng.standard_normal((c, o, 2, 2))
    b = rng.standard_normal(o)

    def f(x, w, b):
        y, cache = nm.deconv2d(x, w, b)
        def back(dy):
            g = nm.deconv2d_backward(dy, cache)
            return g.input_grad, g.weight_grad, g.bias_grad
        return y, back

    return nm.finite_diff_check(f, [x, w, b], seed=seed)


def case_maxpool2(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _separated(rng, (2, 2, 6, 4))

    def f(x):
        y, cache = nm.maxpool2(x)
        return y, lambda dy: [nm.maxpool2_backward(dy, cache)]

    return nm.finite_diff_check(f, [x], seed=seed)


def case_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _separated(rng, (3, 5, 4))

    def f(x):
        y, mask = nm.relu(x)
        return y, lambda dy: [nm.relu_backward(dy, mask)]

    return nm.finite_diff_check(f, [x], seed=seed)


def case_bilinear(seed: int) -> float:
    """Resize, then convolve: gradients w.r.t. the pre-resize input and the kernel."""
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    th, tw = int(rng.integers(2, 13)), int(rng.integers(2, 13))
    x = rng.standard_normal((2, h, w))
    k = rng.standard_normal((1, 2, 3, 3))
    b = np.zeros(1)

    def f(x, k):
        r = nm.bilinear_resize(x, (th, tw))
        y, cache = nm.conv2d(r, k, b, 1)
        def back(dy):
            g = nm.conv2d_backward(dy, cache)
            return nm.bilinear_resize_backward(g.input_grad, (h, w)), g.weight_grad
        return y, back

    return nm.finite_diff_check(f, [x, k], seed=seed)


def case_masked_mse(seed: int) -> float:
    rng = np.random.default_rng(seed)
    gt = (rng.uniform(size=(3, 2, 6, 6)) < 0.2).astype(np.float64)
    mask = rng.uniform(size=gt.shape) < 0.4
    pred = rng.standard_normal(gt.shape)

    def f(pred):
        loss, grad = hm.masked_mse_loss(pred, gt, mask)
        return np.float64(loss), lambda up: [grad * up]

    return nm.finite_diff_check(f, [pred], seed=seed)


CASES: dict[str, Callable[[int], float]] = {
    "conv2d": case_conv2d,
    "deconv2d": case_deconv2d,
    "maxpool2": case_maxpool2,
    "relu": case_relu,
    "bilinear": case_bilinear,
    "masked_mse_loss": case_masked_mse,
}


def run_suite(seeds: int = 20) -> dict[str, float]:
    """Worst relative error per op over ``seeds`` random cases."""
    return {name: float(max(case(s) for s in range(seeds))) for name, case in CASES.items()}

"""Finite-difference gradient checks for every differentiable op.

Each check draws its inputs from ``numpy.random.default_rng(seed)`` and
returns the worst relative error from :func:`tensor.grad_check`. Inputs are
resampled until they sit at least ``KINK_MARGIN`` away from relu and hinge
kinks; inside a composed network, coordinates whose perturbation flips a
relu are skipped instead (see :func:`tensor.grad_check`).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import desk_stages
from .pyramid import build_hashnet
from .tensor import Tensor
from .training import combined_loss, triplet_loss

EPS = 1e-5
TOLERANCE = 1e-6
SEEDS = tuple(range(10))
KINK_MARGIN = 1e-3


def _away_from_zero(rng, shape, scale=1.0):
    x = rng.normal(0.0, scale, shape)
    while np.any(np.abs(x) < KINK_MARGIN):
        bad = np.abs(x) < KINK_MARGIN
        x[bad] = rng.normal(0.0, scale, bad.sum())
    return x


def check_affine(seed):
    rng = np.random.default_rng(seed)
    x, W, b = (Tensor(rng.normal(size=s)) for s in [(5,), (4, 5), (4,)])
    r = rng.normal(size=4)
    return T.grad_check(lambda x, W, b: T.sum(T.mul(T.affine(x, W, b), Tensor(r))), [x, W, b], EPS)


def check_conv2d(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for stride, padding in [(1, 0), (1, 1), (2, 1)]:
        x = Tensor(rng.normal(size=(2, 6, 6)))
        K = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        r = Tensor(rng.normal(size=T.conv2d(x, K, stride, padding, b).shape))
        f = lambda x, K, b: T.sum(T.mul(T.conv2d(x, K, stride, padding, b), r))  # noqa: E731
        worst = max(worst, T.grad_check(f, [x, K, b], EPS))
    return worst


def check_avgpool2d(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 4, 6)))
    r = rng.normal(size=(2, 2, 3))
    return T.grad_check(lambda x: T.sum(T.mul(T.avgpool2d(x, 2, 3), Tensor(r))), x, EPS)


def check_avgpool1d_pairs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=8))
    r = rng.normal(size=4)
    return T.grad_check(lambda x: T.sum(T.mul(T.avgpool1d_pairs(x), Tensor(r))), x, EPS)


def check_sigmoid(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(0, 2, size=7))
    r = rng.normal(size=7)
    return T.grad_check(lambda x: T.sum(T.mul(T.sigmoid(x), Tensor(r))), x, EPS)


def check_relu(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(_away_from_zero(rng, 7))
    r = rng.normal(size=7)
    return T.grad_check(lambda x: T.sum(T.mul(T.relu(x), Tensor(r))), x, EPS)


def check_add(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    r = rng.normal(size=(3, 4))
    return T.grad_check(lambda a, b: T.sum(T.mul(T.add(a, b), Tensor(r))), [a, b], EPS)


def _active_codes(rng, q, margin):
    """Codes in (0,1)^q whose hinge argument exceeds KINK_MARGIN."""
    while True:
        vi, vj, vk = rng.uniform(0.05, 0.95, (3, q))
        h = margin + np.sum((vi - vj) ** 2) - np.sum((vi - vk) ** 2)
        if h > KINK_MARGIN:
            return vi, vj, vk


def check_triplet_loss(seed):
    rng = np.random.default_rng(seed)
    q = 16
    margin = q / 4
    codes = [Tensor(c) for c in _active_codes(rng, q, margin)]
    return T.grad_check(lambda a, b, c: triplet_loss(a, b, c, margin), codes, EPS)


def check_combined_loss(seed):
    rng = np.random.default_rng(seed)
    q, n, margin = 8, 6, 2.0
    triplets = np.array([[0, 1, 2], [3, 4, 5], [1, 0, 4]])
    while True:
        v = rng.uniform(0.05, 0.95, (n, q))
        vc = rng.uniform(0.05, 0.95, (n, q))
        hinge = []
        for codes in (v, vc):
            for i, j, k in triplets:
                hinge.append(margin + np.sum((codes[i] - codes[j]) ** 2) - np.sum((codes[i] - codes[k]) ** 2))
        if np.min(np.abs(hinge)) > KINK_MARGIN:
            break
    return T.grad_check(lambda a, b: combined_loss(a, b, triplets, margin).combined, [Tensor(v), Tensor(vc)], EPS)


def check_end_to_end(seed, coords_per_tensor: int = 4):
    """Combined loss of one triplet pushed through backbone and pyramid heads."""
    rng = np.random.default_rng(seed)
    net = build_hashnet(desk_stages(), 32, 8, seed=seed)
    images = rng.uniform(0, 1, (3, 3, 32, 32))
    triplets = np.array([[0, 1, 2]])

    def f(*_params):
        acts = net.forward(images)
        return combined_loss(acts.v, acts.v_c, triplets, 2.0).combined

    return T.grad_check(f, list(net.parameters().values()), EPS, max_coords=coords_per_tensor, rng=rng)


CHECKS: dict[str, Callable[[int], float]] = {
    "affine": check_affine,
    "conv2d": check_conv2d,
    "avgpool2d": check_avgpool2d,
    "avgpool1d_pairs": check_avgpool1d_pairs,
    "sigmoid": check_sigmoid,
    "relu": check_relu,
    "add": check_add,
    "triplet_loss": check_triplet_loss,
    "combined_loss": check_combined_loss,
    "end_to_end": check_end_to_end,
}


@dataclass
class CheckResult:
    op: str
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def run_checks(ops=None, seeds=SEEDS) -> list[CheckResult]:
    results = []
    for op in ops or CHECKS:
        start = time.perf_counter()
        err = max(CHECKS[op](s) for s in seeds)
        results.append(CheckResult(op, err, time.perf_counter() - start))
    return results

"""Finite-difference verification of every differentiable primitive and the recurrent cell (f64)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from spacepose.diff import ops
from spacepose.diff.gradcheck import finite_diff_check
from spacepose.diff.node import Node
from spacepose.diff.rng import Rng
from spacepose.recurrent import LstmLayer, lstm_cell_step

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _check_all(f: Callable[..., Node], *inputs: np.ndarray) -> float:
    """Max error over each input of ``f``, perturbing one input at a time."""
    worst = 0.0
    for i, x in enumerate(inputs):
        def g(node, i=i):
            args = [node if j == i else Node(v) for j, v in enumerate(inputs)]
            return f(*args)
        worst = max(worst, finite_diff_check(g, x))
    return worst


def _weighted(rng, shape):
    return rng.normal(size=shape)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _conv(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out_shape = ops.conv2d(Node(x), Node(w), Node(b), stride, pad).shape
    wt = _weighted(rng, out_shape)
    return _check_all(lambda a, k, c: ops.sum(ops.conv2d(a, k, c, stride, pad) * wt), x, w, b)


def _linear(rng):
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    wt = _weighted(rng, (4, 3))
    return _check_all(lambda a, k, c: ops.sum(ops.linear(a, k, c) * wt), x, w, b)


def _matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))
    wt = _weighted(rng, (2, 3, 2))
    return _check_all(lambda x, y: ops.sum(ops.matmul(x, y) * wt), a, b)


def _layer_norm(rng):
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    wt = _weighted(rng, (3, 6))
    return _check_all(lambda a, gm, bt: ops.sum(ops.layer_norm(a, gm, bt) * wt), x, g, b)


def _batch_norm(rng):
    x, g, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2), rng.normal(size=2)
    wt = _weighted(rng, x.shape)

    def f(a, gm, bt):
        return ops.sum(ops.batch_norm(a, gm, bt, ops.RunningStats(2, np.float64), True) * wt)

    def f_infer(a, gm, bt):
        stats = ops.RunningStats(2, np.float64)
        stats.mean[...] = [0.3, -0.2]
        stats.var[...] = [1.5, 0.7]
        return ops.sum(ops.batch_norm(a, gm, bt, stats, False) * wt)

    return max(_check_all(f, x, g, b), _check_all(f_infer, x, g, b))


def _activations(rng):
    x = _away_from_zero(rng, (4, 5))
    pos = np.abs(x) + 0.5
    wt = _weighted(rng, x.shape)
    worst = 0.0
    for fn in (ops.sigmoid, ops.tanh, ops.leaky_relu, ops.exp):
        worst = max(worst, finite_diff_check(lambda a, fn=fn: ops.sum(fn(a) * wt), x))
    for fn in (ops.log, ops.sqrt):
        worst = max(worst, finite_diff_check(lambda a, fn=fn: ops.sum(fn(a) * wt), pos))
    return worst


def _softmax_ce(rng):
    logits = rng.normal(size=(4, 6)) * 2
    onehot = np.eye(6)[rng.integers(0, 6, size=4)]
    return finite_diff_check(lambda a: ops.softmax_cross_entropy(a, onehot), logits)


def _elementwise(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    den = np.abs(rng.normal(size=(3, 4))) + 0.5
    wt = _weighted(rng, (3, 4))
    worst = 0.0
    for op in (ops.add, ops.sub, ops.mul):
        worst = max(worst, _check_all(lambda x, y, op=op: ops.sum(op(x, y) * wt), a, b))
    worst = max(worst, _check_all(lambda x, y: ops.sum(ops.div(x, y) * wt), a, den))
    worst = max(worst, finite_diff_check(lambda x: ops.sum(ops.scale(x, -1.7) * wt), a))
    # Shape plumbing: slicing, concat, stack, reshape, transpose and reductions.
    wt5 = _weighted(rng, (3, 5))
    worst = max(worst, finite_diff_check(
        lambda x: ops.sum(ops.concat([x[:, 1:3], ops.reshape(ops.transpose(x)[0:3], (3, 3))], axis=1) * wt5), a))
    worst = max(worst, finite_diff_check(lambda x: ops.sum(ops.stack([x, x * x], axis=0)[1] * wt), a))
    worst = max(worst, finite_diff_check(lambda x: ops.mean(x * wt, axis=1)[0] + ops.sum(x, axis=0)[2], a))
    worst = max(worst, finite_diff_check(lambda x: ops.sum(ops.norm2(x, axis=1) * wt[:, 0]), a + 0.1))
    return worst


def _lstm_cell(rng):
    seed = int(rng.integers(0, 2**31))
    layer = LstmLayer(5, 8, Rng(seed), np.float64)
    for p in (layer.gamma1, layer.beta1, layer.gamma2, layer.beta2, layer.gamma3, layer.beta3):
        p.value[...] += rng.normal(scale=0.3, size=p.shape)
    x, h, c = rng.normal(size=(2, 5)), rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    masks = (rng.uniform(size=(2, 8)) < 0.15, rng.uniform(size=(2, 8)) < 0.15)
    wt_h, wt_c = _weighted(rng, (2, 8)), _weighted(rng, (2, 8))

    def step(xn, hn, cn, mode):
        h2, c2 = lstm_cell_step(layer, xn, hn, cn, masks if mode == "train" else None, mode)
        return ops.sum(h2 * wt_h) + ops.sum(c2 * wt_c)

    worst = 0.0
    for mode in ("train", "infer"):
        worst = max(worst, _check_all(lambda a, b, d, m=mode: step(a, b, d, m), x, h, c))
        for attr in ("wx", "wh", "gamma1", "beta1", "gamma2", "beta2", "gamma3", "beta3"):
            original = getattr(layer, attr)

            def f(node, attr=attr, mode=mode):
                setattr(layer, attr, node)
                return step(Node(x), Node(h), Node(c), mode)

            try:
                worst = max(worst, finite_diff_check(f, original.value))
            finally:
                setattr(layer, attr, original)
    return worst


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": _conv,
    "linear": _linear,
    "matmul": _matmul,
    "layer_norm": _layer_norm,
    "batch_norm": _batch_norm,
    "activations": _activations,
    "softmax_cross_entropy": _softmax_ce,
    "elementwise": _elementwise,
    "lstm_cell": _lstm_cell,
}


def run_suite(seeds: int = DEFAULT_SEEDS, base_seed: int = 0, names=None) -> list[GradResult]:
    """Run each check for ``seeds`` random draws; report the worst relative error per check."""
    results = []
    order = list(CHECKS)
    for name in names or order:
        fn = CHECKS[name]
        t0 = time.perf_counter()
        worst = 0.0
        for s in range(seeds):
            worst = max(worst, fn(np.random.default_rng([base_seed, order.index(name), s])))
        results.append(GradResult(name, worst, seeds, time.perf_counter() - t0))
    return results


def format_results(results: list[GradResult]) -> str:
    lines = [f"{r.name:<24} max_rel_err {r.max_rel_error:.3e}  {'pass' if r.passed else 'FAIL'}"
             for r in results]
    verdict = "all pass" if all(r.passed for r in results) else "FAILURES"
    lines.append(f"{verdict} ({len(results)} checks, tolerance {TOLERANCE:g})")
    return "\n".join(lines)

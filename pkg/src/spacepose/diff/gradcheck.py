"""Central-difference verification of analytic adjoints."""

from __future__ import annotations

from typing import Callable

import numpy as np

from spacepose.diff.node import Node, backward


def numeric_grad(f: Callable[[Node], Node], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Node(x)).value)
        flat[i] = orig - eps
        fm = float(f(Node(x)).value)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_grad(f: Callable[[Node], Node], x: np.ndarray) -> np.ndarray:
    leaf = Node(np.array(x, dtype=np.float64), requires_grad=True)
    backward(f(leaf))
    return np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def finite_diff_check(f: Callable[[Node], Node], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of scalar ``f`` at ``x``."""
    return relative_error(analytic_grad(f, x), numeric_grad(f, x, eps))

"""Barycentric Lagrange interpolation in time, shared by coefficient sampling
and the multi-shot reconstruction."""

from __future__ import annotations

import math

import numpy as np


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    """First-form barycentric weights w_j = 1 / prod_{k!=j}(x_j - x_k)."""
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 1:
        raise ValueError("nodes must be a non-empty 1-d array")
    if np.unique(nodes).size != nodes.size:
        raise ValueError("interpolation nodes must be distinct")
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def barycentric_eval(nodes: np.ndarray, weights: np.ndarray, values: np.ndarray, x: float):
    """Evaluate the interpolant at scalar x; values has shape (len(nodes), ...)."""
    nodes = np.asarray(nodes, dtype=float)
    values = np.asarray(values)
    hit = np.nonzero(np.isclose(x, nodes, rtol=0.0, atol=1e-14))[0]
    if hit.size:
        return values[hit[0]]
    factors = weights / (x - nodes)
    num = np.tensordot(factors, values, axes=1)
    return num / factors.sum()


def max_node_polynomial(nodes: np.ndarray, t_range: tuple[float, float], samples: int = 4097) -> float:
    """max over [t_range] of |prod_i (t - t_i)|, by dense sampling."""
    t = np.linspace(t_range[0], t_range[1], samples)
    prod = np.ones_like(t)
    for ti in np.asarray(nodes, dtype=float):
        prod = prod * (t - ti)
    return float(np.max(np.abs(prod)))


def cauchy_remainder_bound(
    nodes: np.ndarray, derivative_bound: float, t_range: tuple[float, float]
) -> float:
    """Interpolation error bound B * max|prod(t - t_i)| / m! for m nodes.

    `derivative_bound` must bound the m-th time derivative of the interpolated
    function on t_range, where m = len(nodes).
    """
    m = len(np.asarray(nodes))
    return derivative_bound * max_node_polynomial(nodes, t_range) / math.factorial(m)

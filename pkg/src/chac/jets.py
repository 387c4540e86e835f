"""Truncated amplitude-series ("jet") arithmetic for field-valued Taylor
coefficients.

A JetField stores normalized coefficients a_l = u_l / l! of a series
u(eps) = sum_l a_l eps^l with each a_l a grid field. Composing the stored
potential/coupling series with state jets by plain truncated-series
multiplication reproduces all chain-rule bookkeeping of higher-order
derivatives without explicit combinatorial tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import PeriodicGrid, ScalarField
from .potentials import (
    OVERFLOW_LIMIT,
    CouplingSeries,
    EvaluationOverflowError,
    PotentialSeries,
)


@dataclass
class JetField:
    """Normalized truncated Taylor coefficients a_0..a_n of a field series."""

    grid: PeriodicGrid
    coeffs: np.ndarray  # shape (order+1, *grid.shape)

    def __post_init__(self) -> None:
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != self.grid.dim + 1 or c.shape[1:] != self.grid.shape:
            raise ValueError("jet coefficients must have shape (order+1, *grid.shape)")
        self.coeffs = c

    @property
    def order(self) -> int:
        return self.coeffs.shape[0] - 1

    @classmethod
    def zeros(cls, grid: PeriodicGrid, order: int) -> "JetField":
        return cls(grid, np.zeros((order + 1,) + grid.shape))

    @classmethod
    def from_derivatives(cls, grid: PeriodicGrid, fields) -> "JetField":
        """Build from un-normalized derivative fields u_0, u_1, ..., u_n."""
        rows = []
        for ell, f in enumerate(fields):
            v = f.values if isinstance(f, ScalarField) else np.asarray(f, dtype=float)
            rows.append(v / math.factorial(ell))
        return cls(grid, np.stack(rows))

    def derivative(self, ell: int) -> ScalarField:
        """Un-normalized coefficient u_l = l! * a_l."""
        return ScalarField(self.grid, math.factorial(ell) * self.coeffs[ell])

    def copy(self) -> "JetField":
        return JetField(self.grid, self.coeffs.copy())


def jet_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Truncated Cauchy product of coefficient stacks of equal order."""
    n = a.shape[0] - 1
    out = np.zeros_like(a)
    for l in range(n + 1):
        for j in range(l + 1):
            out[l] += a[j] * b[l - j]
    return out


def _jet_powers(coeffs: np.ndarray, max_power: int) -> list[np.ndarray]:
    """[j^1, j^2, ..., j^max_power] as truncated series."""
    powers = [coeffs]
    for _ in range(1, max_power):
        powers.append(jet_mul(powers[-1], coeffs))
    return powers


def jet_compose(
    pot: PotentialSeries,
    coup: CouplingSeries,
    grid: PeriodicGrid,
    t: float,
    jets,
) -> tuple[JetField, JetField, JetField, JetField, JetField]:
    """Compose the nonlinearities with four state jets.

    Returns jets for (g, f0, f1, f2, f3). Coefficient l of each output is
    (1/l!) d^l/deps^l [nonlinearity(u(eps))] at eps = 0. Exact for polynomial
    series whenever the jet order covers the needed products.
    """
    jets = list(jets)
    if len(jets) != 4:
        raise ValueError("four state jets required (u0, u1, u2, u3)")
    order = jets[0].order
    for j in jets:
        if j.order != order:
            raise ValueError("all state jets must share one truncation order")
        if j.grid != grid:
            raise ValueError("all state jets must live on the given grid")

    max_deg = max(pot.order, coup.order)
    powers = [
        _jet_powers(j.coeffs, max_deg) if np.any(j.coeffs) else None for j in jets
    ]
    zero_stack = np.zeros((order + 1,) + grid.shape)

    def power_of(component: int, exponent: int) -> np.ndarray | None:
        """component^exponent truncated, or None when identically zero."""
        if exponent == 0:
            raise ValueError("exponent 0 handled by caller")
        p = powers[component]
        return None if p is None else p[exponent - 1]

    g_out = zero_stack.copy()
    for ell, c in sorted(pot.coefficients.items()):
        p = power_of(0, ell)
        if p is None:
            continue
        g_out += (c.sample(grid, t) / math.factorial(ell)) * p

    def monomial(idx) -> np.ndarray | None:
        acc = None
        for component, exponent in enumerate(idx):
            if exponent == 0:
                continue
            p = power_of(component, exponent)
            if p is None:
                return None
            acc = p if acc is None else jet_mul(acc, p)
        return acc

    f0_out = zero_stack.copy()
    for idx, c in coup.f0_coefficients.items():
        m = monomial(idx)
        if m is None:
            continue
        f0_out += (c.sample(grid, t) / math.factorial(sum(idx))) * m

    fi_out = []
    for i in (1, 2, 3):
        out = zero_stack.copy()
        if i in coup.diagonal and powers[i] is not None:
            out += coup.diagonal[i].sample(grid, t) * jets[i].coeffs
        for idx, c in coup.fi_coefficients.get(i, {}).items():
            m = monomial(idx)
            if m is None:
                continue
            out += (c.sample(grid, t) / math.factorial(sum(idx))) * m
        fi_out.append(out)

    stacks = (g_out, f0_out, *fi_out)
    for s in stacks:
        if np.max(np.abs(s), initial=0.0) > OVERFLOW_LIMIT:
            raise EvaluationOverflowError("jet composition exceeded 1e100 (blow-up)")
    return tuple(JetField(grid, s) for s in stacks)  # type: ignore[return-value]

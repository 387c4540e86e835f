"""Higher-order linearization of the forward map.

Two independent routes to the derivative fields u^(l) = d^l/d(eps)^l u(eps)|_0
of the solution with initial data eps * phi:

* solve_cascade propagates truncated amplitude series (jets) through the same
  IMEX scheme as the nonlinear solver. Because every step of the integrator is
  polynomial in the state, the propagated coefficients are the exact
  derivatives of the discrete flow - no finite-difference error.

* fd_epsilon_probe runs independent nonlinear solves at a stencil of epsilon
  values and extracts derivatives by fitting the exact polynomial of matching
  degree; it cross-checks the cascade and quantifies amplitude floors.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .forward import SolverConfig, StateVec, Trajectory, _SystemStepper, _check_blowup, solve_forward
from .grid import PeriodicGrid, ScalarField, norm
from .jets import JetField, jet_compose
from .potentials import CouplingSeries, PotentialSeries, SystemParams


class CascadeResidualError(RuntimeError):
    """An order that must vanish identically came out nonzero."""


@dataclass
class CascadeResult:
    """Derivative fields of the discrete flow at the recorded times.

    u[(ell, j)] is the 4-tuple of un-normalized order-ell derivative fields at
    time times[j]; dudt0[(ell, j)] is the order-ell derivative of du0/dt.
    Order 0 is the base trajectory (zero when linearizing around rest).
    """

    grid: PeriodicGrid
    order: int
    times: list[float]
    u: dict
    dudt0: dict

    def component(self, ell: int, j: int, i: int = 0) -> ScalarField:
        return self.u[(ell, j)][i]


def _jet_state(grid: PeriodicGrid, order: int, phi: StateVec | None) -> list[np.ndarray]:
    """Coefficient stacks for the four components of eps*phi (or zero data)."""
    stacks = []
    for i in range(4):
        c = np.zeros((order + 1,) + grid.shape)
        if phi is not None:
            c[1] = phi.fields[i].values
        stacks.append(c)
    return stacks


def solve_cascade(
    phi: StateVec,
    params: SystemParams,
    pot: PotentialSeries,
    coup: CouplingSeries,
    cfg: SolverConfig,
    order: int,
    vanish_tol: float = 1e-10,
) -> CascadeResult:
    """Propagate derivatives of the flow eps -> u(eps*phi) up to the given order.

    Linearizes around the rest state: the order-0 slot stays identically zero
    (checked against vanish_tol), order 1 solves the linearized equations, and
    each higher order is driven by products of the lower ones.
    """
    if order < 1:
        raise ValueError("linearization order must be >= 1")
    grid = phi.grid
    stepper = _SystemStepper(grid, params, pot, coup, cfg, None)
    n_steps = cfg.n_steps
    record = set(cfg.record_steps())
    dt = cfg.dt

    coeffs = _jet_state(grid, order, phi)
    hats = [_fftn_stack(c, grid) for c in coeffs]
    hats_prev = None
    expl_prev = None

    times: list[float] = []
    u_out: dict = {}
    dudt_out: dict = {}

    def explicit_hats(coeffs, t):
        jets = [JetField(grid, c) for c in coeffs]
        gj, f0j, f1j, f2j, f3j = jet_compose(pot, coup, grid, t, jets)
        flux = _fftn_stack(f0j.coeffs + gj.coeffs, grid)
        if stepper.mask is not None:
            flux = flux * stepper.mask
        out = [-stepper.xi2 * flux]
        for fj in (f1j, f2j, f3j):
            fh = _fftn_stack(fj.coeffs, grid)
            if stepper.mask is not None:
                fh = fh * stepper.mask
            out.append(fh)
        return out

    def rhs0(coeffs, t):
        expl = explicit_hats(coeffs, t)
        return _ifftn_stack(-params.c1 * stepper.xi4 * _fftn_stack(coeffs[0], grid) + expl[0], grid)

    for k in range(n_steps):
        t = k * dt
        expl = explicit_hats(coeffs, t)
        if cfg.scheme == "imex2" and expl_prev is not None:
            new_hats = [
                fac * (2.0 * h - 0.5 * hp + dt * (2.0 * e - ep))
                for fac, h, hp, e, ep in zip(
                    (stepper.fac2_u0, stepper.fac2_ui, stepper.fac2_ui, stepper.fac2_ui),
                    hats, hats_prev, expl, expl_prev,
                )
            ]
        else:
            new_hats = [
                fac * (h + dt * e)
                for fac, h, e in zip(
                    (stepper.fac1_u0, stepper.fac1_ui, stepper.fac1_ui, stepper.fac1_ui),
                    hats, expl,
                )
            ]
        hats_prev, expl_prev = hats, expl
        hats = new_hats
        coeffs = [_ifftn_stack(h, grid) for h in hats]
        _check_blowup(coeffs, k + 1)

        if (k + 1) in record:
            t_new = (k + 1) * dt
            base = float(np.max(np.abs(coeffs[0][0]), initial=0.0))
            scale = max(1.0, float(np.max(np.abs(coeffs[0]))))
            if base > vanish_tol * scale:
                raise CascadeResidualError(
                    f"order-0 slot reached {base:.3e} at t={t_new}; the rest state "
                    "is not an equilibrium of the supplied nonlinearities"
                )
            j = len(times)
            times.append(t_new)
            r0 = rhs0(coeffs, t_new)
            for ell in range(order + 1):
                fac = math.factorial(ell)
                u_out[(ell, j)] = tuple(
                    ScalarField(grid, fac * coeffs[i][ell].copy()) for i in range(4)
                )
                dudt_out[(ell, j)] = ScalarField(grid, fac * r0[ell].copy())

    return CascadeResult(grid=grid, order=order, times=times, u=u_out, dudt0=dudt_out)


def _fftn_stack(stack: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    axes = tuple(range(1, grid.dim + 1))
    return np.fft.fftn(stack, axes=axes)


def _ifftn_stack(stack: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    axes = tuple(range(1, grid.dim + 1))
    return np.fft.ifftn(stack, axes=axes).real


# ---------------------------------------------------------------------------
# finite-amplitude probe
# ---------------------------------------------------------------------------


def _scaled_state(phi: StateVec, eps: float) -> StateVec:
    return StateVec(
        *(ScalarField(phi.grid, eps * f.values) for f in phi.fields), time=phi.time
    )


def _probe_solve(args):
    phi, params, pot, coup, cfg, eps = args
    return solve_forward(_scaled_state(phi, eps), params, pot, coup, cfg)


@dataclass
class ProbeResult:
    grid: PeriodicGrid
    order: int
    times: list[float]
    epsilons: np.ndarray
    u: dict  # (ell, j) -> 4-tuple of ScalarField
    dudt0: dict


def fd_epsilon_probe(
    phi: StateVec,
    params: SystemParams,
    pot: PotentialSeries,
    coup: CouplingSeries,
    cfg: SolverConfig,
    order: int,
    eps0: float = 1e-2,
    jobs: int | None = None,
) -> ProbeResult:
    """Estimate derivative fields from 2*order+1 nonlinear solves.

    Solves at eps = m*eps0 for m = -order..order (the eps = 0 run is skipped:
    the flow from zero data is identically zero) and fits the unique degree-2n
    polynomial through the samples; its derivatives at 0 are the estimates.
    Accuracy is limited by the first neglected series term, O(eps0^(2n+1-ell))
    relative, so eps0 around 1e-2 balances truncation against rounding.
    """
    if order < 1:
        raise ValueError("probe order must be >= 1")
    if eps0 < 1e-4:
        warnings.warn(
            f"eps0 = {eps0:.1e} makes the probe Vandermonde system ill-conditioned; "
            "derivative estimates above order 2 may lose all accuracy",
            stacklevel=2,
        )
    grid = phi.grid
    ms = [m for m in range(-order, order + 1) if m != 0]
    eps = np.array([m * eps0 for m in ms])

    tasks = [(phi, params, pot, coup, cfg, e) for e in eps]
    if jobs is not None and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trajectories = list(pool.map(_probe_solve, tasks))
    else:
        trajectories = [_probe_solve(t) for t in tasks]

    # Fit in the scaled variable s = eps/eps0 so the Vandermonde matrix has
    # entries of order one; the sample at s = 0 is exactly zero.
    n_samp = 2 * order + 1
    svals = np.array([0.0] + [float(m) for m in ms])
    V = np.vander(svals, n_samp, increasing=True)
    Vinv = np.linalg.inv(V)

    times = list(trajectories[0].times)
    u_out: dict = {}
    dudt_out: dict = {}
    for j in range(len(times)):
        for i in range(4):
            samples = np.stack(
                [np.zeros(grid.shape)] + [tr.states[j].fields[i].values for tr in trajectories]
            )
            coeff = np.tensordot(Vinv, samples, axes=1)  # poly coeffs in s
            for ell in range(order + 1):
                vals = coeff[ell] * math.factorial(ell) / eps0**ell
                u_out.setdefault((ell, j), [None] * 4)[i] = ScalarField(grid, vals)
        dsamples = np.stack(
            [np.zeros(grid.shape)] + [tr.dudt0[j].values for tr in trajectories]
        )
        dcoeff = np.tensordot(Vinv, dsamples, axes=1)
        for ell in range(order + 1):
            dudt_out[(ell, j)] = ScalarField(
                grid, dcoeff[ell] * math.factorial(ell) / eps0**ell
            )
    u_out = {key: tuple(v) for key, v in u_out.items()}
    return ProbeResult(
        grid=grid, order=order, times=times, epsilons=eps, u=u_out, dudt0=dudt_out
    )


# ---------------------------------------------------------------------------
# consistency checks
# ---------------------------------------------------------------------------


@dataclass
class TaylorCheck:
    order: int
    epsilons: np.ndarray
    remainders: np.ndarray
    slope: float
    expected_slope: float
    floor_hit: bool

    @property
    def passed(self) -> bool:
        return self.floor_hit or abs(self.slope - self.expected_slope) <= 0.2


def taylor_consistency_check(
    phi: StateVec,
    params: SystemParams,
    pot: PotentialSeries,
    coup: CouplingSeries,
    cfg: SolverConfig,
    cascade: CascadeResult,
    order: int,
    epsilons=(1e-1, 5e-2, 2.5e-2),
    floor: float = 1e-13,
) -> TaylorCheck:
    """Check that the order-n Taylor remainder of the flow decays like eps^(n+1).

    The remainder at the last recorded time is ||u(eps) - sum_l eps^l u_l/l!||
    in the grid max norm over all four components. When remainders fall below
    `floor` times the solution size, rounding dominates and the slope test is
    skipped (floor_hit).
    """
    if order > cascade.order:
        raise ValueError("cascade does not carry enough orders")
    j = len(cascade.times) - 1
    eps = np.asarray(epsilons, dtype=float)
    rems = []
    sizes = []
    for e in eps:
        traj = solve_forward(_scaled_state(phi, e), params, pot, coup, cfg)
        rem = 0.0
        size = 0.0
        for i in range(4):
            partial = np.zeros(phi.grid.shape)
            for ell in range(order + 1):
                partial += (e**ell / math.factorial(ell)) * cascade.u[(ell, j)][i].values
            full = traj.states[j].fields[i].values
            rem = max(rem, float(np.max(np.abs(full - partial))))
            size = max(size, float(np.max(np.abs(full))))
        rems.append(rem)
        sizes.append(max(size, 1e-300))
    rems = np.array(rems)
    floor_hit = bool(np.any(rems <= floor * np.array(sizes)))
    if floor_hit or np.any(rems == 0.0):
        slope = float("nan")
    else:
        slope = float(np.polyfit(np.log(eps), np.log(rems), 1)[0])
    return TaylorCheck(
        order=order,
        epsilons=eps,
        remainders=rems,
        slope=slope,
        expected_slope=float(order + 1),
        floor_hit=floor_hit,
    )


def compare_cascade_probe(
    cascade: CascadeResult, probe: ProbeResult, ell: int, j: int = -1
) -> float:
    """Max relative discrepancy of the order-ell u0 fields at snapshot j."""
    if j < 0:
        j = len(cascade.times) + j
    a = cascade.u[(ell, j)][0].values
    b = probe.u[(ell, j)][0].values
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        return float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b)) / scale)

"""Recovery of the unknown potential's Taylor coefficients from snapshots of
the conserved component and its time derivative.

Each order l satisfies a linear conserved equation whose only unknown term is
Lap[g_l * (u1)^l], with every other term computable from measured lower-order
fields and previously recovered coefficients. A periodic Poisson solve undoes
the Laplacian up to an additive constant; that gauge constant is fixed either
by combining two experiments with non-proportional weights or by assuming the
coefficient is spatially constant.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .forward import SolverConfig, StateVec
from .grid import (
    MeanViolationError,
    PeriodicGrid,
    ScalarField,
    biharmonic,
    laplacian,
    solve_poisson_periodic,
    to_spectrum,
)
from .interp import barycentric_eval, barycentric_weights, cauchy_remainder_bound
from .jets import JetField, jet_compose
from .linearize import solve_cascade
from .potentials import CoefficientField, CouplingSeries, PotentialSeries, SystemParams


class InconsistentMeasurementError(RuntimeError):
    """Snapshot data are incompatible with the conserved-flux structure."""


class DegenerateGaugeError(RuntimeError):
    """The two experiments' weights are proportional; the gauge constant
    cannot be separated from the coefficient profile."""


class IllPosedReconstructionError(RuntimeError):
    """The sensitivity weight vanishes on most of the domain."""


@dataclass
class MeasurementBundle:
    """Derivative-field measurements from one experiment.

    u[(ell, j)] holds the 4 order-ell derivative fields at times[j];
    dudt0[(ell, j)] the order-ell derivative of du0/dt. Orders run 1..order.
    """

    grid: PeriodicGrid
    order: int
    times: list[float]
    u: dict
    dudt0: dict
    noise_sigma: float = 0.0

    def jet_at(self, j: int) -> list[JetField]:
        """Measured state jets (orders 0..order, zero base) at snapshot j."""
        jets = []
        for i in range(4):
            stack = np.zeros((self.order + 1,) + self.grid.shape)
            for ell in range(1, self.order + 1):
                stack[ell] = self.u[(ell, j)][i].values / math.factorial(ell)
            jets.append(JetField(self.grid, stack))
        return jets


def generate_measurements(
    phi: StateVec,
    params: SystemParams,
    pot: PotentialSeries,
    coup: CouplingSeries,
    cfg: SolverConfig,
    order: int,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> MeasurementBundle:
    """Produce synthetic measurements by exact linearization of the solver.

    Optional noise is additive Gaussian with standard deviation
    noise_sigma * max|field|, applied independently per recorded field.
    """
    if not cfg.record_times:
        raise ValueError("cfg.record_times must name at least one snapshot")
    casc = solve_cascade(phi, params, pot, coup, cfg, order)
    if noise_sigma < 0.0:
        raise ValueError("noise_sigma must be nonnegative")
    if noise_sigma > 0.0 and rng is None:
        rng = np.random.default_rng()

    def _noisy(f: ScalarField) -> ScalarField:
        if noise_sigma == 0.0:
            return f
        scale = noise_sigma * float(np.max(np.abs(f.values), initial=0.0))
        if scale == 0.0:
            return f
        return ScalarField(f.grid, f.values + rng.normal(0.0, scale, f.grid.shape))

    u = {}
    dudt0 = {}
    for j in range(len(casc.times)):
        for ell in range(1, order + 1):
            u[(ell, j)] = tuple(_noisy(f) for f in casc.u[(ell, j)])
            dudt0[(ell, j)] = _noisy(casc.dudt0[(ell, j)])
    return MeasurementBundle(
        grid=phi.grid, order=order, times=list(casc.times), u=u, dudt0=dudt0,
        noise_sigma=noise_sigma,
    )


# ---------------------------------------------------------------------------
# single-order reconstruction
# ---------------------------------------------------------------------------


@dataclass
class GaugedProfile:
    """Poisson-solve output for one order/time/experiment: the coefficient
    profile is (potential + gauge constant) / weight wherever the weight is
    usable."""

    grid: PeriodicGrid
    order: int
    time: float
    potential: ScalarField  # mean-zero antiderivative G with Lap G = residual
    weight: ScalarField  # (u1)^ell
    mask: np.ndarray  # where |weight| >= tau * max|weight|
    discarded_mean: float

    def coefficient(self, gauge_constant: float) -> np.ndarray:
        """(G + c)/w on the mask; masked-out points are NaN."""
        out = np.full(self.grid.shape, np.nan)
        out[self.mask] = (
            self.potential.values[self.mask] + gauge_constant
        ) / self.weight.values[self.mask]
        return out


def reconstruct_order(
    bundle: MeasurementBundle,
    params: SystemParams,
    coup: CouplingSeries,
    known: PotentialSeries,
    ell: int,
    time_index: int,
    mask_tau: float = 1e-3,
    min_coverage: float = 0.5,
) -> GaugedProfile:
    """Isolate Lap[g_ell * (u1)^ell] at one snapshot and undo the Laplacian.

    `known` carries the already-recovered coefficients of orders < ell (empty
    at ell = 1). The residual is the measured order-ell time derivative minus
    every computable term of the order-ell conserved equation.
    """
    if not 1 <= ell <= bundle.order:
        raise ValueError(f"order {ell} outside measured range 1..{bundle.order}")
    for j_known in known.coefficients:
        if j_known >= ell:
            raise ValueError(f"known coefficients must have order < {ell}")
    grid = bundle.grid
    t = bundle.times[time_index]
    u_ell = bundle.u[(ell, time_index)][0]
    dudt_ell = bundle.dudt0[(ell, time_index)]

    # Known part of the order-ell flux: compose the known potential and the
    # couplings with the measured jets and take the order-ell coefficient.
    # The unknown g_ell cannot leak in: its first contribution at order ell
    # is exactly the g_ell*(u1)^ell term we are solving for.
    jets = bundle.jet_at(time_index)
    known_for_compose = known if known.coefficients else PotentialSeries(order=1, coefficients={})
    gj, f0j, _, _, _ = jet_compose(known_for_compose, coup, grid, t, jets)
    source = math.factorial(ell) * (gj.coeffs[ell] + f0j.coeffs[ell])

    residual = (
        dudt_ell.values
        + params.c1 * biharmonic(u_ell).values
        - laplacian(ScalarField(grid, source)).values
    )
    try:
        potential, discarded = solve_poisson_periodic(ScalarField(grid, residual))
    except MeanViolationError as exc:
        raise InconsistentMeasurementError(
            f"order-{ell} residual at t={t} is not a pure divergence: {exc}"
        ) from exc

    weight = bundle.u[(1, time_index)][0].values ** ell
    wmax = float(np.max(np.abs(weight)))
    if wmax == 0.0:
        raise IllPosedReconstructionError(
            f"order-{ell} weight (u1)^{ell} vanishes identically at t={t}"
        )
    mask = np.abs(weight) >= mask_tau * wmax
    coverage = mask.mean()
    if coverage < min_coverage:
        raise IllPosedReconstructionError(
            f"weight mask covers only {coverage:.1%} of the grid at t={t} "
            f"(threshold {min_coverage:.0%}); choose initial data without "
            "large dead zones"
        )
    return GaugedProfile(
        grid=grid, order=ell, time=t, potential=potential,
        weight=ScalarField(grid, weight), mask=mask, discarded_mean=discarded,
    )


@dataclass
class GaugeResolution:
    constants: tuple[float, float]
    profile: np.ndarray  # fused coefficient profile, NaN off both masks
    scalar: float  # mask-weighted average of the fused profile
    spread: float  # max deviation of the profile from the scalar on the mask
    residual_norm: float


def resolve_gauge(
    a: GaugedProfile, b: GaugedProfile, angle_tol: float = 1e-3
) -> GaugeResolution:
    """Fix the two Poisson gauge constants by matching experiments.

    (G_a + c_a)/w_a and (G_b + c_b)/w_b must agree pointwise; on the joint
    mask this is linear in (c_a, c_b) and solved by least squares. Requires
    the weights not to be proportional, otherwise the constants are
    unidentifiable.
    """
    mask = a.mask & b.mask
    if not mask.any():
        raise IllPosedReconstructionError("experiments share no usable grid points")
    wa = a.weight.values[mask]
    wb = b.weight.values[mask]
    cos = abs(float(wa @ wb)) / (np.linalg.norm(wa) * np.linalg.norm(wb))
    angle = math.acos(min(1.0, cos))
    if angle < angle_tol:
        raise DegenerateGaugeError(
            f"weight fields are proportional up to {angle:.2e} rad; use initial "
            "data with different spatial profiles"
        )
    # (G_a + c_a) w_b = (G_b + c_b) w_a  =>  c_a w_b - c_b w_a = G_b w_a - G_a w_b
    ga = a.potential.values[mask]
    gb = b.potential.values[mask]
    cols = np.stack([wb, -wa], axis=1)
    rhs = gb * wa - ga * wb
    sol, res, _, _ = np.linalg.lstsq(cols, rhs, rcond=None)
    ca, cb = float(sol[0]), float(sol[1])
    fit_residual = float(np.linalg.norm(cols @ sol - rhs))

    prof = np.full(a.grid.shape, np.nan)
    vals_a = a.coefficient(ca)
    vals_b = b.coefficient(cb)
    both = a.mask & b.mask
    only_a = a.mask & ~b.mask
    only_b = b.mask & ~a.mask
    prof[both] = 0.5 * (vals_a[both] + vals_b[both])
    prof[only_a] = vals_a[only_a]
    prof[only_b] = vals_b[only_b]
    joint = a.mask | b.mask
    scalar = float(np.mean(prof[joint]))
    spread = float(np.max(np.abs(prof[joint] - scalar)))
    return GaugeResolution(
        constants=(ca, cb), profile=prof, scalar=scalar, spread=spread,
        residual_norm=fit_residual,
    )


def resolve_gauge_constant(p: GaugedProfile) -> float:
    """Single-experiment gauge fix assuming a spatially constant coefficient.

    Then G = g*(w - mean(w)), so g is the least-squares slope of G against
    the mean-free weight.
    """
    w = p.weight.values - p.weight.values.mean()
    denom = float(np.sum(w * w))
    if denom == 0.0:
        raise IllPosedReconstructionError("weight has no spatial variation")
    return float(np.sum(p.potential.values * w) / denom)


# ---------------------------------------------------------------------------
# multi-order drivers
# ---------------------------------------------------------------------------


def _fill_masked(profile: np.ndarray) -> np.ndarray:
    """Replace NaN (masked-out) points by the mean of the recovered region.

    Only used when a recovered profile feeds the next order's source term;
    reported profiles keep their NaNs so masked points are never mistaken for
    data.
    """
    out = profile.copy()
    bad = np.isnan(out)
    if bad.all():
        raise IllPosedReconstructionError("profile has no recovered points")
    out[bad] = out[~bad].mean()
    return out


def _single_profile(p: GaugedProfile) -> tuple[np.ndarray, float]:
    c = resolve_gauge_constant(p)
    # With a constant coefficient the gauge constant above absorbs the mean;
    # shift so (G + shift)/w reproduces it on the mask.
    shift = c * p.weight.values.mean()
    return p.coefficient(shift), c


@dataclass
class ReconstructionResult:
    order: int
    times: list[float]
    coefficients: dict[int, float]  # order -> scalar estimate
    per_time: dict[int, list[float]]  # order -> per-snapshot scalars
    spreads: dict[int, float]
    profiles: dict[int, np.ndarray]  # order -> recovered profile, NaN off-mask
    masks: dict[int, np.ndarray]
    gauge_constants: dict[int, list[tuple[float, float]]] = field(default_factory=dict)


def reconstruct_ip1(
    bundle_a: MeasurementBundle,
    bundle_b: MeasurementBundle | None,
    params: SystemParams,
    coup: CouplingSeries,
    order: int,
    mask_tau: float = 1e-3,
    spatial: bool = False,
) -> ReconstructionResult:
    """Recover time-independent Taylor coefficients g_1..g_order sequentially.

    With two experiments the gauge is fixed without structural assumptions;
    with one, the coefficients are assumed spatially constant. When `spatial`
    is set the recovered fields (not their means) feed the next order's
    source assembly, so spatially varying coefficients close the loop.
    """
    times = bundle_a.times
    recovered: dict[int, CoefficientField] = {}
    coefficients: dict[int, float] = {}
    per_time: dict[int, list[float]] = {}
    spreads: dict[int, float] = {}
    profiles: dict[int, np.ndarray] = {}
    masks: dict[int, np.ndarray] = {}
    gauges: dict[int, list[tuple[float, float]]] = {}
    for ell in range(1, order + 1):
        known = (
            PotentialSeries(order=max(1, ell - 1), coefficients=dict(recovered))
            if recovered
            else PotentialSeries(order=1, coefficients={})
        )
        estimates = []
        spread_ell = 0.0
        gauges[ell] = []
        prof_stack = []
        for j in range(len(times)):
            pa = reconstruct_order(bundle_a, params, coup, known, ell, j, mask_tau)
            if bundle_b is not None:
                pb = reconstruct_order(bundle_b, params, coup, known, ell, j, mask_tau)
                res = resolve_gauge(pa, pb)
                estimates.append(res.scalar)
                spread_ell = max(spread_ell, res.spread)
                gauges[ell].append(res.constants)
                prof_stack.append(res.profile)
            else:
                prof, c = _single_profile(pa)
                estimates.append(c)
                prof_stack.append(prof)
        stack = np.stack(prof_stack)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
            profile = np.nanmean(stack, axis=0)
        mask = ~np.isnan(profile)
        profiles[ell] = profile
        masks[ell] = mask
        per_time[ell] = estimates
        spreads[ell] = spread_ell
        coefficients[ell] = float(np.mean(estimates))
        if spatial:
            recovered[ell] = CoefficientField.from_grid_values(_fill_masked(profile))
        else:
            recovered[ell] = CoefficientField.constant(coefficients[ell])
    return ReconstructionResult(
        order=order, times=list(times), coefficients=coefficients,
        per_time=per_time, spreads=spreads, profiles=profiles, masks=masks,
        gauge_constants=gauges,
    )


@dataclass
class TimeDependentResult:
    order: int
    nodes: np.ndarray
    per_order_values: dict[int, np.ndarray]  # order -> scalar values at nodes
    per_order_profiles: dict[int, np.ndarray]  # order -> (n_nodes, *shape), NaN off-mask
    masks: dict[int, np.ndarray]  # order -> joint spatial mask over nodes
    remainder_bound: float

    def coefficient(self, ell: int) -> CoefficientField:
        return CoefficientField.from_time_samples(self.nodes, self.per_order_values[ell])

    def evaluate(self, ell: int, t: float) -> float:
        w = barycentric_weights(self.nodes)
        return float(barycentric_eval(self.nodes, w, self.per_order_values[ell], t))

    def evaluate_profile(self, ell: int, t: float) -> np.ndarray:
        """Interpolated spatial profile at time t; NaN outside the joint mask."""
        w = barycentric_weights(self.nodes)
        stack = np.where(self.masks[ell], self.per_order_profiles[ell], 0.0)
        out = np.asarray(barycentric_eval(self.nodes, w, stack, t), dtype=float)
        return np.where(self.masks[ell], out, np.nan)


def reconstruct_ip2(
    bundle_a: MeasurementBundle,
    bundle_b: MeasurementBundle | None,
    params: SystemParams,
    coup: CouplingSeries,
    order: int,
    derivative_bound: float,
    t_range: tuple[float, float] | None = None,
    mask_tau: float = 1e-3,
    spatial: bool = False,
) -> TimeDependentResult:
    """Recover time-dependent coefficients g_l(t) (or g_l(x,t) with `spatial`)
    from multi-time snapshots.

    Each snapshot gives the coefficient at its time; barycentric interpolation
    in t fills the gaps. `derivative_bound` must bound the m-th time
    derivative of every g_l on t_range (m = number of snapshots); the
    returned remainder_bound is the resulting worst-case interpolation error.
    """
    times = np.asarray(bundle_a.times, dtype=float)
    if times.size < 2:
        raise ValueError("time-dependent recovery needs at least two snapshots")
    if t_range is None:
        t_range = (float(times.min()), float(times.max()))

    grid = bundle_a.grid
    per_order: dict[int, np.ndarray] = {}
    per_prof: dict[int, np.ndarray] = {}
    masks: dict[int, np.ndarray] = {}
    for ell in range(1, order + 1):
        vals = np.empty(times.size)
        profs = np.empty((times.size,) + grid.shape)
        for j in range(times.size):
            known = PotentialSeries(order=1, coefficients={})
            if ell > 1:
                if spatial:
                    lower = {
                        k: CoefficientField.from_grid_values(_fill_masked(per_prof[k][j]))
                        for k in range(1, ell)
                    }
                else:
                    lower = {k: float(per_order[k][j]) for k in range(1, ell)}
                known = PotentialSeries(order=ell - 1, coefficients=lower)
            pa = reconstruct_order(bundle_a, params, coup, known, ell, j, mask_tau)
            if bundle_b is not None:
                pb = reconstruct_order(bundle_b, params, coup, known, ell, j, mask_tau)
                res = resolve_gauge(pa, pb)
                vals[j] = res.scalar
                profs[j] = res.profile
            else:
                profs[j], vals[j] = _single_profile(pa)
        per_order[ell] = vals
        per_prof[ell] = profs
        masks[ell] = ~np.isnan(profs).any(axis=0)

    bound = cauchy_remainder_bound(times, derivative_bound, t_range)
    return TimeDependentResult(
        order=order, nodes=times, per_order_values=per_order,
        per_order_profiles=per_prof, masks=masks, remainder_bound=bound,
    )


# ---------------------------------------------------------------------------
# closed-form single-mode route for the first-order coefficient
# ---------------------------------------------------------------------------


@dataclass
class FourierConstantResult:
    value: float
    mode: tuple[int, ...]
    per_mode: dict[tuple[int, ...], float]
    spread: float


def reconstruct_constant_fourier(
    phi0: ScalarField,
    u1: ScalarField,
    t: float,
    params: SystemParams,
    coup: CouplingSeries,
    amplitude_floor: float = 1e-6,
) -> FourierConstantResult:
    """Closed-form estimate of the constant first-order coefficient.

    With constant coefficients every Fourier mode of the first-order field
    decays independently: u1_hat(t, k) = phi0_hat(k) exp(-(c1|xi|^4 +
    (g1 + c)|xi|^2) t), with c the constant degree-1 coupling of the flux.
    Reading off the decay exponent at any excited mode gives g1; the spread
    across admissible modes is a consistency diagnostic.
    """
    if t <= 0.0:
        raise ValueError("snapshot time must be positive")
    grid = phi0.grid
    c_coupling = coup.c1000().sample(grid, 0.0)
    if float(np.ptp(c_coupling)) > 1e-12 * (1.0 + float(np.max(np.abs(c_coupling)))):
        raise ValueError("the closed-form route requires a constant degree-1 coupling")
    c0 = float(np.mean(c_coupling))

    s_phi = to_spectrum(phi0).coefficients
    s_u = to_spectrum(u1).coefficients
    xi2 = grid.xi_squared()
    amp = np.abs(s_phi)
    amp_u = np.abs(s_u)
    # a mode must be excited initially AND still above the rounding floor at
    # time t, otherwise its decay exponent is unreadable
    admissible = (
        (amp >= amplitude_floor * float(np.max(amp)))
        & (amp_u >= amplitude_floor * float(np.max(amp_u)))
        & (xi2 > 0.0)
    )
    if not admissible.any():
        raise IllPosedReconstructionError(
            "no excited nonzero mode available for the closed-form estimate"
        )
    estimates: dict[tuple[int, ...], float] = {}
    freqs = np.meshgrid(*([grid.axis_frequencies()] * grid.dim), indexing="ij")
    idxs = np.argwhere(admissible)
    best_mode = None
    best_amp = -1.0
    for idx in map(tuple, idxs):
        k = tuple(int(f[idx]) for f in freqs)
        lam = math.log(abs(s_u[idx]) / abs(s_phi[idx])) / t
        x2 = float(xi2[idx])
        g1 = (-lam - params.c1 * x2**2) / x2 - c0
        estimates[k] = g1
        if amp[idx] > best_amp:
            best_amp = amp[idx]
            best_mode = k
    values = np.array(list(estimates.values()))
    value = estimates[best_mode]
    return FourierConstantResult(
        value=value, mode=best_mode, per_mode=estimates,
        spread=float(np.max(values) - np.min(values)),
    )

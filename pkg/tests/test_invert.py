import numpy as np
import pytest

from chac.forward import SolverConfig, StateVec
from chac.grid import PeriodicGrid, ScalarField
from chac.invert import (
    DegenerateGaugeError,
    GaugedProfile,
    IllPosedReconstructionError,
    InconsistentMeasurementError,
    generate_measurements,
    reconstruct_constant_fourier,
    reconstruct_ip1,
    reconstruct_ip2,
    reconstruct_order,
    resolve_gauge,
    resolve_gauge_constant,
)
from chac.potentials import (
    CoefficientField,
    CouplingSeries,
    PotentialSeries,
    SystemParams,
)


def state(grid, u0_expr, u1_expr=None):
    (x,) = grid.coords()
    env = {"x": x, "np": np}
    fields = [ScalarField(grid, eval(u0_expr, env))]
    fields.append(ScalarField(grid, eval(u1_expr, env)) if u1_expr else ScalarField.zeros(grid))
    fields += [ScalarField.zeros(grid), ScalarField.zeros(grid)]
    return StateVec(*fields)


@pytest.fixture
def truth():
    pot = PotentialSeries(order=3, coefficients={1: -1.0, 2: 2.0, 3: 6.0})
    coup = CouplingSeries(
        order=2,
        f0_coefficients={(1, 0, 0, 0): 1.0, (1, 1, 0, 0): 0.8},
        diagonal={1: 0.5},
        fi_coefficients={1: {(1, 1, 0, 0): 1.0}},
    )
    return pot, coup


@pytest.fixture
def experiments(grid):
    a = state(grid, "np.cos(np.pi*x) + 0.4*np.sin(2*np.pi*x)", "0.3*np.sin(np.pi*x)")
    b = state(grid, "np.sin(np.pi*x) - 0.5*np.cos(3*np.pi*x)", "0.2*np.cos(np.pi*x)")
    return a, b


@pytest.fixture
def bundles(grid, params, truth, experiments):
    pot, coup = truth
    phi_a, phi_b = experiments
    cfg = SolverConfig(dt=1e-4, t_final=0.02, scheme="imex2", record_times=(0.01, 0.02))
    ba = generate_measurements(phi_a, params, pot, coup, cfg, order=3)
    bb = generate_measurements(phi_b, params, pot, coup, cfg, order=3)
    return ba, bb


class TestGenerateMeasurements:
    def test_noise_free_is_deterministic(self, grid, params, truth, experiments):
        pot, coup = truth
        cfg = SolverConfig(dt=1e-3, t_final=0.01, record_times=(0.01,))
        b1 = generate_measurements(experiments[0], params, pot, coup, cfg, order=1)
        b2 = generate_measurements(experiments[0], params, pot, coup, cfg, order=1)
        assert np.array_equal(b1.u[(1, 0)][0].values, b2.u[(1, 0)][0].values)

    def test_seeded_noise_reproducible(self, grid, params, truth, experiments):
        pot, coup = truth
        cfg = SolverConfig(dt=1e-3, t_final=0.01, record_times=(0.01,))
        b1 = generate_measurements(
            experiments[0], params, pot, coup, cfg, order=1,
            noise_sigma=1e-6, rng=np.random.default_rng(5),
        )
        b2 = generate_measurements(
            experiments[0], params, pot, coup, cfg, order=1,
            noise_sigma=1e-6, rng=np.random.default_rng(5),
        )
        assert np.array_equal(b1.u[(1, 0)][0].values, b2.u[(1, 0)][0].values)
        clean = generate_measurements(experiments[0], params, pot, coup, cfg, order=1)
        delta = np.max(np.abs(b1.u[(1, 0)][0].values - clean.u[(1, 0)][0].values))
        assert 0.0 < delta < 1e-4

    def test_record_times_required(self, grid, params, truth, experiments):
        pot, coup = truth
        cfg = SolverConfig(dt=1e-3, t_final=0.01)
        with pytest.raises(ValueError):
            generate_measurements(experiments[0], params, pot, coup, cfg, order=1)


class TestIP1:
    def test_constant_coefficients_recovered(self, params, truth, bundles):
        _, coup = truth
        res = reconstruct_ip1(*bundles, params, coup, order=3)
        assert res.coefficients[1] == pytest.approx(-1.0, abs=1e-6)
        assert res.coefficients[2] == pytest.approx(2.0, abs=1e-6)
        assert res.coefficients[3] == pytest.approx(6.0, abs=1e-5)

    def test_single_experiment_constant_route(self, params, truth, bundles):
        _, coup = truth
        res = reconstruct_ip1(bundles[0], None, params, coup, order=3)
        assert res.coefficients[1] == pytest.approx(-1.0, abs=1e-6)
        assert res.coefficients[3] == pytest.approx(6.0, abs=1e-5)

    def test_order_isolation(self, grid, params, truth, experiments, bundles):
        # perturbing g4 of the truth leaves orders 1..3 unchanged
        pot, coup = truth
        pot4 = PotentialSeries(order=4, coefficients={**pot.coefficients, 4: 50.0})
        cfg = SolverConfig(dt=1e-4, t_final=0.02, scheme="imex2", record_times=(0.01, 0.02))
        ba = generate_measurements(experiments[0], params, pot4, coup, cfg, order=3)
        bb = generate_measurements(experiments[1], params, pot4, coup, cfg, order=3)
        res4 = reconstruct_ip1(ba, bb, params, coup, order=3)
        res3 = reconstruct_ip1(*bundles, params, coup, order=3)
        for ell in (1, 2, 3):
            assert res4.coefficients[ell] == pytest.approx(res3.coefficients[ell], abs=1e-9)

    def test_spatial_profiles_recovered(self, grid, params):
        pot = PotentialSeries(order=2, coefficients={
            1: CoefficientField.from_expression("-1 + 0.5*sin(pi*x1)"),
            2: CoefficientField.from_expression("2 + 0.3*cos(2*pi*x1)"),
        })
        coup = CouplingSeries.linear(1.0)
        phi_a = state(grid, "2.0 + np.cos(np.pi*x)")
        phi_b = state(grid, "2.0 + np.sin(np.pi*x) + 0.4*np.cos(2*np.pi*x)")
        cfg = SolverConfig(dt=1e-5, t_final=0.01, scheme="imex2", record_times=(0.01,))
        ba = generate_measurements(phi_a, params, pot, coup, cfg, order=2)
        bb = generate_measurements(phi_b, params, pot, coup, cfg, order=2)
        res = reconstruct_ip1(ba, bb, params, coup, order=2, spatial=True)
        (x,) = grid.coords()
        for ell, exact in ((1, -1 + 0.5 * np.sin(np.pi * x)), (2, 2 + 0.3 * np.cos(2 * np.pi * x))):
            m = res.masks[ell]
            rel = np.linalg.norm(res.profiles[ell][m] - exact[m]) / np.linalg.norm(exact[m])
            assert rel <= 1e-3

    def test_noise_degrades_gracefully(self, grid, params, truth, experiments):
        pot, coup = truth
        cfg = SolverConfig(dt=1e-4, t_final=0.02, scheme="imex2", record_times=(0.02,))
        rng = np.random.default_rng(6)
        ba = generate_measurements(experiments[0], params, pot, coup, cfg, order=1,
                                   noise_sigma=1e-8, rng=rng)
        bb = generate_measurements(experiments[1], params, pot, coup, cfg, order=1,
                                   noise_sigma=1e-8, rng=rng)
        res = reconstruct_ip1(ba, bb, params, coup, order=1)
        err = abs(res.coefficients[1] + 1.0)
        assert np.isfinite(err)
        assert err < 0.1  # degraded but not destroyed


class TestGauge:
    def test_gauge_covariance(self, params, truth, bundles):
        # adding kappa to one potential shifts its constant by -kappa and
        # leaves the fused profile unchanged
        _, coup = truth
        known = PotentialSeries(order=1, coefficients={})
        pa = reconstruct_order(bundles[0], params, coup, known, 1, 0)
        pb = reconstruct_order(bundles[1], params, coup, known, 1, 0)
        base = resolve_gauge(pa, pb)
        kappa = 0.37
        shifted = GaugedProfile(
            grid=pa.grid, order=pa.order, time=pa.time,
            potential=ScalarField(pa.grid, pa.potential.values + kappa),
            weight=pa.weight, mask=pa.mask, discarded_mean=pa.discarded_mean,
        )
        moved = resolve_gauge(shifted, pb)
        assert moved.constants[0] == pytest.approx(base.constants[0] - kappa, abs=1e-10)
        m = ~np.isnan(base.profile)
        assert np.max(np.abs(moved.profile[m] - base.profile[m])) <= 1e-10

    def test_degenerate_gauge_detected(self, grid, params, truth, bundles):
        _, coup = truth
        known = PotentialSeries(order=1, coefficients={})
        pa = reconstruct_order(bundles[0], params, coup, known, 1, 0)
        with pytest.raises(DegenerateGaugeError):
            resolve_gauge(pa, pa)

    def test_mask_monotonicity(self, params, truth, bundles):
        _, coup = truth
        known = PotentialSeries(order=1, coefficients={})
        taus = (1e-4, 1e-3, 1e-2, 1e-1)
        sizes = []
        for tau in taus:
            p = reconstruct_order(bundles[0], params, coup, known, 1, 0,
                                  mask_tau=tau, min_coverage=0.0)
            sizes.append(int(p.mask.sum()))
        assert sizes == sorted(sizes, reverse=True)

    def test_constant_gauge_matches_dual(self, params, truth, bundles):
        _, coup = truth
        known = PotentialSeries(order=1, coefficients={})
        pa = reconstruct_order(bundles[0], params, coup, known, 1, 0)
        pb = reconstruct_order(bundles[1], params, coup, known, 1, 0)
        dual = resolve_gauge(pa, pb).scalar
        single = resolve_gauge_constant(pa)
        assert single == pytest.approx(dual, abs=1e-8)


class TestFailureModes:
    def test_inconsistent_measurements(self, grid, params, truth, bundles):
        # corrupt du/dt with a non-divergence (constant) component
        _, coup = truth
        ba = bundles[0]
        bad = ScalarField(grid, ba.dudt0[(1, 0)].values + 1.0)
        ba.dudt0[(1, 0)] = bad
        known = PotentialSeries(order=1, coefficients={})
        with pytest.raises(InconsistentMeasurementError):
            reconstruct_order(ba, params, coup, known, 1, 0)

    def test_low_coverage_rejected(self, grid, params):
        # u1 supported on one mode: weight (u1)^2 has wide dead zones for
        # high-order masks at tight tau
        pot = PotentialSeries(order=1, coefficients={1: -1.0})
        coup = CouplingSeries.linear()
        phi = state(grid, "np.cos(np.pi*x)")
        cfg = SolverConfig(dt=1e-3, t_final=0.01, record_times=(0.01,))
        b = generate_measurements(phi, params, pot, coup, cfg, order=1)
        known = PotentialSeries(order=1, coefficients={})
        with pytest.raises(IllPosedReconstructionError):
            reconstruct_order(b, params, coup, known, 1, 0, mask_tau=0.9, min_coverage=0.5)


class TestFourierRoute:
    def test_exact_exponential_data(self, grid, params):
        # synthesize u1 exactly from the constant-coefficient mode solution
        (x,) = grid.coords()
        g1, c0, t = -1.0, 1.0, 0.02
        coup = CouplingSeries.linear(c0)
        phi0 = ScalarField(grid, np.cos(np.pi * x) + 0.25 * np.sin(3 * np.pi * x))
        spec = np.fft.fftn(phi0.values)
        xi2 = grid.xi_squared()
        decay = np.exp(-(params.c1 * xi2**2 + (g1 + c0) * xi2) * t)
        u1 = ScalarField(grid, np.fft.ifftn(spec * decay).real)
        res = reconstruct_constant_fourier(phi0, u1, t, params, coup)
        assert abs(res.value - g1) <= 1e-12
        assert res.spread <= 1e-10

    def test_pipeline_data(self, grid, params):
        pot = PotentialSeries(order=1, coefficients={1: -1.0})
        coup = CouplingSeries.linear(1.0)
        phi = state(grid, "np.cos(np.pi*x) + 0.25*np.sin(3*np.pi*x)")
        cfg = SolverConfig(dt=1e-5, t_final=0.02, scheme="imex2", record_times=(0.02,))
        b = generate_measurements(phi, params, pot, coup, cfg, order=1)
        res = reconstruct_constant_fourier(phi.u0, b.u[(1, 0)][0], 0.02, params, coup)
        assert abs(res.value + 1.0) <= 1e-3

    def test_agrees_with_pde_route(self, grid, params):
        pot = PotentialSeries(order=1, coefficients={1: -1.0})
        coup = CouplingSeries.linear(1.0)
        phi_a = state(grid, "np.cos(np.pi*x) + 0.25*np.sin(3*np.pi*x)")
        phi_b = state(grid, "np.sin(np.pi*x) - 0.5*np.cos(2*np.pi*x)")
        cfg = SolverConfig(dt=1e-5, t_final=0.02, scheme="imex2", record_times=(0.02,))
        ba = generate_measurements(phi_a, params, pot, coup, cfg, order=1)
        bb = generate_measurements(phi_b, params, pot, coup, cfg, order=1)
        pde = reconstruct_ip1(ba, bb, params, coup, order=1).coefficients[1]
        fourier = reconstruct_constant_fourier(phi_a.u0, ba.u[(1, 0)][0], 0.02, params, coup).value
        assert abs(pde - fourier) <= 1e-3

    def test_rejects_nonpositive_time(self, grid, params):
        phi0 = ScalarField(grid, np.cos(np.pi * grid.coords()[0]))
        with pytest.raises(ValueError):
            reconstruct_constant_fourier(phi0, phi0, 0.0, params, CouplingSeries.linear())


class TestIP2:
    def test_polynomial_in_time_exact(self, grid, params):
        pot = PotentialSeries(order=1, coefficients={1: CoefficientField.from_expression("-1 + 2*t")})
        coup = CouplingSeries.linear(1.0)
        phi_a = state(grid, "2.0 + np.cos(np.pi*x)")
        phi_b = state(grid, "2.0 + np.sin(np.pi*x) + 0.4*np.cos(2*np.pi*x)")
        nodes = (0.005, 0.01, 0.015, 0.02)
        cfg = SolverConfig(dt=1e-4, t_final=0.02, scheme="imex2", record_times=nodes)
        ba = generate_measurements(phi_a, params, pot, coup, cfg, order=1)
        bb = generate_measurements(phi_b, params, pot, coup, cfg, order=1)
        res = reconstruct_ip2(ba, bb, params, coup, order=1, derivative_bound=0.0)
        assert res.remainder_bound == 0.0  # linear g1 has vanishing 4th derivative
        for t in (0.0071, 0.0123, 0.0187):
            assert res.evaluate(1, t) == pytest.approx(-1 + 2 * t, abs=1e-8)

    def test_space_time_profile_within_bound(self, grid):
        params = SystemParams(c1=0.05, c2=1.0)
        pot = PotentialSeries(order=1, coefficients={
            1: CoefficientField.from_expression("(1 + 0.5*sin(pi*x1))*cos(t)"),
        })
        coup = CouplingSeries.linear(1.0)
        phi_a = state(grid, "2.0 + np.cos(np.pi*x)")
        phi_b = state(grid, "2.0 + np.sin(np.pi*x) + 0.4*np.cos(2*np.pi*x)")
        nodes = (0.05, 0.12, 0.18, 0.25)
        cfg = SolverConfig(dt=1e-4, t_final=0.25, scheme="imex2", record_times=nodes)
        ba = generate_measurements(phi_a, params, pot, coup, cfg, order=1)
        bb = generate_measurements(phi_b, params, pot, coup, cfg, order=1)
        res = reconstruct_ip2(ba, bb, params, coup, order=1,
                              derivative_bound=1.5, spatial=True)
        (x,) = grid.coords()
        a = 1 + 0.5 * np.sin(np.pi * x)
        worst = 0.0
        for t in np.linspace(0.05, 0.25, 11):
            prof = res.evaluate_profile(1, t)
            m = ~np.isnan(prof)
            worst = max(worst, np.max(np.abs(prof[m] - a[m] * np.cos(t))))
        assert worst <= res.remainder_bound

    def test_needs_two_snapshots(self, grid, params, truth, experiments):
        pot, coup = truth
        cfg = SolverConfig(dt=1e-3, t_final=0.01, record_times=(0.01,))
        b = generate_measurements(experiments[0], params, pot, coup, cfg, order=1)
        with pytest.raises(ValueError):
            reconstruct_ip2(b, None, params, coup, order=1, derivative_bound=1.0)

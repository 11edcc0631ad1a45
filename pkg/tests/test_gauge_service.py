import numpy as np
import pytest

from models.errors import ConfigurationError
from models.fields import Coupling, DensitySnapshot, GridSpec, PhysicalConstants, SystemKind
from models.gauge_fields import GaugeConfiguration, GaugeFunction, TabulatedFunction
from services.dynamics_service import DynamicsService, HamiltonianOperator
from services.gauge_service import GaugeService, gauge_exponent
from utils.initial_states import gaussian

LAM = "0.5*sin(x/4)"
COUPLING = Coupling.single(0.7, 0.4)


@pytest.fixture(scope="module")
def service():
    return GaugeService()


@pytest.fixture(scope="module")
def runs(service):
    """A lossy run on [-4π, 4π) and its twin in the gauge λ = 0.5 sin(x/4)."""
    grid = GridSpec(extent=((-4 * np.pi, 4 * np.pi),), points=(128,))
    H = HamiltonianOperator(
        system=SystemKind.SCHRODINGER_1D,
        grid=grid,
        gauge=GaugeConfiguration.from_expressions(phi="0.2*cos(x/4)", A=("0.1",)),
        coupling=COUPLING,
    )
    state = gaussian(grid, sigma=1.0, k0=0.5)
    timeline = DynamicsService().propagate(state, H, dt=2e-3, n_steps=250, snapshot_stride=25, stepper="rk4")
    twin = service.twin_run(timeline, LAM, stepper="rk4")
    return timeline, twin


def test_transform_multiplies_by_complex_phase(service, gaussian_state, wide_grid):
    gauge = GaugeConfiguration.from_expressions(phi="0.2", A=("0.1",))
    state, new_gauge = service.apply_gauge_transform(gaussian_state, gauge, LAM, COUPLING)
    x = wide_grid.axes[0]
    lam = 0.5 * np.sin(x / 4)
    np.testing.assert_allclose(state.values, gaussian_state.values * np.exp(1j * complex(0.7, 0.4) * lam), atol=1e-14)
    np.testing.assert_allclose(new_gauge.A_at((x,), 0.0)[0], 0.1 + 0.125 * np.cos(x / 4), atol=1e-14)
    np.testing.assert_allclose(new_gauge.phi_at((x,), 0.0), 0.2, atol=1e-14)


def test_time_dependent_gauge_shifts_scalar_potential(service, gaussian_state, wide_grid):
    gauge = GaugeConfiguration.from_expressions()
    _, new_gauge = service.apply_gauge_transform(gaussian_state, gauge, "0.3*t", COUPLING)
    np.testing.assert_allclose(new_gauge.phi_at((wide_grid.axes[0],), 0.0), -0.3, atol=1e-14)


def test_non_periodic_gauge_function_is_rejected(service, gaussian_state):
    with pytest.raises(ConfigurationError):
        service.apply_gauge_transform(gaussian_state, GaugeConfiguration.from_expressions(), "x", COUPLING)


def test_zero_gauge_function_is_the_identity(service, gaussian_state):
    gauge = GaugeConfiguration.from_expressions()
    state, new_gauge = service.apply_gauge_transform(gaussian_state, gauge, "0", COUPLING)
    assert state is gaussian_state
    assert new_gauge is gauge


def test_two_particle_exponent_sums_particles(square_grid):
    coupling = Coupling((1.0, 1.0), (0.5, 0.25))
    exponent = gauge_exponent(GaugeFunction("sin(x)"), square_grid, coupling, 0.0, PhysicalConstants(),
                              SystemKind.TWO_PARTICLE_1D)
    x1, x2 = square_grid.mesh()
    np.testing.assert_allclose(exponent, complex(1.0, 0.5) * np.sin(x1) + complex(1.0, 0.25) * np.sin(x2), atol=1e-14)


def test_weyl_rescale_by_weight(service, wide_grid):
    x = wide_grid.axes[0]
    rho = DensitySnapshot(wide_grid, np.ones(128), 0.0)
    scaled = service.weyl_rescale(rho, LAM, 2, COUPLING)
    np.testing.assert_allclose(scaled.rho, np.exp(-2 * 0.4 * 0.5 * np.sin(x / 4)), atol=1e-14)
    assert service.weyl_rescale(rho, LAM, 0, COUPLING) is rho
    raw = service.weyl_rescale(np.ones(128), LAM, -1, COUPLING, grid=wide_grid)
    np.testing.assert_allclose(raw, np.exp(0.4 * 0.5 * np.sin(x / 4)), atol=1e-14)
    with pytest.raises(ConfigurationError):
        service.weyl_rescale(np.ones(128), LAM, 1, COUPLING)


def test_twin_initial_state(runs):
    timeline, twin = runs
    x = timeline.grid.axes[0]
    factor = np.exp(1j * complex(0.7, 0.4) * 0.5 * np.sin(x / 4))
    np.testing.assert_allclose(twin.snapshot(0).values, timeline.snapshot(0).values * factor, atol=1e-14)
    assert twin.n_snapshots == timeline.n_snapshots


def test_velocity_is_gauge_invariant(service, runs):
    timeline, twin = runs
    for t in (0.0, 0.25, 0.5):
        assert service.check_velocity_invariance(timeline, twin, t).max_deviation < 1e-5


def test_conserved_density_is_gauge_invariant(service, runs):
    timeline, twin = runs
    report = service.check_density_invariance(timeline, twin, LAM, 0.5)
    assert report.max_deviation < 1e-4
    assert not report.degraded


def test_born_density_is_not_gauge_invariant(runs):
    timeline, twin = runs
    assert np.max(np.abs(timeline.snapshot(10).density - twin.snapshot(10).density)) > 1e-3


def test_trajectories_are_gauge_invariant(service, runs):
    timeline, twin = runs
    report = service.check_trajectory_invariance(timeline, twin, np.array([-1.0, 0.0, 1.0]), 0.5)
    assert report.max_deviation < 1e-5


def test_twin_scale_starts_at_minus_imaginary_lambda(service, runs):
    _, twin = runs
    ln_one = service.initial_log_scale(twin, GaugeFunction(LAM))(np.array([[2.0], [-1.0]]))
    np.testing.assert_allclose(ln_one, -0.4 * 0.5 * np.sin(np.array([2.0, -1.0]) / 4), atol=1e-15)


def test_quantum_potential_is_gauge_invariant(service, gaussian_state):
    gauge = GaugeConfiguration.from_expressions(A=("0.3*sin(x/4)",))
    report = service.check_quantum_potential_invariance(gaussian_state, gauge, LAM, COUPLING)
    assert report.quantity == "quantum_potential"
    assert report.max_deviation < 1e-6


def test_inverse_transform_restores_state_and_potentials(service, gaussian_state):
    gauge = GaugeConfiguration.from_expressions(phi="0.2*cos(x/4)", A=("0.1",))
    report = service.check_inverse_transform(gaussian_state, gauge, "0.5*sin(x/4) + 0.3*t", COUPLING)
    assert report.quantity == "inverse_transform"
    assert report.max_deviation < 1e-12


def test_transforms_compose_additively(service, gaussian_state):
    gauge = GaugeConfiguration.from_expressions(phi="0.2*cos(x/4)", A=("0.1",))
    report = service.check_composition(gaussian_state, gauge, LAM, "0.2*cos(x/2) - 0.1*t", COUPLING)
    assert report.quantity == "composition"
    assert report.max_deviation < 1e-12


def test_negated_and_summed_gauge_functions(wide_grid):
    lam = GaugeFunction(LAM)
    mu = GaugeFunction("0.3*t")
    x = wide_grid.axes[0]
    np.testing.assert_allclose(lam.negated().value((x,), 0.0), -0.5 * np.sin(x / 4), atol=1e-15)
    total = lam.plus(mu)
    np.testing.assert_allclose(total.value((x,), 2.0), 0.5 * np.sin(x / 4) + 0.6, atol=1e-15)
    np.testing.assert_allclose(total.time_derivative((x,), 0.0), 0.3, atol=1e-15)


def test_tabulated_potentials_transform(service, gaussian_state, wide_grid):
    x = wide_grid.axes[0]
    gauge = GaugeConfiguration.from_expressions(
        phi=TabulatedFunction(wide_grid, 0.2 * np.cos(x / 4)),
        A=(TabulatedFunction(wide_grid, np.full(x.shape, 0.1)),),
    )
    state, new_gauge = service.apply_gauge_transform(gaussian_state, gauge, LAM, COUPLING)
    np.testing.assert_allclose(new_gauge.A_at((x,), 0.0)[0], 0.1 + 0.125 * np.cos(x / 4), atol=1e-10)
    np.testing.assert_allclose(new_gauge.phi_at((x,), 0.0), 0.2 * np.cos(x / 4), atol=1e-10)
    assert "table" in new_gauge.describe()["A"][0]
    report = service.check_inverse_transform(gaussian_state, gauge, LAM, COUPLING)
    assert report.max_deviation < 1e-10

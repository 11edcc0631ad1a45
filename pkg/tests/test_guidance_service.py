import numpy as np
import pytest

from models.errors import ConfigurationError, DegenerateFieldError
from models.fields import ComplexScalarField, Coupling, GridSpec, SpinorField, SystemKind
from models.gauge_fields import GaugeConfiguration
from services.dynamics_service import DynamicsService, HamiltonianOperator
from services.guidance_service import GuidanceService, cap_velocity
from utils.grid_utils import spectral_derivative
from utils.initial_states import dirac_plane_wave, gaussian, mode_superposition, plane_wave, spinor_gaussian


@pytest.fixture
def guidance():
    return GuidanceService()


@pytest.fixture
def drifting_timeline(ring_grid):
    """Plane wave k = 1 under φ = 0.2, A = 0.3 with a purely imaginary charge."""
    H = HamiltonianOperator(
        system=SystemKind.SCHRODINGER_1D,
        grid=ring_grid,
        gauge=GaugeConfiguration.from_expressions(phi="0.2", A=("0.3",)),
        coupling=Coupling.single(0.0, 0.5),
    )
    return DynamicsService().propagate(plane_wave(ring_grid, mode=1), H, dt=1e-2, n_steps=100, snapshot_stride=10)


def test_plane_wave_velocity_uses_real_charge_only(guidance, ring_grid):
    gauge = GaugeConfiguration.from_expressions(A=("0.3",))
    field = guidance.velocity_schrodinger(plane_wave(ring_grid, mode=2), gauge, Coupling.single(1.0, 0.5), t=0.0)
    np.testing.assert_allclose(field.v[0], 1.7, atol=1e-9)
    assert not field.node_mask.any()


def test_dirac_velocity_is_group_velocity(guidance, ring_grid, constants):
    field = guidance.velocity_dirac(dirac_plane_wave(ring_grid, mode=1, constants=constants), t=0.0)
    np.testing.assert_allclose(field.v[0], 1.0 / np.sqrt(2.0), atol=1e-10)
    assert field.max_speed <= constants.c


def test_two_particle_velocity_per_axis(guidance, square_grid):
    state = mode_superposition(square_grid, [[1, 2]], seed=0)
    field = guidance.velocity_two_particle(state, GaugeConfiguration.from_expressions(), Coupling.single(), t=0.0)
    np.testing.assert_allclose(field.v[0], 1.0, atol=1e-9)
    np.testing.assert_allclose(field.v[1], 2.0, atol=1e-9)


def test_pauli_spin_term_for_real_spin_up_state(guidance):
    grid = GridSpec.uniform(-np.pi, np.pi, 32, dim=2)
    state = spinor_gaussian(grid, sigma=0.5, spin=(1.0, 0.0))
    field = guidance.velocity_pauli(state, GaugeConfiguration.from_expressions(A=("0", "0")), Coupling.single(), t=0.0)
    rho = state.density
    keep = rho > 1e-4 * rho.max()
    expected_x = spectral_derivative(rho, grid, 1) / (2.0 * rho)
    expected_y = -spectral_derivative(rho, grid, 0) / (2.0 * rho)
    np.testing.assert_allclose(field.v[0][keep], expected_x[keep], rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(field.v[1][keep], expected_y[keep], rtol=1e-6, atol=1e-8)


def test_spin_density_of_spin_up(guidance, square_grid):
    state = spinor_gaussian(square_grid, center=(np.pi, np.pi), spin=(1.0, 0.0))
    s = guidance.spin_density(state)
    np.testing.assert_allclose(s[2], 0.5 * state.density)
    np.testing.assert_allclose(s[:2], 0.0)


def test_zero_state_has_no_velocity(guidance, ring_grid):
    with pytest.raises(DegenerateFieldError):
        guidance.velocity_schrodinger(
            ComplexScalarField(ring_grid, np.zeros(64)), GaugeConfiguration.from_expressions(), Coupling.single(), 0.0
        )


def test_cap_velocity_clips_masked_spikes():
    v = np.array([[1.0, 2.0, 100.0]])
    mask = np.array([False, False, True])
    capped, cap = cap_velocity(v, mask, factor=10.0)
    assert cap == 20.0
    np.testing.assert_allclose(capped[0], [1.0, 2.0, 20.0])
    limited, cap = cap_velocity(v, mask, factor=10.0, limit=1.5)
    assert cap == 1.5
    np.testing.assert_allclose(limited[0], [1.0, 1.5, 1.5])


def test_plane_wave_trajectories_move_uniformly(guidance, drifting_timeline):
    bundle = guidance.integrate_trajectories(drifting_timeline, np.array([0.5, 2.0]), 0.0, 1.0)
    assert bundle.n_seeds == 2
    np.testing.assert_allclose(bundle.positions[-1, :, 0], [1.5, 3.0], atol=1e-8)
    assert np.all(np.diff(bundle.times) > 0)
    assert not bundle.unreliable.any()


def test_log_scale_follows_the_line_integral(guidance, drifting_timeline):
    # (e_I/ħc)(φ·c·t − A·Δx) = 0.5·(0.2 − 0.3)
    trajectory = guidance.integrate_trajectory(drifting_timeline, 0.5, 0.0, 1.0)
    assert trajectory.log_scale[0] == 0.0
    assert trajectory.log_scale[-1] == pytest.approx(-0.05, abs=1e-10)
    np.testing.assert_allclose(trajectory.one_squared[-1], np.exp(-0.1), rtol=1e-9)


def test_backward_trace_lands_on_its_source(guidance, drifting_timeline):
    trace = guidance.backward_trace(drifting_timeline, 2.0, 1.0)
    assert trace.times[0] == pytest.approx(0.0)
    assert trace.times[-1] == pytest.approx(1.0)
    assert np.all(np.diff(trace.times) > 0)
    assert trace.start[0] == pytest.approx(1.0, abs=1e-8)
    assert trace.end[0] == pytest.approx(2.0, abs=1e-12)
    assert trace.log_scale[0] == pytest.approx(0.0, abs=1e-14)
    assert trace.log_scale[-1] == pytest.approx(-0.05, abs=1e-10)


def test_backward_trace_at_start_time_is_a_single_sample(guidance, drifting_timeline):
    trace = guidance.backward_trace(drifting_timeline, 1.0, 0.0)
    assert len(trace.times) == 1
    assert trace.log_scale[0] == 0.0


def test_off_lattice_end_time(guidance, drifting_timeline):
    bundle = guidance.integrate_trajectories(drifting_timeline, np.array([0.5]), 0.0, 0.35)
    assert bundle.times[-1] == pytest.approx(0.35)
    assert bundle.positions[-1, 0, 0] == pytest.approx(0.85, abs=1e-8)


def test_seed_dimension_is_checked(guidance, drifting_timeline):
    with pytest.raises(ConfigurationError):
        guidance.integrate_trajectories(drifting_timeline, np.zeros((3, 2)), 0.0, 1.0)


def test_single_trajectory_runs_forward_only(guidance, drifting_timeline):
    with pytest.raises(ConfigurationError):
        guidance.integrate_trajectory(drifting_timeline, 0.5, 1.0, 0.0)


def test_times_outside_the_run_are_rejected(guidance, drifting_timeline):
    with pytest.raises(ConfigurationError):
        guidance.integrate_trajectories(drifting_timeline, np.array([0.5]), 0.0, 2.0)


def test_velocity_is_exact_just_above_the_node_threshold(guidance, wide_grid):
    state = gaussian(wide_grid, sigma=1.0, k0=0.75)
    field = guidance.velocity_schrodinger(state, GaugeConfiguration.from_expressions(), Coupling.single(), t=0.0)
    rho = state.density
    near_edge = ~field.node_mask & (rho < 1e-9 * rho.max())
    assert near_edge.any()
    np.testing.assert_allclose(field.v[0][~field.node_mask], 0.75, atol=1e-6)


def _central_difference(values, grid, axis):
    """Sixth-order periodic central difference."""
    h = grid.spacing[axis]

    def shift(k):
        return np.roll(values, -k, axis=axis)

    return (45.0 * (shift(1) - shift(-1)) - 9.0 * (shift(2) - shift(-2)) + (shift(3) - shift(-3))) / (60.0 * h)


def test_pauli_spin_term_matches_finite_difference_curl(guidance):
    grid = GridSpec.uniform(0.0, 2 * np.pi, 128, dim=2)
    x, y = grid.mesh()
    envelope = 1.0 + 0.5 * np.cos(x) * np.cos(y)
    angle = 0.3 * np.sin(y) + 0.2 * np.cos(x)
    state = SpinorField(grid, np.stack([envelope * np.cos(angle), envelope * np.sin(angle)]).astype(complex))
    field = guidance.velocity_pauli(state, GaugeConfiguration.from_expressions(A=("0", "0")), Coupling.single(), t=0.0)
    # real components carry no phase current, so ρv is the in-plane curl of s_z
    s_z = 0.5 * (np.abs(state.values[0]) ** 2 - np.abs(state.values[1]) ** 2)
    rho = state.density
    np.testing.assert_allclose(field.v[0] * rho, _central_difference(s_z, grid, 1), atol=1e-6)
    np.testing.assert_allclose(field.v[1] * rho, -_central_difference(s_z, grid, 0), atol=1e-6)


def test_weyl_spin_term_for_uniform_spin(guidance, square_grid):
    x, y = square_grid.mesh()
    up = np.full(square_grid.shape, 1.0 / (2 * np.pi), dtype=complex)
    state = SpinorField(square_grid, np.stack([up, np.zeros_like(up)]))
    gauge = GaugeConfiguration.from_expressions(A=("0.3*cos(y)", "0.2*sin(x)"))
    current = guidance.spin_current(state, gauge, Coupling.single(0.0, 0.4), t=0.0)
    s_z = 0.5 / (2 * np.pi) ** 2
    # (2e_I/ħc) A⃗ × s⃗ in the plane
    np.testing.assert_allclose(current[0], 0.8 * 0.2 * np.sin(x) * s_z, atol=1e-10)
    np.testing.assert_allclose(current[1], -0.8 * 0.3 * np.cos(y) * s_z, atol=1e-10)


def test_free_gaussian_trajectories_never_cross(guidance, gaussian_state, wide_grid):
    H = HamiltonianOperator(
        system=SystemKind.SCHRODINGER_1D,
        grid=wide_grid,
        gauge=GaugeConfiguration.from_expressions(),
        coupling=Coupling.single(),
    )
    timeline = DynamicsService().propagate(gaussian_state, H, dt=1e-2, n_steps=500, snapshot_stride=10)
    seeds = np.sort(np.random.default_rng(7).uniform(-2.0, 2.0, 50))
    bundle = guidance.integrate_trajectories(timeline, seeds, 0.0, 5.0)
    assert not bundle.unreliable.any()
    order = np.argsort(bundle.positions[:, :, 0], axis=1, kind="stable")
    np.testing.assert_array_equal(order, np.tile(np.arange(50), (len(bundle.times), 1)))

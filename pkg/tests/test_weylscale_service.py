import numpy as np
import pytest

from models.errors import ConfigurationError, UnsupportedConfigurationError
from models.fields import ComplexScalarField, Coupling, GridSpec, SystemKind
from models.gauge_fields import GaugeConfiguration
from services.dynamics_service import DynamicsService, HamiltonianOperator
from services.guidance_service import GuidanceService
from services.weylscale_service import WeylScaleService, accumulate_log_scale_step
from utils.grid_utils import spectral_derivative, spectral_laplacian
from utils.initial_states import cosine, mode_superposition, normalize


def _timeline(state, phi="0", A="0", e=0.0, e_imag=0.0, dt=1e-3, n_steps=50, stride=5, stepper="rk4"):
    H = HamiltonianOperator(
        system=SystemKind.SCHRODINGER_1D,
        grid=state.grid,
        gauge=GaugeConfiguration.from_expressions(phi=phi, A=(A,)),
        coupling=Coupling.single(e, e_imag),
    )
    return DynamicsService().propagate(state, H, dt=dt, n_steps=n_steps, snapshot_stride=stride, stepper=stepper)


@pytest.fixture
def service():
    return WeylScaleService()


@pytest.fixture
def lossy_timeline(nodeless_state):
    """Nodeless state under φ = 0.3cos x with charge 0.4 + 0.5i, up to t = 0.05."""
    return _timeline(nodeless_state, phi="0.3*cos(x)", e=0.4, e_imag=0.5)


def test_single_step_midpoint_rule():
    gauge = GaugeConfiguration.from_expressions(phi="0.2", A=("0.3",))
    ln_one = accumulate_log_scale_step(
        np.zeros(1), gauge, Coupling.single(0.0, 0.5), np.array([[0.0]]), np.array([[0.1]]), 0.0, 0.1
    )
    assert ln_one[0] == pytest.approx(0.5 * (0.2 * 0.1 - 0.3 * 0.1), abs=1e-15)


def test_midpoint_evaluation_of_varying_potential():
    gauge = GaugeConfiguration.from_expressions(phi="x")
    ln_one = accumulate_log_scale_step(
        np.array([1.0]), gauge, Coupling.single(0.0, 2.0), np.array([[1.0]]), np.array([[3.0]]), 0.0, 0.5
    )
    # φ at the midpoint x = 2, times c·dt = 0.5, times e_I = 2
    assert ln_one[0] == pytest.approx(1.0 + 2.0, abs=1e-14)


def test_hermitian_coupling_leaves_scale_unchanged():
    gauge = GaugeConfiguration.from_expressions(phi="5", A=("1",))
    ln_one = np.array([0.3, -0.2])
    result = accumulate_log_scale_step(ln_one, gauge, Coupling.single(1.0, 0.0), np.zeros((2, 1)), np.ones((2, 1)), 0.0, 1.0)
    np.testing.assert_array_equal(result, ln_one)


def test_two_particles_sum_their_increments():
    gauge = GaugeConfiguration.from_expressions(phi="1")
    ln_one = accumulate_log_scale_step(
        np.zeros(1), gauge, Coupling((0.0, 0.0), (0.5, 0.25)), np.zeros((1, 2)), np.ones((1, 2)), 0.0, 1.0,
        system=SystemKind.TWO_PARTICLE_1D,
    )
    assert ln_one[0] == pytest.approx(0.75)


def test_path_log_scale_is_additive(service, lossy_timeline):
    guidance = GuidanceService()
    gauge = GaugeConfiguration.from_expressions(phi="0.3*cos(x)", A=("0.1*sin(x)",))
    coupling = Coupling.single(0.0, 0.7)
    trajectory = guidance.integrate_trajectory(lossy_timeline, 1.0, 0.0, lossy_timeline.t_final)
    first, second, whole = service.split_path_log_scale(trajectory, 4, gauge, coupling, lossy_timeline.grid)
    assert first + second == pytest.approx(whole, abs=1e-14)
    assert whole != 0.0


def test_hermitian_conserved_density_is_born(service, gaussian_state):
    timeline = _timeline(gaussian_state, phi="0.1*cos(x/4)", stepper="crank_nicolson")
    conserved = service.conserved_density_grid(timeline, 0.05)
    born = service.born_density(timeline, 0.05)
    np.testing.assert_array_equal(conserved.rho, born.rho)
    assert service.total_norm(conserved) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("method", ["backward", "comoving"])
def test_constant_imaginary_potential_cancels(service, gaussian_state, method):
    # φ = 0.3 with e_I = 1 multiplies |ψ|² by e^{0.6t} and 𝟙² by the same factor
    lossy = _timeline(gaussian_state, phi="0.3", e_imag=1.0, n_steps=500, stride=50)
    plain = _timeline(gaussian_state, phi="0.3", n_steps=500, stride=50)
    assert lossy.born_norm[-1] == pytest.approx(np.exp(0.3), rel=1e-6)
    conserved = service.conserved_density_grid(lossy, 0.5, method=method)
    np.testing.assert_allclose(conserved.rho, plain.snapshot(10).density, atol=1e-6)
    assert not conserved.degraded
    assert conserved.method_tag == method


def test_conserved_norm_stays_constant(service, lossy_timeline):
    assert lossy_timeline.born_norm[-1] > 1.003
    for t in (0.025, 0.05):
        conserved = service.conserved_density_grid(lossy_timeline, t)
        assert conserved.norm() == pytest.approx(1.0, abs=1e-4)


def test_unknown_density_method(service, lossy_timeline):
    with pytest.raises(ConfigurationError):
        service.conserved_density_grid(lossy_timeline, 0.05, method="sideways")


def test_comoving_reconstruction_is_1d_only(service, square_grid):
    H = HamiltonianOperator(
        system=SystemKind.TWO_PARTICLE_1D,
        grid=square_grid,
        gauge=GaugeConfiguration.from_expressions(phi="0.1"),
        coupling=Coupling.single(0.0, 0.5),
    )
    state = mode_superposition(square_grid, [[1, 0], [0, 1]], seed=0)
    timeline = DynamicsService().propagate(state, H, dt=1e-3, n_steps=2, stepper="rk4")
    with pytest.raises(UnsupportedConfigurationError):
        service.conserved_density_grid(timeline, 0.001, method="comoving")


def test_continuity_holds_for_conserved_density(service, lossy_timeline):
    _, norm, degraded = service.continuity_residual(lossy_timeline, 0.025)
    assert norm < 1e-3
    assert not degraded


def test_born_density_obeys_sourced_continuity(service, lossy_timeline):
    _, norm = service.born_source_residual(lossy_timeline, 0.025)
    assert norm < 1e-3


def test_residuals_need_interior_times(service, lossy_timeline):
    with pytest.raises(ConfigurationError):
        service.born_source_residual(lossy_timeline, 0.0)
    with pytest.raises(ConfigurationError):
        service.continuity_residual(lossy_timeline, 0.012)


def test_hamilton_jacobi_residual_is_small(service, lossy_timeline):
    assert service.hamilton_jacobi_residual(lossy_timeline, 0.025, density_cutoff=1e-4) < 1e-2
    assert service.hamilton_jacobi_residual(lossy_timeline, 0.005, density_cutoff=1e-4) < 1e-2


def test_quantum_potential_terms(service, nodeless_state):
    grid = nodeless_state.grid
    x = grid.axes[0]
    gauge = GaugeConfiguration.from_expressions(A=("0.3*sin(x)",))
    terms = service.quantum_potential_terms(nodeless_state, gauge, Coupling.single(0.0, 0.5))
    total = terms["laplacian"] + terms["a_squared"] + terms["div_A"] + terms["cross"]
    np.testing.assert_allclose(terms["total"], total, atol=1e-12)

    R = np.abs(nodeless_state.values)
    np.testing.assert_allclose(terms["laplacian"], spectral_laplacian(R, grid) / R, atol=1e-8)
    np.testing.assert_allclose(terms["a_squared"], (0.15 * np.sin(x)) ** 2, atol=1e-12)
    np.testing.assert_allclose(terms["div_A"], 0.15 * np.cos(x), atol=1e-12)
    np.testing.assert_allclose(terms["cross"], 0.3 * np.sin(x) * spectral_derivative(R, grid, 0) / R, atol=1e-8)


def test_quantum_potential_scalar_states_only(service, ring_grid, constants):
    from utils.initial_states import dirac_plane_wave

    with pytest.raises(ConfigurationError):
        service.quantum_potential_terms(
            dirac_plane_wave(ring_grid, constants=constants), GaugeConfiguration.from_expressions(), Coupling.single()
        )


@pytest.fixture
def refined_timelines():
    """Crank-Nicolson fd2 runs at 32/64/128 points with dt 0.02/0.01/0.005."""
    timelines = []
    for level in range(3):
        grid = GridSpec(extent=((0.0, 2 * np.pi),), points=(32 * 2**level,))
        state = cosine(grid, amplitude=0.5, mode=1, k_mode=1)
        H = HamiltonianOperator(
            system=SystemKind.SCHRODINGER_1D,
            grid=grid,
            gauge=GaugeConfiguration.from_expressions(phi="0.3*cos(x)"),
            coupling=Coupling.single(0.0, 0.5),
        )
        timelines.append(
            DynamicsService().propagate(
                state, H, dt=0.02 / 2**level, n_steps=10 * 2**level, snapshot_stride=1,
                stepper="crank_nicolson", discretization="fd2",
            )
        )
    return timelines


def test_hamilton_jacobi_residual_converges_at_second_order(service, refined_timelines):
    frame = service.convergence_study(refined_timelines, [0.1], ["hamilton_jacobi"])
    residuals = frame["residual"].to_numpy()
    assert list(frame["points"]) == [32, 64, 128]
    assert np.all(np.diff(residuals) < 0)
    assert np.isnan(frame["order"].iloc[0])
    assert frame["order"].iloc[1:].min() > 1.8
    assert service.observed_orders(frame)["hamilton_jacobi"] > 1.8


def test_continuity_residual_shrinks_under_refinement(service, refined_timelines):
    frame = service.convergence_study(refined_timelines, [0.1], ["continuity"])
    residuals = frame["residual"].to_numpy()
    assert residuals[-1] < residuals[0]
    assert not frame["degraded"].any()


def test_convergence_study_needs_two_levels(service, refined_timelines):
    with pytest.raises(ConfigurationError):
        service.convergence_study(refined_timelines[:1], [0.1])


def test_two_particle_scale_is_the_sum_of_particle_line_integrals(square_grid):
    x1, x2 = square_grid.mesh()
    psi = (1.0 + 0.5 * np.cos(x1)) * np.exp(1j * x1) * (1.0 + 0.4 * np.cos(x2)) * np.exp(-1j * x2)
    state = ComplexScalarField(square_grid, normalize(psi, square_grid))
    H = HamiltonianOperator(
        system=SystemKind.TWO_PARTICLE_1D,
        grid=square_grid,
        gauge=GaugeConfiguration.from_expressions(phi="0.3*cos(x)", A=("0.2*sin(x)",)),
        coupling=Coupling((0.0, 0.0), (0.5, 0.3)),
    )
    timeline = DynamicsService().propagate(state, H, dt=1e-2, n_steps=50, snapshot_stride=5, stepper="rk4")
    bundle = GuidanceService().integrate_trajectories(timeline, np.array([[1.0, 2.0]]), 0.0, 0.5)
    q = bundle.positions[:, 0, :]
    expected = [0.0]
    for k in range(len(bundle.times) - 1):
        dt = bundle.times[k + 1] - bundle.times[k]
        step = 0.0
        for j, e_imag in enumerate((0.5, 0.3)):
            dx = q[k + 1, j] - q[k, j]
            dx -= 2 * np.pi * np.round(dx / (2 * np.pi))
            mid = q[k, j] + 0.5 * dx
            step += e_imag * (0.3 * np.cos(mid) * dt - 0.2 * np.sin(mid) * dx)
        expected.append(expected[-1] + step)
    np.testing.assert_allclose(bundle.log_scale[:, 0], expected, atol=1e-8)
    assert abs(expected[-1]) > 1e-3

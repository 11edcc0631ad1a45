"""
Dynamics service: non-Hermitian Hamiltonians and time stepping.

The complex coupling e_C = e + i·e_I enters exactly where the real charge
does in the Hermitian equations, so the same operator code covers both
limits.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import splu

from config.settings import AppConfig, app_config
from models.errors import ConfigurationError, DivergenceError, StepperError
from models.fields import (
    Coupling,
    GridSpec,
    PhysicalConstants,
    State,
    SystemKind,
    Timeline,
    make_state,
)
from models.gauge_fields import GaugeConfiguration
from utils.grid_utils import spectral_derivative

logger = logging.getLogger(__name__)

STEPPERS = ("auto", "crank_nicolson", "rk4")
CN_DISCRETIZATIONS = ("fd2", "spectral")


@dataclass
class PotentialSample:
    """Gauge fields sampled on the grid at one time, per particle or axis."""

    phi: Tuple[np.ndarray, ...]
    A: Tuple[np.ndarray, ...]
    b_z: Optional[np.ndarray] = None
    interaction: Optional[np.ndarray] = None

    def is_finite(self) -> bool:
        arrays = list(self.phi) + list(self.A)
        arrays += [a for a in (self.b_z, self.interaction) if a is not None]
        return all(np.all(np.isfinite(a)) for a in arrays)


@dataclass
class HamiltonianOperator:
    """
    H for one system kind with complex coupling.

    Kinetic: (−iħ∇ − e_C A⃗/c)²/2m with the cross terms kept in symmetric order;
    potential: e_C φ (plus V(x₁, x₂) for two particles). Pauli adds the Zeeman
    term −ħe_C B_z σ_z/2mc. Dirac 1+1D uses H = cσ_x(p − e_C A/c) + σ_z mc² + e_C φ.
    """

    system: SystemKind
    grid: GridSpec
    gauge: GaugeConfiguration
    coupling: Coupling
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    masses: Tuple[float, ...] = (1.0,)
    _cache: Dict[float, PotentialSample] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.masses = tuple(float(m) for m in np.atleast_1d(self.masses))
        if self.grid.dim != self.system.grid_dim:
            raise ConfigurationError(
                f"{self.system.value} needs a {self.system.grid_dim}D grid, got {self.grid.dim}D"
            )
        n_particles = self.system.n_particles
        if self.coupling.n_particles == 1 and n_particles == 2:
            self.coupling = Coupling(self.coupling.charges * 2, self.coupling.imaginary * 2)
        if self.coupling.n_particles != n_particles:
            raise ConfigurationError(
                f"{self.system.value} needs {n_particles} coupling entries, got {self.coupling.n_particles}"
            )
        if len(self.masses) == 1 and n_particles == 2:
            self.masses = self.masses * 2
        if len(self.masses) != n_particles or any(m <= 0 for m in self.masses):
            raise ConfigurationError(f"Masses must be {n_particles} positive values, got {self.masses}")
        expected_A = 2 if self.system is SystemKind.PAULI_2D else 1
        if self.gauge.spatial_dim != expected_A:
            raise ConfigurationError(
                f"{self.system.value} needs {expected_A} vector-potential components, got {self.gauge.spatial_dim}"
            )
        if self.gauge.interaction is not None and self.system is not SystemKind.TWO_PARTICLE_1D:
            raise ConfigurationError("An interaction potential is only defined for two particles")
        if self.gauge.b_z is not None and self.system is not SystemKind.PAULI_2D:
            raise ConfigurationError("An explicit B_z is only defined for the Pauli system")

    @property
    def n_axes(self) -> int:
        return self.grid.dim

    def axis_charge(self, axis: int) -> complex:
        """e_C of the particle moving along a configuration axis."""
        return self.coupling.complex(axis if self.system is SystemKind.TWO_PARTICLE_1D else 0)

    def axis_mass(self, axis: int) -> float:
        return self.masses[axis if self.system is SystemKind.TWO_PARTICLE_1D else 0]

    def state_shape(self) -> Tuple[int, ...]:
        if self.system.n_components == 2:
            return (2,) + self.grid.shape
        return self.grid.shape

    def check_state(self, state: State) -> None:
        if not state.grid.compatible_with(self.grid):
            raise ConfigurationError("State grid does not match the Hamiltonian grid")
        if state.values.shape != self.state_shape():
            raise ConfigurationError(
                f"State of shape {state.values.shape} does not fit {self.system.value} {self.state_shape()}"
            )

    def sample(self, t: float) -> PotentialSample:
        """Gauge fields on the grid at time t; static gauges are sampled once."""
        key = float(t) if self.gauge.depends_on_time else 0.0
        if key in self._cache:
            return self._cache[key]
        mesh = self.grid.mesh()
        with np.errstate(over="ignore", invalid="ignore"):
            if self.system is SystemKind.TWO_PARTICLE_1D:
                phi = tuple(self.gauge.phi_at((mesh[j],), t) for j in range(2))
                A = tuple(self.gauge.A_at((mesh[j],), t)[0] for j in range(2))
                interaction = (
                    self.gauge.interaction.evaluate(mesh, t) if self.gauge.interaction is not None else None
                )
                sample = PotentialSample(phi=phi, A=A, interaction=interaction)
            else:
                phi = (self.gauge.phi_at(mesh, t),)
                A = tuple(self.gauge.A_at(mesh, t))
                b_z = self.gauge.magnetic_field(mesh, t) if self.system is SystemKind.PAULI_2D else None
                sample = PotentialSample(phi=phi, A=A, b_z=b_z)
        if len(self._cache) > 8:
            self._cache.clear()
        self._cache[key] = sample
        return sample

    def _kinetic_scalar(self, psi: np.ndarray, fields: PotentialSample) -> np.ndarray:
        hbar, c = self.constants.hbar, self.constants.c
        out = np.zeros(psi.shape, dtype=complex)
        for axis in range(self.n_axes):
            m = self.axis_mass(axis)
            q = self.axis_charge(axis) / c
            A = fields.A[axis]
            term = -(hbar**2) * spectral_derivative(psi, self.grid, axis, order=2)
            if np.any(A):
                dpsi = spectral_derivative(psi, self.grid, axis)
                term = term + 1j * hbar * q * (spectral_derivative(A * psi, self.grid, axis) + A * dpsi)
                term = term + q**2 * A**2 * psi
            out += term / (2.0 * m)
        return out

    def _potential_scalar(self, fields: PotentialSample) -> np.ndarray:
        if self.system is SystemKind.TWO_PARTICLE_1D:
            V = self.axis_charge(0) * fields.phi[0] + self.axis_charge(1) * fields.phi[1]
            if fields.interaction is not None:
                V = V + fields.interaction
            return V
        return self.coupling.complex(0) * fields.phi[0]

    def apply(self, values: np.ndarray, t: float) -> np.ndarray:
        """Hψ on raw arrays of shape `state_shape()`."""
        fields = self.sample(t)
        if self.system is SystemKind.DIRAC_1P1:
            return self._apply_dirac(values, fields)
        V = self._potential_scalar(fields)
        if self.system is SystemKind.PAULI_2D:
            hbar, c, m = self.constants.hbar, self.constants.c, self.masses[0]
            zeeman = -hbar * self.coupling.complex(0) * fields.b_z / (2.0 * m * c)
            plus = self._kinetic_scalar(values[0], fields) + (V + zeeman) * values[0]
            minus = self._kinetic_scalar(values[1], fields) + (V - zeeman) * values[1]
            return np.stack([plus, minus])
        return self._kinetic_scalar(values, fields) + V * values

    def _apply_dirac(self, values: np.ndarray, fields: PotentialSample) -> np.ndarray:
        hbar, c, m = self.constants.hbar, self.constants.c, self.masses[0]
        e_c = self.coupling.complex(0)
        A = fields.A[0]
        pi = -1j * hbar * spectral_derivative(values, self.grid, 0) - (e_c / c) * A * values
        rest = m * c**2
        V = e_c * fields.phi[0]
        upper = c * pi[1] + rest * values[0] + V * values[0]
        lower = c * pi[0] - rest * values[1] + V * values[1]
        return np.stack([upper, lower])

    def frequency_bound(self, t: float) -> float:
        """Upper estimate of max |eigenvalue of H|/ħ on this grid."""
        fields = self.sample(t)
        hbar, c = self.constants.hbar, self.constants.c
        energy = 0.0
        if self.system is SystemKind.DIRAC_1P1:
            k_max = np.pi / self.grid.spacing[0]
            e_c = abs(self.coupling.complex(0))
            energy = hbar * c * k_max + e_c * np.max(np.abs(fields.A[0])) + self.masses[0] * c**2
            energy += e_c * np.max(np.abs(fields.phi[0]))
            return float(energy / hbar)
        for axis in range(self.n_axes):
            k_max = np.pi / self.grid.spacing[axis]
            m = self.axis_mass(axis)
            q = abs(self.axis_charge(axis)) / c
            a_max = float(np.max(np.abs(fields.A[axis])))
            energy += (hbar * k_max + q * a_max) ** 2 / (2.0 * m)
        energy += float(np.max(np.abs(self._potential_scalar(fields))))
        if self.system is SystemKind.PAULI_2D:
            e_c = abs(self.coupling.complex(0))
            energy += hbar * e_c * float(np.max(np.abs(fields.b_z))) / (2.0 * self.masses[0] * c)
        return float(energy / hbar)

    def banded_matrix(self, t: float, discretization: str = "fd2"):
        """
        Matrix of H for Schrodinger1D.

        'fd2' gives a sparse periodic matrix from second-order central
        differences; 'spectral' gives the dense matrix of the FFT operator.
        """
        if self.system is not SystemKind.SCHRODINGER_1D:
            raise ConfigurationError("Matrix form is only available for Schrodinger1D")
        fields = self.sample(t)
        hbar, c, m = self.constants.hbar, self.constants.c, self.masses[0]
        q = self.coupling.complex(0) / c
        n = self.grid.points[0]
        dx = self.grid.spacing[0]
        A = fields.A[0]
        V = self.coupling.complex(0) * fields.phi[0]
        if discretization == "fd2":
            ones = np.ones(n)
            d2 = sparse.diags([ones[:-1], -2 * ones, ones[:-1]], [-1, 0, 1], format="lil")
            d2[0, n - 1] = d2[n - 1, 0] = 1.0
            d1 = sparse.diags([-ones[:-1], ones[:-1]], [-1, 1], format="lil")
            d1[0, n - 1], d1[n - 1, 0] = -1.0, 1.0
            d2 = d2.tocsc() / dx**2
            d1 = d1.tocsc() / (2.0 * dx)
            A_diag = sparse.diags(A)
            H = -(hbar**2) * d2 + 1j * hbar * q * (d1 @ A_diag + A_diag @ d1) + sparse.diags(q**2 * A**2)
            return (H / (2.0 * m) + sparse.diags(V)).tocsc()
        if discretization == "spectral":
            d2 = _spectral_matrix(self.grid, 2)
            d1 = _spectral_matrix(self.grid, 1)
            H = -(hbar**2) * d2 + 1j * hbar * q * (d1 @ np.diag(A) + np.diag(A) @ d1) + np.diag(q**2 * A**2)
            return H / (2.0 * m) + np.diag(V)
        raise ConfigurationError(f"Unknown Crank-Nicolson discretization '{discretization}'")


def _spectral_matrix(grid: GridSpec, order: int) -> np.ndarray:
    """Dense matrix D with D @ f equal to the spectral derivative of f."""
    n = grid.points[0]
    # row i holds the derivative of the i-th unit vector, i.e. column i of D
    rows = spectral_derivative(np.eye(n), grid, 0, order=order)
    return rows.T


class DynamicsService:
    """Service for applying Hamiltonians and propagating quantum states."""

    def __init__(self, settings: AppConfig = None):
        self.settings = settings or app_config
        self._factor_cache = ()

    def apply_hamiltonian(self, H: HamiltonianOperator, state: State, t: Optional[float] = None) -> State:
        """
        Apply H to a state.

        Args:
            H: Hamiltonian operator
            state: Field matching H's system kind and grid
            t: Evaluation time (defaults to the state's time label)

        Returns:
            Hψ as a field of the same kind
        """
        H.check_state(state)
        t = state.time_label if t is None else t
        return make_state(H.grid, H.apply(state.values, t), t)

    def _cn_factor(self, H: HamiltonianOperator, dt: float, t_mid: float, discretization: str):
        static = not H.gauge.depends_on_time
        cached = self._factor_cache
        if static and cached and cached[0] is H and cached[1:3] == (dt, discretization):
            return cached[3]
        matrix = H.banded_matrix(t_mid, discretization)
        hbar = H.constants.hbar
        try:
            if discretization == "fd2":
                identity = sparse.identity(matrix.shape[0], dtype=complex, format="csc")
                lhs = (identity + 0.5j * dt / hbar * matrix).tocsc()
                rhs = (identity - 0.5j * dt / hbar * matrix).tocsc()
                solver = splu(lhs)
                factor = (solver.solve, rhs.dot)
            else:
                identity = np.eye(matrix.shape[0])
                lu = scipy.linalg.lu_factor(identity + 0.5j * dt / hbar * matrix, check_finite=True)
                rhs = identity - 0.5j * dt / hbar * matrix
                factor = (lambda b, lu=lu: scipy.linalg.lu_solve(lu, b), rhs.dot)
        except (RuntimeError, ValueError, np.linalg.LinAlgError) as e:
            logger.error(f"Crank-Nicolson factorisation failed for dt={dt}: {e}")
            raise StepperError(f"Crank-Nicolson system is singular for dt={dt}: {e}") from e
        if static:
            self._factor_cache = (H, dt, discretization, factor)
        return factor

    def _cn_values(self, values: np.ndarray, H: HamiltonianOperator, dt: float, t: float, discretization: str):
        solve, apply_rhs = self._cn_factor(H, dt, t + 0.5 * dt, discretization)
        return solve(apply_rhs(values))

    def step_crank_nicolson_1d(
        self,
        state: State,
        H: HamiltonianOperator,
        dt: float,
        discretization: str = "fd2",
    ) -> State:
        """
        One Crank-Nicolson step (1 + i·dt·H/2ħ)ψ' = (1 − i·dt·H/2ħ)ψ.

        Time-dependent gauges are sampled at the step midpoint.

        Raises:
            StepperError: If the implicit system is singular
        """
        if H.system is not SystemKind.SCHRODINGER_1D:
            raise ConfigurationError("Crank-Nicolson stepping is only available for Schrodinger1D")
        H.check_state(state)
        new_values = self._cn_values(state.values, H, dt, state.time_label, discretization)
        return state.with_values(new_values, state.time_label + dt)

    def check_rk4_stability(self, H: HamiltonianOperator, dt: float, t: float) -> float:
        """Return ω_max·dt, raising StepperError above the RK4 stability limit."""
        omega = H.frequency_bound(t)
        product = omega * dt
        if not np.isfinite(product) or product > self.settings.RK4_STABILITY_LIMIT:
            logger.error(f"RK4 step dt={dt} violates stability bound (omega_max*dt = {product:.3g})")
            raise StepperError(
                f"RK4 time step dt={dt} too large: omega_max*dt = {product:.3g} > "
                f"{self.settings.RK4_STABILITY_LIMIT}"
            )
        return product

    @staticmethod
    def _rk4_values(values: np.ndarray, H: HamiltonianOperator, dt: float, t: float) -> np.ndarray:
        rate = -1j / H.constants.hbar
        k1 = rate * H.apply(values, t)
        k2 = rate * H.apply(values + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rate * H.apply(values + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rate * H.apply(values + dt * k3, t + dt)
        return values + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_rk4_spectral(self, state: State, H: HamiltonianOperator, dt: float) -> State:
        """
        Classic four-stage RK4 step of ∂tψ = −iHψ/ħ with spectral derivatives.

        Raises:
            StepperError: If ω_max·dt exceeds the stability limit
        """
        H.check_state(state)
        self.check_rk4_stability(H, dt, state.time_label)
        new_values = self._rk4_values(state.values, H, dt, state.time_label)
        return make_state(H.grid, new_values, state.time_label + dt)

    def resolve_stepper(self, H: HamiltonianOperator, stepper: str) -> str:
        if stepper not in STEPPERS:
            raise ConfigurationError(f"Unknown stepper '{stepper}', expected one of {STEPPERS}")
        if stepper == "auto":
            return "crank_nicolson" if H.system is SystemKind.SCHRODINGER_1D else "rk4"
        if stepper == "crank_nicolson" and H.system is not SystemKind.SCHRODINGER_1D:
            raise ConfigurationError("Crank-Nicolson stepping is only available for Schrodinger1D")
        return stepper

    def propagate(
        self,
        initial: State,
        H: HamiltonianOperator,
        dt: float,
        n_steps: int,
        snapshot_stride: int = 1,
        stepper: str = "auto",
        discretization: str = "fd2",
    ) -> Timeline:
        """
        Propagate a state and record snapshots every `snapshot_stride` steps.

        Args:
            initial: Initial state (its time label is t0)
            H: Hamiltonian operator
            dt: Time step
            n_steps: Number of steps (multiple of the stride)
            snapshot_stride: Steps between stored snapshots
            stepper: 'auto', 'crank_nicolson' or 'rk4'
            discretization: Crank-Nicolson spatial discretization, 'fd2' or 'spectral'

        Returns:
            Timeline with snapshots and the per-step Born-norm series

        Raises:
            DivergenceError: If non-finite values appear; names the step
        """
        if not dt > 0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        if n_steps < 0 or snapshot_stride < 1 or n_steps % snapshot_stride:
            raise ConfigurationError(
                f"n_steps={n_steps} must be a nonnegative multiple of snapshot_stride={snapshot_stride}"
            )
        if discretization not in CN_DISCRETIZATIONS:
            raise ConfigurationError(f"Unknown discretization '{discretization}', expected {CN_DISCRETIZATIONS}")
        H.check_state(initial)
        method = self.resolve_stepper(H, stepper)
        t0 = float(initial.time_label)
        grid = H.grid
        logger.info(
            f"Propagating {H.system.value} on {grid.shape} grid: {n_steps} steps of dt={dt} with {method}"
        )

        snapshots = np.empty((n_steps // snapshot_stride + 1,) + H.state_shape(), dtype=complex)
        snapshots[0] = initial.values
        born = np.empty(n_steps + 1)
        born[0] = initial.born_norm()

        values = initial.values
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(1, n_steps + 1):
                t = t0 + (step - 1) * dt
                sample_t = t + 0.5 * dt if method == "crank_nicolson" else t
                if not H.sample(sample_t).is_finite():
                    logger.error(f"Non-finite potential at step {step} (t={sample_t})")
                    raise DivergenceError(step, f"Non-finite potential at step {step} (t={sample_t})")
                if method == "crank_nicolson":
                    values = self._cn_values(values, H, dt, t, discretization)
                else:
                    if step == 1 or H.gauge.depends_on_time:
                        self.check_rk4_stability(H, dt, t)
                    values = self._rk4_values(values, H, dt, t)
                born[step] = float(np.sum(np.abs(values) ** 2) * grid.cell_volume)
                if not (np.isfinite(born[step]) and np.all(np.isfinite(values))):
                    logger.error(f"Propagation diverged at step {step} (t={t + dt})")
                    raise DivergenceError(step)
                if step % snapshot_stride == 0:
                    snapshots[step // snapshot_stride] = values
                if step % max(1, n_steps // 10) == 0:
                    logger.debug(f"step {step}/{n_steps}: Born norm {born[step]:.12g}")

        logger.info(f"Propagation finished: Born norm {born[0]:.6g} -> {born[-1]:.6g}")
        return Timeline(
            grid=grid,
            system=H.system,
            snapshots=snapshots,
            t0=t0,
            dt=dt,
            n_steps=n_steps,
            stride=snapshot_stride,
            born_norm=born,
            hamiltonian=H,
        )

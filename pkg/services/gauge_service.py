"""
Gauge service: complex-coupled gauge transformations and twin-run checks that
velocities, trajectories, conserved densities and the quantum potential are
gauge invariant.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from config.settings import AppConfig, app_config
from models.errors import ConfigurationError
from models.fields import (
    ComplexScalarField,
    Coupling,
    DensitySnapshot,
    GridSpec,
    PhysicalConstants,
    SpinorField,
    State,
    SystemKind,
    Timeline,
)
from models.gauge_fields import GaugeConfiguration, GaugeFunction, transform_gauge
from services.dynamics_service import DynamicsService, HamiltonianOperator
from services.guidance_service import GuidanceService
from services.weylscale_service import WeylScaleService

logger = logging.getLogger(__name__)


@dataclass
class InvarianceReport:
    """L∞ deviation between two gauges, split into unmasked and masked nodes."""

    quantity: str
    t: float
    max_deviation: float
    masked_deviation: float = 0.0
    degraded: bool = False

    def to_dict(self) -> dict:
        return {
            "quantity": self.quantity,
            "t": self.t,
            "max_deviation": self.max_deviation,
            "masked_deviation": self.masked_deviation,
            "degraded": self.degraded,
        }


def _spatial_grid(grid: GridSpec, system: SystemKind) -> GridSpec:
    """Physical-space grid on which λ lives (one particle axis for two particles)."""
    if system is SystemKind.TWO_PARTICLE_1D:
        return GridSpec(extent=(grid.extent[0],), points=(grid.points[0],), min_points=grid.min_points)
    return grid


def _particle_couplings(coupling: Coupling, system: SystemKind) -> Tuple[Tuple[float, float], ...]:
    if system is SystemKind.TWO_PARTICLE_1D and coupling.n_particles == 1:
        return ((coupling.e, coupling.e_imag),) * 2
    return tuple(zip(coupling.charges, coupling.imaginary))


def gauge_exponent(
    lam: GaugeFunction,
    grid: GridSpec,
    coupling: Coupling,
    t: float,
    constants: PhysicalConstants,
    system: SystemKind,
) -> np.ndarray:
    """
    Σ_j e_Cj·λ(x_j, t)/ħc on the configuration grid (complex).

    Scalar and spinor systems have a single particle so the sum has one term.
    """
    mesh = grid.mesh()
    hbar_c = constants.hbar * constants.c
    total = np.zeros(grid.shape, dtype=complex)
    if system is SystemKind.TWO_PARTICLE_1D:
        for j, (e, e_imag) in enumerate(_particle_couplings(coupling, system)):
            total += complex(e, e_imag) * lam.value((mesh[j],), t)
    else:
        total += coupling.complex(0) * lam.value(mesh, t)
    return total / hbar_c


class GaugeService:
    """Service for gauge transformations and invariance checks."""

    def __init__(self, settings: AppConfig = None, dynamics: DynamicsService = None,
                 guidance: GuidanceService = None, weylscale: WeylScaleService = None):
        self.settings = settings or app_config
        self.dynamics = dynamics or DynamicsService(self.settings)
        self.guidance = guidance or GuidanceService(self.settings)
        self.weylscale = weylscale or WeylScaleService(self.settings, self.guidance)

    def apply_gauge_transform(
        self,
        state: State,
        gauge: GaugeConfiguration,
        lam: Union[GaugeFunction, str],
        coupling: Coupling,
        constants: PhysicalConstants = None,
        system: Optional[SystemKind] = None,
    ) -> Tuple[State, GaugeConfiguration]:
        """
        ψ → ψ·exp(i e_C λ/ħc), A⃗ → A⃗ + ∇λ, φ → φ − ∂λ/∂(ct).

        The complex exponent rotates the phase by eλ/ħc and scales the
        amplitude by exp(−e_Iλ/ħc). Spinor components transform identically.

        Args:
            state: Scalar or spinor state; its time label is the evaluation time
            gauge: Gauge fields
            lam: Gauge function (expression or GaugeFunction)
            coupling: Coupling constants
            constants: Physical constants
            system: System kind (defaults from the state shape and grid)

        Returns:
            (transformed state, transformed gauge)

        Raises:
            ConfigurationError: If λ or ∇λ is not periodic on the grid
        """
        constants = constants or PhysicalConstants()
        lam = lam if isinstance(lam, GaugeFunction) else GaugeFunction(lam)
        if system is None:
            system = self._infer_system(state, gauge)
        try:
            lam.check_periodic(_spatial_grid(state.grid, system), times=(state.time_label,))
            if lam.is_zero():
                return state, gauge
            factor = np.exp(1j * gauge_exponent(lam, state.grid, coupling, state.time_label, constants, system))
            new_state = state.with_values(state.values * factor)
            new_gauge = transform_gauge(gauge, lam, constants)
        except Exception as e:
            logger.error(f"Gauge transform with {lam!r} failed: {e}")
            raise
        logger.debug(f"Applied gauge transform {lam!r} to {system.value} state")
        return new_state, new_gauge

    @staticmethod
    def _infer_system(state: State, gauge: GaugeConfiguration) -> SystemKind:
        if isinstance(state, SpinorField):
            return SystemKind.PAULI_2D if state.grid.dim == 2 else SystemKind.DIRAC_1P1
        if state.grid.dim == 2 and gauge.spatial_dim == 1:
            return SystemKind.TWO_PARTICLE_1D
        return SystemKind.SCHRODINGER_1D

    def weyl_rescale(
        self,
        field: Union[np.ndarray, ComplexScalarField, SpinorField, DensitySnapshot],
        lam: Union[GaugeFunction, str],
        omega: int,
        coupling: Coupling,
        grid: Optional[GridSpec] = None,
        t: float = 0.0,
        constants: PhysicalConstants = None,
        system: SystemKind = SystemKind.SCHRODINGER_1D,
    ) -> Union[np.ndarray, ComplexScalarField, SpinorField, DensitySnapshot]:
        """f → f·exp(−ω e_I λ/ħc) pointwise for a field of Weyl weight ω."""
        constants = constants or PhysicalConstants()
        lam = lam if isinstance(lam, GaugeFunction) else GaugeFunction(lam)
        if isinstance(field, DensitySnapshot):
            grid, t, values = field.grid, field.t, field.rho
        elif isinstance(field, (ComplexScalarField, SpinorField)):
            grid, t, values = field.grid, field.time_label, field.values
        else:
            if grid is None:
                raise ConfigurationError("weyl_rescale on a raw array needs a grid")
            values = np.asarray(field)
        if omega == 0 or lam.is_zero():
            return field
        # Im(e_C·λ/ħc) = e_I·λ/ħc
        scale = np.exp(-omega * gauge_exponent(lam, grid, coupling, t, constants, system).imag)
        if isinstance(field, DensitySnapshot):
            return DensitySnapshot(grid, field.rho * scale, field.t, field.method_tag, field.degraded, field.flagged_mask)
        if isinstance(field, (ComplexScalarField, SpinorField)):
            return field.with_values(values * scale)
        return values * scale

    # --- twin runs ----------------------------------------------------------

    def twin_run(
        self,
        timeline: Timeline,
        lam: Union[GaugeFunction, str],
        stepper: str = "auto",
        discretization: str = "fd2",
    ) -> Timeline:
        """
        Re-propagate the gauge-transformed initial state under the transformed gauge.
        """
        H = timeline.hamiltonian
        lam = lam if isinstance(lam, GaugeFunction) else GaugeFunction(lam)
        initial = timeline.snapshot(0)
        state, gauge = self.apply_gauge_transform(initial, H.gauge, lam, H.coupling, H.constants, H.system)
        twin_H = HamiltonianOperator(
            system=H.system, grid=H.grid, gauge=gauge, coupling=H.coupling,
            constants=H.constants, masses=H.masses,
        )
        logger.info(f"Twin run in gauge {lam!r}")
        return self.dynamics.propagate(
            state, twin_H, timeline.dt, timeline.n_steps, timeline.stride, stepper, discretization
        )

    def initial_log_scale(self, timeline: Timeline, lam: GaugeFunction):
        """ln𝟙′(t₀) = −Σ_j e_Ij·λ(x_j, t₀)/ħc as a function of start points."""
        H = timeline.hamiltonian
        hbar_c = H.constants.hbar * H.constants.c
        couplings = _particle_couplings(H.coupling, H.system)

        def ln_one(points: np.ndarray) -> np.ndarray:
            points = np.atleast_2d(points)
            if H.system is SystemKind.TWO_PARTICLE_1D:
                total = sum(e_imag * lam.value((points[:, j],), timeline.t0) for j, (_, e_imag) in enumerate(couplings))
            else:
                coords = tuple(points[:, a] for a in range(points.shape[1]))
                total = H.coupling.e_imag * lam.value(coords, timeline.t0)
            return -np.asarray(total, dtype=float) / hbar_c

        return ln_one

    def check_velocity_invariance(self, timeline: Timeline, twin: Timeline, t: float) -> InvarianceReport:
        """L∞ difference of the velocity fields of two gauges at a snapshot time."""
        i = timeline.index_of(t)
        v = self.guidance.snapshot_velocity(timeline, i)
        v_twin = self.guidance.snapshot_velocity(twin, twin.index_of(t))
        masked = v.node_mask | v_twin.node_mask
        diff = np.max(np.abs(v.v - v_twin.v), axis=0)
        report = InvarianceReport(
            "velocity", t,
            float(np.max(diff[~masked])) if np.any(~masked) else 0.0,
            float(np.max(diff[masked])) if np.any(masked) else 0.0,
        )
        logger.info(f"Velocity invariance at t={t}: {report.max_deviation:.3e}")
        return report

    def check_density_invariance(
        self,
        timeline: Timeline,
        twin: Timeline,
        lam: Union[GaugeFunction, str],
        t: float,
        method: str = "backward",
    ) -> InvarianceReport:
        """
        L∞ difference of R²/𝟙² between gauges; the twin's scale starts at
        exp(−e_Iλ(x₀, t₀)/ħc).
        """
        lam = lam if isinstance(lam, GaugeFunction) else GaugeFunction(lam)
        rho = self.weylscale.conserved_density_grid(timeline, t, method)
        rho_twin = self.weylscale.conserved_density_grid(
            twin, t, method, initial_log_scale=self.initial_log_scale(twin, lam)
        )
        diff = np.abs(rho.rho - rho_twin.rho)
        masked = np.zeros(diff.shape, dtype=bool)
        for snapshot in (rho, rho_twin):
            if snapshot.flagged_mask is not None:
                masked |= snapshot.flagged_mask
        report = InvarianceReport(
            "conserved_density", t,
            float(np.max(diff[~masked])) if np.any(~masked) else 0.0,
            float(np.max(diff[masked])) if np.any(masked) else 0.0,
            degraded=rho.degraded or rho_twin.degraded,
        )
        if report.degraded:
            logger.warning(f"Density invariance at t={t} compares degraded snapshots")
        logger.info(f"Density invariance at t={t}: {report.max_deviation:.3e}")
        return report

    def check_trajectory_invariance(
        self, timeline: Timeline, twin: Timeline, seeds: np.ndarray, t: float
    ) -> InvarianceReport:
        """Largest endpoint distance (minimum image) between trajectories of two gauges."""
        a = self.guidance.integrate_trajectories(timeline, seeds, timeline.t0, t)
        b = self.guidance.integrate_trajectories(twin, seeds, twin.t0, t)
        lengths = timeline.grid.lengths
        d = a.positions[-1] - b.positions[-1]
        d = d - lengths * np.round(d / lengths)
        dist = np.sqrt(np.sum(d**2, axis=1))
        unreliable = a.unreliable | b.unreliable
        report = InvarianceReport(
            "trajectory_endpoint", t,
            float(np.max(dist[~unreliable])) if np.any(~unreliable) else 0.0,
            float(np.max(dist[unreliable])) if np.any(unreliable) else 0.0,
            degraded=bool(np.mean(unreliable) > self.settings.DEGRADED_SNAPSHOT_FRACTION) if unreliable.size else False,
        )
        logger.info(f"Trajectory invariance at t={t}: {report.max_deviation:.3e}")
        return report

    def check_quantum_potential_invariance(
        self,
        state: ComplexScalarField,
        gauge: GaugeConfiguration,
        lam: Union[GaugeFunction, str],
        coupling: Coupling,
        constants: PhysicalConstants = None,
        masses=(1.0,),
        system: SystemKind = SystemKind.SCHRODINGER_1D,
    ) -> InvarianceReport:
        """Compare the quantum potential before and after a gauge transform of (ψ, A⃗, φ)."""
        constants = constants or PhysicalConstants()
        t = state.time_label
        new_state, new_gauge = self.apply_gauge_transform(state, gauge, lam, coupling, constants, system)
        terms = self.weylscale.quantum_potential_terms(state, gauge, coupling, t, constants, system)
        Q = self.weylscale.quantum_potential(state, gauge, coupling, t, constants, masses, system)
        Q_new = self.weylscale.quantum_potential(new_state, new_gauge, coupling, t, constants, masses, system)
        masked = terms["node_mask"]
        diff = np.abs(Q - Q_new)
        return InvarianceReport(
            "quantum_potential", t,
            float(np.max(diff[~masked])) if np.any(~masked) else 0.0,
            float(np.max(diff[masked])) if np.any(masked) else 0.0,
        )

    # --- group structure ----------------------------------------------------

    @staticmethod
    def _pair_deviation(
        state: State,
        gauge: GaugeConfiguration,
        other_state: State,
        other_gauge: GaugeConfiguration,
        system: SystemKind,
    ) -> float:
        """L∞ distance between two (ψ, φ, A⃗) triples on the grid at the state's time."""
        t = state.time_label
        mesh = _spatial_grid(state.grid, system).mesh()
        return max(
            float(np.max(np.abs(state.values - other_state.values))),
            float(np.max(np.abs(gauge.phi_at(mesh, t) - other_gauge.phi_at(mesh, t)))),
            float(np.max(np.abs(gauge.A_at(mesh, t) - other_gauge.A_at(mesh, t)))),
        )

    def check_inverse_transform(
        self,
        state: State,
        gauge: GaugeConfiguration,
        lam: Union[GaugeFunction, str],
        coupling: Coupling,
        constants: PhysicalConstants = None,
        system: Optional[SystemKind] = None,
    ) -> InvarianceReport:
        """Transforming by λ and then by −λ returns the original state and potentials."""
        lam = lam if isinstance(lam, GaugeFunction) else GaugeFunction(lam)
        system = system or self._infer_system(state, gauge)
        there = self.apply_gauge_transform(state, gauge, lam, coupling, constants, system)
        back_state, back_gauge = self.apply_gauge_transform(*there, lam.negated(), coupling, constants, system)
        report = InvarianceReport(
            "inverse_transform", state.time_label, self._pair_deviation(state, gauge, back_state, back_gauge, system)
        )
        logger.info(f"Gauge inverse at t={report.t}: {report.max_deviation:.3e}")
        return report

    def check_composition(
        self,
        state: State,
        gauge: GaugeConfiguration,
        lam: Union[GaugeFunction, str],
        mu: Union[GaugeFunction, str],
        coupling: Coupling,
        constants: PhysicalConstants = None,
        system: Optional[SystemKind] = None,
    ) -> InvarianceReport:
        """Transforming by λ then μ matches a single transform by λ + μ."""
        lam = lam if isinstance(lam, GaugeFunction) else GaugeFunction(lam)
        mu = mu if isinstance(mu, GaugeFunction) else GaugeFunction(mu)
        system = system or self._infer_system(state, gauge)
        first = self.apply_gauge_transform(state, gauge, lam, coupling, constants, system)
        two_step = self.apply_gauge_transform(*first, mu, coupling, constants, system)
        one_step = self.apply_gauge_transform(state, gauge, lam.plus(mu), coupling, constants, system)
        report = InvarianceReport(
            "composition", state.time_label, self._pair_deviation(*two_step, *one_step, system)
        )
        logger.info(f"Gauge composition at t={report.t}: {report.max_deviation:.3e}")
        return report

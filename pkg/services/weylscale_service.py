"""
Weyl scale service: the scale factor 𝟙[𝒞] along trajectories, the conserved
density R²/𝟙², and the continuity and Hamilton-Jacobi checks.

Line-integral convention: A^μ dx_μ = φ·c·dt − A⃗·dx⃗, so along a path
d ln𝟙 = (e_I/ħc)(φ·c·dt − A⃗·dx⃗).
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator

from config.settings import AppConfig, app_config
from models.errors import ConfigurationError, DegenerateFieldError, UnsupportedConfigurationError
from models.fields import (
    ComplexScalarField,
    Coupling,
    DensitySnapshot,
    GridSpec,
    PhysicalConstants,
    ScaleConvention,
    SpinorField,
    State,
    SystemKind,
    Timeline,
    Trajectory,
)
from models.gauge_fields import GaugeConfiguration
from utils.grid_utils import divergence, fill_masked, l2_norm, polar_decompose, spectral_derivative

logger = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = ["quantity", "t", "level", "points", "dt", "residual", "order", "degraded"]

InitialLogScale = Callable[[np.ndarray], np.ndarray]


def accumulate_log_scale_step(
    ln_one: np.ndarray,
    gauge: GaugeConfiguration,
    coupling: Coupling,
    q: np.ndarray,
    q_new: np.ndarray,
    t: float,
    t_new: float,
    system: SystemKind = SystemKind.SCHRODINGER_1D,
    constants: PhysicalConstants = None,
    grid: Optional[GridSpec] = None,
) -> np.ndarray:
    """
    Advance ln𝟙 over one step with the midpoint rule.

    Args:
        ln_one: Current log scale per path, shape (n,)
        gauge: Gauge fields
        coupling: Coupling (one entry per particle)
        q: Positions at t, shape (n, config_dim), unwrapped
        q_new: Positions at t_new, shape (n, config_dim), unwrapped
        t: Start time
        t_new: End time
        system: System kind (two particles sum one increment per particle)
        constants: Physical constants
        grid: If given, midpoints are wrapped into its domain before evaluation

    Returns:
        ln𝟙 at t_new
    """
    constants = constants or PhysicalConstants()
    ln_one = np.asarray(ln_one, dtype=float)
    if coupling.is_hermitian:
        return ln_one.copy()
    q = np.atleast_2d(np.asarray(q, dtype=float))
    q_new = np.atleast_2d(np.asarray(q_new, dtype=float))
    dq = q_new - q
    mid = 0.5 * (q + q_new)
    if grid is not None:
        mid = grid.wrap(mid)
    t_mid = 0.5 * (t + t_new)
    dt = t_new - t
    hbar_c = constants.hbar * constants.c

    if system is SystemKind.TWO_PARTICLE_1D:
        increment = np.zeros(q.shape[0])
        for j in range(q.shape[1]):
            e_imag = coupling.imaginary[j] if coupling.n_particles > 1 else coupling.e_imag
            if e_imag == 0.0:
                continue
            coords = (mid[:, j],)
            phi = gauge.phi_at(coords, t_mid)
            A = gauge.A_at(coords, t_mid)[0]
            increment += (e_imag / hbar_c) * (phi * constants.c * dt - A * dq[:, j])
        return ln_one + increment

    coords = tuple(mid[:, a] for a in range(q.shape[1]))
    phi = gauge.phi_at(coords, t_mid)
    A = gauge.A_at(coords, t_mid)
    line = phi * constants.c * dt - np.sum(A[: q.shape[1]] * dq.T, axis=0)
    return ln_one + (coupling.e_imag / hbar_c) * line


def path_log_scale(
    trajectory: Trajectory,
    gauge: GaugeConfiguration,
    coupling: Coupling,
    grid: GridSpec,
    constants: PhysicalConstants = None,
    start: int = 0,
    stop: Optional[int] = None,
) -> float:
    """
    ln𝟙 recomputed from a trajectory's samples over [start, stop].

    Consecutive wrapped samples are joined by their minimum-image displacement.
    """
    system = SystemKind(trajectory.system_tag)
    stop = len(trajectory.times) - 1 if stop is None else stop
    total = np.zeros(1)
    for k in range(start, stop):
        q = trajectory.positions[k][None]
        dq = trajectory.positions[k + 1][None] - q
        dq = dq - grid.lengths * np.round(dq / grid.lengths)
        total = accumulate_log_scale_step(
            total, gauge, coupling, q, q + dq, trajectory.times[k], trajectory.times[k + 1],
            system=system, constants=constants, grid=grid,
        )
    return float(total[0])


class WeylScaleService:
    """Service for scale factors, conserved densities and structural residuals."""

    def __init__(self, settings: AppConfig = None, guidance=None):
        from services.guidance_service import GuidanceService

        self.settings = settings or app_config
        self.guidance = guidance or GuidanceService(self.settings)
        self.convention = ScaleConvention()

    def accumulate_log_scale_step(self, ln_one, gauge, coupling, q, q_new, t, t_new, **kwargs) -> np.ndarray:
        return accumulate_log_scale_step(ln_one, gauge, coupling, q, q_new, t, t_new, **kwargs)

    def split_path_log_scale(
        self,
        trajectory: Trajectory,
        split: int,
        gauge: GaugeConfiguration,
        coupling: Coupling,
        grid: GridSpec,
        constants: PhysicalConstants = None,
    ) -> Tuple[float, float, float]:
        """ln𝟙 over [0, split], [split, end] and the whole path."""
        first = path_log_scale(trajectory, gauge, coupling, grid, constants, 0, split)
        second = path_log_scale(trajectory, gauge, coupling, grid, constants, split, None)
        whole = path_log_scale(trajectory, gauge, coupling, grid, constants)
        return first, second, whole

    # --- densities ----------------------------------------------------------

    def born_density(self, timeline: Timeline, t: float) -> DensitySnapshot:
        state = timeline.state_at(t)
        return DensitySnapshot(timeline.grid, state.density, t, method_tag="born")

    def conserved_density_grid(
        self,
        timeline: Timeline,
        t: float,
        method: str = "backward",
        initial_log_scale: Optional[InitialLogScale] = None,
        velocity_provider=None,
    ) -> DensitySnapshot:
        """
        Conserved density ρ = |ψ(x, t)|²/𝟙²[𝒞] on the grid at time t.

        Args:
            timeline: Completed propagation run
            t: Time inside the timeline
            method: 'backward' (trace every node back to t₀) or 'comoving'
                (carry ln𝟙 forward from t₀ seeds, 1D only)
            initial_log_scale: Optional ln𝟙(t₀) as a function of start points
                (used for non-reference gauges)
            velocity_provider: Optional replacement velocity law

        Returns:
            DensitySnapshot flagged as degraded when too many paths are unreliable
        """
        if method not in ("backward", "comoving"):
            raise ConfigurationError(f"Unknown density method '{method}'")
        timeline.bracket(t)
        H = timeline.hamiltonian
        grid = timeline.grid
        state = timeline.state_at(t)
        born = state.density
        if H.coupling.is_hermitian and initial_log_scale is None and velocity_provider is None:
            return DensitySnapshot(grid, born, t, method_tag=method)
        if method == "comoving":
            return self._comoving_density(timeline, t, born, initial_log_scale, velocity_provider)

        peak = float(np.max(born))
        if peak == 0.0:
            raise DegenerateFieldError(f"State vanishes identically at t = {t}")
        node_mask = born <= self.settings.NODE_THRESHOLD * peak
        points = grid.node_points()
        bundle = self.guidance.backward_bundle(timeline, points, t, velocity_provider=velocity_provider)
        ln_one = bundle.log_scale[-1].copy()
        if initial_log_scale is not None:
            ln_one += initial_log_scale(bundle.positions[0])
        ln_one = ln_one.reshape(grid.shape)
        rho = born * np.exp(-2.0 * ln_one)
        rho = fill_masked(rho, node_mask, grid)
        unreliable = bundle.unreliable.reshape(grid.shape)
        n_unmasked = int(np.sum(~node_mask))
        fraction = float(np.sum(unreliable & ~node_mask)) / max(n_unmasked, 1)
        degraded = fraction > self.settings.DEGRADED_SNAPSHOT_FRACTION
        if degraded:
            logger.warning(f"Conserved density at t={t} degraded: {fraction:.1%} unreliable trajectories")
        return DensitySnapshot(
            grid, np.maximum(rho, 0.0), t, method_tag="backward", degraded=degraded,
            flagged_mask=node_mask | unreliable,
        )

    def _comoving_density(self, timeline, t, born, initial_log_scale, velocity_provider) -> DensitySnapshot:
        grid = timeline.grid
        if grid.dim != 1:
            raise UnsupportedConfigurationError("Comoving density reconstruction is only offered in 1D")
        initial = timeline.snapshot(0).density
        seeds_mask = initial > self.settings.NODE_THRESHOLD * float(np.max(initial))
        seeds = grid.axes[0][seeds_mask][:, None]
        if abs(t - timeline.t0) <= 1e-12:
            ln_one = np.zeros(seeds.shape[0])
            positions = seeds[:, 0]
            unreliable = np.zeros(seeds.shape[0], dtype=bool)
            start = seeds
        else:
            bundle = self.guidance.integrate_trajectories(
                timeline, seeds, timeline.t0, t, velocity_provider=velocity_provider
            )
            ln_one = bundle.log_scale[-1].copy()
            positions = bundle.positions[-1, :, 0]
            unreliable = bundle.unreliable
            start = bundle.positions[0]
        if initial_log_scale is not None:
            ln_one += initial_log_scale(start)

        order = np.argsort(positions, kind="stable")
        x_sorted, scale_sorted = positions[order], np.exp(2.0 * ln_one[order])
        x_sorted, unique_idx = np.unique(x_sorted, return_index=True)
        scale_sorted = scale_sorted[unique_idx]
        L = grid.lengths[0]
        x_ext = np.concatenate([x_sorted - L, x_sorted, x_sorted + L])
        s_ext = np.tile(scale_sorted, 3)
        one_squared = PchipInterpolator(x_ext, s_ext)(grid.axes[0])
        rho = born / one_squared

        fraction = float(np.mean(unreliable)) if unreliable.size else 0.0
        degraded = fraction > self.settings.DEGRADED_SNAPSHOT_FRACTION
        if degraded:
            logger.warning(f"Comoving density at t={t} degraded: {fraction:.1%} unreliable trajectories")
        return DensitySnapshot(grid, np.maximum(rho, 0.0), t, method_tag="comoving", degraded=degraded)

    def total_norm(self, snapshot: DensitySnapshot) -> float:
        """∫ρ as a Riemann sum times the cell volume."""
        return snapshot.norm()

    # --- structural residuals -----------------------------------------------

    def _interior_neighbours(self, timeline: Timeline, t: float) -> int:
        i = timeline.index_of(t)
        if i < 1 or i > timeline.n_snapshots - 2:
            raise ConfigurationError(f"t = {t} needs snapshots on both sides for central differences")
        return i

    def continuity_residual(
        self, timeline: Timeline, t: float, method: str = "backward"
    ) -> Tuple[np.ndarray, float, bool]:
        """
        ∂tρ + ∇·(ρv) for the conserved density at a snapshot time t.

        Returns:
            (residual field, its L2 norm, degraded flag)
        """
        i = self._interior_neighbours(timeline, t)
        spacing = timeline.snapshot_spacing
        before = self.conserved_density_grid(timeline, timeline.times[i - 1], method)
        now = self.conserved_density_grid(timeline, timeline.times[i], method)
        after = self.conserved_density_grid(timeline, timeline.times[i + 1], method)
        v = self.guidance.snapshot_velocity(timeline, i).v
        residual = (after.rho - before.rho) / (2.0 * spacing) + divergence(now.rho * v, timeline.grid)
        degraded = before.degraded or now.degraded or after.degraded
        if degraded:
            logger.warning(f"Continuity residual at t={t} uses degraded density snapshots")
        return residual, l2_norm(residual, timeline.grid), degraded

    def born_source_residual(self, timeline: Timeline, t: float) -> Tuple[np.ndarray, float]:
        """
        ∂tR² + ∇·(R²v) − 2R²(e_Iφ/ħ − (e_I/ħc)A⃗·v⃗), summed over particles.

        Vanishes for exact solutions; needs no trajectories.
        """
        i = self._interior_neighbours(timeline, t)
        H = timeline.hamiltonian
        grid = timeline.grid
        spacing = timeline.snapshot_spacing
        rho_before = timeline.snapshot(i - 1).density
        rho_after = timeline.snapshot(i + 1).density
        rho = timeline.snapshot(i).density
        v = self.guidance.snapshot_velocity(timeline, i).v
        hbar, c = H.constants.hbar, H.constants.c
        mesh = grid.mesh()
        source = np.zeros(grid.shape)
        if H.system is SystemKind.TWO_PARTICLE_1D:
            for j in range(2):
                e_imag = H.coupling.imaginary[j]
                phi = H.gauge.phi_at((mesh[j],), t)
                A = H.gauge.A_at((mesh[j],), t)[0]
                source += e_imag * phi / hbar - (e_imag / (hbar * c)) * A * v[j]
        else:
            e_imag = H.coupling.e_imag
            phi = H.gauge.phi_at(mesh, t)
            A = H.gauge.A_at(mesh, t)
            source += e_imag * phi / hbar - (e_imag / (hbar * c)) * np.sum(A[: grid.dim] * v, axis=0)
        residual = (rho_after - rho_before) / (2.0 * spacing) + divergence(rho * v, grid) - 2.0 * rho * source
        return residual, l2_norm(residual, grid)

    def quantum_potential_terms(
        self,
        state: ComplexScalarField,
        gauge: GaugeConfiguration,
        coupling: Coupling,
        t: float = 0.0,
        constants: PhysicalConstants = None,
        system: SystemKind = SystemKind.SCHRODINGER_1D,
    ) -> Dict[str, np.ndarray]:
        """
        Pieces of D²R/R per configuration axis, summed over axes.

        Keys: 'laplacian' (∇²R/R), 'a_squared' (a²A²), 'div_A' (a∇·A),
        'cross' (2aA·∇R/R), 'total' and 'node_mask'; a = e_I/ħc.
        ∇²R/R is taken from ψ as Re(∇²ψ/ψ) + |Im(∇ψ/ψ)|² so |ψ|'s kinks at
        nodes never enter.
        """
        constants = constants or PhysicalConstants()
        if not isinstance(state, ComplexScalarField):
            raise ConfigurationError("The quantum potential is defined for scalar states only")
        grid = state.grid
        psi = state.values
        rho = state.density
        peak = float(np.max(rho))
        if peak == 0.0:
            raise DegenerateFieldError("Quantum potential of an identically zero state is undefined")
        node_mask = rho <= self.settings.NODE_THRESHOLD * peak
        safe = np.where(node_mask, 1.0, psi)
        mesh = grid.mesh()
        hbar_c = constants.hbar * constants.c
        terms = {k: np.zeros(grid.shape) for k in ("laplacian", "a_squared", "div_A", "cross")}
        for axis in range(grid.dim):
            d1 = spectral_derivative(psi, grid, axis) / safe
            d2 = spectral_derivative(psi, grid, axis, order=2) / safe
            terms["laplacian"] += d2.real + d1.imag**2
            if system is SystemKind.TWO_PARTICLE_1D:
                coords = (mesh[axis],)
                e_imag = coupling.imaginary[axis] if coupling.n_particles > 1 else coupling.e_imag
                A = gauge.A_at(coords, t)[0]
                dA = gauge.A[0].partial(0, coords, t)
            else:
                e_imag = coupling.e_imag
                A = gauge.A_at(mesh, t)[axis]
                dA = gauge.A[axis].partial(axis, mesh, t)
            a = e_imag / hbar_c
            terms["a_squared"] += (a * A) ** 2
            terms["div_A"] += a * dA
            terms["cross"] += 2.0 * a * A * d1.real
        total = terms["laplacian"] + terms["a_squared"] + terms["div_A"] + terms["cross"]
        for key in list(terms):
            terms[key] = np.where(node_mask, 0.0, terms[key])
        terms["total"] = np.where(node_mask, 0.0, total)
        terms["node_mask"] = node_mask
        return terms

    def quantum_potential(
        self,
        state: ComplexScalarField,
        gauge: GaugeConfiguration,
        coupling: Coupling,
        t: float = 0.0,
        constants: PhysicalConstants = None,
        masses=(1.0,),
        system: SystemKind = SystemKind.SCHRODINGER_1D,
    ) -> np.ndarray:
        """
        Q = −Σ_j (ħ²/2m_j)·D_j²R/R with D = ∇ + (e_I/ħc)A⃗; zero at masked nodes.
        """
        constants = constants or PhysicalConstants()
        masses = tuple(np.atleast_1d(masses))
        if len(masses) == 1:
            masses = masses * state.grid.dim
        if system is SystemKind.TWO_PARTICLE_1D and masses[0] != masses[1]:
            Q = np.zeros(state.grid.shape)
            for j in range(2):
                single = self._single_axis_potential(state, gauge, coupling, t, constants, j)
                Q += -(constants.hbar**2) / (2.0 * masses[j]) * single
            return Q
        terms = self.quantum_potential_terms(state, gauge, coupling, t, constants, system)
        return -(constants.hbar**2) / (2.0 * masses[0]) * terms["total"]

    def _single_axis_potential(self, state, gauge, coupling, t, constants, axis) -> np.ndarray:
        grid = state.grid
        psi = state.values
        rho = state.density
        node_mask = rho <= self.settings.NODE_THRESHOLD * float(np.max(rho))
        safe = np.where(node_mask, 1.0, psi)
        coords = (grid.mesh()[axis],)
        a = coupling.imaginary[axis] / (constants.hbar * constants.c)
        A = gauge.A_at(coords, t)[0]
        dA = gauge.A[0].partial(0, coords, t)
        d1 = spectral_derivative(psi, grid, axis) / safe
        d2 = spectral_derivative(psi, grid, axis, order=2) / safe
        total = d2.real + d1.imag**2 + (a * A) ** 2 + a * dA + 2.0 * a * A * d1.real
        return np.where(node_mask, 0.0, total)

    def _time_derivative(self, timeline: Timeline, i: int) -> np.ndarray:
        """∂tψ at snapshot i: fourth-order central stencil when possible, else second order."""
        h = timeline.snapshot_spacing
        snaps = timeline.snapshots
        if 2 <= i <= timeline.n_snapshots - 3:
            return (-snaps[i + 2] + 8.0 * snaps[i + 1] - 8.0 * snaps[i - 1] + snaps[i - 2]) / (12.0 * h)
        return (snaps[i + 1] - snaps[i - 1]) / (2.0 * h)

    def hamilton_jacobi_residual(
        self,
        timeline: Timeline,
        t: float,
        gauge: Optional[GaugeConfiguration] = None,
        coupling: Optional[Coupling] = None,
        density_cutoff: Optional[float] = None,
    ) -> float:
        """
        L2 norm of ∂tS + Σ_j(∂_jS − e_jA_j/c)²/2m_j + Σ_j e_jφ_j (+V) − Σ_j(ħ²/2m_j)D_j²R/R.

        ∂tS = ħ·Im(∂tψ/ψ) from snapshot differences. Nodes whose density is
        below `density_cutoff` × max are excluded (default: the node threshold).

        Returns:
            L2 norm over the retained nodes
        """
        H = timeline.hamiltonian
        if timeline.system not in (SystemKind.SCHRODINGER_1D, SystemKind.TWO_PARTICLE_1D):
            raise ConfigurationError("The Hamilton-Jacobi residual is defined for scalar systems only")
        gauge = gauge or H.gauge
        coupling = coupling or H.coupling
        i = self._interior_neighbours(timeline, t)
        grid = timeline.grid
        constants = H.constants
        hbar, c = constants.hbar, constants.c
        state = timeline.snapshot(i)
        psi = state.values
        rho = state.density
        cutoff = self.settings.NODE_THRESHOLD if density_cutoff is None else density_cutoff
        keep = rho > cutoff * float(np.max(rho))
        safe = np.where(keep, psi, 1.0)

        dS_dt = hbar * np.imag(self._time_derivative(timeline, i) / safe)
        grad_S = polar_decompose(state, hbar, node_threshold=cutoff).grad_s_kinetic
        residual = dS_dt.copy()
        mesh = grid.mesh()
        for axis in range(grid.dim):
            m = H.axis_mass(axis)
            if timeline.system is SystemKind.TWO_PARTICLE_1D:
                coords = (mesh[axis],)
                e = coupling.charges[axis] if coupling.n_particles > 1 else coupling.e
                A = gauge.A_at(coords, t)[0]
                phi = gauge.phi_at(coords, t)
            else:
                e = coupling.e
                A = gauge.A_at(mesh, t)[axis]
                phi = gauge.phi_at(mesh, t)
            residual += (grad_S[axis] - e * A / c) ** 2 / (2.0 * m) + e * phi
        if timeline.system is SystemKind.TWO_PARTICLE_1D and gauge.interaction is not None:
            residual += gauge.interaction.evaluate(mesh, t)
        Q = self.quantum_potential(
            state, gauge, coupling, t, constants, H.masses, system=timeline.system
        )
        residual += Q
        residual = np.where(keep, residual, 0.0)
        return l2_norm(residual, grid)

    # --- refinement ---------------------------------------------------------

    def convergence_study(
        self,
        timelines: Sequence[Timeline],
        times: Sequence[float],
        quantities: Sequence[str] = ("continuity", "hamilton_jacobi"),
        density_cutoff: Optional[float] = None,
    ) -> pd.DataFrame:
        """
        Residual norms on a sequence of refined runs and their observed order.

        Each timeline halves the grid spacing and the time step of the one
        before it. The order at level k is log2(r_{k-1}/r_k); level 0 has none.

        Returns:
            One row per (quantity, t, level)
        """
        if len(timelines) < 2:
            raise ConfigurationError("A convergence study needs at least two refinement levels")
        rows: List[Dict] = []
        for quantity in quantities:
            for t in times:
                previous = None
                for level, timeline in enumerate(timelines):
                    degraded = False
                    if quantity == "continuity":
                        _, residual, degraded = self.continuity_residual(timeline, t)
                    elif quantity == "hamilton_jacobi":
                        residual = self.hamilton_jacobi_residual(timeline, t, density_cutoff=density_cutoff)
                    else:
                        raise ConfigurationError(f"Unknown residual '{quantity}'")
                    order = np.nan
                    if previous is not None and previous > 0.0 and residual > 0.0:
                        order = float(np.log2(previous / residual))
                    rows.append({
                        "quantity": quantity,
                        "t": t,
                        "level": level,
                        "points": int(np.prod(timeline.grid.points)),
                        "dt": timeline.dt,
                        "residual": residual,
                        "order": order,
                        "degraded": int(degraded),
                    })
                    previous = residual
                logger.info(f"{quantity} residuals at t={t}: {[r['residual'] for r in rows[-len(timelines):]]}")
        return pd.DataFrame(rows, columns=CONVERGENCE_COLUMNS)

    @staticmethod
    def observed_orders(frame: pd.DataFrame) -> Dict[str, float]:
        """Smallest observed order per quantity across times and levels."""
        finite = frame.dropna(subset=["order"])
        return {q: float(group["order"].min()) for q, group in finite.groupby("quantity")}

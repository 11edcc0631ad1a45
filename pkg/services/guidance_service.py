"""
Guidance service: pilot-wave velocity fields and trajectory integration.

Velocities are built from ħ·Im(ψ*∇ψ) so no phase is ever unwrapped.
Trajectories are integrated with RK4 through velocity fields that are
interpolated cubically in space and linearly in time between snapshots; the
log scale factor ln𝟙 is accumulated alongside with the midpoint rule.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import AppConfig, app_config
from models.errors import ConfigurationError, DegenerateFieldError
from models.fields import (
    ComplexScalarField,
    Coupling,
    GridSpec,
    PhysicalConstants,
    SpinorField,
    State,
    SystemKind,
    Timeline,
    Trajectory,
    TrajectoryBundle,
    VelocityField,
)
from models.gauge_fields import GaugeConfiguration
from services.dynamics_service import HamiltonianOperator
from services.weylscale_service import accumulate_log_scale_step
from utils.grid_utils import PeriodicInterpolator, spectral_derivative

logger = logging.getLogger(__name__)

VelocityProvider = Callable[[Timeline, int], VelocityField]


def cap_velocity(v: np.ndarray, node_mask: np.ndarray, factor: float, limit: Optional[float] = None):
    """Clip speeds at factor × max unmasked speed (and at `limit` if given)."""
    speed = np.sqrt(np.sum(v**2, axis=0))
    unmasked = speed[~node_mask]
    cap = factor * float(np.max(unmasked)) if unmasked.size else 0.0
    if limit is not None:
        cap = min(cap, limit) if cap > 0 else limit
    if cap > 0:
        scale = np.where(speed > cap, cap / np.where(speed > 0, speed, 1.0), 1.0)
        v = v * scale
    return v, cap


class GuidanceService:
    """Service for velocity fields and trajectory integration."""

    def __init__(self, settings: AppConfig = None):
        self.settings = settings or app_config
        self._velocity_cache: Dict[Tuple[int, int], Tuple[Timeline, VelocityProvider, List]] = {}
        self._default_provider: VelocityProvider = self.snapshot_velocity

    # --- velocity fields ----------------------------------------------------

    def _density_and_mask(self, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
        peak = float(np.max(rho))
        if peak == 0.0:
            raise DegenerateFieldError("Velocity field of an identically zero state is undefined")
        node_mask = rho <= self.settings.NODE_THRESHOLD * peak
        # regularised only on masked nodes; elsewhere the velocity divides by ρ itself
        safe = np.where(node_mask, rho + self.settings.NODE_THRESHOLD * peak, rho)
        return node_mask, safe, peak

    @staticmethod
    def _phase_current(components: np.ndarray, grid: GridSpec, hbar: float) -> np.ndarray:
        current = np.zeros((grid.dim,) + grid.shape)
        for psi in components:
            for a in range(grid.dim):
                current[a] += hbar * np.imag(np.conj(psi) * spectral_derivative(psi, grid, a))
        return current

    def velocity_schrodinger(
        self,
        state: ComplexScalarField,
        gauge: GaugeConfiguration,
        coupling: Coupling,
        t: float,
        constants: PhysicalConstants = None,
        mass: float = 1.0,
    ) -> VelocityField:
        """
        v = (ħ·Im(∇ψ/ψ) − eA⃗/c)/m for a single particle.

        Args:
            state: Scalar field on a 1D (or 2D single-particle) grid
            gauge: Gauge fields
            coupling: Coupling; only the real charge enters the velocity
            t: Time at which A is evaluated
            constants: Physical constants
            mass: Particle mass
        """
        constants = constants or PhysicalConstants()
        if not isinstance(state, ComplexScalarField):
            raise ConfigurationError("velocity_schrodinger needs a scalar field")
        grid = state.grid
        rho = state.density
        node_mask, safe, _ = self._density_and_mask(rho)
        current = self._phase_current(state.values[None], grid, constants.hbar)
        A = gauge.A_at(grid.mesh(), t)
        current = current - (coupling.e / constants.c) * A[: grid.dim] * rho
        v, cap = cap_velocity(current / (mass * safe), node_mask, self.settings.VELOCITY_CAP_FACTOR)
        return VelocityField(grid, v, node_mask, t, SystemKind.SCHRODINGER_1D, cap)

    def velocity_two_particle(
        self,
        state: ComplexScalarField,
        gauge: GaugeConfiguration,
        coupling: Coupling,
        t: float,
        constants: PhysicalConstants = None,
        masses: Sequence[float] = (1.0, 1.0),
    ) -> VelocityField:
        """
        v_j = (ħ·Im(∂_jψ/ψ) − e_j A(x_j)/c)/m_j on the (x₁, x₂) configuration grid.
        """
        constants = constants or PhysicalConstants()
        grid = state.grid
        if grid.dim != 2 or not isinstance(state, ComplexScalarField):
            raise ConfigurationError("velocity_two_particle needs a scalar field on a 2D configuration grid")
        if coupling.n_particles == 1:
            coupling = Coupling(coupling.charges * 2, coupling.imaginary * 2)
        if len(masses) == 1:
            masses = tuple(masses) * 2
        rho = state.density
        node_mask, safe, _ = self._density_and_mask(rho)
        current = self._phase_current(state.values[None], grid, constants.hbar)
        mesh = grid.mesh()
        v = np.empty_like(current)
        for j in range(2):
            A_j = gauge.A_at((mesh[j],), t)[0]
            v[j] = (current[j] - (coupling.charges[j] / constants.c) * A_j * rho) / (masses[j] * safe)
        v, cap = cap_velocity(v, node_mask, self.settings.VELOCITY_CAP_FACTOR)
        return VelocityField(grid, v, node_mask, t, SystemKind.TWO_PARTICLE_1D, cap)

    def spin_density(self, state: SpinorField, constants: PhysicalConstants = None) -> np.ndarray:
        """s⃗ = (ħ/2)ψ†σ⃗ψ per node, shape (3, *grid.shape)."""
        hbar = (constants or PhysicalConstants()).hbar
        if not isinstance(state, SpinorField):
            raise ConfigurationError("spin_density needs a two-component spinor")
        up, down = state.values
        cross = np.conj(up) * down
        return np.stack(
            [
                hbar * cross.real,
                hbar * cross.imag,
                0.5 * hbar * (np.abs(up) ** 2 - np.abs(down) ** 2),
            ]
        )

    def spin_current(
        self,
        state: SpinorField,
        gauge: GaugeConfiguration,
        coupling: Coupling,
        t: float,
        constants: PhysicalConstants = None,
    ) -> np.ndarray:
        """In-plane (∇×s⃗ + (2e_I/ħc)A⃗×s⃗), shape (2, *grid.shape)."""
        constants = constants or PhysicalConstants()
        grid = state.grid
        s_z = self.spin_density(state, constants)[2]
        A = gauge.A_at(grid.mesh(), t)
        weyl = 2.0 * coupling.e_imag / (constants.hbar * constants.c)
        return np.stack(
            [
                spectral_derivative(s_z, grid, 1) + weyl * A[1] * s_z,
                -spectral_derivative(s_z, grid, 0) - weyl * A[0] * s_z,
            ]
        )

    def velocity_pauli(
        self,
        state: SpinorField,
        gauge: GaugeConfiguration,
        coupling: Coupling,
        t: float,
        constants: PhysicalConstants = None,
        mass: float = 1.0,
    ) -> VelocityField:
        """
        Pauli velocity with the spin term, on a 2D spatial grid.

        v = [ħΣ_±Im(ψ±*∇ψ±) − (eA⃗/c)ρ + (∇×s⃗ + (2e_I/ħc)A⃗×s⃗)_in-plane]/(mρ).
        """
        constants = constants or PhysicalConstants()
        grid = state.grid
        if not isinstance(state, SpinorField) or grid.dim != 2:
            raise ConfigurationError("velocity_pauli needs a spinor on a 2D grid")
        rho = state.density
        node_mask, safe, _ = self._density_and_mask(rho)
        current = self._phase_current(state.values, grid, constants.hbar)
        A = gauge.A_at(grid.mesh(), t)
        current = current - (coupling.e / constants.c) * A * rho
        current = current + self.spin_current(state, gauge, coupling, t, constants)
        v, cap = cap_velocity(current / (mass * safe), node_mask, self.settings.VELOCITY_CAP_FACTOR)
        return VelocityField(grid, v, node_mask, t, SystemKind.PAULI_2D, cap)

    def velocity_dirac(self, state: SpinorField, t: float, constants: PhysicalConstants = None) -> VelocityField:
        """v = c·ψ†σ_xψ/ψ†ψ, never faster than c."""
        constants = constants or PhysicalConstants()
        if not isinstance(state, SpinorField) or state.grid.dim != 1:
            raise ConfigurationError("velocity_dirac needs a spinor on a 1D grid")
        rho = state.density
        node_mask, safe, _ = self._density_and_mask(rho)
        current = 2.0 * constants.c * np.real(np.conj(state.values[0]) * state.values[1])
        v = np.clip(current / safe, -constants.c, constants.c)[None]
        v, cap = cap_velocity(v, node_mask, self.settings.VELOCITY_CAP_FACTOR, limit=constants.c)
        return VelocityField(state.grid, v, node_mask, t, SystemKind.DIRAC_1P1, cap)

    def velocity(self, state: State, H: HamiltonianOperator, t: Optional[float] = None) -> VelocityField:
        """Velocity field of any supported system, using H's gauge, coupling and masses."""
        t = state.time_label if t is None else t
        if H.system is SystemKind.SCHRODINGER_1D:
            return self.velocity_schrodinger(state, H.gauge, H.coupling, t, H.constants, H.masses[0])
        if H.system is SystemKind.TWO_PARTICLE_1D:
            return self.velocity_two_particle(state, H.gauge, H.coupling, t, H.constants, H.masses)
        if H.system is SystemKind.PAULI_2D:
            return self.velocity_pauli(state, H.gauge, H.coupling, t, H.constants, H.masses[0])
        return self.velocity_dirac(state, t, H.constants)

    def snapshot_velocity(self, timeline: Timeline, i: int) -> VelocityField:
        """Velocity field of snapshot i of a timeline."""
        return self.velocity(timeline.snapshot(i), timeline.hamiltonian)

    # --- trajectories -------------------------------------------------------

    def _snapshot_interpolators(self, timeline: Timeline, provider: VelocityProvider) -> List:
        key = (id(timeline), id(provider))
        cached = self._velocity_cache.get(key)
        # entries hold the timeline and provider so their ids cannot be recycled while cached
        if cached is not None and cached[0] is timeline and cached[1] is provider:
            return cached[2]
        if len(self._velocity_cache) >= 4:
            self._velocity_cache.clear()
        entries: List = [None] * timeline.n_snapshots
        self._velocity_cache[key] = (timeline, provider, entries)
        return entries

    def _field_entry(self, timeline: Timeline, provider: VelocityProvider, entries: List, i: int):
        if entries[i] is None:
            field = provider(timeline, i)
            entries[i] = (PeriodicInterpolator(timeline.grid, field.v), field.node_mask)
        return entries[i]

    def _make_velocity_function(self, timeline: Timeline, provider: VelocityProvider):
        grid = timeline.grid
        entries = self._snapshot_interpolators(timeline, provider)
        n_points = np.array(grid.points)

        def node_flag(mask: np.ndarray, q: np.ndarray) -> np.ndarray:
            idx = np.mod(np.rint((q - grid.lower) / grid.spacing).astype(int), n_points)
            return mask[tuple(idx.T)]

        def velocity_at(q: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray]:
            i, theta = timeline.bracket(t)
            interp, mask = self._field_entry(timeline, provider, entries, i)
            v = interp(q).T
            flags = node_flag(mask, q)
            if theta > 0.0:
                interp2, mask2 = self._field_entry(timeline, provider, entries, i + 1)
                v = (1.0 - theta) * v + theta * interp2(q).T
                flags = flags | node_flag(mask2, q)
            return v, flags

        return velocity_at

    @staticmethod
    def _time_nodes(timeline: Timeline, t_start: float, t_end: float) -> np.ndarray:
        """Snapshot lattice times strictly between t_start and t_end, plus both ends."""
        spacing = timeline.snapshot_spacing
        lo, hi = sorted((t_start, t_end))
        eps = 1e-9 * spacing
        k_lo = int(np.floor((lo - timeline.t0) / spacing + 1e-9)) + 1
        k_hi = int(np.ceil((hi - timeline.t0) / spacing - 1e-9)) - 1
        inner = timeline.t0 + spacing * np.arange(k_lo, k_hi + 1)
        inner = inner[(inner > lo + eps) & (inner < hi - eps)]
        nodes = np.concatenate([[lo], inner, [hi]]) if hi > lo else np.array([lo])
        return nodes if t_end >= t_start else nodes[::-1]

    def _integrate_batch(
        self,
        timeline: Timeline,
        q0: np.ndarray,
        nodes: np.ndarray,
        velocity_at,
        gauge: GaugeConfiguration,
        coupling: Coupling,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        H = timeline.hamiltonian
        constants = H.constants
        grid = timeline.grid
        dx_min = float(np.min(grid.spacing))
        n_nodes, n = len(nodes), q0.shape[0]
        positions = np.empty((n_nodes, n, q0.shape[1]))
        increments = np.zeros((n_nodes, n))
        flagged = np.zeros((n_nodes, n), dtype=bool)
        positions[0] = q0
        q = q0.copy()
        _, flagged[0] = velocity_at(grid.wrap(q), nodes[0])
        max_level = self.settings.MAX_SUBSTEP_LEVELS

        for k in range(n_nodes - 1):
            t, h = nodes[k], nodes[k + 1] - nodes[k]
            k1, flags = velocity_at(grid.wrap(q), t)
            speed = np.sqrt(np.sum(k1**2, axis=1))
            ratio = speed * abs(h) / dx_min
            level = np.zeros(n, dtype=int)
            needs = ratio > 1.0
            level[needs] = np.ceil(np.log(ratio[needs]) / np.log(4.0)).astype(int)
            too_fast = level > max_level
            level = np.minimum(level, max_level)
            step_flags = flags | too_fast
            new_q = q.copy()
            step_inc = np.zeros(n)
            for lvl in np.unique(level):
                sel = level == lvl
                n_sub = 4 ** int(lvl)
                hs = h / n_sub
                qs = q[sel]
                for s in range(n_sub):
                    ts = t + s * hs
                    a, f1 = velocity_at(grid.wrap(qs), ts)
                    b, f2 = velocity_at(grid.wrap(qs + 0.5 * hs * a), ts + 0.5 * hs)
                    c, f3 = velocity_at(grid.wrap(qs + 0.5 * hs * b), ts + 0.5 * hs)
                    d, f4 = velocity_at(grid.wrap(qs + hs * c), ts + hs)
                    qn = qs + hs / 6.0 * (a + 2.0 * b + 2.0 * c + d)
                    step_flags[sel] |= f1 | f2 | f3 | f4
                    step_inc[sel] += accumulate_log_scale_step(
                        np.zeros(qs.shape[0]), gauge, coupling, qs, qn, ts, ts + hs,
                        system=timeline.system, constants=constants, grid=grid,
                    )
                    qs = qn
                new_q[sel] = qs
            q = new_q
            positions[k + 1] = q
            increments[k + 1] = step_inc
            _, end_flags = velocity_at(grid.wrap(q), nodes[k + 1])
            flagged[k + 1] = step_flags | end_flags
        return positions, increments, flagged

    def integrate_trajectories(
        self,
        timeline: Timeline,
        q0: np.ndarray,
        t0: float,
        t1: float,
        gauge: Optional[GaugeConfiguration] = None,
        coupling: Optional[Coupling] = None,
        velocity_provider: Optional[VelocityProvider] = None,
    ) -> TrajectoryBundle:
        """
        Integrate many seeds from t0 to t1 (t1 < t0 integrates backward).

        Samples are returned in increasing time order. ln𝟙 is forward
        consistent and zero at the earlier endpoint.

        Args:
            timeline: Completed propagation run
            q0: Seeds, shape (n, config_dim) or (n,) in 1D
            t0: Start time
            t1: End time
            gauge: Gauge fields for the line integral (defaults to the run's)
            coupling: Coupling for the line integral (defaults to the run's)
            velocity_provider: Callable (timeline, i) -> VelocityField (defaults to the guidance law)

        Returns:
            TrajectoryBundle with wrapped positions
        """
        H = timeline.hamiltonian
        if H is None:
            raise ConfigurationError("Timeline carries no Hamiltonian; cannot integrate trajectories")
        gauge = gauge or H.gauge
        coupling = coupling or H.coupling
        if H.system is SystemKind.TWO_PARTICLE_1D and coupling.n_particles == 1:
            coupling = Coupling(coupling.charges * 2, coupling.imaginary * 2)
        provider = velocity_provider or self._default_provider
        grid = timeline.grid
        cdim = grid.dim
        q0 = np.asarray(q0, dtype=float)
        if q0.ndim == 1:
            q0 = q0[:, None] if cdim == 1 else q0[None, :]
        if q0.shape[1] != cdim:
            raise ConfigurationError(f"Seeds need {cdim} coordinates, got shape {q0.shape}")
        for t in (t0, t1):
            timeline.bracket(t)

        nodes = self._time_nodes(timeline, t0, t1)
        velocity_at = self._make_velocity_function(timeline, provider)
        batch = self.settings.TRAJECTORY_BATCH_SIZE
        chunks = [q0[i : i + batch] for i in range(0, q0.shape[0], batch)]
        if not chunks:
            empty = np.empty((len(nodes), 0, cdim))
            return TrajectoryBundle(
                np.sort(nodes), empty, np.zeros((len(nodes), 0)), np.zeros((len(nodes), 0), bool),
                np.zeros(0, bool), timeline.system.value,
            )

        # prime the velocity cache serially so worker threads only read it
        for i in range(timeline.n_snapshots):
            if nodes.min() - timeline.snapshot_spacing <= timeline.times[i] <= nodes.max() + timeline.snapshot_spacing:
                self._field_entry(timeline, provider, self._snapshot_interpolators(timeline, provider), i)

        def run(chunk):
            return self._integrate_batch(timeline, chunk, nodes, velocity_at, gauge, coupling)

        workers = min(self.settings.threads, len(chunks))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, chunks))
        else:
            results = [run(c) for c in chunks]
        positions = np.concatenate([r[0] for r in results], axis=1)
        increments = np.concatenate([r[1] for r in results], axis=1)
        flagged = np.concatenate([r[2] for r in results], axis=1)

        log_scale = np.cumsum(increments, axis=0)
        if t1 < t0:
            log_scale = log_scale - log_scale[-1]
            nodes, positions, log_scale, flagged = nodes[::-1], positions[::-1], log_scale[::-1], flagged[::-1]
        n_flagged = flagged.sum(axis=0)
        unreliable = n_flagged > self.settings.UNRELIABLE_TRAJECTORY_FRACTION * len(nodes)
        if np.any(unreliable):
            logger.warning(
                f"{int(unreliable.sum())} of {q0.shape[0]} trajectories crossed node regions and are unreliable"
            )
        return TrajectoryBundle(
            times=nodes,
            positions=grid.wrap(positions),
            log_scale=log_scale,
            flagged=flagged,
            unreliable=unreliable,
            system_tag=timeline.system.value,
        )

    def integrate_trajectory(
        self,
        timeline: Timeline,
        q0,
        t0: float,
        t1: float,
        gauge: Optional[GaugeConfiguration] = None,
        coupling: Optional[Coupling] = None,
    ) -> Trajectory:
        """Integrate one trajectory forward from (q0, t0) to t1."""
        if not t1 > t0:
            raise ConfigurationError(f"integrate_trajectory needs t0 < t1, got {t0} >= {t1}")
        q0 = np.atleast_1d(np.asarray(q0, dtype=float))[None, :]
        return self.integrate_trajectories(timeline, q0, t0, t1, gauge, coupling).trajectory(0)

    def backward_trace(
        self,
        timeline: Timeline,
        x,
        t: float,
        gauge: Optional[GaugeConfiguration] = None,
        coupling: Optional[Coupling] = None,
    ) -> Trajectory:
        """
        Trace the flow from (x, t) back to the timeline start.

        The path is returned in increasing time with ln𝟙(t₀) = 0.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
        if abs(t - timeline.t0) <= 1e-12 * max(1.0, abs(t)):
            return Trajectory(
                times=[timeline.t0], positions=timeline.grid.wrap(x), log_scale=[0.0],
                flagged=[False], system_tag=timeline.system.value,
            )
        return self.backward_bundle(timeline, x, t, gauge, coupling).trajectory(0)

    def backward_bundle(
        self,
        timeline: Timeline,
        points: np.ndarray,
        t: float,
        gauge: Optional[GaugeConfiguration] = None,
        coupling: Optional[Coupling] = None,
        velocity_provider: Optional[VelocityProvider] = None,
    ) -> TrajectoryBundle:
        """Backward traces of many points at time t to the timeline start."""
        return self.integrate_trajectories(
            timeline, points, t, timeline.t0, gauge, coupling, velocity_provider
        )

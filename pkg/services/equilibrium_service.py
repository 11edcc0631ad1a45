"""
Equilibrium service: ensembles of configurations carried by the guidance flow,
relative-entropy H-functions and the relaxation and uniqueness experiments.

Grid densities are treated as piecewise constant on node-centred cells, both
for sampling and for coarse-grained cell masses.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import rel_entr

from config.settings import AppConfig, app_config
from models.errors import ConfigurationError, UnsupportedConfigurationError
from models.fields import (
    CoarseGraining,
    DensitySnapshot,
    Ensemble,
    GridSpec,
    SystemKind,
    Timeline,
    VelocityField,
)
from services.guidance_service import GuidanceService, cap_velocity
from services.weylscale_service import WeylScaleService
from utils.grid_utils import PeriodicInterpolator

logger = logging.getLogger(__name__)

DensityLike = Union[DensitySnapshot, Callable[..., np.ndarray]]


@dataclass
class HBootstrap:
    """
    Coarse-grained H with a basic bootstrap interval and the sampling noise
    floor (95% quantile of H̄ for ensembles drawn from ρ_eq itself).
    """

    estimate: float
    lower: float
    upper: float
    noise_floor: float
    confidence: float = 0.95

    @property
    def consistent_with_zero(self) -> bool:
        return self.lower <= 0.0 <= self.upper or self.estimate <= self.noise_floor


@dataclass
class RelaxationConfig:
    timeline: Timeline
    initial_density: DensitySnapshot
    cells: Tuple[int, ...]
    checkpoints: Sequence[float]
    n_samples: int = 10_000
    seed: int = 0
    n_bootstrap: int = 200


@dataclass
class RelaxationResult:
    times: np.ndarray
    h_coarse: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    noise_floor: np.ndarray
    degraded: np.ndarray
    histograms: List[np.ndarray] = field(default_factory=list)

    @property
    def relative_decrease(self) -> float:
        if self.h_coarse[0] <= 0.0:
            return 0.0
        return float(1.0 - self.h_coarse[-1] / self.h_coarse[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": self.times,
                "h_coarse": self.h_coarse,
                "h_lower": self.lower,
                "h_upper": self.upper,
                "noise_floor": self.noise_floor,
                "degraded": self.degraded.astype(int),
            }
        )


@dataclass
class UniquenessReport:
    """Equilibrium densities for the original and modified flows at time t."""

    epsilon: float
    t: float
    rho: DensitySnapshot
    rho_modified: DensitySnapshot
    l1_distance: float
    norm_times: np.ndarray
    norms: np.ndarray
    norms_modified: np.ndarray
    contamination: float
    degraded: bool
    noise_floor: float = 0.0

    @property
    def resolved(self) -> bool:
        """The two flows differ by more than ten times the reconstruction noise."""
        return self.l1_distance > 10.0 * self.noise_floor

    @property
    def norm_drift(self) -> float:
        return float(np.max(np.abs(self.norms - self.norms[0])))

    @property
    def norm_drift_modified(self) -> float:
        return float(np.max(np.abs(self.norms_modified - self.norms_modified[0])))

    def summary(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "t": self.t,
            "l1_distance": self.l1_distance,
            "norm_drift": self.norm_drift,
            "norm_drift_modified": self.norm_drift_modified,
            "contamination": self.contamination,
            "noise_floor": self.noise_floor,
            "resolved": self.resolved,
            "degraded": self.degraded,
        }


def _cell_masses(graining: CoarseGraining, rho: np.ndarray) -> np.ndarray:
    """Cell masses of node-centred piecewise-constant density (boundary nodes split)."""
    averaged = rho
    for axis in range(graining.grid.dim):
        averaged = 0.5 * (averaged + np.roll(averaged, -1, axis=axis))
    return graining.cell_integrals(averaged)


class EquilibriumService:
    """Service for ensembles, H-functions and the equilibrium experiments."""

    def __init__(self, settings: AppConfig = None, guidance: GuidanceService = None,
                 weylscale: WeylScaleService = None):
        self.settings = settings or app_config
        self.guidance = guidance or GuidanceService(self.settings)
        self.weylscale = weylscale or WeylScaleService(self.settings, self.guidance)

    # --- ensembles ----------------------------------------------------------

    def sample_ensemble(
        self,
        density: DensityLike,
        n: int,
        seed: Optional[int] = None,
        grid: Optional[GridSpec] = None,
        t: float = 0.0,
    ) -> Ensemble:
        """
        Draw n configurations from a grid or closed-form density.

        1D uses the inverse CDF over node cells; 2D uses rejection sampling
        with the density maximum as envelope. Deterministic given seed.

        Args:
            density: DensitySnapshot, or a callable of the mesh arrays
            n: Number of samples
            seed: RNG seed
            grid: Grid for closed-form densities
            t: Time label for closed-form densities

        Returns:
            Ensemble; empty and degraded when n = 0
        """
        if isinstance(density, DensitySnapshot):
            grid, rho, t, tag = density.grid, density.rho, density.t, density.method_tag
        else:
            if grid is None:
                raise ConfigurationError("Sampling a closed-form density needs a grid")
            rho, tag = np.asarray(density(*grid.mesh()), dtype=float), "closed_form"
        if np.any(rho < 0) or not np.all(np.isfinite(rho)):
            raise ConfigurationError("Sampling density must be finite and nonnegative")
        warnings: List[str] = []
        if n <= 0:
            warnings.append("empty ensemble requested")
            logger.warning("Empty ensemble requested; statistical operations are undefined")
            return Ensemble(np.empty((0, grid.dim)), t, tag, seed, np.zeros(0, bool), True, warnings)
        if n < self.settings.MIN_ENSEMBLE_SIZE:
            warnings.append(f"n={n} below {self.settings.MIN_ENSEMBLE_SIZE}; statistics are weak")
            logger.warning(f"Ensemble of {n} samples is below the statistical minimum {self.settings.MIN_ENSEMBLE_SIZE}")

        rng = np.random.default_rng(np.random.SeedSequence(seed))
        if grid.dim == 1:
            positions = self._inverse_cdf(grid, rho, n, rng)
        else:
            positions = self._rejection(grid, rho, n, rng)
        logger.debug(f"Sampled {n} configurations from '{tag}' density (seed {seed})")
        return Ensemble(grid.wrap(positions), t, tag, seed, np.zeros(n, bool), False, warnings)

    @staticmethod
    def _inverse_cdf(grid: GridSpec, rho: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(rho)
        if cdf[-1] <= 0.0:
            raise ConfigurationError("Cannot sample from a density with zero mass")
        cdf = cdf / cdf[-1]
        cells = np.searchsorted(cdf, rng.random(n), side="right")
        cells = np.minimum(cells, rho.size - 1)
        offsets = rng.random(n) - 0.5
        return (grid.axes[0][cells] + offsets * grid.spacing[0])[:, None]

    @staticmethod
    def _rejection(grid: GridSpec, rho: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        envelope = float(np.max(rho))
        if envelope <= 0.0:
            raise ConfigurationError("Cannot sample from a density with zero mass")
        accepted: List[np.ndarray] = []
        total = 0
        acceptance = max(float(np.mean(rho)) / envelope, 1e-3)
        points = np.array(grid.points)
        while total < n:
            batch = int(1.2 * (n - total) / acceptance) + 16
            proposals = grid.lower + rng.random((batch, grid.dim)) * grid.lengths
            idx = np.mod(np.rint((proposals - grid.lower) / grid.spacing).astype(int), points)
            keep = rng.random(batch) * envelope < rho[tuple(idx.T)]
            accepted.append(proposals[keep])
            total += int(keep.sum())
        return np.concatenate(accepted)[:n]

    def evolve_ensemble(
        self,
        ensemble: Ensemble,
        timeline: Timeline,
        t1: float,
        velocity_provider=None,
    ) -> Ensemble:
        """
        Transport every configuration along the guidance flow to t1.

        More than 1% unreliable trajectories marks the ensemble degraded.
        """
        if ensemble.size == 0 or abs(t1 - ensemble.t) <= 1e-12:
            return Ensemble(
                ensemble.positions.copy(), t1, ensemble.source_density_tag, ensemble.seed,
                None if ensemble.flagged is None else ensemble.flagged.copy(),
                ensemble.degraded, list(ensemble.warnings),
            )
        bundle = self.guidance.integrate_trajectories(
            timeline, ensemble.positions, ensemble.t, t1, velocity_provider=velocity_provider
        )
        end = bundle.positions[-1] if t1 > ensemble.t else bundle.positions[0]
        previous = ensemble.flagged if ensemble.flagged is not None else np.zeros(ensemble.size, bool)
        flagged = previous | bundle.unreliable
        fraction = float(np.mean(flagged))
        degraded = ensemble.degraded or fraction > self.settings.UNRELIABLE_TRAJECTORY_FRACTION
        warnings = list(ensemble.warnings)
        if degraded and not ensemble.degraded:
            message = f"{fraction:.1%} unreliable trajectories at t={t1}"
            warnings.append(message)
            logger.warning(f"Ensemble degraded: {message}")
        return Ensemble(end, t1, ensemble.source_density_tag, ensemble.seed, flagged, degraded, warnings)

    # --- H-functions --------------------------------------------------------

    def h_function_fine(
        self,
        rho: Union[DensitySnapshot, np.ndarray],
        rho_eq: Union[DensitySnapshot, np.ndarray],
        grid: Optional[GridSpec] = None,
    ) -> float:
        """
        H = ∫ρ ln(ρ/ρ_eq) as a Riemann sum; +inf where ρ > 0 but ρ_eq = 0.
        """
        if isinstance(rho, DensitySnapshot):
            grid = rho.grid
            rho = rho.rho
        if isinstance(rho_eq, DensitySnapshot):
            grid = grid or rho_eq.grid
            rho_eq = rho_eq.rho
        if grid is None:
            raise ConfigurationError("h_function_fine on raw arrays needs a grid")
        violation = (rho > 0) & (rho_eq <= 0)
        if np.any(violation):
            logger.warning(f"Support violation at {int(violation.sum())} nodes: H is infinite")
            return float("inf")
        return float(np.sum(rel_entr(rho, rho_eq)) * grid.cell_volume)

    def h_function_coarse(
        self,
        ensemble: Ensemble,
        rho_eq: DensitySnapshot,
        graining: CoarseGraining,
    ) -> float:
        """H̄ = Σ p̄ ln(p̄/q̄) with p̄ from the ensemble histogram and q̄ from ρ_eq cell masses."""
        if ensemble.size == 0:
            raise ConfigurationError("Coarse-grained H of an empty ensemble is undefined")
        counts = graining.occupancy(ensemble.positions)
        return self._h_from_counts(counts, self._cell_probabilities(rho_eq, graining))

    @staticmethod
    def _cell_probabilities(rho_eq: DensitySnapshot, graining: CoarseGraining) -> np.ndarray:
        q = _cell_masses(graining, rho_eq.rho)
        return q / q.sum()

    @staticmethod
    def _h_from_counts(counts: np.ndarray, q: np.ndarray) -> float:
        p = counts / counts.sum()
        if np.any((p > 0) & (q <= 0)):
            logger.warning("Occupied cell carries no equilibrium mass: H̄ is infinite")
            return float("inf")
        return float(np.sum(rel_entr(p, q)))

    def bootstrap_h_coarse(
        self,
        ensemble: Ensemble,
        rho_eq: DensitySnapshot,
        graining: CoarseGraining,
        n_bootstrap: int = 200,
        seed: Optional[int] = None,
        confidence: float = 0.95,
    ) -> HBootstrap:
        """
        H̄ with a basic bootstrap interval (ensemble resampled with replacement)
        and the multinomial noise floor of an equilibrium ensemble of the same size.
        """
        counts = graining.occupancy(ensemble.positions)
        q = self._cell_probabilities(rho_eq, graining)
        estimate = self._h_from_counts(counts, q)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        n = int(counts.sum())
        p = counts / n
        resampled = np.array([self._h_from_counts(rng.multinomial(n, p), q) for _ in range(n_bootstrap)])
        null = np.array([self._h_from_counts(rng.multinomial(n, q), q) for _ in range(n_bootstrap)])
        alpha = 1.0 - confidence
        lo_q, hi_q = np.quantile(resampled, [alpha / 2, 1 - alpha / 2])
        return HBootstrap(
            estimate=estimate,
            lower=2.0 * estimate - hi_q,
            upper=2.0 * estimate - lo_q,
            noise_floor=float(np.quantile(null, confidence)),
            confidence=confidence,
        )

    def transported_h_function(
        self,
        timeline: Timeline,
        rho0: DensitySnapshot,
        times: Sequence[float],
    ) -> pd.DataFrame:
        """
        Fine-grained H along the flow for a nonequilibrium start ρ₀.

        ρ(x, t) = ρ₀(x₀)·|ψ(x, t)|²/(𝟙²·|ψ(x₀, t₀)|²) with x₀ the backward
        trace of x; ρ_eq is transported the same way from |ψ(x₀, t₀)|².
        """
        grid = timeline.grid
        born0 = timeline.snapshot(0).density
        peak0 = float(np.max(born0))
        rho0_at = PeriodicInterpolator(grid, rho0.rho)
        born0_at = PeriodicInterpolator(grid, born0)
        rows = []
        for t in times:
            if abs(t - timeline.t0) <= 1e-12:
                rows.append({"t": t, "h_fine": self.h_function_fine(rho0.rho, born0, grid)})
                continue
            born_t = timeline.state_at(t).density.ravel()
            bundle = self.guidance.backward_bundle(timeline, grid.node_points(), t)
            x0 = bundle.positions[0]
            start_born = born0_at(x0)
            valid = start_born > self.settings.NODE_THRESHOLD * peak0
            ratio = np.where(valid, born_t * np.exp(-2.0 * bundle.log_scale[-1]) / np.where(valid, start_born, 1.0), 0.0)
            rho = np.maximum(rho0_at(x0), 0.0) * ratio
            rho_eq = np.maximum(start_born, 0.0) * ratio
            h = self.h_function_fine(rho.reshape(grid.shape), rho_eq.reshape(grid.shape), grid)
            rows.append({"t": t, "h_fine": h})
            logger.debug(f"Transported fine-grained H at t={t}: {h:.6g}")
        return pd.DataFrame(rows)

    # --- experiments --------------------------------------------------------

    def relaxation_experiment(self, config: RelaxationConfig) -> RelaxationResult:
        """
        Evolve an ensemble drawn from a nonequilibrium ρ₀ and record H̄ with
        bootstrap bands at each checkpoint.
        """
        timeline = config.timeline
        graining = CoarseGraining(timeline.grid, config.cells)
        checkpoints = sorted(set(float(t) for t in config.checkpoints) | {timeline.t0})
        ensemble = self.sample_ensemble(config.initial_density, config.n_samples, seed=config.seed)
        ensemble.t = timeline.t0
        rows = {k: [] for k in ("h", "lo", "hi", "floor", "degraded")}
        histograms = []
        try:
            for k, t in enumerate(checkpoints):
                ensemble = self.evolve_ensemble(ensemble, timeline, t)
                rho_eq = self.weylscale.conserved_density_grid(timeline, t)
                boot = self.bootstrap_h_coarse(
                    ensemble, rho_eq, graining, config.n_bootstrap, seed=config.seed + k + 1
                )
                rows["h"].append(boot.estimate)
                rows["lo"].append(boot.lower)
                rows["hi"].append(boot.upper)
                rows["floor"].append(boot.noise_floor)
                rows["degraded"].append(ensemble.degraded or rho_eq.degraded)
                histograms.append(graining.occupancy(ensemble.positions).reshape(graining.cells))
                logger.info(f"Relaxation t={t}: H̄ = {boot.estimate:.6g} (noise floor {boot.noise_floor:.3g})")
        except Exception as e:
            logger.error(f"Relaxation experiment failed: {e}")
            raise
        return RelaxationResult(
            times=np.array(checkpoints),
            h_coarse=np.array(rows["h"]),
            lower=np.array(rows["lo"]),
            upper=np.array(rows["hi"]),
            noise_floor=np.array(rows["floor"]),
            degraded=np.array(rows["degraded"], dtype=bool),
            histograms=histograms,
        )

    def modified_velocity_field(self, timeline: Timeline, i: int, epsilon: float) -> VelocityField:
        """
        v + ε/R² for snapshot i, a flow whose extra term has zero divergence of R²v′.

        Only 1D Schrödinger runs with A = 0 admit this closed form.
        """
        H = timeline.hamiltonian
        if H.system is not SystemKind.SCHRODINGER_1D or not H.gauge.vector_potential_is_zero:
            raise UnsupportedConfigurationError(
                "The modified velocity is only implemented for 1D Schrödinger runs with A = 0"
            )
        base = self.guidance.snapshot_velocity(timeline, i)
        if epsilon == 0.0:
            return base
        rho = timeline.snapshot(i).density
        peak = float(np.max(rho))
        extra = epsilon / np.where(base.node_mask, rho + self.settings.NODE_THRESHOLD * peak, rho)
        v, cap = cap_velocity(base.v + extra[None], base.node_mask, self.settings.VELOCITY_CAP_FACTOR)
        return VelocityField(base.grid, v, base.node_mask, base.t, base.system, cap)

    def modified_velocity_provider(self, epsilon: float):
        """Velocity provider (timeline, i) -> modified field, for trajectory integration."""

        def provider(timeline: Timeline, i: int) -> VelocityField:
            return self.modified_velocity_field(timeline, i, epsilon)

        provider.epsilon = epsilon
        return provider

    def reconstruction_noise_floor(
        self, timeline: Timeline, t: float, backward: Optional[DensitySnapshot] = None
    ) -> float:
        """
        L1 distance between the backward-traced and comoving reconstructions of
        the unmodified equilibrium density at t.

        Both rebuild the same field from independent trajectory sets, so their
        spread bounds what the trajectory reconstruction alone can resolve.
        """
        if backward is None:
            backward = self.weylscale.conserved_density_grid(timeline, t, "backward")
        comoving = self.weylscale.conserved_density_grid(timeline, t, "comoving")
        return float(np.sum(np.abs(backward.rho - comoving.rho)) * timeline.grid.cell_volume)

    def uniqueness_experiment(
        self,
        timeline: Timeline,
        epsilon: float,
        t: float,
        norm_times: Optional[Sequence[float]] = None,
    ) -> UniquenessReport:
        """
        Compare ρ_eq[𝒞] and ρ_eq[𝒞′] for the guidance flow and its ε/R² modification.

        Contamination is the ρ-weighted share of flagged nodes; above 5% the
        report is degraded.
        """
        provider = self.modified_velocity_provider(epsilon)
        grid = timeline.grid
        norm_times = sorted(set([timeline.t0, t] + list(norm_times or [])))
        norms, norms_modified = [], []
        rho = rho_mod = None
        try:
            for s in norm_times:
                a = self.weylscale.conserved_density_grid(timeline, s)
                b = self.weylscale.conserved_density_grid(timeline, s, velocity_provider=provider)
                norms.append(a.norm())
                norms_modified.append(b.norm())
                if s == t:
                    rho, rho_mod = a, b
        except Exception as e:
            logger.error(f"Uniqueness experiment at epsilon={epsilon} failed: {e}")
            raise
        l1 = float(np.sum(np.abs(rho.rho - rho_mod.rho)) * grid.cell_volume)
        floor = self.reconstruction_noise_floor(timeline, t, rho)
        flagged = np.zeros(grid.shape, dtype=bool)
        for snapshot in (rho, rho_mod):
            if snapshot.flagged_mask is not None:
                flagged |= snapshot.flagged_mask
        weight = rho.rho + rho_mod.rho
        contamination = float(np.sum(weight[flagged]) / max(np.sum(weight), 1e-300))
        degraded = contamination > self.settings.DEGRADED_SNAPSHOT_FRACTION
        if degraded:
            logger.warning(f"Uniqueness report degraded: {contamination:.1%} of the mass sits on flagged nodes")
        logger.info(f"Uniqueness epsilon={epsilon} at t={t}: L1 distance {l1:.3e} (noise floor {floor:.3e})")
        if epsilon != 0.0 and l1 <= 10.0 * floor:
            logger.warning(f"Uniqueness epsilon={epsilon}: L1 distance is within ten times the noise floor")
        return UniquenessReport(
            epsilon, t, rho, rho_mod, l1, np.array(norm_times), np.array(norms),
            np.array(norms_modified), contamination, degraded, floor,
        )

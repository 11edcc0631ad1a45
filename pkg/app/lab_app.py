"""
Main application class: runs one spec end to end and writes its artifacts.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config.run_spec import (
    ConvergenceExperiment,
    DensityExperiment,
    FiguresExperiment,
    GaugeCheckExperiment,
    RelaxExperiment,
    RunSpec,
    TrajectoryExperiment,
    UniquenessExperiment,
)
from config.settings import AppConfig, app_config
from models.errors import ConfigurationError, DegradedResultError, LabError
from models.fields import DensitySnapshot, GridSpec, ScaleConvention, State, SystemKind, Timeline
from services.data_service import DataService
from services.dynamics_service import DynamicsService, HamiltonianOperator
from services.equilibrium_service import EquilibriumService, RelaxationConfig
from services.gauge_service import GaugeService
from services.guidance_service import GuidanceService
from services.weylscale_service import WeylScaleService
from utils.grid_utils import PeriodicInterpolator
from utils.initial_states import build_initial_state, from_file

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    exit_status: int
    output_dir: str
    summary: Dict = field(default_factory=dict)
    timeline: Optional[Timeline] = None


class PilotWaveLabApp:
    """Main application class for pilot-wave runs."""

    def __init__(self, spec: RunSpec, output_dir: Optional[str] = None, settings: AppConfig = None):
        """Initialize the application with all required services."""
        self.spec = spec
        self.settings = settings or app_config
        self.output_dir = output_dir or spec.output_dir or self.settings.DEFAULT_OUTPUT_DIR
        self.dynamics = DynamicsService(self.settings)
        self.guidance = GuidanceService(self.settings)
        self.weylscale = WeylScaleService(self.settings, self.guidance)
        self.gauge = GaugeService(self.settings, self.dynamics, self.guidance, self.weylscale)
        self.equilibrium = EquilibriumService(self.settings, self.guidance, self.weylscale)
        self.data_service = DataService(self.output_dir, self.settings)
        self.timeline: Optional[Timeline] = None
        self._summary: Dict = {"degraded": []}

    # --- construction -------------------------------------------------------

    def build_hamiltonian(self, grid: Optional[GridSpec] = None) -> HamiltonianOperator:
        spec = self.spec
        return HamiltonianOperator(
            system=spec.system,
            grid=grid or spec.grid_spec(),
            gauge=spec.gauge_configuration(),
            coupling=spec.coupling_constants(),
            constants=spec.physical_constants(),
            masses=tuple(spec.masses),
        )

    def build_initial_state(self, grid: Optional[GridSpec] = None) -> State:
        spec = self.spec
        grid = grid or spec.grid_spec()
        if spec.initial_state.file is not None:
            state = from_file(grid, spec.initial_state.file)
            return state.with_values(state.values, time_label=spec.t0)
        return build_initial_state(
            spec.system, grid, spec.initial_state.family, spec.initial_state.params,
            spec.physical_constants(), spec.masses[0], spec.t0,
        )

    def _flag(self, label: str, degraded: bool) -> None:
        if degraded:
            self._summary["degraded"].append(label)

    def _check_time(self, t: float) -> None:
        if not self.spec.t0 - 1e-12 <= t <= self.spec.t_end + 1e-12:
            raise ConfigurationError(f"Experiment time {t} lies outside [{self.spec.t0}, {self.spec.t_end}]")

    # --- run ----------------------------------------------------------------

    def run(self) -> RunResult:
        """
        Propagate, execute every requested experiment and write the artifacts.

        Returns:
            RunResult with exit status 0 or 4 (degraded results)

        Raises:
            LabError: Configuration (exit 2) or numerical (exit 3) failures,
                after the manifest has recorded the failure
        """
        started = time.perf_counter()
        status = 0
        try:
            H = self.build_hamiltonian()
            initial = self.build_initial_state()
            self.timeline = self.dynamics.propagate(
                initial, H, self.spec.dt, self.spec.n_steps, self.spec.snapshot_stride,
                self.spec.stepper, self.spec.discretization,
            )
            self._write_born_norm()
            for experiment in self.spec.experiments:
                self._run_experiment(experiment)
            if self._summary["degraded"]:
                logger.warning(f"Degraded results: {self._summary['degraded']}")
                if self.spec.degraded_fails:
                    status = DegradedResultError.exit_code
        except LabError as e:
            status = e.exit_code
            self._summary["error"] = str(e)
            if hasattr(e, "step"):
                self._summary["divergence_step"] = e.step
            logger.error(f"Run failed with exit status {status}: {e}")
            self._finish(started, status)
            raise
        self._finish(started, status)
        return RunResult(status, self.output_dir, self._summary, self.timeline)

    def _finish(self, started: float, status: int) -> None:
        self._summary["exit_status"] = status
        self.data_service.write_json("summary", self._summary)
        self.data_service.write_manifest(
            spec_echo=self.spec.echo(),
            convention=ScaleConvention().to_dict(),
            wall_time=time.perf_counter() - started,
            seed=self.spec.seed,
            exit_status=status,
        )

    def _run_experiment(self, experiment) -> None:
        handlers = {
            DensityExperiment: self._density_experiment,
            TrajectoryExperiment: self._trajectory_experiment,
            GaugeCheckExperiment: self._gauge_check_experiment,
            RelaxExperiment: self._relax_experiment,
            UniquenessExperiment: self._uniqueness_experiment,
            ConvergenceExperiment: self._convergence_experiment,
            FiguresExperiment: self.emit_figure_datasets,
        }
        logger.info(f"Running experiment '{experiment.kind}'")
        handlers[type(experiment)](experiment)

    def _metadata(self, **extra) -> Dict[str, str]:
        gauge = self.timeline.hamiltonian.gauge.describe()
        meta = {
            "system": self.spec.system.value,
            "grid": f"{self.spec.grid.extent} x {self.spec.grid.points}",
            "coupling": f"e={self.spec.coupling.e} e_imag={self.spec.coupling.e_imag}",
            "phi": gauge["phi"],
            "A": ",".join(gauge["A"]),
            "line_integral": ScaleConvention().line_integral,
        }
        meta.update({k: str(v) for k, v in extra.items()})
        return meta

    def _write_born_norm(self) -> None:
        timeline = self.timeline
        born = timeline.born_norm
        frame = pd.DataFrame(
            {"step": np.arange(born.size), "t": timeline.step_times, "born_norm": born}
        )
        self.data_service.write_dataset("born_norm", frame, self._metadata())
        self._summary["born_norm"] = {
            "initial": float(born[0]),
            "final": float(born[-1]),
            "min": float(born.min()),
            "max": float(born.max()),
            "max_drift": float(np.max(np.abs(born - born[0]))),
        }

    # --- experiments --------------------------------------------------------

    def _density_experiment(self, experiment: DensityExperiment) -> None:
        rows = []
        for t in experiment.times:
            self._check_time(t)
            for method in experiment.methods:
                snapshot = self.weylscale.conserved_density_grid(self.timeline, t, method)
                rows.append({"t": t, "method": method, "norm": snapshot.norm(), "degraded": int(snapshot.degraded)})
                self._flag(f"density:{method}:t={t}", snapshot.degraded)
        frame = pd.DataFrame(rows, columns=["t", "method", "norm", "degraded"])
        self.data_service.write_dataset("conserved_norm", frame, self._metadata())
        self._summary["conserved_norm"] = rows

    def _trajectory_experiment(self, experiment: TrajectoryExperiment) -> None:
        t_start = self.spec.t0 if experiment.t_start is None else experiment.t_start
        t_end = self.spec.t_end if experiment.t_end is None else experiment.t_end
        for t in (t_start, t_end):
            self._check_time(t)
        bundle = self.guidance.integrate_trajectories(self.timeline, np.array(experiment.seeds), t_start, t_end)
        rows = []
        for i in range(bundle.n_seeds):
            for k, t in enumerate(bundle.times):
                row = {"seed": i, "t": t}
                row.update({f"q{a}": bundle.positions[k, i, a] for a in range(bundle.positions.shape[2])})
                row.update({"ln_one": bundle.log_scale[k, i], "flagged": int(bundle.flagged[k, i])})
                rows.append(row)
        self.data_service.write_dataset("seed_trajectories", pd.DataFrame(rows), self._metadata())
        fraction = bundle.unreliable_fraction
        self._flag("trajectories", fraction > self.settings.DEGRADED_SNAPSHOT_FRACTION)
        self._summary["trajectories"] = {"n_seeds": bundle.n_seeds, "unreliable_fraction": fraction}

    def _gauge_check_experiment(self, experiment: GaugeCheckExperiment) -> None:
        twin = self.gauge.twin_run(self.timeline, experiment.lam, self.spec.stepper, self.spec.discretization)
        H = self.timeline.hamiltonian
        reports = []
        for t in experiment.times:
            self._check_time(t)
            reports.append(self.gauge.check_velocity_invariance(self.timeline, twin, t))
            reports.append(self.gauge.check_density_invariance(self.timeline, twin, experiment.lam, t))
            if experiment.seeds and t > self.timeline.t0:
                reports.append(
                    self.gauge.check_trajectory_invariance(self.timeline, twin, np.array(experiment.seeds), t)
                )
            if self.spec.system in (SystemKind.SCHRODINGER_1D, SystemKind.TWO_PARTICLE_1D):
                reports.append(
                    self.gauge.check_quantum_potential_invariance(
                        self.timeline.state_at(t), H.gauge, experiment.lam, H.coupling, H.constants,
                        H.masses, self.spec.system,
                    )
                )
        initial = self.timeline.snapshot(0)
        reports.append(
            self.gauge.check_inverse_transform(initial, H.gauge, experiment.lam, H.coupling, H.constants, H.system)
        )
        reports.append(
            self.gauge.check_composition(
                initial, H.gauge, experiment.lam, experiment.lam, H.coupling, H.constants, H.system
            )
        )
        frame = pd.DataFrame([r.to_dict() for r in reports])
        frame["degraded"] = frame["degraded"].astype(int)
        transformed = twin.hamiltonian.gauge.describe()
        self.data_service.write_dataset(
            "gauge_check",
            frame,
            self._metadata(lam=experiment.lam, phi_transformed=transformed["phi"], A_transformed=",".join(transformed["A"])),
        )
        for report in reports:
            self._flag(f"gauge_check:{report.quantity}:t={report.t}", report.degraded)
        self._summary["gauge_check"] = [r.to_dict() for r in reports]

    def _relax_experiment(self, experiment: RelaxExperiment) -> None:
        grid = self.timeline.grid
        if experiment.initial_density == "uniform":
            rho0 = np.full(grid.shape, 1.0 / np.prod(grid.lengths))
            initial = DensitySnapshot(grid, rho0, self.timeline.t0, method_tag="uniform")
        else:
            initial = self.weylscale.born_density(self.timeline, self.timeline.t0)
        for t in experiment.checkpoints:
            self._check_time(t)
        result = self.equilibrium.relaxation_experiment(
            RelaxationConfig(
                timeline=self.timeline,
                initial_density=initial,
                cells=tuple(experiment.cells),
                checkpoints=experiment.checkpoints,
                n_samples=experiment.n_samples,
                seed=self.spec.seed,
                n_bootstrap=experiment.n_bootstrap,
            )
        )
        self.data_service.write_dataset("relaxation", result.to_frame(), self._metadata(cells=experiment.cells))
        rows = []
        for t, histogram in zip(result.times, result.histograms):
            rows.extend({"t": t, "cell": c, "count": int(n)} for c, n in enumerate(histogram.ravel()))
        self.data_service.write_dataset("relaxation_histograms", pd.DataFrame(rows), self._metadata())
        for t, degraded in zip(result.times, result.degraded):
            self._flag(f"relax:t={t}", bool(degraded))
        self._summary["relaxation"] = {
            "h_initial": float(result.h_coarse[0]),
            "h_final": float(result.h_coarse[-1]),
            "relative_decrease": result.relative_decrease,
        }

    def _uniqueness_experiment(self, experiment: UniquenessExperiment) -> None:
        self._check_time(experiment.t)
        report = self.equilibrium.uniqueness_experiment(
            self.timeline, experiment.epsilon, experiment.t, experiment.norm_times
        )
        grid = self.timeline.grid
        self.data_service.write_dataset(
            "uniqueness_densities",
            pd.DataFrame({"x": grid.axes[0], "rho": report.rho.rho, "rho_modified": report.rho_modified.rho}),
            self._metadata(epsilon=experiment.epsilon, t=experiment.t),
        )
        self.data_service.write_dataset(
            "uniqueness_norms",
            pd.DataFrame({"t": report.norm_times, "norm": report.norms, "norm_modified": report.norms_modified}),
            self._metadata(epsilon=experiment.epsilon),
        )
        self._flag("uniqueness", report.degraded)
        self._summary["uniqueness"] = report.summary()

    def _convergence_experiment(self, experiment: ConvergenceExperiment) -> None:
        for t in experiment.times:
            self._check_time(t)
        spec = self.spec
        base = self.timeline.grid
        timelines = [self.timeline]
        for level in range(1, experiment.levels):
            factor = 2**level
            grid = GridSpec(extent=base.extent, points=tuple(n * factor for n in base.points))
            logger.info(f"Refinement level {level}: {grid.points} points, dt = {spec.dt / factor}")
            timelines.append(
                self.dynamics.propagate(
                    self.build_initial_state(grid), self.build_hamiltonian(grid), spec.dt / factor,
                    spec.n_steps * factor, spec.snapshot_stride, spec.stepper, spec.discretization,
                )
            )
        frame = self.weylscale.convergence_study(
            timelines, experiment.times, experiment.quantities, experiment.density_cutoff
        )
        self.data_service.write_dataset("convergence", frame, self._metadata(levels=experiment.levels))
        for row in frame.itertuples():
            self._flag(f"convergence:{row.quantity}:t={row.t}:level={row.level}", bool(row.degraded))
        self._summary["convergence"] = {
            "observed_order": self.weylscale.observed_orders(frame),
            "residuals": frame[["quantity", "t", "level", "residual"]].to_dict("records"),
        }

    def emit_figure_datasets(self, experiment: Optional[FiguresExperiment] = None) -> List[str]:
        """
        Write the trajectory fan, scale-factor and density datasets.

        Trajectories cross x ∈ [x_min, x_max] at each requested time and are
        traced back to t₀; 𝟙² and both densities are taken at the crossing
        points. Values are linear.

        Returns:
            Paths of the three written datasets

        Raises:
            ConfigurationError: If no run or no figures experiment is available
        """
        if experiment is None:
            experiment = next((e for e in self.spec.experiments if isinstance(e, FiguresExperiment)), None)
        if experiment is None or self.timeline is None:
            raise ConfigurationError("Figure datasets need a completed run with a 'figures' experiment")
        if self.spec.system is not SystemKind.SCHRODINGER_1D:
            raise ConfigurationError("Figure datasets are defined for schrodinger_1d runs")
        timeline = self.timeline
        x_cross = np.round(np.arange(experiment.x_min, experiment.x_max + 0.5 * experiment.x_step, experiment.x_step), 12)
        traj_rows, scale_rows, density_rows = [], [], []
        trace_id = 0
        for t in experiment.times:
            self._check_time(t)
            born = np.maximum(PeriodicInterpolator(timeline.grid, timeline.state_at(t).density)(x_cross), 0.0)
            if abs(t - timeline.t0) <= 1e-12:
                times = np.array([timeline.t0])
                positions = timeline.grid.wrap(x_cross[:, None])[None]
                log_scale = np.zeros((1, x_cross.size))
            else:
                bundle = self.guidance.backward_bundle(timeline, x_cross[:, None], t)
                targets = np.arange(timeline.t0, t + 1e-9, experiment.sample_every)
                keep = np.unique(np.clip(np.searchsorted(bundle.times, targets - 1e-9), 0, bundle.times.size - 1))
                keep = np.union1d(keep, [bundle.times.size - 1])
                times, positions, log_scale = bundle.times[keep], bundle.positions[keep], bundle.log_scale[keep]
                self._flag(f"figures:t={t}", bundle.unreliable_fraction > self.settings.DEGRADED_SNAPSHOT_FRACTION)
            one_squared = np.exp(2.0 * log_scale[-1])
            for i, x in enumerate(x_cross):
                for k, s in enumerate(times):
                    traj_rows.append((trace_id, t, x, s, positions[k, i, 0], log_scale[k, i]))
                trace_id += 1
            scale_rows.extend(zip(x_cross, np.full(x_cross.size, t), one_squared))
            density_rows.extend(zip(x_cross, np.full(x_cross.size, t), born, born / one_squared))

        meta = self._metadata(preset_times=experiment.times, x_step=experiment.x_step)
        paths = [
            self.data_service.write_dataset(
                "trajectories",
                pd.DataFrame(traj_rows, columns=["trace", "t_cross", "x_cross", "t", "x", "ln_one"]),
                meta,
            ),
            self.data_service.write_dataset(
                "scale_factor", pd.DataFrame(scale_rows, columns=["x", "t", "one_squared"]), meta
            ),
            self.data_service.write_dataset(
                "densities",
                pd.DataFrame(density_rows, columns=["x", "t", "born_density", "conserved_density"]),
                meta,
            ),
        ]
        logger.info(f"Figure datasets written for t = {list(experiment.times)}")
        return paths

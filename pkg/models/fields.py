"""
Domain types shared by every service: units, grids, fields, trajectories,
velocity fields, timelines and ensembles.

Field containers are immutable snapshots: arrays are copied on construction
and marked read-only, so they can be shared across worker threads.
"""
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from models.errors import ConfigurationError


def _frozen_array(values, dtype=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


class SystemKind(str, Enum):
    """Supported quantum systems."""

    SCHRODINGER_1D = "schrodinger_1d"
    TWO_PARTICLE_1D = "two_particle_1d"
    PAULI_2D = "pauli_2d"
    DIRAC_1P1 = "dirac_1p1"

    @property
    def grid_dim(self) -> int:
        return 1 if self in (SystemKind.SCHRODINGER_1D, SystemKind.DIRAC_1P1) else 2

    @property
    def n_components(self) -> int:
        return 2 if self in (SystemKind.PAULI_2D, SystemKind.DIRAC_1P1) else 1

    @property
    def n_particles(self) -> int:
        return 2 if self is SystemKind.TWO_PARTICLE_1D else 1


@dataclass(frozen=True)
class PhysicalConstants:
    """Reduced Planck constant and speed of light (default units ħ = c = 1)."""

    hbar: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if not (self.hbar > 0 and np.isfinite(self.hbar)):
            raise ConfigurationError(f"hbar must be positive, got {self.hbar}")
        if not (self.c > 0 and np.isfinite(self.c)):
            raise ConfigurationError(f"c must be positive, got {self.c}")


@dataclass(frozen=True)
class GridSpec:
    """
    Periodic grid of 1 or 2 axes.

    Axis a covers [extent[a][0], extent[a][1]) with points[a] nodes;
    node j sits at x_min + j*dx. Arrays are laid out with indexing='ij'.
    """

    extent: Tuple[Tuple[float, float], ...]
    points: Tuple[int, ...]
    periodic: bool = True
    min_points: int = 16

    def __post_init__(self):
        extent = tuple((float(lo), float(hi)) for lo, hi in self.extent)
        points = tuple(int(n) for n in self.points)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "points", points)
        if len(extent) not in (1, 2) or len(extent) != len(points):
            raise ConfigurationError(
                f"Grid must have 1 or 2 axes with matching extent/points, got {extent} / {points}"
            )
        for axis, ((lo, hi), n) in enumerate(zip(extent, points)):
            if not hi > lo:
                raise ConfigurationError(f"Grid axis {axis} has non-positive length: [{lo}, {hi})")
            if n < self.min_points or n & (n - 1):
                raise ConfigurationError(
                    f"Grid axis {axis} needs a power of two >= {self.min_points} points, got {n}"
                )
        if not self.periodic:
            raise ConfigurationError("Only periodic grids are supported")

    @classmethod
    def uniform(cls, x_min: float, x_max: float, n: int, dim: int = 1) -> "GridSpec":
        return cls(extent=((x_min, x_max),) * dim, points=(n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.points

    @property
    def lengths(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.extent])

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.extent])

    @property
    def spacing(self) -> np.ndarray:
        return self.lengths / np.array(self.points)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def axes(self) -> List[np.ndarray]:
        return [lo + (hi - lo) / n * np.arange(n) for (lo, hi), n in zip(self.extent, self.points)]

    def mesh(self) -> Tuple[np.ndarray, ...]:
        """Coordinate arrays of shape `self.shape`, one per axis."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def node_points(self) -> np.ndarray:
        """All nodes as an array of shape (n_nodes, dim), C order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def wavenumbers(self, axis: int) -> np.ndarray:
        """Angular wavenumbers 2π·fftfreq along an axis."""
        return 2.0 * np.pi * np.fft.fftfreq(self.points[axis], d=self.spacing[axis])

    def wrap(self, points: np.ndarray) -> np.ndarray:
        """Wrap configuration points of shape (..., dim) into the domain."""
        points = np.asarray(points, dtype=float)
        return self.lower + np.mod(points - self.lower, self.lengths)

    def compatible_with(self, other: "GridSpec") -> bool:
        return self.extent == other.extent and self.points == other.points


@dataclass(frozen=True)
class Coupling:
    """
    Complex gauge coupling e_C = e + i·e_I, one entry per particle.
    """

    charges: Tuple[float, ...] = (0.0,)
    imaginary: Tuple[float, ...] = (0.0,)

    def __post_init__(self):
        charges = tuple(float(e) for e in np.atleast_1d(self.charges))
        imaginary = tuple(float(e) for e in np.atleast_1d(self.imaginary))
        object.__setattr__(self, "charges", charges)
        object.__setattr__(self, "imaginary", imaginary)
        if len(charges) != len(imaginary):
            raise ConfigurationError("Coupling needs one (e, e_I) pair per particle")
        if not all(np.isfinite(charges + imaginary)):
            raise ConfigurationError("Coupling constants must be finite")

    @classmethod
    def single(cls, e: float = 0.0, e_imag: float = 0.0) -> "Coupling":
        return cls(charges=(e,), imaginary=(e_imag,))

    @property
    def n_particles(self) -> int:
        return len(self.charges)

    @property
    def e(self) -> float:
        return self.charges[0]

    @property
    def e_imag(self) -> float:
        return self.imaginary[0]

    def complex(self, j: int = 0) -> complex:
        return complex(self.charges[j], self.imaginary[j])

    @property
    def is_hermitian(self) -> bool:
        return all(e_i == 0.0 for e_i in self.imaginary)


@dataclass(frozen=True, eq=False)
class ComplexScalarField:
    """Complex amplitude ψ sampled on a periodic grid."""

    grid: GridSpec
    values: np.ndarray
    time_label: float = 0.0

    def __post_init__(self):
        values = _frozen_array(self.values, dtype=complex)
        if values.shape != self.grid.shape:
            raise ConfigurationError(
                f"Field shape {values.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("Field values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def n_components(self) -> int:
        return 1

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def born_norm(self) -> float:
        return float(np.sum(self.density) * self.grid.cell_volume)

    def with_values(self, values: np.ndarray, time_label: float = None) -> "ComplexScalarField":
        t = self.time_label if time_label is None else time_label
        return ComplexScalarField(self.grid, values, t)


@dataclass(frozen=True, eq=False)
class SpinorField:
    """
    Two-component spinor on a grid, stored as shape (2, *grid.shape).

    Pauli: (ψ+, ψ−) in the σ_z basis. Dirac 1+1D: the two components of the
    reduced spinor in the representation γ⁰ = σ_z, γ¹ = iσ_y.
    """

    grid: GridSpec
    values: np.ndarray
    time_label: float = 0.0

    def __post_init__(self):
        values = _frozen_array(self.values, dtype=complex)
        if values.shape != (2,) + self.grid.shape:
            raise ConfigurationError(
                f"Spinor shape {values.shape} does not match (2, *{self.grid.shape})"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("Spinor values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def n_components(self) -> int:
        return 2

    @property
    def density(self) -> np.ndarray:
        return np.sum(np.abs(self.values) ** 2, axis=0)

    def born_norm(self) -> float:
        return float(np.sum(self.density) * self.grid.cell_volume)

    def with_values(self, values: np.ndarray, time_label: float = None) -> "SpinorField":
        t = self.time_label if time_label is None else time_label
        return SpinorField(self.grid, values, t)


State = Union[ComplexScalarField, SpinorField]


def make_state(grid: GridSpec, values: np.ndarray, time_label: float = 0.0) -> State:
    """Build a scalar or spinor field depending on the array shape."""
    values = np.asarray(values)
    if values.shape == grid.shape:
        return ComplexScalarField(grid, values, time_label)
    return SpinorField(grid, values, time_label)


@dataclass(frozen=True, eq=False)
class PolarDecomposition:
    """
    R = |ψ| and the kinetic phase gradient ħ·Im(∇ψ/ψ), shape (dim, *grid).

    `node_mask` is True where |ψ|² is below the node threshold; the phase
    gradient there is set to zero and must not be trusted.
    """

    R: np.ndarray
    grad_s_kinetic: np.ndarray
    node_mask: np.ndarray


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Configuration-space velocity, shape (config_dim, *grid.shape)."""

    grid: GridSpec
    v: np.ndarray
    node_mask: np.ndarray
    t: float = 0.0
    system: SystemKind = SystemKind.SCHRODINGER_1D
    cap: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "v", _frozen_array(self.v, dtype=float))
        object.__setattr__(self, "node_mask", _frozen_array(self.node_mask, dtype=bool))

    @property
    def max_speed(self) -> float:
        return float(np.max(np.sqrt(np.sum(self.v**2, axis=0))))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Time-ordered samples (t, q, ln𝟙) of one configuration-space path.

    Positions are wrapped into the periodic domain. `flagged[i]` marks samples
    that crossed a masked node region with capped velocity.
    """

    times: np.ndarray
    positions: np.ndarray
    log_scale: np.ndarray
    flagged: np.ndarray
    system_tag: str = SystemKind.SCHRODINGER_1D.value
    unreliable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen_array(self.times, dtype=float))
        positions = np.array(self.positions, dtype=float)
        if positions.ndim == 1:
            positions = positions[:, None]
        object.__setattr__(self, "positions", _frozen_array(positions))
        object.__setattr__(self, "log_scale", _frozen_array(self.log_scale, dtype=float))
        object.__setattr__(self, "flagged", _frozen_array(self.flagged, dtype=bool))

    @property
    def one_squared(self) -> np.ndarray:
        return np.exp(2.0 * self.log_scale)

    @property
    def start(self) -> np.ndarray:
        return self.positions[0]

    @property
    def end(self) -> np.ndarray:
        return self.positions[-1]


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """
    Many trajectories sharing one time axis.

    positions: (n_times, n_seeds, config_dim); log_scale, flagged: (n_times, n_seeds).
    """

    times: np.ndarray
    positions: np.ndarray
    log_scale: np.ndarray
    flagged: np.ndarray
    unreliable: np.ndarray
    system_tag: str = SystemKind.SCHRODINGER_1D.value

    @property
    def n_seeds(self) -> int:
        return self.positions.shape[1]

    @property
    def unreliable_fraction(self) -> float:
        return float(np.mean(self.unreliable)) if self.n_seeds else 0.0

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            times=self.times,
            positions=self.positions[:, i, :],
            log_scale=self.log_scale[:, i],
            flagged=self.flagged[:, i],
            system_tag=self.system_tag,
            unreliable=bool(self.unreliable[i]),
        )

    def trajectories(self) -> List[Trajectory]:
        return [self.trajectory(i) for i in range(self.n_seeds)]


@dataclass(frozen=True, eq=False)
class DensitySnapshot:
    """
    Nonnegative density on the grid at time t.

    method_tag is 'backward', 'comoving', 'born' or 'ensemble'.
    """

    grid: GridSpec
    rho: np.ndarray
    t: float
    method_tag: str = "backward"
    degraded: bool = False
    flagged_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        rho = _frozen_array(self.rho, dtype=float)
        if rho.shape != self.grid.shape:
            raise ConfigurationError(f"Density shape {rho.shape} does not match grid {self.grid.shape}")
        if np.any(rho < 0):
            raise ConfigurationError("Density must be nonnegative")
        object.__setattr__(self, "rho", rho)

    def norm(self) -> float:
        return float(np.sum(self.rho) * self.grid.cell_volume)


@dataclass
class Timeline:
    """
    Stored state snapshots of one propagation run.

    Snapshots are taken every `stride` steps of size `dt`; snapshot i sits at
    t0 + i*stride*dt. `born_norm` holds ∫|ψ|² after every step (index 0 is the
    initial state).
    """

    grid: GridSpec
    system: SystemKind
    snapshots: np.ndarray
    t0: float
    dt: float
    n_steps: int
    stride: int
    born_norm: np.ndarray
    hamiltonian: object = None

    def __post_init__(self):
        self.snapshots.flags.writeable = False

    @property
    def n_snapshots(self) -> int:
        return self.snapshots.shape[0]

    @property
    def snapshot_spacing(self) -> float:
        return self.stride * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.snapshot_spacing * np.arange(self.n_snapshots)

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    @property
    def step_times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def snapshot(self, i: int) -> State:
        return make_state(self.grid, self.snapshots[i], float(self.times[i]))

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Snapshot index for time t, which must lie on the snapshot lattice."""
        pos = (t - self.t0) / self.snapshot_spacing
        i = int(round(pos))
        if abs(pos - i) > tol or not 0 <= i < self.n_snapshots:
            raise ConfigurationError(f"t = {t} is not a snapshot time of this timeline")
        return i

    def bracket(self, t: float) -> Tuple[int, float]:
        """Snapshot index i and weight θ with t = (1-θ)·t_i + θ·t_{i+1}."""
        pos = (t - self.t0) / self.snapshot_spacing
        if pos < -1e-9 or pos > self.n_snapshots - 1 + 1e-9:
            raise ConfigurationError(f"t = {t} outside timeline [{self.t0}, {self.t_final}]")
        i = int(np.clip(np.floor(pos + 1e-12), 0, max(self.n_snapshots - 2, 0)))
        return i, float(np.clip(pos - i, 0.0, 1.0))

    def state_at(self, t: float) -> State:
        """State at t, linearly interpolated between snapshots off the lattice."""
        i, theta = self.bracket(t)
        if theta == 0.0 or self.n_snapshots == 1:
            return make_state(self.grid, self.snapshots[i], t)
        values = (1.0 - theta) * self.snapshots[i] + theta * self.snapshots[i + 1]
        return make_state(self.grid, values, t)


@dataclass
class Ensemble:
    """Equal-weight configuration points at time t, shape (n, config_dim)."""

    positions: np.ndarray
    t: float
    source_density_tag: str = ""
    seed: Optional[int] = None
    flagged: Optional[np.ndarray] = None
    degraded: bool = False
    warnings: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class CoarseGraining:
    """
    Uniform cells tiling the grid; each cell holds points[a] // cells[a] nodes per axis.
    """

    grid: GridSpec
    cells: Tuple[int, ...]

    def __post_init__(self):
        cells = tuple(int(k) for k in self.cells)
        object.__setattr__(self, "cells", cells)
        if len(cells) != self.grid.dim:
            raise ConfigurationError("Coarse graining needs one cell count per axis")
        for n, k in zip(self.grid.points, cells):
            if k < 1 or n % k or n // k < 4:
                raise ConfigurationError(
                    f"{k} cells cannot tile {n} nodes with at least 4 nodes per cell"
                )

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def edges(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, k + 1) for (lo, hi), k in zip(self.grid.extent, self.cells)]

    def cell_index(self, points: np.ndarray) -> np.ndarray:
        """Flat cell index of configuration points (n, dim)."""
        points = self.grid.wrap(np.atleast_2d(points))
        width = self.grid.lengths / np.array(self.cells)
        idx = np.floor((points - self.grid.lower) / width).astype(int)
        idx = np.minimum(idx, np.array(self.cells) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.cells)

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        if len(points) == 0:
            return np.zeros(self.n_cells, dtype=int)
        return np.bincount(self.cell_index(points), minlength=self.n_cells)

    def cell_integrals(self, values: np.ndarray) -> np.ndarray:
        """Sum of a grid field over each cell times the node volume."""
        blocks = values.reshape(
            tuple(x for k, n in zip(self.cells, self.grid.points) for x in (k, n // k))
        )
        sums = blocks.sum(axis=tuple(range(1, 2 * self.grid.dim, 2)))
        return sums.ravel() * self.grid.cell_volume


@dataclass(frozen=True)
class ScaleConvention:
    """
    Sign and metric conventions for the scale-factor line integral.

    Serialized into every manifest so the conventions cannot drift silently.
    """

    metric_signature: str = "(+,-,-,-)"
    line_integral: str = "A^mu dx_mu = phi*c*dt - A.dx"
    log_scale_increment: str = "d ln(one) = (e_I/(hbar*c)) * (phi*c*dt - A.dx), midpoint rule"
    reference_gauge: str = "one(t0) = 1, Omega_0 = 1 (input state satisfies R(x0) = R_orthodox(x0))"
    gauge_transform: str = (
        "A -> A + grad(lambda); phi -> phi - d(lambda)/d(ct); psi -> psi*exp(i*e_C*lambda/(hbar*c))"
    )
    weyl_rescale: str = "f -> f*exp(-omega*e_I*lambda/(hbar*c))"
    dirac_representation: str = "gamma0 = sigma_z, gamma1 = i*sigma_y (alpha = sigma_x, beta = sigma_z)"

    def to_dict(self) -> Dict[str, str]:
        return asdict(self)

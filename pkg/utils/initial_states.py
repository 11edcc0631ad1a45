"""
Named initial-state families.

Gaussians follow ψ ∝ exp(−(x − x₀)²/(4σ²) + ik₀x) so that σ is the standard
deviation of |ψ|². Every state is normalized to unit Born norm on its grid.
"""
import logging
from typing import Dict, Optional, Sequence

import numpy as np

from models.errors import ConfigurationError
from models.fields import ComplexScalarField, GridSpec, PhysicalConstants, SpinorField, State, SystemKind

logger = logging.getLogger(__name__)


def normalize(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Scale values to unit Born norm (summed over leading components)."""
    norm = float(np.sum(np.abs(values) ** 2) * grid.cell_volume)
    if norm <= 0.0 or not np.isfinite(norm):
        raise ConfigurationError("Initial state has zero or non-finite norm")
    return values / np.sqrt(norm)


def _periodic_offset(x: np.ndarray, center: float, length: float) -> np.ndarray:
    """Minimum-image offset x − center on a periodic axis."""
    d = x - center
    return d - length * np.round(d / length)


def gaussian_profile(x: np.ndarray, x0: float, sigma: float, k0: float, length: float) -> np.ndarray:
    if sigma <= 0:
        raise ConfigurationError(f"Gaussian width must be positive, got {sigma}")
    d = _periodic_offset(x, x0, length)
    return np.exp(-(d**2) / (4.0 * sigma**2) + 1j * k0 * x)


def gaussian(grid: GridSpec, x0: float = 0.0, sigma: float = 1.0, k0: float = 0.0) -> ComplexScalarField:
    """Normalized 1D Gaussian wavepacket."""
    x = grid.axes[0]
    return ComplexScalarField(grid, normalize(gaussian_profile(x, x0, sigma, k0, grid.lengths[0]), grid))


def _mode_wavenumber(grid: GridSpec, axis: int, mode: int) -> float:
    return 2.0 * np.pi * mode / grid.lengths[axis]


def plane_wave(grid: GridSpec, mode: int = 1) -> ComplexScalarField:
    """e^{ikx} with k = 2π·mode/L (periodic on the grid)."""
    k = _mode_wavenumber(grid, 0, mode)
    return ComplexScalarField(grid, normalize(np.exp(1j * k * grid.axes[0]), grid))


def cosine(grid: GridSpec, amplitude: float = 0.5, mode: int = 1, k_mode: int = 0) -> ComplexScalarField:
    """(1 + a·cos(2π·mode·x/L))·e^{ikx}; nodeless for |a| < 1."""
    x = grid.axes[0]
    q = _mode_wavenumber(grid, 0, mode)
    k = _mode_wavenumber(grid, 0, k_mode)
    values = (1.0 + amplitude * np.cos(q * (x - grid.lower[0]))) * np.exp(1j * k * x)
    return ComplexScalarField(grid, normalize(values, grid))


def product_gaussian(
    grid: GridSpec,
    centers: Sequence[float] = (-1.0, 1.0),
    sigmas: Sequence[float] = (1.0, 1.0),
    momenta: Sequence[float] = (0.0, 0.0),
) -> ComplexScalarField:
    """ψ(x₁, x₂) = g₁(x₁)·g₂(x₂) on a two-particle configuration grid."""
    x1, x2 = grid.mesh()
    values = gaussian_profile(x1, centers[0], sigmas[0], momenta[0], grid.lengths[0]) * gaussian_profile(
        x2, centers[1], sigmas[1], momenta[1], grid.lengths[1]
    )
    return ComplexScalarField(grid, normalize(values, grid))


def mode_superposition(
    grid: GridSpec,
    modes: Sequence[Sequence[int]],
    amplitudes: Optional[Sequence[float]] = None,
    seed: Optional[int] = None,
) -> ComplexScalarField:
    """
    Σ c_n·exp(i·k_n·x) over integer mode vectors with seeded random phases.

    Works on 1D and 2D grids; each mode has one integer per axis.
    """
    if not modes:
        raise ConfigurationError("A superposition needs at least one mode")
    rng = np.random.default_rng(seed)
    mesh = grid.mesh()
    amplitudes = amplitudes or [1.0] * len(modes)
    phases = rng.uniform(0.0, 2.0 * np.pi, len(modes))
    values = np.zeros(grid.shape, dtype=complex)
    for mode, amp, phase in zip(modes, amplitudes, phases):
        mode = tuple(np.atleast_1d(mode))
        if len(mode) != grid.dim:
            raise ConfigurationError(f"Mode {mode} needs {grid.dim} integers")
        arg = sum(_mode_wavenumber(grid, a, int(n)) * mesh[a] for a, n in enumerate(mode))
        values += amp * np.exp(1j * (arg + phase))
    return ComplexScalarField(grid, normalize(values, grid))


def spinor_gaussian(
    grid: GridSpec,
    center: Sequence[float] = (0.0, 0.0),
    sigma: float = 1.0,
    momentum: Sequence[float] = (0.0, 0.0),
    spin: Sequence[complex] = (1.0, 0.0),
) -> SpinorField:
    """2D Gaussian times a constant spinor (c₊, c₋) in the σ_z basis."""
    x, y = grid.mesh()
    envelope = gaussian_profile(x, center[0], sigma, momentum[0], grid.lengths[0]) * gaussian_profile(
        y, center[1], sigma, momentum[1], grid.lengths[1]
    )
    values = np.stack([complex(c) * envelope for c in spin])
    return SpinorField(grid, normalize(values, grid))


def dirac_spinor(k: float, constants: PhysicalConstants, mass: float = 1.0) -> np.ndarray:
    """Unit positive-energy spinor ∝ (mc² + E, ħkc) for H = cσ_x p + σ_z mc²."""
    mc2 = mass * constants.c**2
    energy = np.sqrt(mc2**2 + (constants.hbar * k * constants.c) ** 2)
    spinor = np.array([mc2 + energy, constants.hbar * k * constants.c], dtype=complex)
    return spinor / np.linalg.norm(spinor)


def dirac_plane_wave(grid: GridSpec, mode: int = 1, constants: PhysicalConstants = None, mass: float = 1.0) -> SpinorField:
    """Positive-energy Dirac plane wave with k = 2π·mode/L."""
    constants = constants or PhysicalConstants()
    k = _mode_wavenumber(grid, 0, mode)
    spinor = dirac_spinor(k, constants, mass)
    values = spinor[:, None] * np.exp(1j * k * grid.axes[0])[None, :]
    return SpinorField(grid, normalize(values, grid))


def dirac_gaussian(
    grid: GridSpec,
    x0: float = 0.0,
    sigma: float = 1.0,
    k0: float = 0.0,
    constants: PhysicalConstants = None,
    mass: float = 1.0,
) -> SpinorField:
    """Gaussian envelope carrying the positive-energy spinor at k₀."""
    constants = constants or PhysicalConstants()
    spinor = dirac_spinor(k0, constants, mass)
    envelope = gaussian_profile(grid.axes[0], x0, sigma, k0, grid.lengths[0])
    return SpinorField(grid, normalize(spinor[:, None] * envelope[None, :], grid))


def from_file(grid: GridSpec, path: str) -> State:
    """Load complex amplitudes from a .npy file; shape must match the grid."""
    try:
        values = np.load(path)
    except Exception as e:
        logger.error(f"Failed to load initial state from {path}: {e}")
        raise ConfigurationError(f"Cannot load initial state file {path}: {e}") from e
    if values.shape == grid.shape:
        return ComplexScalarField(grid, normalize(values, grid))
    if values.shape == (2,) + grid.shape:
        return SpinorField(grid, normalize(values, grid))
    raise ConfigurationError(f"Initial state of shape {values.shape} does not fit grid {grid.shape}")


FAMILIES = {
    "gaussian": (gaussian, {SystemKind.SCHRODINGER_1D}),
    "plane_wave": (plane_wave, {SystemKind.SCHRODINGER_1D}),
    "cosine": (cosine, {SystemKind.SCHRODINGER_1D}),
    "product_gaussian": (product_gaussian, {SystemKind.TWO_PARTICLE_1D}),
    "superposition": (mode_superposition, {SystemKind.SCHRODINGER_1D, SystemKind.TWO_PARTICLE_1D}),
    "spinor_gaussian": (spinor_gaussian, {SystemKind.PAULI_2D}),
    "dirac_plane_wave": (dirac_plane_wave, {SystemKind.DIRAC_1P1}),
    "dirac_gaussian": (dirac_gaussian, {SystemKind.DIRAC_1P1}),
}


def build_initial_state(
    system: SystemKind,
    grid: GridSpec,
    family: str,
    params: Dict,
    constants: PhysicalConstants = None,
    mass: float = 1.0,
    t0: float = 0.0,
) -> State:
    """
    Build a named initial state for a system, labelled with time t0.

    Raises:
        ConfigurationError: Unknown family, family not valid for the system, or bad parameters
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"Unknown initial-state family '{family}', expected one of {sorted(FAMILIES)}")
    builder, systems = FAMILIES[family]
    if system not in systems:
        raise ConfigurationError(f"Initial state '{family}' is not defined for {system.value}")
    kwargs = dict(params)
    if family.startswith("dirac"):
        kwargs.setdefault("constants", constants or PhysicalConstants())
        kwargs.setdefault("mass", mass)
    try:
        state = builder(grid, **kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Bad parameters for initial state '{family}': {e}") from e
    logger.debug(f"Built '{family}' initial state for {system.value}")
    return state.with_values(state.values, time_label=t0)

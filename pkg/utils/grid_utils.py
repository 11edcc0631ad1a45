"""
Spectral derivatives, periodic interpolation and polar decomposition on
`GridSpec` grids.

Arrays handled here may carry leading batch axes (spinor components, vector
components); the last `grid.dim` axes are always the grid axes.
"""
import logging
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from config.settings import app_config
from models.errors import ConfigurationError, DegenerateFieldError, UnsupportedConfigurationError
from models.fields import ComplexScalarField, GridSpec, PolarDecomposition, SpinorField

logger = logging.getLogger(__name__)

FieldLike = Union[ComplexScalarField, SpinorField, np.ndarray]

# fractional-index distance below which a query counts as sitting on a node
NODE_SNAP_TOLERANCE = 1e-9


def _require_spectral(grid: GridSpec) -> None:
    for n in grid.points:
        if n & (n - 1):
            raise ConfigurationError(f"Spectral derivatives need power-of-two points, got {grid.points}")


def _grid_axis(values: np.ndarray, grid: GridSpec, axis: int) -> int:
    if not 0 <= axis < grid.dim:
        raise ConfigurationError(f"Axis {axis} out of range for a {grid.dim}D grid")
    return values.ndim - grid.dim + axis


def _broadcast_wavenumbers(k: np.ndarray, ndim: int, array_axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[array_axis] = k.size
    return k.reshape(shape)


def spectral_derivative(values: np.ndarray, grid: GridSpec, axis: int, order: int = 1) -> np.ndarray:
    """
    FFT derivative of `values` along a grid axis.

    First derivatives zero the Nyquist mode so that real input gives real
    output; second derivatives keep it.

    Args:
        values: Array whose trailing axes match `grid.shape`
        grid: Periodic grid
        axis: Grid axis (0 = x, 1 = y)
        order: 1 or 2

    Returns:
        Derivative with the dtype family of the input (real in, real out)
    """
    _require_spectral(grid)
    values = np.asarray(values)
    array_axis = _grid_axis(values, grid, axis)
    k = grid.wavenumbers(axis)
    if order == 1:
        multiplier = 1j * k
        multiplier[grid.points[axis] // 2] = 0.0
    elif order == 2:
        multiplier = -(k**2)
    else:
        raise ConfigurationError(f"Unsupported derivative order {order}")
    multiplier = _broadcast_wavenumbers(multiplier, values.ndim, array_axis)
    result = np.fft.ifft(multiplier * np.fft.fft(values, axis=array_axis), axis=array_axis)
    if np.isrealobj(values):
        return result.real
    return result


def spectral_gradient(field: FieldLike, axis: int, grid: Optional[GridSpec] = None):
    """
    ∂/∂x_axis of a field.

    A `ComplexScalarField` in gives a `ComplexScalarField` out; raw arrays
    need `grid` and come back as arrays.
    """
    if isinstance(field, (ComplexScalarField, SpinorField)):
        derivative = spectral_derivative(field.values, field.grid, axis)
        return field.with_values(derivative)
    if grid is None:
        raise ConfigurationError("spectral_gradient on a raw array needs a grid")
    return spectral_derivative(field, grid, axis)


def gradient(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Stacked gradient, shape (dim, *values.shape)."""
    return np.stack([spectral_derivative(values, grid, a) for a in range(grid.dim)])


def divergence(vector: np.ndarray, grid: GridSpec) -> np.ndarray:
    """∇·F for F of shape (dim, *grid.shape)."""
    return sum(spectral_derivative(vector[a], grid, a) for a in range(grid.dim))


def spectral_laplacian(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    return sum(spectral_derivative(values, grid, a, order=2) for a in range(grid.dim))


def grid_integral(values: np.ndarray, grid: GridSpec) -> float:
    """Riemann sum over the trailing grid axes times the cell volume."""
    return float(np.sum(values) * grid.cell_volume)


def l2_norm(values: np.ndarray, grid: GridSpec, mask: Optional[np.ndarray] = None) -> float:
    """Grid L2 norm sqrt(∫|f|²), optionally restricted to mask=True nodes."""
    sq = np.abs(values) ** 2
    if mask is not None:
        sq = np.where(mask, sq, 0.0)
    return float(np.sqrt(np.sum(sq) * grid.cell_volume))


class PeriodicInterpolator:
    """
    Interpolant of a (possibly batched) grid field at arbitrary points.

    method='cubic' uses periodic cubic B-splines (bicubic in 2D) whose
    coefficients are computed once; method='fourier' (1D only) evaluates the
    band-limited trigonometric interpolant. Queries that land on nodes return
    the stored values exactly.
    """

    def __init__(self, grid: GridSpec, values: np.ndarray, method: str = "cubic"):
        self.grid = grid
        self.method = method
        self.values = np.asarray(values)
        self.batch_shape = self.values.shape[: self.values.ndim - grid.dim]
        if self.values.shape[self.values.ndim - grid.dim :] != grid.shape:
            raise ConfigurationError(
                f"Values of shape {self.values.shape} do not end with grid shape {grid.shape}"
            )
        self._is_complex = np.iscomplexobj(self.values)
        flat = self.values.reshape((-1,) + grid.shape)
        if method == "cubic":
            parts = [flat.real, flat.imag] if self._is_complex else [flat]
            self._coefficients = [
                np.stack([ndimage.spline_filter(p[i], order=3, mode="grid-wrap") for i in range(p.shape[0])])
                for p in parts
            ]
        elif method == "fourier":
            if grid.dim != 1:
                raise UnsupportedConfigurationError("Fourier interpolation is only offered on 1D grids")
            self._spectrum = np.fft.fft(flat, axis=-1)
        else:
            raise ConfigurationError(f"Unknown interpolation method '{method}'")

    def _fractional_index(self, points: np.ndarray) -> np.ndarray:
        u = (points - self.grid.lower) / self.grid.spacing
        return np.mod(u, np.array(self.grid.points))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """
        Evaluate at points of shape (n, dim) (or (n,) in 1D).

        Returns:
            Array of shape (*batch_shape, n)
        """
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        n = points.shape[0]
        flat_batch = int(np.prod(self.batch_shape)) if self.batch_shape else 1
        dtype = complex if self._is_complex else float
        out = np.empty((flat_batch, n), dtype=dtype)
        if n == 0:
            return out.reshape(self.batch_shape + (0,))

        u = self._fractional_index(points)
        nearest = np.rint(u)
        on_node = np.all(np.abs(u - nearest) <= NODE_SNAP_TOLERANCE, axis=1)
        flat_values = self.values.reshape((flat_batch,) + self.grid.shape)
        if np.any(on_node):
            idx = np.mod(nearest[on_node].astype(int), np.array(self.grid.points))
            out[:, on_node] = flat_values[(slice(None),) + tuple(idx.T)]
        off = ~on_node
        if np.any(off):
            if self.method == "cubic":
                out[:, off] = self._cubic(u[off])
            else:
                out[:, off] = self._fourier(points[off, 0])
        return out.reshape(self.batch_shape + (n,))

    def _cubic(self, u: np.ndarray) -> np.ndarray:
        coords = u.T
        parts = []
        for coefficients in self._coefficients:
            parts.append(
                np.stack(
                    [
                        ndimage.map_coordinates(c, coords, order=3, mode="grid-wrap", prefilter=False)
                        for c in coefficients
                    ]
                )
            )
        if self._is_complex:
            return parts[0] + 1j * parts[1]
        return parts[0]

    def _fourier(self, x: np.ndarray) -> np.ndarray:
        n = self.grid.points[0]
        k = self.grid.wavenumbers(0)
        phase = np.exp(1j * np.outer(x - self.grid.lower[0], k))
        # Nyquist mode is split evenly between ±k so real data stays real
        phase[:, n // 2] = np.cos(k[n // 2] * (x - self.grid.lower[0]))
        result = self._spectrum @ phase.T / n
        if not self._is_complex:
            return result.real
        return result


def interpolate(field: FieldLike, points: np.ndarray, grid: Optional[GridSpec] = None, method: str = "cubic"):
    """
    One-shot interpolation of a field at wrapped points.

    Repeated queries on the same field should build a `PeriodicInterpolator`.
    """
    if isinstance(field, (ComplexScalarField, SpinorField)):
        grid, values = field.grid, field.values
    else:
        if grid is None:
            raise ConfigurationError("interpolate on a raw array needs a grid")
        values = field
    return PeriodicInterpolator(grid, values, method)(points)


def polar_decompose(
    field: Union[ComplexScalarField, SpinorField],
    hbar: float = 1.0,
    node_threshold: Optional[float] = None,
) -> PolarDecomposition:
    """
    R = |ψ| and ħ·Im(ψ*∇ψ)/|ψ|² without phase unwrapping.

    For spinors R² = Σ_c |ψ_c|² and the phase gradient sums the component
    currents.

    Raises:
        DegenerateFieldError: If the field vanishes identically
    """
    threshold = app_config.NODE_THRESHOLD if node_threshold is None else node_threshold
    grid = field.grid
    values = field.values
    rho = field.density
    peak = float(np.max(rho))
    if peak == 0.0:
        raise DegenerateFieldError("Cannot decompose an identically zero field")
    node_mask = rho <= threshold * peak

    components = values if isinstance(field, SpinorField) else values[None]
    current = np.zeros((grid.dim,) + grid.shape)
    for psi in components:
        for a in range(grid.dim):
            current[a] += np.imag(np.conj(psi) * spectral_gradient(psi, a, grid))
    safe_rho = np.where(node_mask, 1.0, rho)
    grad_s = np.where(node_mask, 0.0, hbar * current / safe_rho)
    return PolarDecomposition(R=np.sqrt(rho), grad_s_kinetic=grad_s, node_mask=node_mask)


def fill_masked(values: np.ndarray, mask: np.ndarray, grid: GridSpec) -> np.ndarray:
    """
    Replace masked nodes by values interpolated from unmasked neighbours.

    1D uses periodic linear interpolation; 2D takes the nearest unmasked node.
    """
    if not np.any(mask):
        return values
    if np.all(mask):
        return values
    if grid.dim == 1:
        x = grid.axes[0]
        good = ~mask
        filled = values.copy()
        filled[mask] = np.interp(x[mask], x[good], values[good], period=grid.lengths[0])
        return filled
    _, indices = ndimage.distance_transform_edt(mask, return_indices=True)
    return values[tuple(indices)]

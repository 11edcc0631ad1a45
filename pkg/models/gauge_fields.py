"""
Electromagnetic potentials and gauge functions.

Scalar functions are evaluated on coordinate tuples `(x,)` or `(x, y)` of
broadcastable arrays at time `t`. Expression-backed functions have exact
symbolic partial derivatives; tabulated ones use spectral derivatives of the
table and periodic interpolation.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import ConfigurationError
from models.fields import GridSpec, PhysicalConstants
from utils.expression_parser import PotentialExpr, parse_expression
from utils import expression_parser as ep
from utils.grid_utils import PeriodicInterpolator, gradient

logger = logging.getLogger(__name__)

Coords = Sequence[np.ndarray]
COORD_NAMES = ("x", "y")


class ScalarFunction(ABC):
    """Real function of (x⃗, t)."""

    @abstractmethod
    def evaluate(self, coords: Coords, t) -> np.ndarray:
        ...

    @abstractmethod
    def partial(self, axis: int, coords: Coords, t) -> np.ndarray:
        """∂/∂x_axis."""

    @abstractmethod
    def time_derivative(self, coords: Coords, t) -> np.ndarray:
        ...

    @property
    def depends_on_time(self) -> bool:
        return True

    def is_zero(self) -> bool:
        return False

    def __call__(self, coords: Coords, t=0.0) -> np.ndarray:
        return self.evaluate(coords, t)


def _env(coords: Coords, t) -> dict:
    env = {name: np.asarray(c, dtype=float) for name, c in zip(COORD_NAMES, coords)}
    env["t"] = t
    return env


def _broadcast(value, coords: Coords) -> np.ndarray:
    shape = np.broadcast_shapes(*(np.shape(c) for c in coords)) if coords else ()
    return np.broadcast_to(np.asarray(value, dtype=float), shape).astype(float)


class ExpressionFunction(ScalarFunction):
    """Scalar function given by a parsed expression in x, y, t."""

    def __init__(self, expr: Union[str, PotentialExpr]):
        self.expr = parse_expression(expr) if isinstance(expr, str) else expr
        self._partials = {}

    def _derivative(self, var: str) -> PotentialExpr:
        if var not in self._partials:
            self._partials[var] = self.expr.derivative(var)
        return self._partials[var]

    def evaluate(self, coords: Coords, t) -> np.ndarray:
        self._check_coords(coords)
        return _broadcast(self.expr.evaluate(**_env(coords, t)), coords)

    def partial(self, axis: int, coords: Coords, t) -> np.ndarray:
        self._check_coords(coords)
        return _broadcast(self._derivative(COORD_NAMES[axis]).evaluate(**_env(coords, t)), coords)

    def time_derivative(self, coords: Coords, t) -> np.ndarray:
        return _broadcast(self._derivative("t").evaluate(**_env(coords, t)), coords)

    def _check_coords(self, coords: Coords) -> None:
        if "y" in self.expr.variables and len(coords) < 2:
            raise ConfigurationError(f"Expression '{self.expr.source}' uses y on a 1D domain")

    @property
    def depends_on_time(self) -> bool:
        return "t" in self.expr.variables

    def is_zero(self) -> bool:
        return self.expr.is_zero()

    def describe(self) -> str:
        return self.expr.canonical

    def derivative_expression(self, var: str) -> PotentialExpr:
        return self._derivative(var)


class TabulatedFunction(ScalarFunction):
    """
    Grid-tabulated function, optionally time-dependent.

    `values` has shape grid.shape (static) or (len(times), *grid.shape);
    time dependence is linear between table times and constant outside.
    """

    def __init__(
        self,
        grid: GridSpec,
        values: np.ndarray,
        times: Optional[Sequence[float]] = None,
        source: Optional[str] = None,
    ):
        values = np.asarray(values, dtype=float)
        if times is None:
            values = values[None]
            times = [0.0]
        times = np.asarray(times, dtype=float)
        if values.shape != (len(times),) + grid.shape:
            raise ConfigurationError(
                f"Tabulated values of shape {values.shape} do not match {len(times)} x {grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("Tabulated potential contains non-finite values")
        if np.any(np.diff(times) <= 0):
            raise ConfigurationError("Tabulated potential times must be strictly increasing")
        self.grid = grid
        self.times = times
        self.values = values
        self.source = source
        self._value_interp = [PeriodicInterpolator(grid, v) for v in values]
        self._grad_interp = [PeriodicInterpolator(grid, gradient(v, grid)) for v in values]

    def _bracket(self, t: float) -> Tuple[int, float]:
        if len(self.times) == 1 or t <= self.times[0]:
            return 0, 0.0
        if t >= self.times[-1]:
            return len(self.times) - 1, 0.0
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        return i, float((t - self.times[i]) / (self.times[i + 1] - self.times[i]))

    def _query(self, interps, coords: Coords, t) -> np.ndarray:
        arrays = np.broadcast_arrays(*[np.asarray(c, dtype=float) for c in coords])
        shape = arrays[0].shape
        points = np.stack([a.ravel() for a in arrays], axis=-1)
        i, theta = self._bracket(float(t))
        result = interps[i](points)
        if theta > 0.0:
            result = (1.0 - theta) * result + theta * interps[i + 1](points)
        return result.reshape(result.shape[:-1] + shape)

    def evaluate(self, coords: Coords, t) -> np.ndarray:
        return self._query(self._value_interp, coords, t)

    def partial(self, axis: int, coords: Coords, t) -> np.ndarray:
        return self._query(self._grad_interp, coords, t)[axis]

    def time_derivative(self, coords: Coords, t) -> np.ndarray:
        i, theta = self._bracket(float(t))
        if len(self.times) == 1 or (theta == 0.0 and i == len(self.times) - 1):
            return np.zeros(np.broadcast_shapes(*(np.shape(c) for c in coords)))
        rate = (self.values[i + 1] - self.values[i]) / (self.times[i + 1] - self.times[i])
        arrays = np.broadcast_arrays(*[np.asarray(c, dtype=float) for c in coords])
        points = np.stack([a.ravel() for a in arrays], axis=-1)
        return PeriodicInterpolator(self.grid, rate)(points).reshape(arrays[0].shape)

    @property
    def depends_on_time(self) -> bool:
        return len(self.times) > 1

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def describe(self) -> str:
        if self.source is not None:
            return f"table({self.source})"
        return f"table{self.values.shape}"


class LinearCombination(ScalarFunction):
    """Σ_i w_i·f_i, used for transformed potentials of tabulated inputs."""

    def __init__(self, terms: Sequence[Tuple[float, ScalarFunction]]):
        self.terms = [(float(w), f) for w, f in terms if w != 0.0 and not f.is_zero()]

    def evaluate(self, coords: Coords, t) -> np.ndarray:
        return sum((w * f.evaluate(coords, t) for w, f in self.terms), _broadcast(0.0, coords))

    def partial(self, axis: int, coords: Coords, t) -> np.ndarray:
        return sum((w * f.partial(axis, coords, t) for w, f in self.terms), _broadcast(0.0, coords))

    def time_derivative(self, coords: Coords, t) -> np.ndarray:
        return sum((w * f.time_derivative(coords, t) for w, f in self.terms), _broadcast(0.0, coords))

    @property
    def depends_on_time(self) -> bool:
        return any(f.depends_on_time for _, f in self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def describe(self) -> str:
        return " + ".join(f"{w}*({f.describe()})" for w, f in self.terms) or "0"


def scalar_function(value: Union[str, float, int, ScalarFunction, PotentialExpr]) -> ScalarFunction:
    """Coerce strings, numbers and parsed expressions to a ScalarFunction."""
    if isinstance(value, ScalarFunction):
        return value
    if isinstance(value, (int, float)):
        return ExpressionFunction(repr(float(value)))
    return ExpressionFunction(value)


def load_table(path: str, grid: GridSpec, times: Optional[Sequence[float]] = None) -> TabulatedFunction:
    """
    Load a tabulated potential from a .npy file.

    The array has shape grid.shape, or (len(times), *grid.shape) when table
    times are given.
    """
    try:
        values = np.load(path)
    except Exception as e:
        logger.error(f"Failed to load potential table from {path}: {e}")
        raise ConfigurationError(f"Cannot load potential table {path}: {e}") from e
    logger.debug(f"Loaded potential table {path} with shape {values.shape}")
    return TabulatedFunction(grid, values, times, source=path)

def add_scaled(
    base: ScalarFunction, scale: float, other: ExpressionFunction, other_axis: Optional[int]
) -> ScalarFunction:
    """
    base + scale·∂other, where ∂ is ∂/∂x_axis or ∂/∂t for axis None.

    Expression inputs stay expressions so transformed potentials remain
    printable.
    """
    if scale == 0.0 or other.is_zero():
        return base
    var = "t" if other_axis is None else COORD_NAMES[other_axis]
    d_other = other.derivative_expression(var)
    if isinstance(base, ExpressionFunction):
        node = ep.fold_add(base.expr.ast, ep.fold_mul(ep.Number(float(scale)), d_other.ast))
        return ExpressionFunction(PotentialExpr.from_ast(node))
    return LinearCombination([(1.0, base), (scale, ExpressionFunction(d_other))])


@dataclass(frozen=True)
class GaugeConfiguration:
    """
    Scalar potential φ, vector potential A⃗ (one component per spatial axis),
    an optional explicit B_z override (Pauli only) and an optional real
    interaction potential V(x, y) (two particles only).
    """

    phi: ScalarFunction
    A: Tuple[ScalarFunction, ...]
    b_z: Optional[ScalarFunction] = None
    interaction: Optional[ScalarFunction] = None

    def __post_init__(self):
        object.__setattr__(self, "A", tuple(self.A))
        if len(self.A) not in (1, 2):
            raise ConfigurationError(f"Vector potential needs 1 or 2 components, got {len(self.A)}")

    @classmethod
    def from_expressions(
        cls,
        phi: Union[str, float, ScalarFunction] = "0",
        A: Sequence[Union[str, float, ScalarFunction]] = ("0",),
        b_z: Optional[Union[str, float]] = None,
        interaction: Optional[Union[str, float]] = None,
    ) -> "GaugeConfiguration":
        return cls(
            phi=scalar_function(phi),
            A=tuple(scalar_function(a) for a in A),
            b_z=None if b_z is None else scalar_function(b_z),
            interaction=None if interaction is None else scalar_function(interaction),
        )

    @property
    def spatial_dim(self) -> int:
        return len(self.A)

    @property
    def vector_potential_is_zero(self) -> bool:
        return all(a.is_zero() for a in self.A)

    @property
    def depends_on_time(self) -> bool:
        parts = [self.phi, *self.A] + [f for f in (self.b_z, self.interaction) if f is not None]
        return any(f.depends_on_time for f in parts)

    def phi_at(self, coords: Coords, t) -> np.ndarray:
        return self.phi.evaluate(coords, t)

    def A_at(self, coords: Coords, t) -> np.ndarray:
        """Vector potential, shape (spatial_dim, *broadcast shape)."""
        return np.stack([a.evaluate(coords, t) for a in self.A])

    def magnetic_field(self, coords: Coords, t) -> np.ndarray:
        """B_z: the explicit override when given, else ∂xA_y − ∂yA_x."""
        if self.b_z is not None:
            return self.b_z.evaluate(coords, t)
        if self.spatial_dim < 2:
            return _broadcast(0.0, coords)
        return self.A[1].partial(0, coords, t) - self.A[0].partial(1, coords, t)

    def describe(self) -> dict:
        out = {"phi": self.phi.describe(), "A": [a.describe() for a in self.A]}
        if self.b_z is not None:
            out["b_z"] = self.b_z.describe()
        if self.interaction is not None:
            out["interaction"] = self.interaction.describe()
        return out


class GaugeFunction:
    """
    Gauge function λ(x⃗, t) given as an expression, with exact partials.

    λ and ∇λ must be periodic on the grid so that transformed fields stay on
    the same periodic domain.
    """

    def __init__(self, expr: Union[str, PotentialExpr, float, int]):
        if isinstance(expr, (int, float)):
            expr = repr(float(expr))
        self.function = ExpressionFunction(expr)

    @property
    def expr(self) -> PotentialExpr:
        return self.function.expr

    def __repr__(self) -> str:
        return f"GaugeFunction({self.expr.canonical!r})"

    def value(self, coords: Coords, t) -> np.ndarray:
        return self.function.evaluate(coords, t)

    def gradient(self, coords: Coords, t) -> np.ndarray:
        return np.stack([self.function.partial(a, coords, t) for a in range(len(coords))])

    def time_derivative(self, coords: Coords, t) -> np.ndarray:
        return self.function.time_derivative(coords, t)

    def is_zero(self) -> bool:
        return self.function.is_zero()

    def negated(self) -> "GaugeFunction":
        return GaugeFunction(PotentialExpr.from_ast(ep.fold_neg(self.expr.ast)))

    def plus(self, other: "GaugeFunction") -> "GaugeFunction":
        return GaugeFunction(PotentialExpr.from_ast(ep.BinaryOp("+", self.expr.ast, other.expr.ast)))

    def check_periodic(self, grid: GridSpec, times: Sequence[float] = (0.0,), tol: float = 1e-9) -> None:
        """
        Raise ConfigurationError unless λ and ∇λ agree on opposite faces of the domain.
        """
        for t in times:
            for axis in range(grid.dim):
                lo, hi = grid.extent[axis]
                faces = []
                for edge in (lo, hi):
                    coords = []
                    for a in range(grid.dim):
                        if a == axis:
                            coords.append(np.full(8 if grid.dim > 1 else 1, edge))
                        else:
                            olo, ohi = grid.extent[a]
                            coords.append(np.linspace(olo, ohi, 8, endpoint=False))
                    faces.append(
                        np.concatenate([np.atleast_1d(self.value(coords, t))]
                                       + [np.atleast_1d(g) for g in self.gradient(coords, t)])
                    )
                scale = 1.0 + float(np.max(np.abs(faces[0])))
                if np.max(np.abs(faces[0] - faces[1])) > tol * scale:
                    raise ConfigurationError(
                        f"Gauge function {self.expr.canonical!r} is not periodic along axis {axis} at t = {t}"
                    )


def transform_gauge(gauge: GaugeConfiguration, lam: GaugeFunction, constants: PhysicalConstants) -> GaugeConfiguration:
    """A⃗ → A⃗ + ∇λ, φ → φ − ∂λ/∂(ct); an explicit B_z override is gauge invariant."""
    new_A = tuple(add_scaled(a, 1.0, lam.function, axis) for axis, a in enumerate(gauge.A))
    new_phi = add_scaled(gauge.phi, -1.0 / constants.c, lam.function, None)
    return GaugeConfiguration(phi=new_phi, A=new_A, b_z=gauge.b_z, interaction=gauge.interaction)

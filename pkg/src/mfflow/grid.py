"""Uniform 1-D grids, grid functions, trapezoid quadrature and finite differences.

Every density, direction and kernel column in the package lives on a
:class:`Grid1D`.  Quadrature is the trapezoid rule; its weights coincide
with the control volumes of the flux-form solver, which is what makes the
discrete mass exactly conserved.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class GridMismatchError(ValueError):
    """Two grid objects that must coincide do not."""


class UnsupportedOrderError(ValueError):
    pass


class OffMeshError(ValueError):
    """A requested time is not a node of the time mesh."""


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        if self.n_points < 3:
            raise ValueError(f"n_points must be >= 3, got {self.n_points}")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.x_min + self.dx * np.arange(self.n_points)
        x.flags.writeable = False
        return x

    @cached_property
    def midpoints(self) -> np.ndarray:
        x = self.nodes[:-1] + 0.5 * self.dx
        x.flags.writeable = False
        return x

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights (= control-volume widths of the flux scheme)."""
        w = np.full(self.n_points, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        w.flags.writeable = False
        return w

    def refined(self) -> "Grid1D":
        """Same interval, spacing halved."""
        return Grid1D(self.x_min, self.x_max, 2 * self.n_points - 1)

    def sample(self, fn) -> "GridFunction":
        return GridFunction(self, np.asarray(fn(self.nodes), dtype=float))

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.n_points))


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GridFunction:
    """A real function sampled at the nodes of a grid."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(
                f"values has shape {vals.shape}, expected ({self.grid.n_points},)"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", vals)

    def _other(self, other):
        if isinstance(other, GridFunction):
            _check_same_grid(self.grid, other.grid)
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return GridFunction(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return GridFunction(self.grid, self.values / self._other(other))

    def __neg__(self):
        return GridFunction(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class DensityPath:
    """Slices ``m(s_j, .)`` at the nodes ``s_j = t0 + j*dt`` of a uniform time mesh."""

    grid: Grid1D
    t0: float
    t1: float
    n_steps: int
    slices: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = _frozen(self.slices)
        if arr.shape != (self.n_steps + 1, self.grid.n_points):
            raise ValueError(
                f"slices has shape {arr.shape}, expected "
                f"({self.n_steps + 1}, {self.grid.n_points})"
            )
        if self.t1 < self.t0:
            raise ValueError("t1 < t0")
        object.__setattr__(self, "slices", arr)

    @property
    def dt(self) -> float:
        return self.metadata.get("dt", (self.t1 - self.t0) / self.n_steps)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, s: float) -> int:
        return time_index(self.t0, self.dt, self.n_steps, s)

    def at(self, s: float) -> GridFunction:
        return GridFunction(self.grid, self.slices[self.index_of(s)])

    def __getitem__(self, j: int) -> GridFunction:
        return GridFunction(self.grid, self.slices[j])

    @property
    def final(self) -> GridFunction:
        return self[self.n_steps]


def time_index(t0: float, dt: float, n_steps: int, s: float, tol: float = 1e-9) -> int:
    k = (s - t0) / dt
    j = int(round(k))
    if abs(k - j) > tol * max(1.0, abs(k)) or not 0 <= j <= n_steps:
        raise OffMeshError(f"time {s} is not a node of the mesh t0={t0}, dt={dt}")
    return j


def _check_same_grid(g1: Grid1D, g2: Grid1D) -> None:
    if g1 != g2:
        raise GridMismatchError(f"grid mismatch: {g1} vs {g2}")


def quadrature(u: GridFunction) -> float:
    return float(np.dot(u.grid.weights, u.values))


def l2_inner(u: GridFunction, v: GridFunction) -> float:
    _check_same_grid(u.grid, v.grid)
    return float(np.dot(u.grid.weights, u.values * v.values))


def l2_norm(u: GridFunction) -> float:
    return float(np.sqrt(np.dot(u.grid.weights, u.values**2)))


def _fd_weights(offsets: Sequence[int], order: int) -> np.ndarray:
    """Finite-difference weights for the ``order``-th derivative on integer offsets."""
    offsets = np.asarray(offsets, dtype=float)
    k = len(offsets)
    vander = np.vander(offsets, k, increasing=True).T
    rhs = np.zeros(k)
    rhs[order] = float(np.prod(np.arange(1, order + 1)))
    return np.linalg.solve(vander, rhs)


_CENTRAL = {1: (-1, 0, 1), 2: (-1, 0, 1), 3: (-2, -1, 0, 1, 2)}


def derivative_values(values: np.ndarray, dx: float, order: int) -> np.ndarray:
    """Derivative of nodal values along the last axis.

    Central stencils in the interior, one-sided stencils of ``order + 2``
    points near the ends; all second-order accurate.
    """
    if order not in (1, 2, 3):
        raise UnsupportedOrderError(f"derivative order {order} not in {{1, 2, 3}}")
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    if n < max(order + 2, len(_CENTRAL[order])):
        raise ValueError(f"{n} points cannot resolve a derivative of order {order}")
    out = np.empty_like(values)
    central = _CENTRAL[order]
    half = central[-1]
    wts = _fd_weights(central, order)
    interior = slice(half, n - half)
    acc = np.zeros(values[..., interior].shape)
    for off, w in zip(central, wts):
        acc += w * values[..., half + off : n - half + off]
    out[..., interior] = acc
    width = order + 2
    for i in range(half):
        fwd = _fd_weights([k - i for k in range(width)], order)
        out[..., i] = values[..., :width] @ fwd
        j = n - 1 - i
        bwd = _fd_weights([k - (width - 1 - i) for k in range(width)], order)
        out[..., j] = values[..., n - width :] @ bwd
    return out / dx**order


def spatial_derivative(u: GridFunction, order: int) -> GridFunction:
    return GridFunction(u.grid, derivative_values(u.values, u.grid.dx, order))


def sobolev_norm(u: GridFunction, order: int) -> float:
    """Discrete W^{order,2} norm, derivatives by finite differences."""
    if order not in (0, 1, 2, 3):
        raise UnsupportedOrderError(f"Sobolev order {order} not supported (max 3)")
    total = l2_norm(u) ** 2
    for k in range(1, order + 1):
        total += l2_norm(spatial_derivative(u, k)) ** 2
    return float(np.sqrt(total))


def gaussian(grid: Grid1D, mean: float, std: float, mass: float = 1.0) -> GridFunction:
    x = grid.nodes
    vals = mass * np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi))
    return GridFunction(grid, vals)

"""Triangular time grids, fields on them, and finite-difference jets.

A field u(t, s, y) lives on pairs of time nodes (t_i, s_k) taken from one
shared node set, so the diagonal s = t always falls on nodes.  Forward
grids keep the pairs with k <= i, backward grids the pairs with i <= k.
Values are stored densely with shape ``(N+1, N+1, M, ..., M, m)`` and are
zero off the admissible set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidParameter

FORWARD = "forward"
BACKWARD = "backward"


def _as_tuple(x, d):
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.size == 1 and d > 1:
        arr = np.repeat(arr, d)
    if arr.size != d:
        raise InvalidParameter(f"box bound has {arr.size} entries, expected {d}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class TriTimeGrid:
    T: float
    N: int
    y_min: tuple
    y_max: tuple
    M: int
    d: int = 1
    orientation: str = FORWARD

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise InvalidParameter(f"T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 2:
            raise InvalidParameter(f"N must be an integer >= 2, got {self.N}")
        if int(self.M) != self.M or self.M < 5:
            raise InvalidParameter(f"M must be an integer >= 5, got {self.M}")
        if self.d < 1:
            raise InvalidParameter("d must be >= 1")
        if self.orientation not in (FORWARD, BACKWARD):
            raise InvalidParameter(f"unknown orientation {self.orientation!r}")
        if len(self.y_min) != self.d or len(self.y_max) != self.d:
            raise InvalidParameter("box bounds must have d entries")
        for lo, hi in zip(self.y_min, self.y_max):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise InvalidParameter(f"degenerate box [{lo}, {hi}]")

    # time nodes, computed as k*T/N so they are reproducible bit for bit
    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.T / self.N

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def h(self) -> tuple:
        return tuple((hi - lo) / (self.M - 1) for lo, hi in zip(self.y_min, self.y_max))

    def axis(self, j: int = 0) -> np.ndarray:
        lo, hi = self.y_min[j], self.y_max[j]
        return lo + np.arange(self.M) * ((hi - lo) / (self.M - 1))

    @property
    def axes(self) -> list:
        return [self.axis(j) for j in range(self.d)]

    def mesh(self) -> np.ndarray:
        """Spatial nodes as an array of shape (M, ..., M, d)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def spatial_shape(self) -> tuple:
        return (self.M,) * self.d

    def mask(self) -> np.ndarray:
        i = np.arange(self.N + 1)[:, None]
        k = np.arange(self.N + 1)[None, :]
        return (k <= i) if self.orientation == FORWARD else (i <= k)

    def pairs(self) -> list:
        """Admissible (t_index, s_index) pairs in lexicographic order."""
        ii, kk = np.nonzero(self.mask())
        return list(zip(ii.tolist(), kk.tolist()))

    @property
    def n_pairs(self) -> int:
        return int(self.mask().sum())

    def reflected(self) -> "TriTimeGrid":
        other = BACKWARD if self.orientation == FORWARD else FORWARD
        return TriTimeGrid(self.T, self.N, self.y_min, self.y_max, self.M, self.d, other)

    def with_orientation(self, orientation) -> "TriTimeGrid":
        return TriTimeGrid(self.T, self.N, self.y_min, self.y_max, self.M, self.d, orientation)


def build_tri_grid(T, N, box, M, d=1, orientation=FORWARD) -> TriTimeGrid:
    """Build a grid; ``box`` is ``(y_min, y_max)`` with scalars or d-sequences."""
    try:
        lo, hi = box
    except (TypeError, ValueError):
        raise InvalidParameter("box must be a (low, high) pair") from None
    return TriTimeGrid(float(T), int(N), _as_tuple(lo, d), _as_tuple(hi, d), int(M), int(d), orientation)


@dataclass(frozen=True)
class FlowField:
    grid: TriTimeGrid
    m: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        g = self.grid
        shape = (g.N + 1, g.N + 1) + g.spatial_shape + (self.m,)
        vals = np.array(self.values, dtype=float)
        if vals.shape != shape:
            raise InvalidParameter(f"values shape {vals.shape} != {shape}")
        vals[~g.mask()] = 0.0
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: TriTimeGrid, m: int, fn: Callable) -> "FlowField":
        """Sample ``fn(t, s, y) -> (..., m)`` where y has shape (M.., d)."""
        y = grid.mesh()
        times = grid.times
        out = np.zeros((grid.N + 1, grid.N + 1) + grid.spatial_shape + (m,))
        for i, k in grid.pairs():
            out[i, k] = np.broadcast_to(fn(times[i], times[k], y), grid.spatial_shape + (m,))
        return cls(grid, m, out)

    @classmethod
    def zeros(cls, grid, m):
        return cls(grid, m, np.zeros((grid.N + 1, grid.N + 1) + grid.spatial_shape + (m,)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def diagonal_values(self) -> np.ndarray:
        n = np.arange(self.grid.N + 1)
        return self.values[n, n]

    def to_csv(self, path) -> None:
        write_field_csv(self, path)


def time_reflect(field_: FlowField) -> FlowField:
    """v(t, s, y) = u(T - t, T - s, y) on the opposite orientation."""
    vals = np.ascontiguousarray(field_.values[::-1, ::-1])
    return FlowField(field_.grid.reflected(), field_.m, vals)


# ---------------------------------------------------------------- stencils

_STENCIL_BOUNDARY = ("one-sided", "ghost")


def derivatives_1d(u: np.ndarray, h: float, axis: int, boundary="one-sided", order=2):
    """First and second derivatives of ``u`` along ``axis``.

    Central differences of the given order in the interior.  At the two
    end nodes either second-order one-sided formulas or the ghost-node
    reflection of a homogeneous Neumann condition.  Nodes too close to the
    boundary for the wide stencils drop back to lower order.
    """
    if boundary not in _STENCIL_BOUNDARY:
        raise InvalidParameter(f"unknown boundary stencil {boundary!r}")
    if order not in (2, 4, 6):
        raise InvalidParameter(f"unsupported stencil order {order}")
    u = np.moveaxis(np.asarray(u, dtype=float), axis, 0)
    n = u.shape[0]
    if n < 4:
        raise InvalidParameter("need at least 4 nodes for boundary stencils")
    d1 = np.empty_like(u)
    d2 = np.empty_like(u)
    d1[1:-1] = (u[2:] - u[:-2]) / (2 * h)
    d2[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / h**2
    if boundary == "one-sided":
        d1[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h)
        d1[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
        d2[0] = (2 * u[0] - 5 * u[1] + 4 * u[2] - u[3]) / h**2
        d2[-1] = (2 * u[-1] - 5 * u[-2] + 4 * u[-3] - u[-4]) / h**2
    else:
        d1[0] = 0.0
        d1[-1] = 0.0
        d2[0] = 2 * (u[1] - u[0]) / h**2
        d2[-1] = 2 * (u[-2] - u[-1]) / h**2
    if order >= 4 and n >= 5:
        c = slice(2, n - 2)
        d1[c] = (-u[4:] + 8 * u[3:-1] - 8 * u[1:-3] + u[:-4]) / (12 * h)
        d2[c] = (-u[4:] + 16 * u[3:-1] - 30 * u[2:-2] + 16 * u[1:-3] - u[:-4]) / (12 * h**2)
    if order == 6 and n >= 7:
        c = slice(3, n - 3)
        d1[c] = (u[6:] - 9 * u[5:-1] + 45 * u[4:-2] - 45 * u[2:-4] + 9 * u[1:-5] - u[:-6]) / (60 * h)
        d2[c] = (
            2 * u[6:] - 27 * u[5:-1] + 270 * u[4:-2] - 490 * u[3:-3]
            + 270 * u[2:-4] - 27 * u[1:-5] + 2 * u[:-6]
        ) / (180 * h**2)
    return np.moveaxis(d1, 0, axis), np.moveaxis(d2, 0, axis)


def spatial_jet(u: np.ndarray, h: Sequence[float], boundary="one-sided", order=2):
    """Gradient and Hessian of ``u`` with shape (..., M, .., M, m).

    Returns ``grad`` of shape (..., m, d) and ``hess`` of shape (..., m, d, d).
    Mixed second derivatives are nested first differences.
    """
    d = len(h)
    u = np.asarray(u, dtype=float)
    lead = u.ndim - d - 1
    first, second = [], []
    for j in range(d):
        a1, a2 = derivatives_1d(u, h[j], lead + j, boundary, order)
        first.append(a1)
        second.append(a2)
    grad = np.stack(first, axis=-1)
    hess = np.empty(u.shape + (d, d))
    for j in range(d):
        hess[..., j, j] = second[j]
        for i in range(j + 1, d):
            mixed, _ = derivatives_1d(first[j], h[i], lead + i, "one-sided", order)
            hess[..., i, j] = mixed
            hess[..., j, i] = mixed
    return grad, hess


@dataclass(frozen=True)
class DiagonalField:
    """u(s, s, y) with its spatial gradient and Hessian, one entry per s-node."""

    grid: TriTimeGrid
    m: int
    value: np.ndarray = field(repr=False)
    grad: np.ndarray = field(repr=False)
    hess: np.ndarray = field(repr=False)

    def __post_init__(self):
        g = self.grid
        base = (g.N + 1,) + g.spatial_shape + (self.m,)
        for name, extra in (("value", ()), ("grad", (g.d,)), ("hess", (g.d, g.d))):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != base + extra:
                raise InvalidParameter(f"{name} shape {arr.shape} != {base + extra}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def jet(self, k: int):
        return self.value[k], self.grad[k], self.hess[k]


def extract_diagonal(field_: FlowField, stencil="one-sided", order=2) -> DiagonalField:
    value = field_.diagonal_values()
    grad, hess = spatial_jet(value, field_.grid.h, stencil, order)
    return DiagonalField(field_.grid, field_.m, value, grad, hess)


# --------------------------------------------------------------------- I/O

def field_rows(field_: FlowField) -> np.ndarray:
    g = field_.grid
    y = g.mesh().reshape(-1, g.d)
    times = g.times
    blocks = []
    for i, k in g.pairs():
        tcol = np.full((y.shape[0], 1), times[i])
        scol = np.full((y.shape[0], 1), times[k])
        blocks.append(np.hstack([tcol, scol, y, field_.values[i, k].reshape(-1, field_.m)]))
    return np.vstack(blocks)


def write_field_csv(field_: FlowField, path) -> None:
    g = field_.grid
    header = ",".join(["t", "s"] + [f"y{j + 1}" for j in range(g.d)] + [f"u{a + 1}" for a in range(field_.m)])
    np.savetxt(path, field_rows(field_), delimiter=",", header=header, comments="", fmt="%.17g")


def read_field_csv(path, grid: TriTimeGrid) -> FlowField:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    m = sum(1 for c in header if c.startswith("u"))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    vals = np.zeros((grid.N + 1, grid.N + 1) + grid.spatial_shape + (m,))
    per = int(np.prod(grid.spatial_shape))
    for n, (i, k) in enumerate(grid.pairs()):
        block = data[n * per:(n + 1) * per, 2 + grid.d:]
        vals[i, k] = block.reshape(grid.spatial_shape + (m,))
    return FlowField(grid, m, vals)

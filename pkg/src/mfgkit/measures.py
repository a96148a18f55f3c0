"""Finite-support probability measures on grids embedded in the real line.

All metrics are exact on finite supports: the weighted total-variation norm is
a plain weighted l1 sum, and Wasserstein distances come from the quantile
representation, which in one dimension is the optimal coupling.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union

import numpy as np

from .errors import DomainError, StructuralError

MASS_TOL = 1e-12
RENORMALIZE_TOL = 1e-9

GridFunction = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Grid:
    """Strictly increasing, finite set of coordinates on the real line."""

    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(np.atleast_1d(self.points))
        if pts.ndim != 1 or pts.size == 0:
            raise StructuralError("grid must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(pts)):
            raise StructuralError("grid coordinates must be finite")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise StructuralError("grid coordinates must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def linspace(cls, lo: float, hi: float, n: int) -> "Grid":
        if n < 1:
            raise StructuralError("grid needs at least one point")
        if n == 1:
            return cls(np.array([float(lo)]))
        return cls(np.linspace(lo, hi, int(n)))

    def __len__(self) -> int:
        return self.points.size

    @property
    def size(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points)
        )

    def __hash__(self) -> int:
        return hash(self.points.tobytes())

    def index_of(self, x: float) -> int:
        """Index of the grid point equal to ``x`` (exact match required)."""
        idx = int(np.searchsorted(self.points, x))
        if idx >= self.size or self.points[idx] != x:
            raise StructuralError(f"{x!r} is not a grid point")
        return idx

    def nearest_index(self, x) -> np.ndarray:
        """Nearest grid point for each coordinate; ties go to the lower point."""
        x = np.asarray(x, dtype=float)
        if self.size == 1:
            return np.zeros(x.shape, dtype=int)
        mids = 0.5 * (self.points[1:] + self.points[:-1])
        return np.searchsorted(mids, x, side="left")

    def max_step(self) -> float:
        if self.size == 1:
            return 0.0
        return float(np.max(np.diff(self.points)))

    def union(self, other: "Grid") -> "Grid":
        if self == other:
            return self
        return Grid(np.union1d(self.points, other.points))


@dataclass(frozen=True, eq=False)
class ProbVector:
    """Probability measure with finite support on ``grid``.

    Construct through :meth:`from_mass` to get the renormalization policy:
    masses summing to 1 within ``RENORMALIZE_TOL`` are rescaled, anything
    further off is rejected.
    """

    grid: Grid
    mass: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mass)
        if m.shape != (self.grid.size,):
            raise StructuralError(
                f"mass has shape {m.shape}, grid has {self.grid.size} points"
            )
        if not np.all(np.isfinite(m)):
            raise DomainError("masses must be finite")
        if np.any(m < 0):
            raise DomainError("masses must be nonnegative")
        if abs(m.sum() - 1.0) > MASS_TOL:
            raise DomainError(f"masses sum to {m.sum()!r}, not 1")
        object.__setattr__(self, "mass", m)

    @classmethod
    def from_mass(cls, grid: Grid, mass, clip_negative: float = 0.0) -> "ProbVector":
        m = np.array(mass, dtype=float, copy=True)
        if clip_negative > 0:
            m[(m < 0) & (m >= -clip_negative)] = 0.0
        if m.shape != (grid.size,):
            raise StructuralError(
                f"mass has shape {m.shape}, grid has {grid.size} points"
            )
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise DomainError("masses must be finite and nonnegative")
        total = m.sum()
        if abs(total - 1.0) > RENORMALIZE_TOL:
            raise DomainError(f"masses sum to {total!r}; cannot renormalize")
        return cls(grid, m / total)

    @classmethod
    def dirac(cls, grid: Grid, x: float) -> "ProbVector":
        return cls.point_mass(grid, grid.index_of(x))

    @classmethod
    def point_mass(cls, grid: Grid, index: int) -> "ProbVector":
        m = np.zeros(grid.size)
        m[index] = 1.0
        return cls(grid, m)

    @classmethod
    def uniform(cls, grid: Grid) -> "ProbVector":
        return cls(grid, np.full(grid.size, 1.0 / grid.size))

    @classmethod
    def empirical(cls, grid: Grid, indices) -> "ProbVector":
        """Uniform measure on the states ``indices`` (repeats allowed)."""
        idx = np.asarray(indices, dtype=int)
        if idx.size == 0:
            raise DomainError("empirical measure of zero samples")
        counts = np.bincount(idx, minlength=grid.size).astype(float)
        return cls.from_mass(grid, counts / idx.size)

    def __len__(self) -> int:
        return self.grid.size

    def on_grid(self, grid: Grid) -> "ProbVector":
        """Zero-fill onto a superset grid."""
        if grid == self.grid:
            return self
        pos = np.searchsorted(grid.points, self.grid.points)
        if np.any(pos >= grid.size) or not np.array_equal(
            grid.points[np.minimum(pos, grid.size - 1)], self.grid.points
        ):
            raise StructuralError("target grid does not contain this support")
        m = np.zeros(grid.size)
        m[pos] = self.mass
        return ProbVector(grid, m)

    def mean(self) -> float:
        return float(self.mass @ self.grid.points)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["coordinate", "mass"])
        for x, m in zip(self.grid.points, self.mass):
            w.writerow([format_float(x), format_float(m)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ProbVector":
        rows = list(csv.reader(io.StringIO(text)))
        if rows and rows[0] and rows[0][0].strip() == "coordinate":
            rows = rows[1:]
        rows = [r for r in rows if r]
        xs = [float(r[0]) for r in rows]
        ms = [float(r[1]) for r in rows]
        return cls.from_mass(Grid(np.array(xs)), ms)


def format_float(x: float) -> str:
    """17 significant digits: round-trips every IEEE double."""
    return format(float(x), ".17g")


@dataclass(frozen=True, eq=False)
class WeightFn:
    """Weight function on a grid, ``w(x) >= 1 + |x - anchor|**order``.

    ``unit=True`` marks the bounded-cost convention v == 1, which is exempt
    from the growth condition.
    """

    grid: Grid
    values: np.ndarray
    order: int = 1
    anchor: float = 0.0
    unit: bool = False
    _slack_tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.grid.size,):
            raise StructuralError("weight values must align with the grid")
        if int(self.order) != self.order or self.order < 1:
            raise DomainError("weight order must be an integer >= 1")
        if np.any(v < 1.0):
            raise DomainError("weight values must be >= 1")
        if not self.unit:
            floor = 1.0 + np.abs(self.grid.points - self.anchor) ** self.order
            if np.any(v - floor < -self._slack_tol * np.maximum(1.0, floor)):
                raise DomainError(
                    "weight violates w(x) >= 1 + |x - x0|^p on the grid"
                )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "order", int(self.order))

    @classmethod
    def ones(cls, grid: Grid) -> "WeightFn":
        return cls(grid, np.ones(grid.size), order=1, unit=True)

    @classmethod
    def polynomial(cls, grid: Grid, order: int = 2, anchor: float = 0.0) -> "WeightFn":
        vals = 1.0 + np.abs(grid.points - anchor) ** order
        return cls(grid, vals, order=order, anchor=anchor)

    @property
    def is_unit(self) -> bool:
        return self.unit or bool(np.all(self.values == 1.0))


def grid_values(g: GridFunction, grid: Grid) -> np.ndarray:
    if isinstance(g, WeightFn):
        if g.grid != grid:
            raise StructuralError("weight function lives on a different grid")
        return g.values
    if callable(g):
        vals = np.asarray(g(grid.points), dtype=float)
        if vals.shape == ():
            vals = np.full(grid.size, float(vals))
    else:
        vals = np.asarray(g, dtype=float)
    if vals.shape != (grid.size,):
        raise StructuralError(
            f"grid function has shape {vals.shape}, grid has {grid.size} points"
        )
    return vals


def moment(mu: ProbVector, g: GridFunction) -> float:
    """Integral of ``g`` against ``mu``; ``g`` is an array, callable or WeightFn."""
    return float(np.dot(mu.mass, grid_values(g, mu.grid)))


def _require_same_grid(*objs) -> Grid:
    grid = objs[0].grid
    for o in objs[1:]:
        if o.grid != grid:
            raise StructuralError("arguments live on different grids")
    return grid


def v_norm_dist(mu: ProbVector, nu: ProbVector, v: WeightFn) -> float:
    """``sup |mu(g) - nu(g)|`` over ``|g| <= v``, i.e. the weighted l1 gap."""
    _require_same_grid(mu, nu, v)
    return float(np.sum(v.values * np.abs(mu.mass - nu.mass)))


def _merged(mu: ProbVector, nu: ProbVector):
    if mu.grid == nu.grid:
        return mu.grid.points, mu.mass, nu.mass
    grid = mu.grid.union(nu.grid)
    return grid.points, mu.on_grid(grid).mass, nu.on_grid(grid).mass


def wasserstein_1d(mu: ProbVector, nu: ProbVector, p: int = 1) -> float:
    """Order-``p`` Wasserstein distance between two measures on the line.

    Integrates ``|F_mu^{-1}(q) - F_nu^{-1}(q)|^p`` over ``q`` in (0, 1)
    exactly: both quantile functions are constant between consecutive CDF
    breakpoints, so the integral is a finite sum.
    """
    if p < 1:
        raise DomainError(f"Wasserstein order must be >= 1, got {p}")
    xs, a, b = _merged(mu, nu)
    if xs.size == 1:
        return 0.0
    ca = np.cumsum(a)
    cb = np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    qs = np.union1d(ca, cb)
    qs = qs[(qs > 0.0) & (qs <= 1.0)]
    lo = np.concatenate(([0.0], qs[:-1]))
    widths = qs - lo
    mid = lo + 0.5 * widths
    n = xs.size
    ia = np.minimum(np.searchsorted(ca, mid, side="left"), n - 1)
    ib = np.minimum(np.searchsorted(cb, mid, side="left"), n - 1)
    gaps = np.abs(xs[ia] - xs[ib])
    if p == 1:
        return float(np.sum(widths * gaps))
    return float(np.sum(widths * gaps**p) ** (1.0 / p))


def rho_v(mu: ProbVector, nu: ProbVector, v: WeightFn) -> float:
    """Metric for the v-topology.

    For an unbounded weight this is ``W_p + |mu(v) - nu(v)|`` with ``p`` the
    weight's order. In the bounded case (v == 1) the moment term vanishes
    and W_1 stands in for the weak-convergence metric.
    """
    _require_same_grid(mu, nu, v)
    if v.is_unit:
        return wasserstein_1d(mu, nu, 1)
    return wasserstein_1d(mu, nu, v.order) + abs(moment(mu, v) - moment(nu, v))


def total_variation(mu: ProbVector, nu: ProbVector) -> float:
    """``sum |mu - nu|`` on the merged grid (no factor 1/2)."""
    _, a, b = _merged(mu, nu)
    return float(np.sum(np.abs(a - b)))


def rho_v_batch(masses_a: np.ndarray, masses_b: np.ndarray, v: WeightFn) -> np.ndarray:
    """Row-wise :func:`rho_v` for stacked masses on ``v.grid``.

    The bounded case uses the CDF form of W_1, vectorized over rows.
    """
    a = np.atleast_2d(np.asarray(masses_a, dtype=float))
    b = np.atleast_2d(np.asarray(masses_b, dtype=float))
    if a.shape != b.shape or a.shape[1] != v.grid.size:
        raise StructuralError("stacked masses do not match the weight grid")
    if v.is_unit:
        steps = np.diff(v.grid.points)
        cdf_gap = np.abs(np.cumsum(a - b, axis=1)[:, :-1])
        return cdf_gap @ steps
    out = np.empty(a.shape[0])
    for k in range(a.shape[0]):
        out[k] = rho_v(ProbVector(v.grid, a[k]), ProbVector(v.grid, b[k]), v)
    return out


def stack(measures: Iterable[ProbVector]) -> np.ndarray:
    ms = list(measures)
    _require_same_grid(*ms)
    return np.vstack([m.mass for m in ms])

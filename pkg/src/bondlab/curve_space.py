"""State space of discount curves on a truncated half-line.

A curve f on [0, infinity) is stored as f = g + a: a grid-sampled component g
on equally spaced nodes of [0, x_max] (treated as zero beyond x_max) plus an
explicit constant a capturing the level at infinity. The squared Sobolev-type
norm of order s is

    ||f||^2 = integral of g^2 + (g')^2 + ... + (g^(s))^2  +  a^2,

with the integral approximated by the trapezoid rule and derivatives by
second-order central differences (one-sided second-order stencils at both
endpoints). Point evaluations and first-derivative evaluations act as dual
atoms; pairing an atom with a curve is plain (derivative-)evaluation, made
legal by the order bookkeeping below: point atoms need s >= 1, derivative
atoms need s >= 2.

Between nodes curves are evaluated by linear interpolation; beyond x_max the
grid component is zero, so f(x) = a there.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import AtomBeyondGrid, GridMismatch, OrderUnsupported, ValidationFailure

__all__ = [
    "MaturityGrid",
    "SobolevIndex",
    "Curve",
    "DualAtom",
    "sobolev_norm",
    "sobolev_inner",
    "pair",
    "translate",
    "derivative",
    "multiply",
    "curve_to_dict",
    "curve_from_dict",
    "curve_to_json",
    "curve_from_json",
    "curve_to_csv",
]

# numpy renamed trapz; support both without a deprecation warning
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class MaturityGrid:
    """Equally spaced maturity nodes 0 = x_0 < ... < x_{n-1} = x_max."""

    x_max: float
    n_points: int

    def __post_init__(self) -> None:
        if not (self.x_max > 0.0 and np.isfinite(self.x_max)):
            raise ValidationFailure(f"x_max must be positive and finite, got {self.x_max}")
        if self.n_points < 4:
            # second-order one-sided stencils need at least 3 points per end
            raise ValidationFailure(f"n_points must be >= 4, got {self.n_points}")

    @property
    def dx(self) -> float:
        return self.x_max / (self.n_points - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(0.0, self.x_max, self.n_points)
        x.flags.writeable = False
        return x

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaturityGrid):
            return NotImplemented
        return self.x_max == other.x_max and self.n_points == other.n_points

    def __hash__(self) -> int:
        return hash((self.x_max, self.n_points))


@dataclass(frozen=True)
class SobolevIndex:
    """Integer derivative order s >= 1 of the ambient curve space."""

    s: int

    def __post_init__(self) -> None:
        if not isinstance(self.s, (int, np.integer)) or self.s < 1:
            raise OrderUnsupported(f"Sobolev order must be an integer >= 1, got {self.s}")


@dataclass(frozen=True)
class Curve:
    """Grid component g plus constant-at-infinity a; node values are g + a."""

    grid: MaturityGrid
    g: np.ndarray
    a: float = 0.0

    def __post_init__(self) -> None:
        g = np.asarray(self.g, dtype=np.float64)
        if g.shape != (self.grid.n_points,):
            raise ValidationFailure(
                f"grid component has shape {g.shape}, expected ({self.grid.n_points},)"
            )
        if not np.all(np.isfinite(g)) or not np.isfinite(self.a):
            raise ValidationFailure("curve data must be finite")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "a", float(self.a))

    def values(self) -> np.ndarray:
        """Node values f(x_j) = g(x_j) + a."""
        return self.g + self.a

    def value_at(self, x) -> np.ndarray | float:
        """Evaluate f at x by linear interpolation; f = a beyond x_max.

        Args:
            x: scalar or array of points, each >= 0.

        Returns:
            Interpolated value(s), same shape as x.
        """
        x_arr = np.asarray(x, dtype=np.float64)
        if np.any(x_arr < 0.0):
            raise AtomBeyondGrid(f"evaluation point below 0: {x}")
        out = np.interp(x_arr, self.grid.nodes, self.g, right=0.0) + self.a
        return float(out) if np.isscalar(x) or x_arr.ndim == 0 else out

    def derivative_values(self) -> np.ndarray:
        """Node values of f' = g' (second-order stencils, one-sided at ends)."""
        return np.gradient(self.g, self.grid.dx, edge_order=2)

    def derivative_at(self, x) -> np.ndarray | float:
        """Evaluate f' at x; beyond x_max the curve is constant, so f' = 0."""
        x_arr = np.asarray(x, dtype=np.float64)
        if np.any(x_arr < 0.0):
            raise AtomBeyondGrid(f"evaluation point below 0: {x}")
        out = np.interp(x_arr, self.grid.nodes, self.derivative_values(), right=0.0)
        return float(out) if np.isscalar(x) or x_arr.ndim == 0 else out


@dataclass(frozen=True)
class DualAtom:
    """Weighted point evaluation (order 0) or derivative evaluation (order 1).

    Pairing against f = g + a gives weight * f(location) for order 0 and
    weight * f'(location) for order 1. Order-1 atoms are only continuous on
    spaces with s >= 2; `pair` enforces that.
    """

    location: float
    weight: float = 1.0
    order: int = 0

    def __post_init__(self) -> None:
        if self.order not in (0, 1):
            raise OrderUnsupported(f"atom order must be 0 or 1, got {self.order}")
        if not (np.isfinite(self.location) and self.location >= 0.0):
            raise AtomBeyondGrid(f"atom location must be finite and >= 0, got {self.location}")
        if not np.isfinite(self.weight):
            raise AtomBeyondGrid("atom weight must be finite")


# --- norms and inner products ------------------------------------------------


def _accumulate_inner(y1: np.ndarray, y2: np.ndarray, dx: float, s: int) -> float:
    """Trapezoid inner product of g-samples plus s derivative levels."""
    total = float(_trapezoid(y1 * y2, dx=dx))
    d1, d2 = y1, y2
    for _ in range(s):
        d1 = np.gradient(d1, dx, edge_order=2)
        d2 = np.gradient(d2, dx, edge_order=2)
        total += float(_trapezoid(d1 * d2, dx=dx))
    return total


def sobolev_inner(f: Curve, h: Curve, s: SobolevIndex) -> float:
    """E^s inner product (f, h) = <g_f, g_h>_{H^s} + a_f * a_h."""
    if f.grid != h.grid:
        raise GridMismatch("curves live on different grids")
    return _accumulate_inner(f.g, h.g, f.grid.dx, s.s) + f.a * h.a


def sobolev_norm(f: Curve, s: SobolevIndex) -> float:
    """Norm sqrt(||g||_{H^s}^2 + a^2) with the discrete H^s norm of order s."""
    return float(np.sqrt(max(sobolev_inner(f, f, s), 0.0)))


def hs_inner_samples(y1: np.ndarray, y2: np.ndarray, dx: float, s: int, axis: int = -1):
    """Batched H^s inner product of raw sample arrays along `axis`.

    Used by the simulation diagnostics where building Curve objects per path
    would dominate the cost. y1 and y2 must be broadcast-compatible.
    """
    total = _trapezoid(y1 * y2, dx=dx, axis=axis)
    d1, d2 = y1, y2
    for _ in range(s):
        d1 = np.gradient(d1, dx, axis=axis, edge_order=2)
        d2 = np.gradient(d2, dx, axis=axis, edge_order=2)
        total = total + _trapezoid(d1 * d2, dx=dx, axis=axis)
    return total


# --- dual pairing -------------------------------------------------------------


def pair(atoms: DualAtom | Iterable[DualAtom], f: Curve, s: SobolevIndex | None = None) -> float:
    """Duality pairing <sum of atoms, f>.

    Args:
        atoms: a single atom or an iterable of atoms.
        f: curve to evaluate against.
        s: ambient Sobolev order; required whenever an order-1 atom appears
            (derivative atoms are only admissible for s >= 2).

    Returns:
        sum of weight * f(x) over order-0 atoms plus weight * f'(x) over
        order-1 atoms.

    Raises:
        AtomBeyondGrid: an atom sits outside [0, x_max].
        OrderUnsupported: order-1 atom with s missing or s < 2.
    """
    if isinstance(atoms, DualAtom):
        atoms = (atoms,)
    total = 0.0
    deriv_vals = None
    for atom in atoms:
        if atom.location > f.grid.x_max:
            raise AtomBeyondGrid(
                f"atom at {atom.location} beyond grid end {f.grid.x_max}"
            )
        if atom.order == 0:
            total += atom.weight * f.value_at(atom.location)
        else:
            if s is None or s.s < 2:
                raise OrderUnsupported(
                    "derivative atoms require Sobolev order >= 2 "
                    f"(got {'none' if s is None else s.s})"
                )
            if deriv_vals is None:
                deriv_vals = f.derivative_values()
            total += atom.weight * float(
                np.interp(atom.location, f.grid.nodes, deriv_vals)
            )
    return total


# --- curve operations ---------------------------------------------------------


def translate(f: Curve, t: float) -> Curve:
    """Left translation (L_t f)(x) = f(x + t); the constant part is fixed.

    The grid component is re-sampled by linear interpolation and is zero
    wherever x + t > x_max.
    """
    if t < 0.0:
        raise ValidationFailure(f"translation time must be >= 0, got {t}")
    if t == 0.0:
        return f
    g_new = np.interp(f.grid.nodes + t, f.grid.nodes, f.g, right=0.0)
    return Curve(f.grid, g_new, f.a)


def derivative(f: Curve) -> Curve:
    """Differentiate: (g + a)' = g', a constant drops out."""
    return Curve(f.grid, f.derivative_values(), 0.0)


def multiply(f: Curve, h: Curve) -> Curve:
    """Pointwise product; the constant parts multiply, cross terms go to g."""
    if f.grid != h.grid:
        raise GridMismatch("curves live on different grids")
    g_new = f.g * h.g + f.a * h.g + h.a * f.g
    return Curve(f.grid, g_new, f.a * h.a)


def scale(f: Curve, c: float) -> Curve:
    return Curve(f.grid, c * f.g, c * f.a)


def add(f: Curve, h: Curve) -> Curve:
    if f.grid != h.grid:
        raise GridMismatch("curves live on different grids")
    return Curve(f.grid, f.g + h.g, f.a + h.a)


# --- serialization ------------------------------------------------------------


def curve_to_dict(f: Curve) -> dict:
    return {
        "x_max": f.grid.x_max,
        "n_points": f.grid.n_points,
        "a": f.a,
        "g": [float(v) for v in f.g],
    }


def curve_from_dict(d: dict) -> Curve:
    try:
        grid = MaturityGrid(float(d["x_max"]), int(d["n_points"]))
        return Curve(grid, np.asarray(d["g"], dtype=np.float64), float(d["a"]))
    except KeyError as exc:
        raise GridMismatch(f"curve dict missing field {exc}") from exc


def curve_to_json(f: Curve) -> str:
    return json.dumps(curve_to_dict(f))


def curve_from_json(text: str) -> Curve:
    return curve_from_dict(json.loads(text))


def curve_to_csv(f: Curve, path) -> None:
    """Write node table (x_j, value) with full float precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "value"])
        for x, v in zip(f.grid.nodes, f.values()):
            writer.writerow([f"{x:.17g}", f"{v:.17g}"])


def atoms_value_matrix(
    locations: Sequence[float], values: np.ndarray, grid: MaturityGrid
) -> np.ndarray:
    """Evaluate batched node-value arrays at atom locations.

    Args:
        locations: M evaluation points in [0, x_max].
        values: (..., n_points) array of curve node values.
        grid: the shared maturity grid.

    Returns:
        (..., M) array of linearly interpolated values.
    """
    locs = np.asarray(locations, dtype=np.float64)
    if np.any(locs < 0.0) or np.any(locs > grid.x_max):
        raise AtomBeyondGrid(f"locations {locations} outside [0, {grid.x_max}]")
    pos = locs / grid.dx
    idx = np.minimum(pos.astype(np.int64), grid.n_points - 2)
    w = pos - idx
    left = values[..., idx]
    right = values[..., idx + 1]
    return left * (1.0 - w) + right * w

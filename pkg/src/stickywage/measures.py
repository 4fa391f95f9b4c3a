"""Signed Radon measures on the delay window ``[-d, 0]`` that put no mass at 0.

A measure is stored symbolically as a finite list of atoms in ``[-d, 0)``
plus a piecewise-constant density on ``[-d, 0)``.  The class is closed under
addition, scalar multiplication, Hahn-Jordan splitting and lattice min/max,
which is everything the delayed-income model and the worst-case kernel game
need.  Equality and order are decided exactly on the canonical
representation -- no quadrature is involved.

``KernelProcess`` wraps a (possibly time- or state-dependent) family of such
measures behind a uniform sampling interface with a total-variation guard.
"""

from __future__ import annotations

import enum
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, SimulationError

_ATOL = 1e-12


class OrderRelation(enum.Enum):
    """Outcome of comparing two measures in the lattice order."""

    EQUAL = "equal"
    LESS_OR_EQUAL = "less_or_equal"
    GREATER_OR_EQUAL = "greater_or_equal"
    INCOMPARABLE = "incomparable"


def _canonical_pieces(d, breaks, values):
    """Normalise a piecewise-constant density to cover [-d, 0) exactly once.

    Ensures the first break sits at -d (padding with a zero piece if the
    caller started later) and merges adjacent pieces of equal value.
    """
    if len(breaks) != len(values):
        raise DomainError("density breaks and values must have equal length")
    if len(breaks) == 0:
        return (-d,), (0.0,)
    bs = [float(b) for b in breaks]
    vs = [float(v) for v in values]
    if any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])):
        raise DomainError("density breakpoints must be strictly increasing")
    if bs[0] < -d - _ATOL or bs[-1] >= -_ATOL:
        raise DomainError(f"density breakpoints must lie in [-d, 0) = [{-d}, 0)")
    if bs[0] > -d + _ATOL:
        bs.insert(0, -d)
        vs.insert(0, 0.0)
    else:
        bs[0] = -d
    out_b, out_v = [bs[0]], [vs[0]]
    for b, v in zip(bs[1:], vs[1:]):
        if v == out_v[-1]:
            continue  # merge equal neighbours
        out_b.append(b)
        out_v.append(v)
    return tuple(out_b), tuple(out_v)


class RadonMeasure:
    """Finite signed measure on ``[-d, 0]`` with no atom at 0.

    Parameters
    ----------
    d : positive length of the memory window.
    atoms : sequence of ``(location, weight)`` with location in ``[-d, 0)``.
    density : sequence of ``(breakpoint, value)`` pairs; ``value`` applies on
        ``[breakpoint, next breakpoint)`` and the final piece runs to 0.
    """

    __slots__ = ("d", "atoms", "density_breaks", "density_values")

    def __init__(self, d: float, atoms: Sequence = (), density: Sequence = ()):
        d = float(d)
        if not (d > 0 and math.isfinite(d)):
            raise DomainError("window length d must be positive and finite")
        merged: dict[float, float] = {}
        for loc, w in atoms:
            loc, w = float(loc), float(w)
            if not (-d - _ATOL <= loc < 0):
                raise DomainError(f"atom location {loc} outside [-d, 0) = [{-d}, 0)")
            loc = max(loc, -d)
            merged[loc] = merged.get(loc, 0.0) + w
        self.d = d
        self.atoms = tuple(sorted((a, w) for a, w in merged.items() if w != 0.0))
        density = list(density)
        breaks = [b for b, _ in density]
        values = [v for _, v in density]
        self.density_breaks, self.density_values = _canonical_pieces(d, breaks, values)

    # ------------------------------------------------------------------
    # bookkeeping

    def pieces(self):
        """Yield (lo, hi, value) for every density piece, hi of the last = 0."""
        bs = self.density_breaks + (0.0,)
        for lo, hi, v in zip(bs[:-1], bs[1:], self.density_values):
            yield lo, hi, v

    @property
    def is_zero(self) -> bool:
        return not self.atoms and all(v == 0.0 for v in self.density_values)

    @property
    def is_nonnegative(self) -> bool:
        return all(w >= 0.0 for _, w in self.atoms) and all(
            v >= 0.0 for v in self.density_values
        )

    @property
    def is_nonpositive(self) -> bool:
        return (-self).is_nonnegative

    def _key(self):
        return (self.d, self.atoms, self.density_breaks, self.density_values)

    def __eq__(self, other):
        return isinstance(other, RadonMeasure) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        return (
            f"RadonMeasure(d={self.d}, atoms={list(self.atoms)}, "
            f"density={list(zip(self.density_breaks, self.density_values))})"
        )

    # ------------------------------------------------------------------
    # linear structure

    def _check_same_window(self, other):
        if not isinstance(other, RadonMeasure):
            raise TypeError("expected a RadonMeasure")
        if other.d != self.d:
            raise DomainError("measures live on different windows")

    def __add__(self, other):
        self._check_same_window(other)
        atoms = list(self.atoms) + list(other.atoms)
        breaks = sorted(set(self.density_breaks) | set(other.density_breaks))
        values = [
            self.density_at(b) + other.density_at(b) for b in breaks
        ]
        return RadonMeasure(self.d, atoms, zip(breaks, values))

    def __neg__(self):
        return RadonMeasure(
            self.d,
            [(a, -w) for a, w in self.atoms],
            zip(self.density_breaks, [-v for v in self.density_values]),
        )

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, c):
        c = float(c)
        return RadonMeasure(
            self.d,
            [(a, c * w) for a, w in self.atoms],
            zip(self.density_breaks, [c * v for v in self.density_values]),
        )

    __rmul__ = __mul__

    def density_at(self, s: float) -> float:
        """Density value of the piece containing s in [-d, 0)."""
        if s >= 0 or s < -self.d - _ATOL:
            return 0.0
        idx = int(np.searchsorted(self.density_breaks, s, side="right")) - 1
        return self.density_values[max(idx, 0)]

    # ------------------------------------------------------------------
    # measure-theoretic operations

    def mass(self) -> float:
        """Total (signed) mass of the window."""
        atom_mass = sum(w for _, w in self.atoms)
        dens_mass = sum(v * (hi - lo) for lo, hi, v in self.pieces())
        return atom_mass + dens_mass

    def total_variation(self) -> float:
        return sum(abs(w) for _, w in self.atoms) + sum(
            abs(v) * (hi - lo) for lo, hi, v in self.pieces()
        )

    def hahn_jordan(self):
        """Split into (positive part, negative part), both nonnegative."""
        pos = RadonMeasure(
            self.d,
            [(a, w) for a, w in self.atoms if w > 0],
            zip(self.density_breaks, [max(v, 0.0) for v in self.density_values]),
        )
        neg = RadonMeasure(
            self.d,
            [(a, -w) for a, w in self.atoms if w < 0],
            zip(self.density_breaks, [max(-v, 0.0) for v in self.density_values]),
        )
        return pos, neg

    def positive_part(self):
        return self.hahn_jordan()[0]

    def negative_part(self):
        return self.hahn_jordan()[1]

    def compare(self, other: "RadonMeasure") -> OrderRelation:
        """Lattice order: self <= other iff (other - self) is nonnegative."""
        self._check_same_window(other)
        diff = other - self
        if diff.is_zero:
            return OrderRelation.EQUAL
        if diff.is_nonnegative:
            return OrderRelation.LESS_OR_EQUAL
        if diff.is_nonpositive:
            return OrderRelation.GREATER_OR_EQUAL
        return OrderRelation.INCOMPARABLE

    def support(self):
        """Support of a nonnegative measure as (points, intervals).

        Atom locations come back as points; maximal runs of strictly
        positive density come back as closed intervals.
        """
        if not self.is_nonnegative:
            raise DomainError("support() is defined for nonnegative measures")
        points = [a for a, w in self.atoms if w > 0]
        intervals = []
        for lo, hi, v in self.pieces():
            if v > 0:
                if intervals and intervals[-1][1] == lo:
                    intervals[-1] = (intervals[-1][0], hi)
                else:
                    intervals.append((lo, hi))
        return points, [tuple(iv) for iv in intervals]

    # ------------------------------------------------------------------
    # integration

    def integrate(self, grid: np.ndarray, values: np.ndarray) -> float:
        """Integrate a grid function against the measure.

        ``values`` samples a continuous function on an ascending ``grid``
        covering ``[-d, 0]``.  Atoms read the piecewise-linear interpolant
        (exact at grid nodes); each density piece uses the trapezoid rule of
        the same interpolant, so the quadrature is exact for piecewise-linear
        integrands whose kinks are grid nodes.
        """
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise DomainError("grid and values must be 1-d arrays of equal shape")
        if grid[0] > -self.d + _ATOL or grid[-1] < -_ATOL:
            raise DomainError("grid must cover the full window [-d, 0]")
        total = 0.0
        for a, w in self.atoms:
            total += w * float(np.interp(a, grid, values))
        for lo, hi, v in self.pieces():
            if v != 0.0:
                total += v * _interp_integral(grid, values, lo, hi)
        return total

    def integrate_pwlinear(self, xs: Sequence[float], ys: Sequence[float]) -> float:
        """Exact integral of a piecewise-linear function given by breakpoints."""
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        return self.integrate(xs, ys)

    def exp_integral(self, rate: float, upto: float = 0.0) -> float:
        """Exact ``int_{[-d, upto]} exp(rate * s) measure(ds)``.

        Atoms located exactly at ``upto`` are included (closed upper end),
        matching the convention used by the human-capital kernel.
        """
        total = 0.0
        for a, w in self.atoms:
            if a <= upto + _ATOL:
                total += w * math.exp(rate * a)
        for lo, hi, v in self.pieces():
            hi_c = min(hi, upto)
            if v != 0.0 and hi_c > lo:
                if rate == 0.0:
                    total += v * (hi_c - lo)
                else:
                    total += v * (math.exp(rate * hi_c) - math.exp(rate * lo)) / rate
        return total

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "atoms": [[a, w] for a, w in self.atoms],
            "density": [[b, v] for b, v in zip(self.density_breaks, self.density_values)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RadonMeasure":
        try:
            return cls(data["d"], data.get("atoms", ()), data.get("density", ()))
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed measure payload: {exc}") from exc


# ----------------------------------------------------------------------
# constructors and lattice helpers


def dirac(d: float, location: float, weight: float = 1.0) -> RadonMeasure:
    """Point mass ``weight`` at ``location`` in [-d, 0)."""
    return RadonMeasure(d, atoms=[(location, weight)])


def uniform_density(d: float, value: float, lo: float | None = None,
                    hi: float | None = None) -> RadonMeasure:
    """Constant density ``value`` on ``[lo, hi)`` (default the whole window)."""
    lo = -d if lo is None else lo
    hi = 0.0 if hi is None else hi
    if not (-d <= lo < hi <= 0.0):
        raise DomainError("need -d <= lo < hi <= 0")
    pieces = [(-d, 0.0)] if lo > -d else []
    pieces.append((lo, value))
    if hi < 0.0:
        pieces.append((hi, 0.0))
    return RadonMeasure(d, density=pieces)


def zero_measure(d: float) -> RadonMeasure:
    return RadonMeasure(d)


def lattice_min(a: RadonMeasure, b: RadonMeasure) -> RadonMeasure:
    """Greatest lower bound: a - (a - b)^+ ."""
    return a - (a - b).positive_part()


def lattice_max(a: RadonMeasure, b: RadonMeasure) -> RadonMeasure:
    return a + (b - a).positive_part()


def _interp_integral(grid, values, lo, hi):
    """Integral over [lo, hi] of the piecewise-linear interpolant of values."""
    if hi <= lo:
        return 0.0
    f_lo = float(np.interp(lo, grid, values))
    f_hi = float(np.interp(hi, grid, values))
    inside = (grid > lo) & (grid < hi)
    xs = np.concatenate(([lo], grid[inside], [hi]))
    fs = np.concatenate(([f_lo], values[inside], [f_hi]))
    return float(np.trapezoid(fs, xs))


# ----------------------------------------------------------------------
# kernel processes


class KernelProcess:
    """A delay kernel that may change with time or with the driving noise.

    The process is a finite combination ``sum_i weight_i(t, z) * measure_i``
    where each weight function returns a scalar (or a per-path array when
    ``z`` carries one row per path).  This covers constant kernels,
    deterministic schedules and noise-modulated kernels with one uniform
    interface, and lets the path engine evaluate the delay functional by
    blending a few precompiled fixed measures.

    ``tv_bound`` is the admissibility cap on the realized total variation;
    sampling a measure that exceeds it raises ``SimulationError``.
    """

    def __init__(self, components, tv_bound: float | None = None,
                 kind: str = "constant", needs_state: bool = False):
        if not components:
            raise DomainError("kernel process needs at least one component")
        self.components = []
        d = None
        for measure, weight in components:
            if d is None:
                d = measure.d
            elif measure.d != d:
                raise DomainError("kernel components live on different windows")
            self.components.append((measure, weight))
        self.d = d
        self.kind = kind
        self.needs_state = needs_state
        if tv_bound is None:
            tv_bound = sum(m.total_variation() for m, _ in self.components)
        self.tv_bound = float(tv_bound)

    # -- constructors --------------------------------------------------

    @classmethod
    def constant(cls, measure: RadonMeasure, tv_bound: float | None = None):
        if tv_bound is None:
            tv_bound = measure.total_variation()
        return cls([(measure, _const_weight)], tv_bound, kind="constant")

    @classmethod
    def time_varying(cls, components, tv_bound: float):
        """Deterministic schedule: weights are functions of t only."""
        wrapped = [(m, _time_only(fn)) for m, fn in components]
        return cls(wrapped, tv_bound, kind="time_varying")

    @classmethod
    def state_modulated(cls, components, tv_bound: float):
        """Weights may read the current driving Brownian value(s) z."""
        return cls(components, tv_bound, kind="state_modulated", needs_state=True)

    # -- sampling -------------------------------------------------------

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def constant_measure(self) -> RadonMeasure:
        if not self.is_constant:
            raise DomainError("kernel process is not constant in time")
        return self.components[0][0]

    def sample(self, t: float, z: np.ndarray | None = None) -> RadonMeasure:
        """Realized kernel at time t (and noise state z where relevant)."""
        if self.needs_state and z is None:
            raise DomainError("this kernel process needs the driving noise value z")
        out = zero_measure(self.d)
        for measure, weight in self.components:
            lam = weight(t, z)
            lam = float(np.asarray(lam).reshape(()))
            if lam != 0.0:
                out = out + lam * measure
        tv = out.total_variation()
        if tv > self.tv_bound + 1e-9 * (1.0 + self.tv_bound):
            raise SimulationError(
                f"realized kernel total variation {tv:.6g} exceeds the admissible "
                f"bound {self.tv_bound:.6g} at t={t:.6g}"
            )
        return out


def _const_weight(t, z):
    return 1.0


def _time_only(fn):
    def weight(t, z, _fn=fn):
        return _fn(t)
    return weight

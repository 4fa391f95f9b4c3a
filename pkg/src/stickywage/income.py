"""Labor income with delayed (sticky) wage adjustment.

The income path solves a geometric SDE whose drift is perturbed by a Radon
kernel acting on the lagged path,

    dy(t) = [ mu_y y(t) + int_{[-d,0]} y(t+s) kernel(ds) ] dt
            + y(t) sigma_y' dZ^y(t),

with a prescribed history on [-d, 0].  Besides the Euler path generator the
module carries three independent cross-checks -- an explicit
variation-of-constants reconstruction, a Picard fixed-point solver on the
same noise, and a deterministic method-of-steps integrator -- plus the
constructive witness showing that kernels with a negative part break
positivity of income.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import (CompiledKernel, IncomeDynamics, WindowBuffers,
                     run_chunked, steps_in_window)
from .errors import DomainError, SimulationError
from .measures import KernelProcess, RadonMeasure
from .mc import generate_noise, NoisePlan
from .params import MarketParams

_MAX_RECORD = 60_000_000  # floats; guard against accidentally huge path dumps


# ----------------------------------------------------------------------
# state types


class HistorySegment:
    """Initial income datum: current level plus the lagged path on [-d, 0).

    ``values`` samples the window on the uniform grid {-d, -d+h, ..., 0};
    the final entry is the current level.  Lag reads between nodes use
    linear interpolation -- the fixed convention for evaluating atoms
    against grid data.
    """

    __slots__ = ("h", "values")

    def __init__(self, h: float, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise DomainError("history needs at least the endpoints of the window")
        if not (h > 0 and np.all(np.isfinite(values))):
            raise DomainError("history step must be positive and values finite")
        self.h = float(h)
        self.values = values

    @property
    def d(self) -> float:
        return (self.values.size - 1) * self.h

    @property
    def x0(self) -> float:
        """Current income level."""
        return float(self.values[-1])

    @property
    def grid(self) -> np.ndarray:
        n = self.values.size - 1
        return -self.d + self.h * np.arange(n + 1)

    @property
    def is_nonnegative(self) -> bool:
        return bool(np.all(self.values >= 0.0))

    def scaled(self, lam: float) -> "HistorySegment":
        return HistorySegment(self.h, lam * self.values)

    def resampled(self, h_new: float) -> "HistorySegment":
        """Same window at step ``h_new``, read off the linear interpolant.

        Exact whenever the stored values are piecewise linear with kinks on
        the old grid.  ``h_new`` must divide the window length.
        """
        if abs(h_new - self.h) <= 1e-12:
            return self
        n = steps_in_window(self.d, h_new)
        grid = -self.d + h_new * np.arange(n + 1)
        return HistorySegment(h_new, np.interp(grid, self.grid, self.values))

    @classmethod
    def constant(cls, d: float, h: float, level: float = 1.0) -> "HistorySegment":
        n = steps_in_window(d, h)
        return cls(h, np.full(n + 1, float(level)))

    @classmethod
    def from_function(cls, d: float, h: float, fn) -> "HistorySegment":
        n = steps_in_window(d, h)
        grid = -d + h * np.arange(n + 1)
        return cls(h, np.array([fn(s) for s in grid], dtype=float))

    def __repr__(self):
        return (f"HistorySegment(d={self.d:.6g}, h={self.h:.6g}, "
                f"x0={self.x0:.6g}, n={self.values.size})")


@dataclass
class IncomePath:
    """Simulated income paths plus the noise that produced them."""

    t: np.ndarray                      # (n_steps + 1,)
    y: np.ndarray                      # (n_paths, n_steps + 1)
    dZ: np.ndarray | None = None       # (n_paths, n_steps, n)
    dZ_star: np.ndarray | None = None
    seed: int = 0

    @property
    def n_paths(self) -> int:
        return self.y.shape[0]

    @property
    def h(self) -> float:
        return float(self.t[1] - self.t[0])

    def min_value(self) -> float:
        return float(self.y.min())

    def to_csv(self, fh, header_lines=()):
        """Long-format dump: one row per (path, step) with the increments."""
        n = 0 if self.dZ is None else self.dZ.shape[2]
        for line in header_lines:
            fh.write(f"# {line}\n")
        cols = ["path", "t", "y"]
        cols += [f"dZ{i + 1}" for i in range(n)]
        if self.dZ_star is not None:
            cols += [f"dZstar{i + 1}" for i in range(n)]
        fh.write(",".join(cols) + "\n")
        for p in range(self.n_paths):
            for k, t in enumerate(self.t):
                row = [str(p), f"{t:.10g}", f"{self.y[p, k]:.12g}"]
                if self.dZ is not None:
                    inc = self.dZ[p, k - 1] if k > 0 else np.zeros(n)
                    row += [f"{v:.12g}" for v in inc]
                if self.dZ_star is not None:
                    inc = self.dZ_star[p, k - 1] if k > 0 else np.zeros(n)
                    row += [f"{v:.12g}" for v in inc]
                fh.write(",".join(row) + "\n")


@dataclass
class IncomeStats:
    """Streaming summary when full paths are not recorded."""

    y_min: np.ndarray   # per-path minimum over all grid points
    y_T: np.ndarray
    n_steps: int
    h: float


# ----------------------------------------------------------------------
# helpers


def as_kernel_process(kernel) -> KernelProcess:
    if isinstance(kernel, KernelProcess):
        return kernel
    if isinstance(kernel, RadonMeasure):
        return KernelProcess.constant(kernel)
    raise DomainError("kernel must be a RadonMeasure or a KernelProcess")


def _prepare(history: HistorySegment, kernel, T: float, h: float | None):
    kp = as_kernel_process(kernel)
    if h is None:
        h = history.h
    if abs(h - history.h) > 1e-12:
        raise DomainError("history grid step and simulation step must agree")
    if abs(kp.d - history.d) > 1e-9:
        raise DomainError(
            f"kernel window d={kp.d} does not match history window d={history.d}"
        )
    n_hist = steps_in_window(history.d, h)
    n_steps = round(T / h)
    if n_steps < 1 or abs(n_steps * h - T) > 1e-9 * max(1.0, T):
        raise DomainError("step h must divide the horizon T")
    return kp, h, n_hist, n_steps


def income_dynamics(params: MarketParams, kp: KernelProcess, h: float,
                    n_hist: int, exact_income: bool = False) -> IncomeDynamics:
    compiled = CompiledKernel(kp, h, n_hist)
    extra = params.load_extra if np.any(params.load_extra) else None
    return IncomeDynamics(
        mu_y=params.income_drift,
        load_market=params.load_market,
        load_extra=extra,
        kernel=compiled,
        sigma_y_sq=params.sigma_y_sq,
        exact_gbm=exact_income,
    )


# ----------------------------------------------------------------------
# simulation


def simulate_income(history: HistorySegment, kernel, params: MarketParams,
                    T: float, n_paths: int = 1, seed: int = 0, *,
                    h: float | None = None, record_paths: bool = True,
                    record_noise: bool = False, exact_income: bool = False,
                    n_workers: int = 1,
                    chunk: int = engine.DEFAULT_CHUNK):
    """Euler-Maruyama paths of the delayed income equation.

    Between grid nodes the lagged path is read by linear interpolation, so
    kernels may carry atoms at arbitrary lags.  Returns an ``IncomePath``
    when ``record_paths`` (the default), otherwise streaming ``IncomeStats``.
    Noise comes from per-path counter-based streams, so results do not
    depend on ``n_workers`` or chunking.
    """
    kp, h, n_hist, n_steps = _prepare(history, kernel, T, h)
    dyn = income_dynamics(params, kp, h, n_hist, exact_income)
    if record_paths and n_paths * (n_steps + 1) > _MAX_RECORD:
        raise DomainError(
            "path dump too large; rerun with record_paths=False for summaries"
        )

    def worker(path_range):
        return engine.income_chunk(path_range, history.values, dyn, h, n_steps,
                                   params.n, seed, record_paths=record_paths,
                                   record_noise=record_noise)

    results = run_chunked(worker, n_paths, chunk, n_workers)
    y_min = np.concatenate([r["y_min"] for r in results])
    y_T = np.concatenate([r["y_T"] for r in results])
    if not record_paths:
        return IncomeStats(y_min=y_min, y_T=y_T, n_steps=n_steps, h=h)
    y = np.concatenate([r["y_path"] for r in results], axis=1).T.copy()
    t = h * np.arange(n_steps + 1)
    dZ = dZs = None
    if record_noise:
        dZ = np.concatenate([r["dZ"] for r in results], axis=1)
        dZ = np.ascontiguousarray(np.moveaxis(dZ, 0, 1))
        if results[0]["dZ_star"] is not None:
            dZs = np.concatenate([r["dZ_star"] for r in results], axis=1)
            dZs = np.ascontiguousarray(np.moveaxis(dZs, 0, 1))
    return IncomePath(t=t, y=y, dZ=dZ, dZ_star=dZs, seed=seed)


# ----------------------------------------------------------------------
# variation-of-constants reconstruction


def variation_of_constants(income: IncomePath, history: HistorySegment,
                           kernel, params: MarketParams) -> IncomePath:
    """Rebuild the path as ``E(t) (x0 + I(t))`` from the recorded noise.

    ``E`` is the exact geometric factor of the kernel-free equation and
    ``I`` the left-point discretisation of the compensator integral
    ``int E^{-1}(u) (int y(u+s) kernel(ds)) du`` evaluated on the
    reconstruction itself.  Agreement with the Euler path is O(h) and checks
    the window bookkeeping through an entirely different recursion.
    """
    if income.dZ is None:
        raise DomainError("reconstruction needs the recorded noise; "
                          "simulate with record_noise=True")
    kp, h, n_hist, _ = _prepare(history, kernel, income.t[-1], income.h)
    compiled = CompiledKernel(kp, h, n_hist)
    n_paths, n_steps = income.y.shape[0], income.y.shape[1] - 1
    dWy = np.einsum("pkn,n->kp", income.dZ, params.load_market)
    if income.dZ_star is not None and np.any(params.load_extra):
        dWy += np.einsum("pkn,n->kp", income.dZ_star, params.load_extra)
    Zy = np.vstack([np.zeros((1, n_paths)), np.cumsum(dWy, axis=0)])
    drift = params.income_drift - 0.5 * params.sigma_y_sq
    t = income.t
    # E(t_k) per path, exact
    E = np.exp(drift * t[:, None] + Zy)
    bufs = WindowBuffers(history.values, n_paths, engine.DEFAULT_BLOCK, h,
                         need_Y=compiled.has_pieces, zeta=None)
    Zcum = np.zeros((n_paths, params.n)) if compiled.needs_state else None
    x0 = history.x0
    I = np.zeros(n_paths)
    out = np.empty((n_steps + 1, n_paths))
    out[0] = x0
    for k in range(n_steps):
        L = compiled.eval(bufs, t[k], Zcum)
        I = I + h * L / E[k]
        y_next = E[k + 1] * (x0 + I)
        out[k + 1] = y_next
        bufs.append(y_next, t[k + 1])
        if Zcum is not None:
            Zcum += income.dZ[:, k, :]
    return IncomePath(t=t.copy(), y=out.T.copy(), dZ=income.dZ,
                      dZ_star=income.dZ_star, seed=income.seed)


# ----------------------------------------------------------------------
# Picard fixed point


@dataclass
class PicardResult:
    path: IncomePath
    iterations: int
    sup_gaps: list
    contraction_ratios: list   # weighted-norm gap ratios, one per iteration


def picard_solve(history: HistorySegment, kernel, params: MarketParams,
                 T: float, dZ: np.ndarray, dZ_star: np.ndarray | None = None, *,
                 tol: float = 1e-10, max_iter: int = 80,
                 alpha: float = 0.0) -> PicardResult:
    """Solve the discrete income equation by fixed-point iteration.

    Iterates the integral map ``F(y)(t) = x0 + int (mu_y y + delay(y)) du +
    int y dZ^y`` with left-point quadrature on the given noise, starting from
    the constant path.  The fixed point coincides with the Euler recursion,
    so this is an independent route to the same solution; convergence rates
    in the ``exp(-alpha t)``-weighted sup norm shrink as ``alpha`` grows.
    """
    kp, h, n_hist, n_steps = _prepare(history, kernel, T, history.h)
    if dZ.shape[1] != n_steps:
        raise DomainError("noise array does not match the horizon")
    compiled = CompiledKernel(kp, h, n_hist)
    n_paths = dZ.shape[0]
    dWy = np.einsum("pkn,n->kp", dZ, params.load_market)
    if dZ_star is not None and np.any(params.load_extra):
        dWy += np.einsum("pkn,n->kp", dZ_star, params.load_extra)
    x0 = history.x0
    t = h * np.arange(n_steps + 1)
    weights = np.exp(-alpha * t)[:, None]
    y_old = np.full((n_steps + 1, n_paths), x0)
    scale = max(abs(x0), float(np.max(np.abs(history.values))), 1e-12)
    sup_gaps, ratios = [], []
    prev_gap_w = None
    mu_y = params.income_drift
    for it in range(1, max_iter + 1):
        bufs = WindowBuffers(history.values, n_paths, engine.DEFAULT_BLOCK, h,
                             need_Y=compiled.has_pieces, zeta=None)
        Zcum = np.zeros((n_paths, params.n)) if compiled.needs_state else None
        y_new = np.empty_like(y_old)
        y_new[0] = x0
        acc = np.full(n_paths, x0, dtype=float)
        for k in range(n_steps):
            L = compiled.eval(bufs, t[k], Zcum)
            acc = acc + (mu_y * y_old[k] + L) * h + y_old[k] * dWy[k]
            y_new[k + 1] = acc
            bufs.append(y_old[k + 1], t[k + 1])
            if Zcum is not None:
                Zcum += dZ[:, k, :]
        gap = float(np.max(np.abs(y_new - y_old)))
        gap_w = float(np.max(weights * np.abs(y_new - y_old)))
        sup_gaps.append(gap)
        if prev_gap_w is not None and prev_gap_w > 0:
            ratios.append(gap_w / prev_gap_w)
        prev_gap_w = gap_w
        y_old = y_new
        if gap <= tol * scale:
            path = IncomePath(t=t, y=y_old.T.copy(), dZ=dZ, dZ_star=dZ_star)
            return PicardResult(path, it, sup_gaps, ratios)
    raise SimulationError(
        f"fixed-point iteration did not converge in {max_iter} sweeps; "
        f"last weighted contraction ratio "
        f"{ratios[-1] if ratios else float('nan'):.4g}"
    )


# ----------------------------------------------------------------------
# deterministic oracle (method of steps)


def method_of_steps_income(history: HistorySegment, measure: RadonMeasure,
                           mu_y: float, T: float, rtol: float = 1e-10):
    """High-accuracy deterministic solution for purely atomic kernels.

    With all atoms at lags <= -gap < 0 the delay equation restricted to each
    interval of length ``gap`` is an ODE whose delayed argument reads already
    computed segments, so an adaptive integrator can be marched interval by
    interval.  Returns a callable y(t) built from the dense outputs.
    """
    from scipy.integrate import solve_ivp
    from scipy.interpolate import interp1d

    if any(v != 0.0 for v in measure.density_values):
        raise DomainError("the method-of-steps oracle supports atomic kernels only")
    if not measure.atoms:
        gap = measure.d
    else:
        gap = min(-a for a, _ in measure.atoms)
    if gap <= 0:
        raise DomainError("atoms must sit at strictly negative lags")
    hist_fn = interp1d(history.grid, history.values, kind="linear",
                       bounds_error=False,
                       fill_value=(history.values[0], history.values[-1]))
    segments = []  # (t_lo, t_hi, dense solution)

    def past(u):
        if u <= 0.0:
            return float(hist_fn(u))
        for lo, hi, sol in segments:
            if u <= hi + 1e-12:
                return float(sol(min(u, hi)))
        raise DomainError("delayed argument beyond computed segments")

    def rhs(time, y):
        delayed = sum(w * past(time + a) for a, w in measure.atoms)
        return mu_y * y[0] + delayed

    t_lo = 0.0
    y_lo = history.x0
    while t_lo < T - 1e-12:
        t_hi = min(t_lo + gap, T)
        sol = solve_ivp(rhs, (t_lo, t_hi), [y_lo], rtol=rtol, atol=1e-12,
                        dense_output=True, max_step=gap / 8)
        if not sol.success:
            raise SimulationError(f"oracle integrator failed: {sol.message}")
        segments.append((t_lo, t_hi, lambda u, s=sol: s.sol(u)[0]))
        t_lo, y_lo = t_hi, float(sol.y[0, -1])

    def solution(u):
        if np.ndim(u):
            return np.array([solution(float(v)) for v in np.asarray(u)])
        if u <= 0:
            return float(hist_fn(u))
        return past(float(u))

    return solution


# ----------------------------------------------------------------------
# positivity witness


@dataclass
class PositivityWitness:
    """Continuous nonnegative datum that drags income negative.

    The profile is 1 on the support of the kernel's negative part and decays
    linearly to 0 within ``margin``; by construction the kernel integrates it
    below ``-negative_mass/2``.  ``x0`` is the deliberately small starting
    level used by the crossing experiment.
    """

    x0: float
    xs: np.ndarray          # breakpoints of the piecewise-linear profile
    ys: np.ndarray
    margin: float
    negative_mass: float
    kernel_integral: float  # exact integral of the profile against the kernel

    def profile(self, s):
        return np.interp(s, self.xs, self.ys)

    def history(self, h: float) -> HistorySegment:
        d = -float(self.xs[0])
        n = steps_in_window(d, h)
        grid = -d + h * np.arange(n + 1)
        values = np.interp(grid, self.xs, self.ys)
        values[-1] = self.x0
        return HistorySegment(h, values)


def positivity_witness(measure: RadonMeasure, *,
                       start_scale: float = 1.0 / 64.0) -> PositivityWitness | None:
    """Build the profile certifying that a signed kernel kills positivity.

    Returns ``None`` for nonnegative kernels.  ``start_scale`` multiplies the
    canonical small starting level ``negative_mass / 8``.
    """
    neg = measure.negative_part()
    m = neg.mass()
    if m <= 0.0:
        return None
    pos = measure.positive_part()
    points, intervals = neg.support()
    comps = [(p, p) for p in points] + list(intervals)
    comps.sort()
    pos_atoms = [a for a, _ in pos.atoms]
    d = measure.d
    margin = d / 10.0
    for _ in range(60):
        xs, ys = _bump_profile(comps, pos_atoms, d, margin)
        val = measure.integrate_pwlinear(xs, ys)
        if val < -0.5 * m:
            x0 = start_scale * m / 8.0
            return PositivityWitness(x0=x0, xs=xs, ys=ys, margin=margin,
                                     negative_mass=m, kernel_integral=val)
        margin *= 0.5
    raise SimulationError(
        "could not certify the negative part; positive mass clings to its support"
    )


def _bump_profile(comps, pos_atoms, d, margin):
    """Piecewise-linear plateau on the negative support, 0 within margin.

    The profile is max(0, 1 - dist(s, support)/margin), further clamped to
    vanish at atoms of the positive part (ramping back up over one margin),
    so the positive mass it picks up shrinks to zero with the margin.
    """
    nodes = {-d, 0.0}
    for lo, hi in comps:
        for x in (lo - margin, lo, hi, hi + margin):
            if -d <= x <= 0.0:
                nodes.add(x)
    for (_, hi1), (lo2, _) in zip(comps[:-1], comps[1:]):
        mid = 0.5 * (hi1 + lo2)
        if -d <= mid <= 0.0:
            nodes.add(mid)
    for a in pos_atoms:
        for x in (a - margin, a, a + margin):
            if -d <= x <= 0.0:
                nodes.add(x)
    xs = np.array(sorted(nodes))
    dist = np.array([min(
        (0.0 if lo <= x <= hi else min(abs(x - lo), abs(x - hi)))
        for lo, hi in comps) for x in xs])
    ys = np.maximum(0.0, 1.0 - dist / margin)
    if pos_atoms:
        carve = np.array([min(min(abs(x - a) for a in pos_atoms) / margin, 1.0)
                          for x in xs])
        ys = np.minimum(ys, carve)
    return xs, ys


def crossing_probability(measure: RadonMeasure, params: MarketParams, *,
                         h: float, T: float, n_paths: int, seed: int = 0,
                         start_scale: float = 1.0 / 64.0):
    """Fraction of paths whose income crosses zero under the witness datum."""
    witness = positivity_witness(measure, start_scale=start_scale)
    if witness is None:
        raise DomainError("kernel is nonnegative; no crossing to witness")
    hist = witness.history(h)
    stats = simulate_income(hist, measure, params, T, n_paths, seed,
                            record_paths=False)
    frac = float(np.mean(stats.y_min < 0.0))
    stderr = math.sqrt(max(frac * (1.0 - frac), 1e-12) / n_paths)
    return frac, stderr, witness

"""Reproducible Monte Carlo plumbing: noise plans, estimates, convergence.

Every Brownian increment in the package is drawn from a counter-based
Philox stream keyed by ``(seed, purpose, path index)``.  A path's draws are
therefore independent of how paths are chunked across workers, which is what
makes simulation output byte-identical for 1, 4 or 16 worker threads: the
reduction itself is always a fixed pairwise tree over the path-indexed array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

# stream purposes
MARKET = 0  # increments of the traded-asset Brownian motion
EXTRA = 1   # increments of the independent noise that makes markets incomplete


def path_generator(seed: int, path: int, purpose: int) -> np.random.Generator:
    """Counter-based generator for one path and purpose.

    Philox is seeded through a SeedSequence over the full key, so streams for
    different (seed, purpose, path) triples are statistically independent and
    reproducible regardless of creation order.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=(int(purpose), int(path)))
    return np.random.Generator(np.random.Philox(seed=ss))


@dataclass(frozen=True)
class NoisePlan:
    """Shape and identity of a batch of Brownian increments."""

    n: int          # number of traded risk factors
    h: float        # time step
    n_steps: int
    n_paths: int
    seed: int
    with_extra: bool = False  # also draw the orthogonal (incomplete-market) noise

    def __post_init__(self):
        if self.n < 1 or self.n_steps < 1 or self.n_paths < 1:
            raise DomainError("noise plan dimensions must be positive")
        if not (self.h > 0):
            raise DomainError("step size must be positive")

    @property
    def horizon(self) -> float:
        return self.n_steps * self.h


def generate_noise(plan: NoisePlan):
    """Materialise increments for every path of the plan.

    Returns ``(dZ, dZ_star)`` with shape ``(n_paths, n_steps, n)``; the second
    array is ``None`` unless ``plan.with_extra``.  Increments are already
    scaled by ``sqrt(h)``.  Intended for moderate batch sizes -- the path
    engine streams blocks instead of materialising large plans.
    """
    scale = math.sqrt(plan.h)
    dZ = np.empty((plan.n_paths, plan.n_steps, plan.n))
    for p in range(plan.n_paths):
        gen = path_generator(plan.seed, p, MARKET)
        dZ[p] = gen.standard_normal((plan.n_steps, plan.n))
    dZ *= scale
    dZ_star = None
    if plan.with_extra:
        dZ_star = np.empty_like(dZ)
        for p in range(plan.n_paths):
            gen = path_generator(plan.seed, p, EXTRA)
            dZ_star[p] = gen.standard_normal((plan.n_steps, plan.n))
        dZ_star *= scale
    return dZ, dZ_star


class NoiseBlocks:
    """Stream increments for a chunk of paths, one block of steps at a time.

    Keeps one live generator per (path, purpose) so successive blocks continue
    each path's stream exactly where the previous block stopped.  Blocks come
    back time-major with shape ``(block_steps, chunk_paths, n)``.
    """

    def __init__(self, seed: int, paths, n: int, h: float, with_extra: bool):
        self.paths = list(paths)
        self.n = n
        self.scale = math.sqrt(h)
        self._gens = [path_generator(seed, p, MARKET) for p in self.paths]
        self._extra = (
            [path_generator(seed, p, EXTRA) for p in self.paths] if with_extra else None
        )

    def next_block(self, steps: int):
        P = len(self.paths)
        dZ = np.empty((steps, P, self.n))
        for i, gen in enumerate(self._gens):
            dZ[:, i, :] = gen.standard_normal((steps, self.n))
        dZ *= self.scale
        dZ_star = None
        if self._extra is not None:
            dZ_star = np.empty((steps, P, self.n))
            for i, gen in enumerate(self._extra):
                dZ_star[:, i, :] = gen.standard_normal((steps, self.n))
            dZ_star *= self.scale
        return dZ, dZ_star


# ----------------------------------------------------------------------
# estimators


def pairwise_mean(values: np.ndarray) -> float:
    """Mean with numpy's fixed pairwise summation tree.

    The tree depends only on the array length, never on worker scheduling,
    so repeated runs aggregate bit-identically.
    """
    return float(np.mean(np.asarray(values, dtype=float)))


@dataclass
class Estimate:
    """A Monte Carlo estimate with its sampling error and truncation slack."""

    mean: float
    stderr: float
    n_paths: int
    tail_bound: float = 0.0
    details: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: np.ndarray, tail_bound: float = 0.0,
                     details: dict | None = None) -> "Estimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        mean = pairwise_mean(samples)
        if n > 1:
            stderr = float(np.std(samples, ddof=1) / math.sqrt(n))
        else:
            stderr = float("inf")
        return cls(mean, stderr, n, tail_bound, details or {})

    def tolerance(self, n_sigma: float = 3.0) -> float:
        """Width of the acceptance band: n_sigma standard errors plus tail."""
        return n_sigma * self.stderr + self.tail_bound

    def consistent_with(self, target: float, n_sigma: float = 3.0) -> bool:
        return abs(self.mean - target) <= self.tolerance(n_sigma)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "tail_bound": self.tail_bound,
            **({"details": self.details} if self.details else {}),
        }


# ----------------------------------------------------------------------
# step-size convergence studies


def coarsen_increments(dZ: np.ndarray, factor: int) -> np.ndarray:
    """Aggregate fine increments into coarse ones (sum over factor-blocks).

    ``dZ`` has shape (n_paths, n_steps, n) with n_steps divisible by factor;
    the result is the same Brownian path sampled on the coarser grid.
    """
    n_paths, n_steps, n = dZ.shape
    if n_steps % factor:
        raise DomainError("step count not divisible by coarsening factor")
    return dZ.reshape(n_paths, n_steps // factor, factor, n).sum(axis=2)


@dataclass
class ConvergenceReport:
    steps: list          # h per level, finest last
    errors: list         # mean pathwise error per level
    ratios: list         # errors[i] / errors[i+1], one per halving
    fitted_order: float  # least-squares slope of log2(error) vs log2(h)

    def to_dict(self):
        return {
            "steps": self.steps,
            "errors": self.errors,
            "ratios": self.ratios,
            "fitted_order": self.fitted_order,
        }


def convergence_study(task, h_coarsest: float, levels: int, n_steps_coarsest: int,
                      n_paths: int, n: int, seed: int,
                      with_extra: bool = False) -> ConvergenceReport:
    """Run ``task`` on a ladder of halved step sizes with common noise.

    ``task(h, dZ, dZ_star) -> per-path error array``.  Noise is drawn once on
    the finest grid and summed up the ladder, so every level sees the same
    Brownian path and the error ratios isolate the discretisation order.
    """
    if levels < 2:
        raise DomainError("need at least two levels to measure a ratio")
    factor_total = 2 ** (levels - 1)
    plan = NoisePlan(n=n, h=h_coarsest / factor_total,
                     n_steps=n_steps_coarsest * factor_total,
                     n_paths=n_paths, seed=seed, with_extra=with_extra)
    dZ_fine, dZs_fine = generate_noise(plan)
    steps, errors = [], []
    for lvl in range(levels):
        factor = 2 ** (levels - 1 - lvl)
        h = h_coarsest / 2**lvl
        dZ = coarsen_increments(dZ_fine, factor) if factor > 1 else dZ_fine
        dZs = None
        if with_extra:
            dZs = coarsen_increments(dZs_fine, factor) if factor > 1 else dZs_fine
        err = np.asarray(task(h, dZ, dZs), dtype=float)
        steps.append(h)
        errors.append(pairwise_mean(err))
    ratios = [errors[i] / errors[i + 1] for i in range(levels - 1)]
    logs_h = np.log2(steps)
    logs_e = np.log2(np.maximum(errors, 1e-300))
    slope = float(np.polyfit(logs_h, logs_e, 1)[0])
    return ConvergenceReport(steps, errors, ratios, slope)

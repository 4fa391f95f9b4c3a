"""Capitalized value of delayed labor income and the policy constants.

Total wealth of the agent splits into financial wealth plus the market value
of future income.  For the delayed income equation that value is an affine
functional of the current state: a capitalization factor on the present
income level plus an inner product of lag weights against the recent income
window.  This module builds those objects exactly (the lag weights are
piecewise exponential between kernel events), derives the spending/portfolio
constants of the optimal rule, and verifies the affine representation two
independent ways -- by Monte Carlo under the pricing measure, and through a
deterministic delay ODE for the discounted expected income.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine, income as income_mod
from .engine import MemoryPieces, PricingDynamics, memory_inner_product, run_chunked
from .errors import AdmissibilityError, AssumptionViolation, DomainError
from .income import HistorySegment, as_kernel_process
from .mc import Estimate
from .measures import RadonMeasure
from .params import MarketParams

__all__ = [
    "IncomeValuation", "income_valuation", "PolicyConstants",
    "policy_constants", "build_memory", "memory_value", "memory_floor",
    "human_capital", "total_wealth", "classify_state",
    "expected_income_value", "capitalized_income_tail", "MarkovCheck",
    "verify_markov_representation",
]


# ----------------------------------------------------------------------
# lag weights


def build_memory(measure: RadonMeasure, decay: float,
                 scale: float = 1.0) -> MemoryPieces:
    """Forward-discounted kernel weights as piecewise exponentials.

    For each lag ``s`` the weight is

        scale * int_{[-d, s]} exp(-decay * (s - u)) measure(du),

    right-continuous in ``s`` and jumping upward at kernel atoms.  Between
    kernel events (atom locations and density breakpoints) the weight equals
    ``A * exp(-decay * s) + B``, the form the path engine evaluates from its
    cumulative window integrals.  A point mass exactly at lag 0 never enters
    (it would only affect the weight at the single point 0, which is
    negligible for the inner product against the income window).
    """
    if not (decay > 0.0 and math.isfinite(decay)):
        raise DomainError("discount rate for the lag weights must be positive")
    d = measure.d
    events = {-d, 0.0}
    events.update(measure.density_breaks)
    events.update(a for a, _ in measure.atoms if a < 0.0)
    events = sorted(events)
    los, his, A, B = [], [], [], []
    for lo, hi in zip(events[:-1], events[1:]):
        v = measure.density_at(0.5 * (lo + hi))
        accum = measure.exp_integral(decay, upto=lo)  # atoms at lo included
        a_coef = scale * (accum - v * math.exp(decay * lo) / decay)
        b_coef = scale * v / decay
        if a_coef == 0.0 and b_coef == 0.0:
            continue
        los.append(lo)
        his.append(hi)
        A.append(a_coef)
        B.append(b_coef)
    return MemoryPieces(zeta=decay, los=np.array(los), his=np.array(his),
                        A=np.array(A), B=np.array(B))


def memory_value(mp: MemoryPieces, s):
    """Evaluate the lag weight function at lags ``s`` in [-d, 0].

    Right-continuous at kernel atoms; at ``s = 0`` this is the left limit.
    Outside the covered pieces (a kernel that vanishes near the window start)
    the weight is zero.
    """
    scalar = np.ndim(s) == 0
    s = np.atleast_1d(np.asarray(s, dtype=float))
    out = np.zeros(s.shape)
    if not mp.empty:
        idx = np.searchsorted(mp.los, s, side="right") - 1
        # lags in the half-open last piece include its right endpoint (lag 0)
        inside = (idx >= 0) & (s <= mp.his[np.minimum(idx, len(mp.his) - 1)])
        i = idx[inside]
        out[inside] = mp.A[i] * np.exp(-mp.zeta * s[inside]) + mp.B[i]
    return float(out[0]) if scalar else out


def memory_floor(mp: MemoryPieces) -> float:
    """Exact minimum of the lag weights over the window.

    On each piece the weight is monotone (a single exponential plus a
    constant), so the minimum over the window is attained at a piece
    endpoint; no grid search is involved.
    """
    if mp.empty:
        return 0.0
    at_lo = mp.A * np.exp(-mp.zeta * mp.los) + mp.B
    at_hi = mp.A * np.exp(-mp.zeta * mp.his) + mp.B
    return float(min(at_lo.min(), at_hi.min(), 0.0))


# ----------------------------------------------------------------------
# income valuation (preference-free)


@dataclass(frozen=True)
class IncomeValuation:
    """Affine pricing of the income state: preference-free constants."""

    kernel: RadonMeasure
    income_discount: float       # rate capitalizing current income
    kernel_discount: float       # forward-discounted kernel mass
    capitalization: float        # present value of a unit of current income
    memory: MemoryPieces         # lag weights, capitalization folded in

    @property
    def spread(self) -> float:
        return self.income_discount - self.kernel_discount


def income_valuation(params: MarketParams, kernel: RadonMeasure) -> IncomeValuation:
    """Price the income state, enforcing the finite-capitalization assumption."""
    decay = params.r + params.mortality
    if decay <= 0.0:
        raise DomainError(
            "r + mortality must be positive to discount future income"
        )
    income_disc = params.income_discount_rate()
    kernel_disc = kernel.exp_integral(decay)
    if income_disc - kernel_disc <= 0.0:
        raise AssumptionViolation(
            "income-discount spread",
            "discounted kernel mass {:.6g} must stay below the income "
            "discount rate {:.6g}; capitalized income diverges".format(
                kernel_disc, income_disc),
        )
    cap = 1.0 / (income_disc - kernel_disc)
    return IncomeValuation(
        kernel=kernel,
        income_discount=income_disc,
        kernel_discount=kernel_disc,
        capitalization=cap,
        memory=build_memory(kernel, decay, scale=cap),
    )


# ----------------------------------------------------------------------
# policy constants


@dataclass(frozen=True)
class PolicyConstants:
    """Everything the closed-form value function and feedback rule need.

    ``capitalization`` prices a unit of current income; ``memory`` prices the
    lagged window.  ``spending_scale`` converts total wealth to consumption
    (consumption = total wealth / spending_scale) and ``horizon`` is the
    inverse decay rate of the optimally-consuming agent's discounted spending
    flow, which also converts a terminal utility flow into a tail value.
    """

    params: MarketParams
    kernel: RadonMeasure
    income_discount: float       # rate capitalizing current income
    kernel_discount: float       # forward-discounted kernel mass
    capitalization: float        # present value of a unit of current income
    memory: MemoryPieces         # lag weights, capitalization folded in
    horizon: float               # inverse decay rate of optimal spending
    spending_scale: float        # total wealth per unit of consumption
    bequest_ratio: float         # insured bequest per unit of consumption
    myopic_demand: np.ndarray    # risky holdings per unit of total wealth
    hedge_demand: np.ndarray     # holdings shorted per unit of current income

    @property
    def spread(self) -> float:
        return self.income_discount - self.kernel_discount

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def to_dict(self) -> dict:
        return {
            "income_discount": self.income_discount,
            "kernel_discount": self.kernel_discount,
            "capitalization": self.capitalization,
            "horizon": self.horizon,
            "spending_scale": self.spending_scale,
            "bequest_ratio": self.bequest_ratio,
            "myopic_demand": self.myopic_demand.tolist(),
            "hedge_demand": self.hedge_demand.tolist(),
            "memory_floor": memory_floor(self.memory),
        }


def policy_constants(params: MarketParams, kernel: RadonMeasure) -> PolicyConstants:
    """Derive the closed-form constants, enforcing the standing assumptions.

    Raises ``AssumptionViolation`` when the planner is not impatient enough
    for the value to be finite, or when the discounted kernel mass swallows
    the income discount rate (infinite capitalized income).
    """
    params.check_impatience()
    pricing = income_valuation(params, kernel)
    gamma = params.gamma
    horizon = gamma / params.impatience_margin()
    bequest_ratio = params.bequest_weight ** (1.0 / gamma - 1.0)
    spending_scale = (1.0 + params.mortality * bequest_ratio) * horizon
    myopic = np.linalg.solve(params.sigma @ params.sigma.T,
                             params.mu_excess) / gamma
    hedge = pricing.capitalization * np.linalg.solve(params.sigma.T,
                                                     params.load_market)
    return PolicyConstants(
        params=params,
        kernel=kernel,
        income_discount=pricing.income_discount,
        kernel_discount=pricing.kernel_discount,
        capitalization=pricing.capitalization,
        memory=pricing.memory,
        horizon=horizon,
        spending_scale=spending_scale,
        bequest_ratio=bequest_ratio,
        myopic_demand=myopic,
        hedge_demand=hedge,
    )


# ----------------------------------------------------------------------
# state valuation


def _check_window(constants, history: HistorySegment):
    if abs(history.d - constants.kernel.d) > 1e-9 * max(1.0, constants.kernel.d):
        raise DomainError(
            f"history window d={history.d} does not match the kernel "
            f"window d={constants.kernel.d}"
        )


def human_capital(constants, history: HistorySegment) -> float:
    """Market value of future income given the current window.

    ``constants`` may be either the preference-free ``IncomeValuation`` or
    the full ``PolicyConstants``.
    """
    _check_window(constants, history)
    inner = memory_inner_product(constants.memory, history.values, history.h)
    return constants.capitalization * history.x0 + inner


def total_wealth(constants: PolicyConstants, w: float,
                 history: HistorySegment) -> float:
    return w + human_capital(constants, history)


def classify_state(constants: PolicyConstants, w: float,
                   history: HistorySegment):
    """Place the state relative to the solvency frontier.

    Returns ``(label, total)`` where label is ``"interior"`` (positive total
    wealth), ``"boundary"`` (zero up to a relative band, where spending shuts
    down), or ``"inadmissible"`` (strictly negative; no admissible plan
    exists).  The band scales with the state so the classification is stable
    under rounding of either input.
    """
    total = total_wealth(constants, w, history)
    band = 1e-9 * (1.0 + abs(w) + abs(history.x0))
    if total < -band:
        return "inadmissible", total
    if total <= band:
        return "boundary", total
    return "interior", total


def require_admissible(constants: PolicyConstants, w: float,
                       history: HistorySegment) -> float:
    label, total = classify_state(constants, w, history)
    if label == "inadmissible":
        raise AdmissibilityError(
            f"total wealth {total:.6g} is below the solvency frontier; "
            "no admissible plan exists from this state"
        )
    return total


# ----------------------------------------------------------------------
# deterministic companion: discounted expected income


def _expected_income_path(history: HistorySegment, kernel: RadonMeasure,
                          params: MarketParams, n_steps: int, h: float,
                          risk_adjusted: bool = True) -> np.ndarray:
    """Euler path of the expected income under the pricing measure.

    Discounted expected income solves a deterministic delay ODE whose drift
    is the income drift minus the covariance of income shocks with the
    market price of risk; volatility drops out.  This uses the same stepping
    and window arithmetic as the stochastic engine, so it doubles as its
    deterministic skeleton.
    """
    drift = params.income_drift
    if risk_adjusted:
        drift -= float(params.load_market @ params.kappa)
    history = history.resampled(h)
    n_hist = engine.steps_in_window(history.d, h)
    compiled = engine.CompiledKernel(as_kernel_process(kernel), h, n_hist)
    bufs = engine.WindowBuffers(history.values, n_paths=1, block=256, h=h,
                                need_Y=compiled.has_pieces, zeta=None)
    q = np.empty(n_steps + 1)
    q[0] = history.x0
    for k in range(n_steps):
        t = k * h
        lag = compiled.eval(bufs, t, None)
        q[k + 1] = q[k] * (1.0 + drift * h) + float(lag[0]) * h
        bufs.append(q[k + 1], t + h)
    if not np.all(np.isfinite(q)):
        raise DomainError("expected income path overflowed; check the kernel")
    return q


def _discounted_trapezoid(q: np.ndarray, decay: float, h: float) -> float:
    t = h * np.arange(q.size)
    return float(np.trapezoid(np.exp(-decay * t) * q, dx=h))


def expected_income_value(history: HistorySegment, kernel: RadonMeasure,
                          params: MarketParams, *, h: float,
                          T: float | None = None) -> float:
    """Deterministic oracle for the capitalized income value.

    Integrates the discounted expected-income path out to ``T`` (by default
    far enough that the integrand has decayed away) and closes with a
    geometric tail fitted to the measured decay.  First-order accurate in
    ``h``; no Monte Carlo and no use of the affine representation, so it
    cross-checks both.
    """
    pricing = income_valuation(params, kernel)
    decay = params.r + params.mortality
    if T is None:
        T = min(max(12.0 / pricing.spread, 6.0 * history.d), 600.0)
    n_steps = max(int(round(T / h)), 1)
    q = _expected_income_path(history, kernel, params, n_steps, h)
    value = _discounted_trapezoid(q, decay, h)
    tail = _geometric_tail(q, decay, h, history.d)
    return value + tail


def _geometric_tail(q: np.ndarray, decay: float, h: float, d: float) -> float:
    """Remaining integral past the end of ``q`` from its measured decay."""
    m_end = math.exp(-decay * h * (q.size - 1)) * q[-1]
    back = max(int(round(max(d, 1.0) / h)), 1)
    if q.size <= back:
        return 0.0
    m_back = math.exp(-decay * h * (q.size - 1 - back)) * q[-1 - back]
    if abs(m_end) >= abs(m_back) or m_end * m_back <= 0.0:
        # not yet in the decaying regime; refuse to extrapolate
        return 0.0
    rate = math.log(abs(m_back / m_end)) / (back * h)
    return m_end / rate


def capitalized_income_tail(history: HistorySegment, kernel: RadonMeasure,
                            params: MarketParams, *, T: float, h: float,
                            horizon_factor: float = 10.0) -> float:
    """Truncation error of the discounted income integral stopped at ``T``.

    Runs the deterministic companion well past ``T`` and integrates what the
    Monte Carlo estimator leaves out.  Used as the (signed) tail correction
    of the capitalized-income estimate; callers should budget a safety
    margin on top since the companion itself carries O(h) bias.
    """
    pricing = income_valuation(params, kernel)
    extra = min(max(horizon_factor / pricing.spread, 4.0 * history.d), 500.0)
    n_total = int(round(T / h)) + max(int(round(extra / h)), 1)
    decay = params.r + params.mortality
    q = _expected_income_path(history, kernel, params, n_total, h)
    n_T = int(round(T / h))
    whole = _discounted_trapezoid(q, decay, h)
    head = _discounted_trapezoid(q[: n_T + 1], decay, h)
    return whole - head + _geometric_tail(q, decay, h, history.d)


# ----------------------------------------------------------------------
# Monte Carlo verification of the affine representation


@dataclass
class MarkovCheck:
    """Comparison of the affine income value against a Monte Carlo price."""

    closed_form: float
    estimate: Estimate
    T: float
    h: float

    @property
    def gap(self) -> float:
        return self.estimate.mean - self.closed_form

    def consistent(self, n_sigma: float = 3.0) -> bool:
        return self.estimate.consistent_with(self.closed_form, n_sigma)

    def to_dict(self) -> dict:
        return {
            "closed_form": self.closed_form,
            "mc": self.estimate.to_dict(),
            "gap": self.gap,
            "T": self.T,
            "h": self.h,
        }


def verify_markov_representation(history: HistorySegment, kernel: RadonMeasure,
                                 params: MarketParams, *, T: float,
                                 n_paths: int, seed: int = 0,
                                 h: float | None = None, n_workers: int = 1,
                                 chunk: int = engine.DEFAULT_CHUNK,
                                 tail_safety: float = 0.5) -> MarkovCheck:
    """Price the income stream by simulation and compare to the affine value.

    Simulates income jointly with the state-price density, integrates the
    discounted income to ``T`` (trapezoid in time), then corrects for the
    truncated tail using the deterministic companion ODE.  The reported
    tolerance combines the Monte Carlo error with ``tail_safety`` times the
    tail correction, covering the companion's own bias.
    """
    pricing_consts = income_valuation(params, kernel)
    kp, h, n_hist, n_steps = income_mod._prepare(history, kernel, T, h)
    dyn = income_mod.income_dynamics(params, kp, h, n_hist)
    pricing = PricingDynamics(r_plus_delta=params.r + params.mortality,
                              kappa=params.kappa)

    def worker(path_range):
        return engine.pricing_chunk(path_range, history.values, dyn, pricing,
                                    h, n_steps, params.n, seed)

    results = run_chunked(worker, n_paths, chunk, n_workers)
    pv = np.concatenate([r["pv"] for r in results])
    tail = capitalized_income_tail(history, kernel, params, T=T, h=h)
    base = Estimate.from_samples(pv)
    est = Estimate(
        mean=base.mean + tail,
        stderr=base.stderr,
        n_paths=base.n_paths,
        tail_bound=abs(tail) * tail_safety,
        details={"tail_correction": tail, "raw_mean": base.mean},
    )
    closed = human_capital(pricing_consts, history)
    return MarkovCheck(closed_form=closed, estimate=est, T=T, h=h)

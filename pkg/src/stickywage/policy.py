"""Optimal spending, bequest insurance and portfolio under sticky wages.

The closed-form solution spends a fixed fraction of total wealth (financial
wealth plus capitalized income), insures a proportional bequest, and holds
the usual growth-optimal portfolio scaled by risk aversion minus a hedge
against the priced part of wage risk.  This module evaluates the value
function and the feedback rule, exposes the pointwise optimizer of the
control Hamiltonian, and wraps the path engine so the rule (or a perturbed
or frozen variant of it) can be rolled forward and its realized utility
compared against the closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import engine, income as income_mod
from .engine import (ControlSpec, DoleansSpec, UtilitySpec, WealthDynamics,
                     run_chunked)
from .errors import AdmissibilityError, DomainError
from .income import HistorySegment
from .mc import Estimate
from .params import MarketParams
from .valuation import (PolicyConstants, classify_state, policy_constants,
                        require_admissible)

__all__ = [
    "Controls", "value_function", "feedback_controls",
    "HamiltonianPoint", "hamiltonian_maximizers",
    "flow_decay_rate", "doleans_spec", "closed_form_total_wealth",
    "FrozenControls", "PolicyRun", "simulate_policy",
    "ProbeSpec", "default_probes", "PolicyComparison", "compare_policies",
]

_MAX_RECORD = 40_000_000  # floats across all recorded per-path series


# ----------------------------------------------------------------------
# closed form


def value_function(constants: PolicyConstants, w: float,
                   history: HistorySegment) -> float:
    """Lifetime value at (financial wealth, income window).

    On the solvency boundary spending shuts down and the value degenerates:
    zero when relative risk aversion is below one, minus infinity above one.
    Below the boundary no admissible plan exists and the state is refused.
    """
    label, total = classify_state(constants, w, history)
    gamma = constants.gamma
    if label == "inadmissible":
        raise AdmissibilityError(
            f"total wealth {total:.6g} lies below the solvency frontier"
        )
    if label == "boundary":
        return 0.0 if gamma < 1.0 else float("-inf")
    return (constants.spending_scale ** gamma * total ** (1.0 - gamma)
            / (1.0 - gamma))


@dataclass(frozen=True)
class Controls:
    consumption: float
    bequest: float
    portfolio: np.ndarray
    total_wealth: float
    label: str


def feedback_controls(constants: PolicyConstants, w: float,
                      history: HistorySegment) -> Controls:
    """The optimal rule at a state: spend, insure and invest proportionally.

    The portfolio combines the myopic demand (per unit of total wealth) with
    a short hedge against the market-spanned share of wage shocks (per unit
    of current income); the hedge survives on the boundary, where spending
    stops but income risk remains.
    """
    label, total = classify_state(constants, w, history)
    if label == "inadmissible":
        raise AdmissibilityError(
            f"total wealth {total:.6g} lies below the solvency frontier"
        )
    spendable = max(total, 0.0)
    consumption = spendable / constants.spending_scale
    bequest = constants.bequest_ratio * consumption
    portfolio = (constants.myopic_demand * spendable
                 - constants.hedge_demand * history.x0)
    return Controls(consumption=consumption, bequest=bequest,
                    portfolio=portfolio, total_wealth=total, label=label)


@dataclass(frozen=True)
class HamiltonianPoint:
    consumption: float
    bequest: float
    portfolio: np.ndarray
    value: float


def hamiltonian_maximizers(params: MarketParams, marginal_value: float,
                           wealth_curvature: float,
                           cross_sensitivity: float = 0.0,
                           current_income: float = 0.0) -> HamiltonianPoint:
    """Pointwise maximizer of the control terms of the dynamic program.

    ``marginal_value`` is the derivative of the candidate value in financial
    wealth (must be positive for spending to be well defined),
    ``wealth_curvature`` its second derivative (must be negative for the
    portfolio problem to be concave), and ``cross_sensitivity`` the mixed
    derivative against the current income level, which tilts the portfolio
    by the income hedge.  Returns the maximizing controls together with the
    maximized value of the controllable terms.
    """
    if not marginal_value > 0.0:
        raise DomainError(
            "marginal value must be positive; spending is otherwise unbounded"
        )
    if not wealth_curvature < 0.0:
        raise DomainError(
            "wealth curvature must be negative; the portfolio problem is "
            "otherwise unbounded"
        )
    gamma = params.gamma
    delta = params.mortality
    bequest_ratio = params.bequest_weight ** (1.0 / gamma - 1.0)
    consumption = marginal_value ** (-1.0 / gamma)
    bequest = bequest_ratio * consumption
    lin = (params.mu_excess * marginal_value
           + params.sigma @ params.load_market * current_income
           * cross_sensitivity)
    cov = params.sigma @ params.sigma.T
    portfolio = -np.linalg.solve(cov, lin) / wealth_curvature
    spend_value = (gamma / (1.0 - gamma)
                   * (1.0 + delta * bequest_ratio)
                   * marginal_value ** (1.0 - 1.0 / gamma))
    quad_value = -0.5 * float(lin @ np.linalg.solve(cov, lin)) / wealth_curvature
    return HamiltonianPoint(consumption=consumption, bequest=bequest,
                            portfolio=portfolio,
                            value=spend_value + quad_value)


# ----------------------------------------------------------------------
# closed-form dynamics of total wealth under the rule


def flow_decay_rate(constants: PolicyConstants, c_factor: float = 1.0,
                    b_factor: float = 1.0,
                    theta_factor: float = 1.0) -> float:
    """Exact decay rate of the expected discounted utility flow.

    Under the optimal rule (all factors one) this equals the inverse of the
    planning horizon, which converts the terminal flow into the truncated
    tail of the utility integral.  Multiplicatively perturbed rules keep the
    scale-invariant structure, only with adjusted spending and exposure, so
    their rate is available in closed form as well.  A nonpositive rate
    means the perturbation destroys integrability.
    """
    p = constants.params
    gamma = p.gamma
    ksq = p.kappa_sq
    spend = (c_factor + p.mortality * constants.bequest_ratio * b_factor) \
        / constants.spending_scale
    growth = (p.r + p.mortality + theta_factor * ksq / gamma - spend)
    rate = (p.impatience + p.mortality - (1.0 - gamma) * growth
            + 0.5 * gamma * (1.0 - gamma) * (theta_factor / gamma) ** 2 * ksq)
    if rate <= 0.0:
        raise DomainError(
            "perturbed rule decays too slowly; its utility integral diverges"
        )
    return rate


def doleans_spec(constants: PolicyConstants) -> DoleansSpec:
    """Exponential comparison path for total wealth under the optimal rule.

    Valid when wage risk is fully spanned by the traded assets; the engine
    measures the worst relative gap between simulated total wealth and this
    exponential as a direct discretization diagnostic.
    """
    p = constants.params
    if not p.perfectly_correlated:
        raise DomainError(
            "the exponential comparison requires fully spanned wage risk"
        )
    gamma = p.gamma
    growth = (p.r + p.mortality + p.kappa_sq / gamma
              - 1.0 / constants.horizon)
    lin = growth - 0.5 * p.kappa_sq / gamma ** 2
    return DoleansSpec(lin=lin, kappa_over_gamma=p.kappa / gamma)


def closed_form_total_wealth(constants: PolicyConstants, start: float,
                             t, market_noise) -> np.ndarray:
    """Evaluate the exponential total-wealth path at times ``t``.

    ``market_noise`` holds the cumulative market Brownian motion at those
    times, shaped ``(len(t), n)`` or ``(n_paths, len(t), n)``.
    """
    spec = doleans_spec(constants)
    t = np.asarray(t, dtype=float)
    z = np.asarray(market_noise, dtype=float)
    return start * np.exp(spec.lin * t + z @ spec.kappa_over_gamma)


# ----------------------------------------------------------------------
# simulation wrapper


@dataclass(frozen=True)
class FrozenControls:
    """Per-step control arrays for replay, time-major ``[step, path]``."""

    consumption: np.ndarray
    bequest: np.ndarray
    portfolio: np.ndarray   # [step, path, n]

    @classmethod
    def from_run(cls, run: "PolicyRun") -> "FrozenControls":
        if run.paths is None:
            raise DomainError("freeze needs a run recorded with record=True")
        return cls(consumption=run.paths["c"], bequest=run.paths["bequest"],
                   portfolio=run.paths["theta"])

    @property
    def n_steps(self) -> int:
        return self.consumption.shape[0] - 1

    @property
    def n_paths(self) -> int:
        return self.consumption.shape[1]


@dataclass
class PolicyRun:
    """Per-path outcome of rolling a control rule forward."""

    J: np.ndarray                 # truncated discounted utility, per path
    last_flow: np.ndarray         # discounted utility flow at the horizon
    total_wealth_0: np.ndarray
    W_T: np.ndarray
    gap_max: float                # worst relative gap to the exponential path
    deficit_max: float            # worst dip of total wealth below zero
    total_wealth_min: float
    T: float
    h: float
    seed: int
    decay_rate: float | None      # closed-form flow decay, when available
    paths: dict | None = None     # time-major series when recorded
    gap_mean: float | None = None  # sup-t of the path-averaged signed gap

    @property
    def n_paths(self) -> int:
        return self.J.size

    def utility(self, tail_safety: float = 0.5) -> Estimate:
        """Estimate of the infinite-horizon expected utility.

        Adds the closed-form tail (terminal flow over the decay rate) per
        path; ``tail_safety`` of the correction is kept as tolerance slack.
        Without a closed-form rate the truncated value is returned and the
        tail is budgeted from the measured terminal flow alone.
        """
        if self.decay_rate is not None:
            corrected = self.J + self.last_flow / self.decay_rate
            margin = tail_safety * abs(float(np.mean(self.last_flow))) \
                / self.decay_rate
            return Estimate.from_samples(
                corrected, tail_bound=margin,
                details={"tail_corrected": True})
        flow = abs(float(np.mean(self.last_flow)))
        return Estimate.from_samples(
            self.J, tail_bound=2.0 * flow * self.T,
            details={"tail_corrected": False})


def _wealth_dynamics(params: MarketParams) -> WealthDynamics:
    return WealthDynamics(
        r_plus_delta=params.r + params.mortality,
        mortality=params.mortality,
        mu_excess=params.mu_excess,
        sigma=params.sigma,
    )


def _utility_spec(params: MarketParams) -> UtilitySpec:
    return UtilitySpec(
        gamma=params.gamma,
        rho_plus_delta=params.impatience + params.mortality,
        bequest_weight=params.bequest_weight,
        mortality=params.mortality,
    )


def simulate_policy(history: HistorySegment, kernel, params: MarketParams, *,
                    w0: float, T: float, n_paths: int = 1, seed: int = 0,
                    h: float | None = None,
                    constants: PolicyConstants | None = None,
                    c_factor: float = 1.0, b_factor: float = 1.0,
                    theta_factor: float = 1.0,
                    theta_tilt: np.ndarray | None = None,
                    frozen: FrozenControls | None = None,
                    compare_closed_form: bool = False, record: bool = False,
                    exact_income: bool = False, n_workers: int = 1,
                    chunk: int = engine.DEFAULT_CHUNK) -> PolicyRun:
    """Roll the feedback rule (or a variant) forward and score it.

    Multiplicative factors probe the rule: ``c_factor`` scales spending,
    ``b_factor`` the insured bequest, ``theta_factor`` the myopic portfolio
    (the income hedge is kept; use ``theta_tilt`` to perturb it).  ``frozen``
    replays explicit per-step controls instead, which is how a rule optimal
    for one kernel is evaluated under another.  ``compare_closed_form``
    additionally tracks the exponential total-wealth path on the same noise
    and reports the worst relative gap.
    """
    constants = constants or policy_constants(params, kernel)
    kp, h, n_hist, n_steps = income_mod._prepare(history, kernel, T, h)
    require_admissible(constants, w0, history)
    dyn = income_mod.income_dynamics(params, kp, h, n_hist, exact_income)
    pure_feedback = (c_factor == 1.0 and b_factor == 1.0
                     and theta_factor == 1.0 and theta_tilt is None
                     and frozen is None)
    if compare_closed_form and not pure_feedback:
        raise DomainError(
            "the exponential comparison only describes the unperturbed rule"
        )
    doleans = doleans_spec(constants) if compare_closed_form else None
    if frozen is not None:
        if frozen.n_steps != n_steps or frozen.n_paths != n_paths:
            raise DomainError(
                f"frozen controls cover {frozen.n_steps} steps x "
                f"{frozen.n_paths} paths, run asks for {n_steps} x {n_paths}"
            )
        # total wealth is still reported through the affine representation,
        # so a frozen replay under a different kernel yields the computable
        # lower bound for the solvency checks
        # the replay keeps the feedback sensitivities so its integrator
        # applies the same correction terms as the run it reproduces
        spec = ControlSpec(frozen_c=frozen.consumption,
                           frozen_b=frozen.bequest,
                           frozen_theta=frozen.portfolio,
                           merton_vec=constants.myopic_demand,
                           hedge_vec=constants.hedge_demand,
                           coef_now=constants.capitalization,
                           memory=constants.memory)
    else:
        spec = ControlSpec(
            f_scale=constants.spending_scale,
            bequest_factor=constants.bequest_ratio,
            merton_vec=constants.myopic_demand,
            hedge_vec=constants.hedge_demand,
            coef_now=constants.capitalization,
            memory=constants.memory,
            c_factor=c_factor, b_factor=b_factor, theta_factor=theta_factor,
            theta_tilt=theta_tilt,
        )
    if record and n_paths * (n_steps + 1) * (5 + params.n) > _MAX_RECORD:
        raise DomainError(
            "recorded run too large; lower n_paths or the horizon"
        )
    wealth = _wealth_dynamics(params)
    utility = _utility_spec(params)

    def worker(path_range):
        sub = spec
        if spec.frozen:
            sl = slice(path_range.start, path_range.stop)
            sub = replace(spec, frozen_c=spec.frozen_c[:, sl],
                          frozen_b=spec.frozen_b[:, sl],
                          frozen_theta=spec.frozen_theta[:, sl])
        return engine.controlled_chunk(path_range, history.values, w0, dyn,
                                       wealth, sub, utility, h, n_steps,
                                       params.n, seed, doleans=doleans,
                                       record_paths=record)

    results = run_chunked(worker, n_paths, chunk, n_workers)
    J = np.concatenate([r["J"] for r in results])
    last_flow = np.concatenate([r["last_flow"] for r in results])
    tw0 = np.concatenate([r["total_wealth_0"] for r in results])
    W_T = np.concatenate([r["W_T"] for r in results])
    gap = max(float(r["gap_max"].max()) for r in results)
    deficit = max(float(r["deficit_max"].max()) for r in results)
    tw_min = min(float(r["total_wealth_min"].min()) for r in results)
    gap_mean = None
    if doleans is not None:
        # chunk partials combined in chunk order, so the sum is identical
        # whatever the thread count; the martingale part of the pathwise
        # error averages out here, leaving the O(h) drift component
        total = np.sum([r["gap_path_sum"] for r in results], axis=0)
        gap_mean = float(np.max(np.abs(total))) / n_paths
    paths = None
    if record:
        paths = {
            key: np.concatenate([r["paths"][key] for r in results], axis=1)
            for key in results[0]["paths"]
        }
    rate = None
    if frozen is None and theta_tilt is None:
        try:
            rate = flow_decay_rate(constants, c_factor, b_factor, theta_factor)
        except DomainError:
            rate = None
    return PolicyRun(J=J, last_flow=last_flow, total_wealth_0=tw0, W_T=W_T,
                     gap_max=gap, deficit_max=deficit, total_wealth_min=tw_min,
                     T=n_steps * h, h=h, seed=seed, decay_rate=rate,
                     paths=paths, gap_mean=gap_mean)


# ----------------------------------------------------------------------
# perturbation comparisons (common random numbers)


@dataclass(frozen=True)
class ProbeSpec:
    """A named multiplicative perturbation of the feedback rule."""

    name: str
    c_factor: float = 1.0
    b_factor: float = 1.0
    theta_factor: float = 1.0
    theta_tilt: np.ndarray | None = None


def default_probes() -> list[ProbeSpec]:
    return [
        ProbeSpec("overspend", c_factor=1.2),
        ProbeSpec("underspend", c_factor=0.8),
        ProbeSpec("overinvest", theta_factor=1.3),
        ProbeSpec("underinvest", theta_factor=0.7),
        ProbeSpec("overinsure", b_factor=1.4),
    ]


@dataclass
class PolicyComparison:
    probe: ProbeSpec
    base: Estimate
    perturbed: Estimate
    delta: Estimate      # base minus perturbed, path-paired

    def strictly_worse(self, n_sigma: float = 3.0) -> bool:
        """True when the probe loses utility beyond noise and tail slack."""
        return self.delta.mean > self.delta.tolerance(n_sigma)

    def to_dict(self) -> dict:
        return {
            "probe": self.probe.name,
            "base": self.base.to_dict(),
            "perturbed": self.perturbed.to_dict(),
            "delta": self.delta.to_dict(),
            "strictly_worse": self.strictly_worse(),
        }


def compare_policies(history: HistorySegment, kernel, params: MarketParams, *,
                     w0: float, T: float, n_paths: int, seed: int = 0,
                     h: float | None = None,
                     probes: list[ProbeSpec] | None = None,
                     n_workers: int = 1,
                     chunk: int = engine.DEFAULT_CHUNK) -> list[PolicyComparison]:
    """Score the feedback rule against perturbed variants on common noise.

    Every run reuses the same per-path noise streams, so the utility gaps
    are path-paired and their sampling error reflects the difference, not
    the level.  Tail corrections use each rule's own closed-form decay rate;
    half of either correction is kept as tolerance slack.
    """
    constants = policy_constants(params, kernel)
    common = dict(w0=w0, T=T, n_paths=n_paths, seed=seed, h=h,
                  constants=constants, n_workers=n_workers, chunk=chunk)
    base_run = simulate_policy(history, kernel, params, **common)
    base_corr = base_run.J + base_run.last_flow / base_run.decay_rate
    base_est = base_run.utility()
    out = []
    for probe in probes if probes is not None else default_probes():
        run = simulate_policy(history, kernel, params,
                              c_factor=probe.c_factor,
                              b_factor=probe.b_factor,
                              theta_factor=probe.theta_factor,
                              theta_tilt=probe.theta_tilt, **common)
        est = run.utility()
        if run.decay_rate is not None:
            corr = run.J + run.last_flow / run.decay_rate
        else:
            corr = run.J
        delta = Estimate.from_samples(
            base_corr - corr,
            tail_bound=(base_est.tail_bound + est.tail_bound),
        )
        out.append(PolicyComparison(probe=probe, base=base_est,
                                    perturbed=est, delta=delta))
    return out

"""Worst-case kernel analysis: the agent against an adversarial Nature.

Nature picks the delay kernel from an uncertainty set; the agent picks a
plan.  When the set has a least element in the natural order on signed
kernels -- an order interval always does, a finite family does whenever its
lattice minimum is a member -- and the induced lag weights stay nonnegative,
the game collapses: the agent plays the rule that is optimal for the least
kernel, Nature cannot push the value below that, and the guaranteed value is
the closed form evaluated at the least kernel.  This module builds the
reduction and then stress-tests it on paths, replaying the frozen optimal
controls while Nature moves inside the set, possibly reacting to time and to
the driving noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssumptionViolation, DomainError
from .income import HistorySegment
from .measures import (KernelProcess, OrderRelation, RadonMeasure,
                       lattice_min)
from .params import MarketParams
from .policy import (FrozenControls, PolicyRun, feedback_controls,
                     simulate_policy, value_function)
from .valuation import PolicyConstants, memory_floor, memory_value, \
    policy_constants

__all__ = [
    "UncertaintySet", "GameReport", "solve_robust",
    "tube_adversary", "oscillating_mix", "state_mix",
    "AdversaryOutcome", "SaddleReport", "stress_test_saddle",
]


# ----------------------------------------------------------------------
# uncertainty sets


@dataclass(frozen=True)
class UncertaintySet:
    """A set of candidate delay kernels, ordered as signed measures.

    Two constructions are supported: an order interval ("tube") around a
    center kernel, and an explicit finite family.  The tube always contains
    its least element; a finite family is asked for it explicitly.
    """

    kind: str
    center: RadonMeasure | None = None
    halfwidth: RadonMeasure | None = None
    members: tuple[RadonMeasure, ...] = ()

    @classmethod
    def tube(cls, center: RadonMeasure,
             halfwidth: RadonMeasure) -> "UncertaintySet":
        if halfwidth.d != center.d:
            raise DomainError("center and halfwidth live on different windows")
        if not halfwidth.is_nonnegative:
            raise DomainError("tube halfwidth must be a nonnegative kernel")
        return cls(kind="tube", center=center, halfwidth=halfwidth)

    @classmethod
    def family(cls, members) -> "UncertaintySet":
        members = tuple(members)
        if not members:
            raise DomainError("kernel family must not be empty")
        d = members[0].d
        if any(m.d != d for m in members[1:]):
            raise DomainError("family members live on different windows")
        return cls(kind="family", members=members)

    def lower_bound(self) -> RadonMeasure:
        """Greatest lower bound of the set in the kernel order."""
        if self.kind == "tube":
            return self.center - self.halfwidth
        low = self.members[0]
        for m in self.members[1:]:
            low = lattice_min(low, m)
        return low

    def lower_bound_attained(self) -> bool:
        """Whether the greatest lower bound is itself a candidate kernel."""
        if self.kind == "tube":
            return True
        low = self.lower_bound()
        return any(m == low for m in self.members)

    def contains(self, kernel: RadonMeasure) -> bool:
        if self.kind == "family":
            return any(m == kernel for m in self.members)
        below = (self.center - self.halfwidth).compare(kernel)
        above = kernel.compare(self.center + self.halfwidth)
        ok = (OrderRelation.LESS_OR_EQUAL, OrderRelation.EQUAL)
        return below in ok and above in ok

    def upper_bound(self) -> RadonMeasure:
        if self.kind == "tube":
            return self.center + self.halfwidth
        high = self.members[0]
        for m in self.members[1:]:
            high = high + (m - high).positive_part()
        return high


# ----------------------------------------------------------------------
# reduction


@dataclass
class GameReport:
    """Solution of the robust problem by worst-case-kernel reduction."""

    worst_kernel: RadonMeasure
    constants: PolicyConstants
    value: float
    total_wealth: float
    memory_floor: float

    def to_dict(self) -> dict:
        return {
            "worst_kernel": self.worst_kernel.to_dict(),
            "constants": self.constants.to_dict(),
            "value": self.value,
            "total_wealth": self.total_wealth,
            "memory_floor": self.memory_floor,
        }


def _memory_scale(constants: PolicyConstants) -> float:
    mp = constants.memory
    if mp.empty:
        return 1.0
    ends = np.concatenate([mp.los, mp.his])
    return max(1.0, float(np.max(np.abs(memory_value(mp, ends)))))


def solve_robust(params: MarketParams, uncertainty: UncertaintySet,
                 w0: float, history: HistorySegment) -> GameReport:
    """Solve the game by reducing Nature to the least kernel.

    Verifies the hypotheses the reduction rests on: the least kernel must be
    a candidate itself, the income history must be nonnegative (so smaller
    kernels genuinely hurt), the least kernel must satisfy the standing
    assumptions, and the lag weights it induces must be nonnegative.  Any
    failure raises ``AssumptionViolation`` naming the broken hypothesis.
    """
    if not uncertainty.lower_bound_attained():
        raise AssumptionViolation(
            "attained lower bound",
            "the kernel family does not contain its lattice minimum, so no "
            "single worst-case kernel exists",
        )
    if not history.is_nonnegative:
        raise AssumptionViolation(
            "nonnegative history",
            "the worst-case reduction orders values through a nonnegative "
            "income window",
        )
    worst = uncertainty.lower_bound()
    constants = policy_constants(params, worst)  # impatience + spread checks
    floor = memory_floor(constants.memory)
    if floor < -1e-12 * _memory_scale(constants):
        raise AssumptionViolation(
            "nonnegative lag weights",
            f"the least kernel induces lag weights dipping to {floor:.3e}; "
            "larger kernels need not dominate and the reduction fails",
        )
    value = value_function(constants, w0, history)
    return GameReport(
        worst_kernel=worst,
        constants=constants,
        value=value,
        total_wealth=feedback_controls(constants, w0, history).total_wealth,
        memory_floor=floor,
    )


# ----------------------------------------------------------------------
# adversary strategies


def oscillating_mix(period: float):
    """Time-only mixing weight sweeping [0, 1] with the given period."""
    def weight(t):
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / period))
    return weight


def state_mix():
    """Noise-reactive mixing weight 1 / (1 + |z|^2), one value per path."""
    def weight(t, z):
        if z is None:
            return 1.0
        return 1.0 / (1.0 + np.sum(np.square(z), axis=-1))
    return weight


def tube_adversary(uncertainty: UncertaintySet, mix,
                   name: str = "adversary") -> KernelProcess:
    """Nature's play inside a tube: least kernel plus a mixed-in spread.

    ``mix`` is either a constant in [0, 1], a function of time, or a
    function of (time, noise state); the realized kernel is
    ``least + mix * (greatest - least)``, which stays in the tube whenever
    the mix does stay in [0, 1].
    """
    low = uncertainty.lower_bound()
    span = uncertainty.upper_bound() - low
    tv_bound = low.total_variation() + span.total_variation()
    if isinstance(mix, (int, float, np.floating)):
        lam = float(mix)
        if not 0.0 <= lam <= 1.0:
            raise DomainError("a constant mix must lie in [0, 1]")
        return KernelProcess.constant(low + lam * span, tv_bound)
    try:
        takes_state = mix.__code__.co_argcount >= 2
    except AttributeError:
        takes_state = True
    if takes_state:
        return KernelProcess.state_modulated(
            [(low, lambda t, z: 1.0), (span, mix)], tv_bound)
    return KernelProcess.time_varying(
        [(low, lambda t: 1.0), (span, mix)], tv_bound)


# ----------------------------------------------------------------------
# path-level stress test of the saddle


@dataclass
class AdversaryOutcome:
    """Path diagnostics of the frozen optimal plan against one adversary."""

    name: str
    income_gap_min: float        # min over paths/steps of (adversary - base) income
    wealth_gap_min: float        # same for represented total wealth
    total_wealth_min: float
    utility_gap_max: float       # max |J_adversary - J_base|; zero by construction
    floor: float                 # admissibility floor the run is held to

    @property
    def admissible(self) -> bool:
        return self.total_wealth_min >= -self.floor

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "income_gap_min": self.income_gap_min,
            "wealth_gap_min": self.wealth_gap_min,
            "total_wealth_min": self.total_wealth_min,
            "utility_gap_max": self.utility_gap_max,
            "admissible": self.admissible,
        }


@dataclass
class SaddleReport:
    game: GameReport
    base: PolicyRun
    outcomes: list[AdversaryOutcome]
    replay_gap: float            # |J replay - J base| under the least kernel

    def all_admissible(self) -> bool:
        return all(o.admissible for o in self.outcomes)

    def to_dict(self) -> dict:
        return {
            "value": self.game.value,
            "replay_gap": self.replay_gap,
            "outcomes": [o.to_dict() for o in self.outcomes],
        }


def stress_test_saddle(params: MarketParams, uncertainty: UncertaintySet,
                       history: HistorySegment, *, w0: float, T: float,
                       n_paths: int, seed: int = 0, h: float | None = None,
                       adversaries: list[tuple[str, object]] | None = None,
                       floor_scale: float = 10.0,
                       n_workers: int = 1) -> SaddleReport:
    """Replay the worst-case-optimal plan while Nature moves in the set.

    Rolls the rule that is optimal for the least kernel, freezes its
    realized controls, then replays them path-by-path (same noise) under
    adversarial kernels from the set.  Utility is a functional of the frozen
    controls alone, so it must not move at all; income and represented total
    wealth must only improve; and the represented total wealth must stay
    above ``-floor_scale * h * |initial total wealth|`` -- the solvency
    floor up to one discretization quantum.
    """
    game = solve_robust(params, uncertainty, w0, history)
    worst = game.worst_kernel
    base = simulate_policy(history, worst, params, w0=w0, T=T,
                           n_paths=n_paths, seed=seed, h=h,
                           constants=game.constants, record=True,
                           n_workers=n_workers)
    frozen = FrozenControls.from_run(base)
    common = dict(w0=w0, T=T, n_paths=n_paths, seed=seed, h=h,
                  constants=game.constants, frozen=frozen, record=True,
                  n_workers=n_workers)
    replay = simulate_policy(history, worst, params, **common)
    replay_gap = float(np.max(np.abs(replay.J - base.J)))
    if adversaries is None:
        adversaries = [
            ("greatest-kernel", 1.0),
            ("oscillating", oscillating_mix(period=max(2.0 * history.d, 1.0))),
            ("noise-reactive", state_mix()),
        ]
    floor = floor_scale * base.h * max(1.0, float(np.mean(
        np.abs(base.total_wealth_0))))
    outcomes = []
    for name, mix in adversaries:
        kp = tube_adversary(uncertainty, mix, name)
        run = simulate_policy(history, kp, params, **common)
        income_gap = float(np.min(run.paths["y"] - base.paths["y"]))
        wealth_gap = float(np.min(run.paths["total_wealth"]
                                  - base.paths["total_wealth"]))
        outcomes.append(AdversaryOutcome(
            name=name,
            income_gap_min=income_gap,
            wealth_gap_min=wealth_gap,
            total_wealth_min=run.total_wealth_min,
            utility_gap_max=float(np.max(np.abs(run.J - base.J))),
            floor=floor,
        ))
    return SaddleReport(game=game, base=base, outcomes=outcomes,
                        replay_gap=replay_gap)

"""Life-cycle consumption and investment with sticky (delayed) wages.

Signed delay kernels act on the lagged income path; the library prices the
income stream in closed form, derives the optimal spending/insurance/
portfolio rule, solves the worst-case game over kernel uncertainty sets, and
ships the Monte Carlo and deterministic machinery to verify all of it.
"""

from importlib import metadata as _metadata

try:
    __version__ = _metadata.version("stickywage")
except _metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0+local"

from .errors import (AdmissibilityError, AssumptionViolation, ConfigError,
                     DomainError, SimulationError, StickywageError)
from .measures import (KernelProcess, OrderRelation, RadonMeasure, dirac,
                       lattice_max, lattice_min, uniform_density, zero_measure)
from .params import MarketParams
from .income import (HistorySegment, IncomePath, IncomeStats,
                     crossing_probability, method_of_steps_income,
                     picard_solve, positivity_witness, simulate_income,
                     variation_of_constants)
from .valuation import (IncomeValuation, MarkovCheck, PolicyConstants,
                        build_memory, classify_state, expected_income_value,
                        human_capital, income_valuation, memory_floor,
                        memory_value, policy_constants, total_wealth,
                        verify_markov_representation)
from .policy import (Controls, FrozenControls, HamiltonianPoint,
                     PolicyComparison, PolicyRun, ProbeSpec, compare_policies,
                     default_probes, feedback_controls, flow_decay_rate,
                     hamiltonian_maximizers, simulate_policy, value_function)
from .robust import (AdversaryOutcome, GameReport, SaddleReport,
                     UncertaintySet, solve_robust, stress_test_saddle,
                     tube_adversary)
from .scenario import Scenario, load_scenario, parse_scenario
from .mc import Estimate

__all__ = [
    "__version__",
    # errors
    "StickywageError", "DomainError", "AssumptionViolation",
    "AdmissibilityError", "SimulationError", "ConfigError",
    # kernels
    "RadonMeasure", "KernelProcess", "OrderRelation", "dirac",
    "uniform_density", "zero_measure", "lattice_min", "lattice_max",
    # market
    "MarketParams",
    # income paths
    "HistorySegment", "IncomePath", "IncomeStats", "simulate_income",
    "variation_of_constants", "picard_solve", "method_of_steps_income",
    "positivity_witness", "crossing_probability",
    # valuation
    "IncomeValuation", "PolicyConstants", "income_valuation",
    "policy_constants", "build_memory", "memory_value", "memory_floor",
    "human_capital", "total_wealth", "classify_state",
    "expected_income_value", "MarkovCheck", "verify_markov_representation",
    # policy
    "Controls", "value_function", "feedback_controls", "HamiltonianPoint",
    "hamiltonian_maximizers", "flow_decay_rate", "FrozenControls",
    "PolicyRun", "simulate_policy", "ProbeSpec", "default_probes",
    "PolicyComparison", "compare_policies",
    # robust game
    "UncertaintySet", "GameReport", "solve_robust", "tube_adversary",
    "AdversaryOutcome", "SaddleReport", "stress_test_saddle",
    # scenarios + estimates
    "Scenario", "load_scenario", "parse_scenario", "Estimate",
]

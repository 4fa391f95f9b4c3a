"""Closed-form income pricing against quadrature and recursion oracles.

The frozen numbers were produced by an independent scipy.integrate.quad
implementation of the pricing integrals (no shared code with the library).
"""

import math

import numpy as np
import pytest

from conftest import atomic_kernel, density_kernel, make_params, mixed_kernel
from stickywage.errors import (AdmissibilityError, AssumptionViolation,
                               DomainError)
from stickywage.income import HistorySegment
from stickywage.measures import RadonMeasure
from stickywage.valuation import (capitalized_income_tail, classify_state,
                                  expected_income_value, human_capital,
                                  income_valuation, memory_floor,
                                  memory_value, policy_constants,
                                  require_admissible, total_wealth,
                                  verify_markov_representation)

FLAT = HistorySegment.constant(d=1.0, h=0.001, level=1.0)


# ----------------------------------------------------------------------
# pricing constants


def test_base_constants_match_hand_formulas(params, mixed):
    val = income_valuation(params, mixed)
    # r + mortality - drift + income_vol * corr * kappa
    assert val.income_discount == pytest.approx(0.0825, abs=1e-15)
    # atom 0.01 at -0.5 plus a 0.02 density step on [-0.75, -0.25)
    disc = (0.01 * math.exp(-0.03)
            + (0.02 / 0.06) * (math.exp(-0.015) - math.exp(-0.045)))
    assert val.kernel_discount == pytest.approx(disc, rel=1e-14)
    assert val.capitalization == pytest.approx(1.0 / (0.0825 - disc),
                                               rel=1e-14)
    assert val.spread == pytest.approx(0.0825 - disc, rel=1e-14)


def test_capitalization_requires_positive_spread(params):
    heavy = RadonMeasure(d=1.0, atoms=[(-0.1, 0.2)])   # 0.2 e^{-.006} > beta
    with pytest.raises(AssumptionViolation):
        income_valuation(params, heavy)


def test_negative_discount_rate_rejected(mixed):
    params = make_params(r=-0.02, mortality=0.01)
    with pytest.raises(DomainError):
        income_valuation(params, mixed)


def test_no_delay_reduction(params):
    val = income_valuation(params, RadonMeasure(d=1.0))
    assert val.kernel_discount == 0.0
    assert val.capitalization == pytest.approx(1.0 / 0.0825, rel=1e-15)
    assert val.memory.empty
    assert human_capital(val, FLAT) == pytest.approx(1.0 / 0.0825, rel=1e-15)


# ----------------------------------------------------------------------
# lag weights


def test_memory_weight_values(params, mixed):
    mem = income_valuation(params, mixed).memory
    cap = income_valuation(params, mixed).capitalization
    # before any kernel support has entered
    assert memory_value(mem, -0.9) == 0.0
    # density only: (0.02/zeta) (1 - e^{-zeta (s + 0.75)}) at s = -0.6
    want = cap * (0.02 / 0.06) * (1.0 - math.exp(-0.06 * 0.15))
    assert memory_value(mem, -0.6) == pytest.approx(want, rel=1e-12)
    # atom included from its own lag onward (right continuity)
    want = cap * (0.01 + (0.02 / 0.06) * (1.0 - math.exp(-0.06 * 0.25)))
    assert memory_value(mem, -0.5) == pytest.approx(want, rel=1e-12)
    jump = memory_value(mem, -0.5) - memory_value(mem, -0.5 - 1e-9)
    assert jump == pytest.approx(cap * 0.01, rel=1e-6)


def test_memory_piece_boundaries(params, mixed):
    mem = income_valuation(params, mixed).memory
    assert np.allclose(mem.los, [-0.75, -0.5, -0.25])
    assert np.allclose(mem.his, [-0.5, -0.25, 0.0])


@pytest.mark.parametrize("kernel", [atomic_kernel(), density_kernel(),
                                    mixed_kernel()])
def test_lag_zero_weight_is_discounted_mass_times_capitalization(params,
                                                                 kernel):
    val = income_valuation(params, kernel)
    want = val.capitalization * val.kernel_discount
    assert memory_value(val.memory, 0.0) == pytest.approx(want, rel=1e-12)


def test_memory_value_scalar_and_array(params, mixed):
    mem = income_valuation(params, mixed).memory
    got = memory_value(mem, np.array([-0.9, -0.6, 0.0]))
    assert got.shape == (3,)
    assert got[0] == 0.0
    assert isinstance(memory_value(mem, -0.6), float)


def test_memory_floor_zero_for_nonnegative(params, mixed):
    assert memory_floor(income_valuation(params, mixed).memory) == 0.0


def test_memory_floor_signed_kernel(params):
    neg = RadonMeasure(d=1.0, atoms=[(-0.5, -0.03)])
    val = income_valuation(params, neg)
    cap = 1.0 / (0.0825 + 0.03 * math.exp(-0.03))
    assert val.capitalization == pytest.approx(cap, rel=1e-14)
    # weight is -0.03 cap e^{-zeta (s + 0.5)}, most negative right at the atom
    assert memory_floor(val.memory) == pytest.approx(-0.03 * cap, rel=1e-13)
    assert memory_value(val.memory, -0.5) == pytest.approx(-0.03 * cap,
                                                           rel=1e-13)


# ----------------------------------------------------------------------
# human capital


def test_human_capital_flat_matches_quadrature(params, mixed):
    got = human_capital(income_valuation(params, mixed), FLAT)
    # scipy quad of cap + int weight(s) ds over the window
    assert got == pytest.approx(16.006242073395537, abs=5e-7)


def test_human_capital_ramp_matches_quadrature(params, mixed):
    ramp = HistorySegment.from_function(d=1.0, h=0.001,
                                        fn=lambda s: 1.0 + 0.5 * s)
    got = human_capital(income_valuation(params, mixed), ramp)
    # scipy quad of cap * 1 + int weight(s) (1 + s/2) ds
    assert got == pytest.approx(15.985824844257623, abs=1e-6)


def test_human_capital_linear_in_history(params, mixed):
    val = income_valuation(params, mixed)
    hist = HistorySegment.from_function(d=1.0, h=0.01,
                                        fn=lambda s: 1.0 + 0.3 * math.sin(s))
    doubled = HistorySegment(hist.h, 2.0 * hist.values)
    assert human_capital(val, doubled) == pytest.approx(
        2.0 * human_capital(val, hist), rel=1e-14)


def test_window_mismatch_rejected(params, mixed):
    short = HistorySegment.constant(d=0.5, h=0.01, level=1.0)
    with pytest.raises(DomainError):
        human_capital(income_valuation(params, mixed), short)


# ----------------------------------------------------------------------
# policy constants


def test_policy_constants_hand_values(params, mixed):
    pc = policy_constants(params, mixed)
    margin = 0.045 + 0.02 + (0.04 + 0.02 + 0.0225 / 4.0)
    assert pc.horizon == pytest.approx(2.0 / margin, rel=1e-14)
    assert pc.bequest_ratio == 1.0
    assert pc.spending_scale == pytest.approx(1.02 * 2.0 / margin, rel=1e-14)
    assert pc.myopic_demand == pytest.approx([0.375], rel=1e-14)
    # capitalization / sigma * income_vol for the single asset
    assert pc.hedge_demand == pytest.approx([0.75 * pc.capitalization],
                                            rel=1e-14)
    assert pc.gamma == 2.0


def test_bequest_ratio_uses_gamma_root(mixed):
    pc = policy_constants(make_params(bequest_weight=0.5), mixed)
    assert pc.bequest_ratio == pytest.approx(0.5 ** -0.5, rel=1e-14)


def test_policy_constants_enforce_impatience(mixed):
    eager = make_params(gamma=0.5, impatience=0.01)
    with pytest.raises(AssumptionViolation):
        policy_constants(eager, mixed)


def test_to_dict_round_trips_arrays(params, mixed):
    d = policy_constants(params, mixed).to_dict()
    assert d["myopic_demand"] == [0.375]
    assert d["memory_floor"] == 0.0
    assert set(d) >= {"capitalization", "horizon", "spending_scale"}


# ----------------------------------------------------------------------
# state classification


def test_classify_state_bands(params, mixed):
    pc = policy_constants(params, mixed)
    hc = human_capital(pc, FLAT)
    assert classify_state(pc, -hc + 1.0, FLAT)[0] == "interior"
    assert classify_state(pc, -hc, FLAT)[0] == "boundary"
    assert classify_state(pc, -hc - 1.0, FLAT)[0] == "inadmissible"
    assert total_wealth(pc, -hc + 1.0, FLAT) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(AdmissibilityError):
        require_admissible(pc, -hc - 1.0, FLAT)
    assert require_admissible(pc, 5.0, FLAT) == pytest.approx(hc + 5.0)


# ----------------------------------------------------------------------
# deterministic companion


def test_expected_income_value_converges_first_order(params, mixed):
    closed = human_capital(income_valuation(params, mixed), FLAT)
    flat = HistorySegment.constant(d=1.0, h=0.01, level=1.0)
    v1 = expected_income_value(flat, mixed, params, h=0.01)
    v2 = expected_income_value(flat, mixed, params, h=0.005)
    assert abs(2.0 * v2 - v1 - closed) < 2e-6
    ratio = (v1 - closed) / (v2 - closed)
    assert 1.7 < ratio < 2.3


def test_head_plus_tail_recovers_capitalized_value(params):
    """Hand-rolled discounted head + reported tail = full income value."""
    kern = atomic_kernel()          # weight 0.02 at lag -0.5
    h, T = 0.05, 8.0
    n, lag_steps = int(round(T / h)), 10
    q = np.ones(n + 1)
    window = [1.0] * (lag_steps + 1)
    for k in range(n):
        # risk-adjusted drift: 0 - income_vol * kappa = -0.0225
        q[k + 1] = q[k] * (1.0 - 0.0225 * h) + 0.02 * window[0] * h
        window = window[1:] + [q[k + 1]]
    t = h * np.arange(n + 1)
    head = np.trapezoid(np.exp(-0.06 * t) * q, dx=h)
    flat = HistorySegment.constant(d=1.0, h=h, level=1.0)
    tail = capitalized_income_tail(flat, kern, make_params(), T=T, h=h)
    closed = human_capital(income_valuation(make_params(), kern), FLAT)
    # head and tail share the Euler bias, so the sum is O(h) close
    assert head + tail == pytest.approx(closed, abs=2e-4)
    assert head + tail == pytest.approx(16.006210363451643, rel=1e-12)


def test_tail_shrinks_with_horizon(params):
    kern = atomic_kernel()
    flat = HistorySegment.constant(d=1.0, h=0.02, level=1.0)
    tails = [capitalized_income_tail(flat, kern, params, T=T, h=0.02)
             for T in (8.0, 16.0, 40.0)]
    assert tails[0] > tails[1] > tails[2] > 0.0


# ----------------------------------------------------------------------
# Monte Carlo cross-check


def test_markov_representation_consistent_small_scale(params, mixed):
    flat = HistorySegment.constant(d=1.0, h=0.02, level=1.0)
    chk = verify_markov_representation(flat, mixed, params, T=40.0,
                                       n_paths=2000, seed=11, n_workers=1)
    assert chk.consistent(3.0)
    assert abs(chk.gap) < 0.02
    assert chk.estimate.stderr > 0.0
    assert chk.estimate.tail_bound > 0.0
    assert set(chk.to_dict()) == {"T", "closed_form", "gap", "h", "mc"}

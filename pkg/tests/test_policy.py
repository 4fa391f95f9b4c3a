"""Feedback rule, value function and policy simulation cross-checks."""

import numpy as np
import pytest

from conftest import make_params
from stickywage.errors import AdmissibilityError, DomainError
from stickywage.income import HistorySegment
from stickywage.policy import (FrozenControls, ProbeSpec, closed_form_total_wealth,
                               compare_policies, default_probes, doleans_spec,
                               feedback_controls, flow_decay_rate,
                               hamiltonian_maximizers, simulate_policy,
                               value_function)
from stickywage.valuation import human_capital, policy_constants

HIST = HistorySegment.constant(d=1.0, h=0.02, level=1.0)


# ----------------------------------------------------------------------
# closed forms at a state


def test_value_function_hand_formula(params, mixed):
    pc = policy_constants(params, mixed)
    total = 5.0 + human_capital(pc, HIST)
    # gamma = 2: f^2 G^{-1} / (1 - 2)
    want = -pc.spending_scale ** 2 / total
    assert value_function(pc, 5.0, HIST) == pytest.approx(want, rel=1e-14)


def test_value_function_low_gamma(mixed):
    pc = policy_constants(make_params(gamma=0.5), mixed)
    total = 5.0 + human_capital(pc, HIST)
    want = 2.0 * np.sqrt(pc.spending_scale * total)
    assert value_function(pc, 5.0, HIST) == pytest.approx(want, rel=1e-14)


def test_value_function_boundary_and_beyond(params, mixed):
    pc = policy_constants(params, mixed)
    hc = human_capital(pc, HIST)
    assert value_function(pc, -hc, HIST) == float("-inf")
    low = policy_constants(make_params(gamma=0.5), mixed)
    assert value_function(low, -human_capital(low, HIST), HIST) == 0.0
    with pytest.raises(AdmissibilityError):
        value_function(pc, -hc - 0.5, HIST)


def test_feedback_controls_formulas(params, mixed):
    pc = policy_constants(params, mixed)
    ctl = feedback_controls(pc, 5.0, HIST)
    total = 5.0 + human_capital(pc, HIST)
    assert ctl.label == "interior"
    assert ctl.total_wealth == pytest.approx(total, rel=1e-14)
    assert ctl.consumption == pytest.approx(total / pc.spending_scale,
                                            rel=1e-14)
    assert ctl.bequest == pytest.approx(pc.bequest_ratio * ctl.consumption,
                                        rel=1e-14)
    want = pc.myopic_demand * total - pc.hedge_demand * 1.0
    assert ctl.portfolio == pytest.approx(want, rel=1e-13)


def test_feedback_on_the_boundary_keeps_the_hedge(params, mixed):
    pc = policy_constants(params, mixed)
    hc = human_capital(pc, HIST)
    ctl = feedback_controls(pc, -hc, HIST)
    assert ctl.label == "boundary"
    assert ctl.consumption == 0.0
    assert ctl.bequest == 0.0
    assert ctl.portfolio == pytest.approx(-pc.hedge_demand, rel=1e-9)


# ----------------------------------------------------------------------
# pointwise maximizer of the control terms


def test_maximizer_reproduces_feedback_rule(params, mixed):
    """Feeding the closed form's derivatives into the pointwise maximizer
    must reproduce the feedback rule — the verification-theorem identity."""
    pc = policy_constants(params, mixed)
    total = 5.0 + human_capital(pc, HIST)
    gamma, f = 2.0, pc.spending_scale
    p = f ** gamma * total ** -gamma               # dV/dw
    q = -gamma * f ** gamma * total ** (-gamma - 1.0)
    m = q * pc.capitalization                      # d2V/(dw dy)
    pt = hamiltonian_maximizers(params, p, q, cross_sensitivity=m,
                                current_income=1.0)
    ctl = feedback_controls(pc, 5.0, HIST)
    assert pt.consumption == pytest.approx(ctl.consumption, rel=1e-13)
    assert pt.bequest == pytest.approx(ctl.bequest, rel=1e-13)
    assert pt.portfolio == pytest.approx(ctl.portfolio, rel=1e-12)


def test_maximizer_actually_maximizes(params):
    """Probe the explicit control objective around the returned point."""
    gamma, delta, k = 2.0, 0.02, 1.0
    p, q, m, y = 0.8, -1.3, -0.4, 1.1
    pt = hamiltonian_maximizers(params, p, q, cross_sensitivity=m,
                                current_income=y)
    lin = params.mu_excess * p + params.sigma @ params.load_market * y * m
    cov = params.sigma @ params.sigma.T

    def objective(c, b, theta):
        spend = (c ** (1 - gamma) / (1 - gamma)
                 + delta * (k * b) ** (1 - gamma) / (1 - gamma)
                 - (c + delta * b) * p)
        return spend + float(theta @ lin) + 0.5 * float(theta @ cov @ theta) * q

    best = objective(pt.consumption, pt.bequest, pt.portfolio)
    assert pt.value == pytest.approx(best, rel=1e-12)
    rng = np.random.default_rng(5)
    for _ in range(20):
        bump = 1.0 + rng.uniform(-0.05, 0.05, 3)
        got = objective(pt.consumption * bump[0], pt.bequest * bump[1],
                        pt.portfolio * bump[2])
        assert got <= best + 1e-12


def test_maximizer_rejects_degenerate_derivatives(params):
    with pytest.raises(DomainError):
        hamiltonian_maximizers(params, -0.1, -1.0)
    with pytest.raises(DomainError):
        hamiltonian_maximizers(params, 0.5, 0.2)


# ----------------------------------------------------------------------
# flow decay and the exponential comparison path


def test_optimal_flow_decay_is_inverse_horizon(params, mixed):
    pc = policy_constants(params, mixed)
    assert flow_decay_rate(pc) == pytest.approx(1.0 / pc.horizon, rel=1e-12)


def test_flow_decay_rejects_explosive_overspending(params, mixed):
    pc = policy_constants(params, mixed)
    with pytest.raises(DomainError):
        flow_decay_rate(pc, c_factor=5.0)


def test_doleans_spec_hand_values(params, mixed):
    spec = doleans_spec(policy_constants(params, mixed))
    # r + delta + ksq/gamma - 1/horizon - ksq/(2 gamma^2)
    assert spec.lin == pytest.approx(0.003125, abs=1e-15)
    assert spec.kappa_over_gamma == pytest.approx([0.075], rel=1e-14)


def test_doleans_requires_spanned_income(mixed):
    partial = make_params(corr_market=np.array([[0.8]]),
                          corr_extra=np.array([[0.6]]))
    with pytest.raises(DomainError):
        doleans_spec(policy_constants(partial, mixed))


def test_closed_form_total_wealth_shapes(params, mixed):
    pc = policy_constants(params, mixed)
    t = np.array([0.0, 0.5, 1.0])
    z = np.zeros((3, 1))
    path = closed_form_total_wealth(pc, 2.0, t, z)
    assert path.shape == (3,)
    assert path[0] == pytest.approx(2.0)
    assert np.all(np.diff(path) > 0)          # lin > 0 here
    many = closed_form_total_wealth(pc, 2.0, t, np.zeros((4, 3, 1)))
    assert many.shape == (4, 3)


# ----------------------------------------------------------------------
# simulation wrapper


def test_simulated_utility_consistent_with_closed_form(params, mixed):
    pc = policy_constants(params, mixed)
    V = value_function(pc, 5.0, HIST)
    run = simulate_policy(HIST, mixed, params, w0=5.0, T=30.0, n_paths=2000,
                          seed=3, h=0.02, compare_closed_form=True)
    est = run.utility()
    assert abs(est.mean - V) < est.tolerance(3.0)
    assert est.details["tail_corrected"]
    # the exponential comparison tracks total wealth to O(h)
    assert run.gap_max < 0.05
    assert run.deficit_max == 0.0
    assert run.total_wealth_min > 0.0
    assert run.n_paths == 2000
    assert run.T == pytest.approx(30.0)


def test_closed_form_comparison_rejects_perturbed_rules(params, mixed):
    with pytest.raises(DomainError):
        simulate_policy(HIST, mixed, params, w0=5.0, T=1.0, n_paths=4,
                        h=0.02, c_factor=1.1, compare_closed_form=True)


def test_history_grid_must_match_step(params, mixed):
    with pytest.raises(DomainError):
        simulate_policy(HIST, mixed, params, w0=5.0, T=1.0, n_paths=4, h=0.05)


def test_frozen_replay_is_bit_exact(params, mixed):
    rec = simulate_policy(HIST, mixed, params, w0=5.0, T=5.0, n_paths=64,
                          seed=9, h=0.02, record=True)
    assert sorted(rec.paths) == ["W", "bequest", "c", "theta",
                                 "total_wealth", "y"]
    frozen = FrozenControls.from_run(rec)
    assert frozen.n_steps == 250
    assert frozen.n_paths == 64
    rep = simulate_policy(HIST, mixed, params, w0=5.0, T=5.0, n_paths=64,
                          seed=9, h=0.02, frozen=frozen)
    assert np.array_equal(rep.J, rec.J)
    assert rep.decay_rate is None             # no closed form for a replay


def test_frozen_shape_mismatch_rejected(params, mixed):
    rec = simulate_policy(HIST, mixed, params, w0=5.0, T=2.0, n_paths=8,
                          seed=1, h=0.02, record=True)
    frozen = FrozenControls.from_run(rec)
    with pytest.raises(DomainError):
        simulate_policy(HIST, mixed, params, w0=5.0, T=2.0, n_paths=16,
                        seed=1, h=0.02, frozen=frozen)
    unrecorded = simulate_policy(HIST, mixed, params, w0=5.0, T=1.0,
                                 n_paths=4, h=0.02)
    with pytest.raises(DomainError):
        FrozenControls.from_run(unrecorded)


def test_tilted_rule_has_no_closed_form_tail(params, mixed):
    run = simulate_policy(HIST, mixed, params, w0=5.0, T=5.0, n_paths=16,
                          seed=9, h=0.02, theta_tilt=np.array([0.1]))
    assert run.decay_rate is None
    assert not run.utility().details["tail_corrected"]


def test_worker_count_does_not_change_results(params, mixed):
    runs = [simulate_policy(HIST, mixed, params, w0=5.0, T=2.0, n_paths=96,
                            seed=4, h=0.02, chunk=32, n_workers=n)
            for n in (1, 3)]
    assert np.array_equal(runs[0].J, runs[1].J)
    assert np.array_equal(runs[0].W_T, runs[1].W_T)


def test_inadmissible_start_refused(params, mixed):
    pc = policy_constants(params, mixed)
    w_bad = -human_capital(pc, HIST) - 1.0
    with pytest.raises(AdmissibilityError):
        simulate_policy(HIST, mixed, params, w0=w_bad, T=1.0, n_paths=4,
                        h=0.02)


# ----------------------------------------------------------------------
# perturbation comparisons


def test_probes_lose_utility_on_common_noise(params, mixed):
    hist = HistorySegment.constant(d=1.0, h=0.05, level=1.0)
    probes = [ProbeSpec("overspend", c_factor=1.2),
              ProbeSpec("underinvest", theta_factor=0.7),
              ProbeSpec("overinsure", b_factor=1.4)]
    comps = compare_policies(hist, mixed, params, w0=5.0, T=120.0,
                             n_paths=2000, seed=3, h=0.05, probes=probes)
    for comp in comps:
        assert comp.delta.mean > 0.0
        assert comp.strictly_worse(3.0), comp.probe.name
        d = comp.to_dict()
        assert d["strictly_worse"]
        assert d["probe"] == comp.probe.name


def test_default_probes_cover_each_control():
    probes = default_probes()
    assert len(probes) == 5
    assert {p.name for p in probes} == {"overspend", "underspend",
                                        "overinvest", "underinvest",
                                        "overinsure"}

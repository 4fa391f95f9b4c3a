"""Noise streams, estimators and the matched-noise convergence ladder."""

import numpy as np
import pytest

from stickywage.errors import DomainError
from stickywage.mc import (
    EXTRA,
    MARKET,
    Estimate,
    NoiseBlocks,
    NoisePlan,
    coarsen_increments,
    convergence_study,
    generate_noise,
    pairwise_mean,
    path_generator,
)


def test_path_streams_reproducible():
    a = path_generator(1234, 7, MARKET).standard_normal(16)
    b = path_generator(1234, 7, MARKET).standard_normal(16)
    assert np.array_equal(a, b)


def test_path_streams_distinct_by_key():
    base = path_generator(1234, 7, MARKET).standard_normal(8)
    for other in (path_generator(1234, 8, MARKET),
                  path_generator(1234, 7, EXTRA),
                  path_generator(1235, 7, MARKET)):
        assert not np.array_equal(base, other.standard_normal(8))


def test_block_size_does_not_change_draws():
    """A path's stream is consumed sequentially, so block size is cosmetic."""
    whole = NoiseBlocks(seed=5, paths=range(4), n=2, h=0.01, with_extra=True)
    dZ_w, dZs_w = whole.next_block(60)

    pieces = NoiseBlocks(seed=5, paths=range(4), n=2, h=0.01, with_extra=True)
    got, gots = [], []
    for size in (7, 13, 25, 15):
        dZ, dZs = pieces.next_block(size)
        got.append(dZ)
        gots.append(dZs)
    assert np.array_equal(np.concatenate(got, axis=0), dZ_w)
    assert np.array_equal(np.concatenate(gots, axis=0), dZs_w)


def test_blocks_match_plan():
    """The streaming interface reproduces the one-shot plan's draws."""
    plan = NoisePlan(n=1, h=0.04, n_steps=25, n_paths=6, seed=99,
                     with_extra=False)
    dZ_plan, _ = generate_noise(plan)          # (paths, steps, n)
    blocks = NoiseBlocks(seed=99, paths=range(6), n=1, h=0.04,
                         with_extra=False)
    dZ_blk, _ = blocks.next_block(25)          # (steps, paths, n)
    assert np.array_equal(dZ_blk.transpose(1, 0, 2), dZ_plan)


def test_paths_are_independent_of_batch():
    """Path 11's draws do not depend on which chunk it is generated in."""
    alone = NoiseBlocks(seed=3, paths=[11], n=1, h=0.01, with_extra=False)
    with_friends = NoiseBlocks(seed=3, paths=range(8, 16), n=1, h=0.01,
                               with_extra=False)
    a, _ = alone.next_block(10)
    b, _ = with_friends.next_block(10)
    assert np.array_equal(a[:, 0, :], b[:, 11 - 8, :])


def test_increments_scaled_by_sqrt_h():
    plan = NoisePlan(n=1, h=0.25, n_steps=4000, n_paths=8, seed=0)
    dZ, _ = generate_noise(plan)
    assert np.std(dZ) == pytest.approx(0.5, rel=0.05)


def test_quadratic_variation_near_horizon():
    # sum of squared increments over [0, T] concentrates on T at h = 1e-3;
    # per-path relative scatter is sqrt(2h/T), so T = 20 puts 5% at 5 sigma
    plan = NoisePlan(n=2, h=1e-3, n_steps=20_000, n_paths=16, seed=21)
    dZ, _ = generate_noise(plan)
    T = plan.horizon
    qv = (dZ ** 2).sum(axis=1)           # per path and factor
    assert np.all(np.abs(qv - T) < 0.05 * T)


def test_extra_noise_optional():
    plan = NoisePlan(n=1, h=0.1, n_steps=3, n_paths=2, seed=1, with_extra=True)
    dZ, dZs = generate_noise(plan)
    assert dZs.shape == dZ.shape
    assert not np.array_equal(dZ, dZs)
    _, none = generate_noise(NoisePlan(n=1, h=0.1, n_steps=3, n_paths=2,
                                       seed=1))
    assert none is None


def test_plan_validation():
    with pytest.raises(DomainError):
        NoisePlan(n=0, h=0.1, n_steps=5, n_paths=1, seed=0)
    with pytest.raises(DomainError):
        NoisePlan(n=1, h=-0.1, n_steps=5, n_paths=1, seed=0)


# ----------------------------------------------------------------------
# estimates


def test_pairwise_mean_matches_numpy():
    x = np.random.default_rng(0).standard_normal(1001)
    assert pairwise_mean(x) == pytest.approx(float(np.mean(x)), rel=1e-13)


def test_estimate_from_samples():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    est = Estimate.from_samples(x)
    assert est.mean == pytest.approx(2.5)
    assert est.stderr == pytest.approx(np.std(x, ddof=1) / 2.0)
    assert est.n_paths == 4


def test_estimate_tolerance_and_consistency():
    est = Estimate(mean=10.0, stderr=0.1, n_paths=100, tail_bound=0.05)
    assert est.tolerance(n_sigma=3) == pytest.approx(0.35)
    assert est.consistent_with(10.3)
    assert not est.consistent_with(10.4)


def test_estimate_serializes():
    est = Estimate.from_samples(np.arange(5.0), tail_bound=0.1)
    d = est.to_dict()
    assert set(d) >= {"mean", "stderr", "n_paths", "tail_bound"}


# ----------------------------------------------------------------------
# coarsening and the convergence ladder


def test_coarsen_increments_sums_pairs():
    dZ = np.arange(24.0).reshape(2, 6, 2)
    out = coarsen_increments(dZ, 3)
    assert out.shape == (2, 2, 2)
    assert out[0, 0, 0] == dZ[0, :3, 0].sum()
    assert out[1, 1, 1] == dZ[1, 3:, 1].sum()


def test_convergence_study_resolves_first_order():
    """Euler on y' = -y has an exactly known first-order error."""

    def task(h, dZ, dZs):
        n_steps = dZ.shape[1]
        y = np.ones(dZ.shape[0])
        for _ in range(n_steps):
            y = y * (1.0 - h)
        return np.abs(y - np.exp(-n_steps * h))

    rep = convergence_study(task, h_coarsest=0.05, levels=4,
                            n_steps_coarsest=20, n_paths=4, n=1, seed=17)
    assert len(rep.ratios) == 3
    for r in rep.ratios:
        assert 1.8 < r < 2.2
    assert rep.fitted_order == pytest.approx(1.0, abs=0.1)


def test_convergence_study_resolves_strong_half_order():
    """Euler-Maruyama on multiplicative GBM has pathwise order 1/2.

    The ladder shares one Brownian path across levels, so the absolute
    endpoint errors shrink like sqrt(h) and each halving divides the mean
    error by about sqrt(2).
    """
    mu, sig = 0.05, 0.3

    def task(h, dZ, dZs):
        n_steps = dZ.shape[1]
        y = np.ones(dZ.shape[0])
        z = np.zeros(dZ.shape[0])
        for k in range(n_steps):
            y = y * (1.0 + mu * h + sig * dZ[:, k, 0])
            z = z + dZ[:, k, 0]
        exact = np.exp((mu - 0.5 * sig**2) * (n_steps * h) + sig * z)
        return np.abs(y - exact)

    rep = convergence_study(task, h_coarsest=0.05, levels=4,
                            n_steps_coarsest=20, n_paths=512, n=1, seed=17)
    assert rep.fitted_order == pytest.approx(0.5, abs=0.2)


def test_convergence_study_needs_two_levels():
    with pytest.raises(DomainError):
        convergence_study(lambda h, a, b: np.ones(1), h_coarsest=0.1,
                          levels=1, n_steps_coarsest=4, n_paths=1, n=1, seed=0)

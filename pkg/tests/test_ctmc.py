"""Tests for jump simulation, push-forward, path ratios, and divergences.

Expected values for non-trivial cases come from the explicit path-enumeration
oracles in ``helpers`` (no shared code with the library routines under test).
"""

import numpy as np
import pytest

from damlab.ctmc import (
    TableTargetDist,
    dynkin_estimate,
    dynkin_functional,
    log_path_prob,
    log_path_ratio,
    marginal_kl,
    path_kl,
    push_forward_marginals,
    sample_trajectory,
    uniform_base,
)
from damlab.errors import (
    MalformedDistributionError,
    RatioUndefinedError,
    SpaceTooLargeError,
)
from damlab.spaces import ProductSpace

from helpers import (
    enumerate_paths,
    final_marginal_by_paths,
    level_marginal_by_paths,
    make_trajectory,
    random_table_dist,
)


def single_jump_dist(probs):
    """N=1 jump law with the given token probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    space = ProductSpace(vocab_size=len(probs), length=1)
    table = np.zeros((space.num_states, 1, len(probs)))
    table[0, 0, :] = probs
    return TableTargetDist(space, table)


# ----------------------------------------------------------------------
# construction & validation
# ----------------------------------------------------------------------
def test_table_dist_validation():
    space = ProductSpace(vocab_size=2, length=2)
    bad = np.zeros((space.num_states, 2, 2))
    bad[0, 0, 0] = 0.6  # sums to 0.6 at the full-mask state
    with pytest.raises(MalformedDistributionError):
        TableTargetDist(space, bad)
    # mass at an unmasked position is rejected
    bad2 = uniform_base(space).table.copy()
    idx = space.encode(np.array([1, 0]))
    bad2[idx, 0, 0] = 0.5
    with pytest.raises(MalformedDistributionError):
        TableTargetDist(space, bad2)


def test_uniform_base_rows():
    space = ProductSpace(vocab_size=91, length=2)
    base = uniform_base(space)
    np.testing.assert_allclose(base.probs(0), np.full((2, 91), 1 / 182), atol=1e-15)
    one = base.probs(space.encode(np.array([5, 0])))
    assert np.all(one[0] == 0)
    np.testing.assert_allclose(one[1], np.full(91, 1 / 91), atol=1e-15)


# ----------------------------------------------------------------------
# sample_trajectory
# ----------------------------------------------------------------------
def test_sample_trajectory_single_token_vocab():
    space = ProductSpace(vocab_size=1, length=2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        traj = sample_trajectory(uniform_base(space), space.full_mask(), rng)
        np.testing.assert_array_equal(traj.final, [1, 1])
        assert [ev.jump_index for ev in traj.events] == [1, 2]
        times = [ev.time for ev in traj.events]
        assert 0 < times[0] < times[1] < 1


def test_sample_trajectory_terminal_start_has_no_events():
    space = ProductSpace(vocab_size=3, length=2)
    rng = np.random.default_rng(0)
    traj = sample_trajectory(uniform_base(space), np.array([2, 3]), rng)
    assert traj.events == ()
    np.testing.assert_array_equal(traj.final, [2, 3])


def test_sample_trajectory_frequencies_single_jump():
    probs = np.array([0.2, 0.3, 0.5])
    dist = single_jump_dist(probs)
    rng = np.random.default_rng(7)
    trials = 10**5
    counts = np.zeros(3)
    for _ in range(trials):
        traj = sample_trajectory(dist, dist.space.full_mask(), rng)
        counts[traj.final[0] - 1] += 1
    freq = counts / trials
    sigma = np.sqrt(probs * (1 - probs) / trials)
    assert np.all(np.abs(freq - probs) <= 3 * sigma)


def test_sample_trajectory_rejects_unnormalized():
    space = ProductSpace(vocab_size=2, length=1)
    table = np.zeros((space.num_states, 1, 2))
    table[0, 0, :] = [0.4, 0.4]
    dist = TableTargetDist(space, table, validate=False)
    with pytest.raises(MalformedDistributionError):
        sample_trajectory(dist, space.full_mask(), np.random.default_rng(0))


# ----------------------------------------------------------------------
# push_forward_marginals
# ----------------------------------------------------------------------
def test_push_forward_single_step():
    dist = single_jump_dist([0.2, 0.3, 0.5])
    marg = push_forward_marginals(dist)
    np.testing.assert_allclose(marg.table(1), [0.2, 0.3, 0.5], atol=1e-15)


def test_push_forward_uniform_symmetry():
    space = ProductSpace(vocab_size=91, length=2)
    marg = push_forward_marginals(uniform_base(space))
    np.testing.assert_allclose(marg.table(1), np.full(182, 1 / 182), atol=1e-12)
    np.testing.assert_allclose(marg.table(2), np.full(8281, 1 / 8281), atol=1e-12)


def test_push_forward_matches_path_enumeration():
    rng = np.random.default_rng(3)
    for m, n in [(3, 2), (2, 3)]:
        space = ProductSpace(vocab_size=m, length=n)
        dist = random_table_dist(space, rng)
        marg = push_forward_marginals(dist)
        for level in range(n + 1):
            oracle = level_marginal_by_paths(dist, level)
            np.testing.assert_allclose(marg.table(level), oracle, atol=1e-12)


def test_push_forward_from_intermediate_state():
    space = ProductSpace(vocab_size=3, length=2)
    rng = np.random.default_rng(4)
    dist = random_table_dist(space, rng)
    start = np.array([2, 0])
    marg = push_forward_marginals(dist, start=start)
    oracle = final_marginal_by_paths(dist, start)
    np.testing.assert_allclose(marg.table(2), oracle, atol=1e-12)
    assert marg.start_level == 1


def test_push_forward_matches_sampling():
    space = ProductSpace(vocab_size=3, length=2)
    rng = np.random.default_rng(5)
    dist = random_table_dist(space, rng)
    exact = push_forward_marginals(dist).table(2)
    order = {int(ix): i for i, ix in enumerate(space.level_states(2))}
    trials = 10**5
    counts = np.zeros(space.level_size(2))
    for _ in range(trials):
        counts[order[sample_trajectory(dist, space.full_mask(), rng).final_index]] += 1
    freq = counts / trials
    sigma = np.sqrt(exact * (1 - exact) / trials)
    assert np.all(np.abs(freq - exact) <= 3 * sigma + 1e-12)


def test_push_forward_cap_guard():
    space = ProductSpace(vocab_size=3, length=2)
    with pytest.raises(SpaceTooLargeError):
        push_forward_marginals(uniform_base(space), cap=10)


# ----------------------------------------------------------------------
# log_path_ratio
# ----------------------------------------------------------------------
def test_log_path_ratio_identical_is_zero():
    space = ProductSpace(vocab_size=3, length=3)
    rng = np.random.default_rng(6)
    dist = random_table_dist(space, rng)
    for _ in range(10):
        traj = sample_trajectory(dist, space.full_mask(), rng)
        assert log_path_ratio(dist, dist, traj) == 0.0


def test_log_path_ratio_single_jump_value():
    num = single_jump_dist([0.9, 0.1])
    den = single_jump_dist([0.5, 0.5])
    traj = make_trajectory(num.space, [0], [(0, 1)])
    assert np.isclose(log_path_ratio(num, den, traj), np.log(0.9 / 0.5))
    assert np.isclose(log_path_ratio(num, den, traj), 0.5878, atol=5e-5)


def test_log_path_ratio_unit_mean_exact_and_mc():
    space = ProductSpace(vocab_size=3, length=2)
    rng = np.random.default_rng(8)
    num = random_table_dist(space, rng)
    den = random_table_dist(space, rng)
    # exact unit mean by enumeration
    total = sum(
        p * np.exp(log_path_ratio(num, den, traj))
        for p, traj in enumerate_paths(den, space.full_mask())
    )
    assert np.isclose(total, 1.0, atol=1e-12)
    # Monte-Carlo unit mean within 3 standard errors
    trials = 10**5
    w = np.empty(trials)
    for i in range(trials):
        traj = sample_trajectory(den, space.full_mask(), rng)
        w[i] = np.exp(log_path_ratio(num, den, traj))
    se = w.std(ddof=1) / np.sqrt(trials)
    assert abs(w.mean() - 1.0) <= 3 * se


def test_log_path_ratio_support_violation():
    space = ProductSpace(vocab_size=2, length=1)
    table = np.zeros((space.num_states, 1, 2))
    table[0, 0, :] = [1.0, 0.0]
    den = TableTargetDist(space, table)
    num = single_jump_dist([0.5, 0.5])
    traj = make_trajectory(space, [0], [(0, 2)])
    with pytest.raises(RatioUndefinedError):
        log_path_ratio(num, den, traj)
    # numerator zero is a value, not an error
    assert log_path_ratio(den, num, traj) == -np.inf


def test_log_path_prob_matches_enumeration():
    space = ProductSpace(vocab_size=2, length=2)
    rng = np.random.default_rng(9)
    dist = random_table_dist(space, rng)
    for prob, traj in enumerate_paths(dist, space.full_mask()):
        assert np.isclose(log_path_prob(dist, traj), np.log(prob), atol=1e-12)


# ----------------------------------------------------------------------
# path_kl / marginal_kl
# ----------------------------------------------------------------------
def test_path_kl_identical_zero():
    space = ProductSpace(vocab_size=3, length=2)
    dist = random_table_dist(space, np.random.default_rng(10))
    assert path_kl(dist, dist) == 0.0


def test_path_kl_single_step_value():
    a = single_jump_dist([0.9, 0.1])
    b = single_jump_dist([0.5, 0.5])
    expected = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
    val = path_kl(a, b)
    assert np.isclose(val, expected, atol=1e-12)
    assert np.isclose(val, 0.3681, atol=5e-5)


def test_path_kl_matches_path_enumeration():
    rng = np.random.default_rng(11)
    for m, n in [(3, 2), (2, 3)]:
        space = ProductSpace(vocab_size=m, length=n)
        a = random_table_dist(space, rng)
        b = random_table_dist(space, rng)
        oracle = sum(
            p * log_path_ratio(a, b, traj)
            for p, traj in enumerate_paths(a, space.full_mask())
        )
        assert np.isclose(path_kl(a, b), oracle, atol=1e-9)
        assert path_kl(a, b) >= 0


def test_path_kl_support_violation_is_inf():
    space = ProductSpace(vocab_size=2, length=1)
    table = np.zeros((space.num_states, 1, 2))
    table[0, 0, :] = [1.0, 0.0]
    b = TableTargetDist(space, table)
    a = single_jump_dist([0.5, 0.5])
    assert path_kl(a, b) == np.inf
    # the reverse direction is finite: a covers b's support
    assert np.isfinite(path_kl(b, a))


def test_marginal_kl_examples():
    assert marginal_kl(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0
    val = marginal_kl(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
    assert np.isclose(val, 0.5 * np.log(2) + 0.5 * np.log(2 / 3), atol=1e-12)
    assert np.isclose(val, 0.1438, atol=5e-5)
    assert marginal_kl(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == np.inf


def test_marginal_kl_validation():
    with pytest.raises(MalformedDistributionError):
        marginal_kl(np.array([0.5, 0.6]), np.array([0.5, 0.5]))
    with pytest.raises(MalformedDistributionError):
        marginal_kl(np.array([0.5, 0.5]), np.array([0.5, -0.5]))
    with pytest.raises(MalformedDistributionError):
        marginal_kl(np.array([0.5, 0.5]), np.array([0.5, 0.5, 0.0]))


# ----------------------------------------------------------------------
# Dynkin functional
# ----------------------------------------------------------------------
def test_dynkin_constant_f_is_exact():
    space = ProductSpace(vocab_size=2, length=2)
    dist = random_table_dist(space, np.random.default_rng(12))
    f = np.full(space.num_states, 3.25)
    for prob, traj in enumerate_paths(dist, space.full_mask()):
        assert dynkin_functional(f, dist, traj) == 3.25
    rng = np.random.default_rng(13)
    assert dynkin_estimate(f, dist, space.full_mask(), 50, rng) == 3.25


def test_dynkin_harmonic_two_path_enumeration():
    # f equals its one-jump expectation at the mask state, so the compensator
    # vanishes on every path and the enumeration mean is exactly f(mask).
    dist = single_jump_dist([0.7, 0.3])
    space = dist.space
    f = np.array([0.7, 1.0, 0.0])  # f(mask)=0.7, f(token1)=1, f(token2)=0
    paths = enumerate_paths(dist, space.full_mask())
    values = np.array([dynkin_functional(f, dist, t) for _, t in paths])
    probs = np.array([p for p, _ in paths])
    # the per-path compensator is identically zero for this harmonic f ...
    finals = np.array([f[t.final_index] for _, t in paths])
    np.testing.assert_allclose(values, finals, atol=1e-15)
    # ... so the exact mean is f(mask) = 0.7 (with per-path spread 1-vs-0,
    # i.e. enumeration variance 0.21, recorded here for transparency)
    assert np.isclose(probs @ values, 0.7, atol=1e-15)
    assert np.isclose(probs @ (values - 0.7) ** 2, 0.21, atol=1e-15)


def test_dynkin_exhaustive_mean_is_f_start():
    rng = np.random.default_rng(14)
    for m, n in [(2, 1), (2, 2), (3, 2)]:
        space = ProductSpace(vocab_size=m, length=n)
        dist = random_table_dist(space, rng)
        f = rng.normal(size=space.num_states)
        for start in [space.full_mask(), next(space.enumerate_level(1))]:
            mean = sum(
                p * dynkin_functional(f, dist, traj)
                for p, traj in enumerate_paths(dist, start)
            )
            assert np.isclose(mean, f[space.encode(start)], atol=1e-12)


def test_dynkin_monte_carlo_confidence():
    space = ProductSpace(vocab_size=3, length=2)
    rng = np.random.default_rng(15)
    dist = random_table_dist(space, rng)
    f = rng.normal(size=space.num_states)
    start = space.full_mask()
    trials = 4000
    vals = np.array(
        [
            dynkin_functional(f, dist, sample_trajectory(dist, start, rng))
            for _ in range(trials)
        ]
    )
    se = vals.std(ddof=1) / np.sqrt(trials)
    assert abs(vals.mean() - f[space.encode(start)]) <= 3 * se

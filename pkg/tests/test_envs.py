import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coverkit.coverage import compute_cinf, compute_cpush
from coverkit.envs import (counterexample_linf, counterexample_lq, gen_blockmdp,
                           gen_random_mdp, linf_counterexample_measure, random_class,
                           random_policy, spike_masses)
from coverkit.mdp import Policy, TabularMdp, dp_plan, exact_occupancy, policy_value
from coverkit.mountaincar import (ACTIONS, GOAL, N_BINS, START, CountOccupancy, _simulate_one,
                                  bin_of, cover_reward_epsreg, kl_uniform, kl_uniform_gradient,
                                  maxent_reward, mountaincar_discretized, physics_step,
                                  reinforce_tabular, simulate)


# --------------------------------------------------------------------------
# random generators

def test_random_mdp_deterministic_given_seed():
    a = gen_random_mdp(3, (2, 4, 3), 2, sparsity=0.3, seed=5, rewards=True)
    b = gen_random_mdp(3, (2, 4, 3), 2, sparsity=0.3, seed=5, rewards=True)
    np.testing.assert_array_equal(a.init_dist, b.init_dist)
    for p, q in zip(a.transitions, b.transitions):
        np.testing.assert_array_equal(p, q)
    for r, s in zip(a.rewards, b.rewards):
        np.testing.assert_array_equal(r, s)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), sparsity=st.floats(0, 1))
def test_random_mdp_rows_are_distributions(seed, sparsity):
    m = gen_random_mdp(3, 4, 3, sparsity=sparsity, seed=seed, rewards=True)
    assert abs(m.init_dist.sum() - 1) <= 1e-12
    for P in m.transitions:
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=2), 1.0, rtol=0, atol=1e-12)
    # every path collects at most 1
    assert sum(r.max() for r in m.rewards) <= 1.0


def test_full_sparsity_is_deterministic():
    m = gen_random_mdp(4, 5, 3, sparsity=1.0, seed=2)
    for P in m.transitions:
        assert np.all((P > 0).sum(axis=2) == 1)


def test_degenerate_sizes_raise():
    with pytest.raises(ValueError):
        gen_random_mdp(0, 3, 2)
    with pytest.raises(ValueError):
        gen_random_mdp(2, (3, 0), 2)
    with pytest.raises(ValueError):
        gen_random_mdp(2, 3, 0)
    with pytest.raises(ValueError):
        gen_random_mdp(2, (3,), 2)
    with pytest.raises(ValueError):
        gen_random_mdp(2, 3, 2, sparsity=1.5)


def test_random_policies_deterministic():
    m = gen_random_mdp(3, 3, 3, seed=0)
    assert random_policy(m, 4).same_as(random_policy(m, 4))
    det = random_policy(m, 4, deterministic=True)
    assert all(np.all((p == 0) | (p == 1)) for p in det.probs)
    assert len(random_class(m, 6, seed=1)) == 6


# --------------------------------------------------------------------------
# block MDPs

@pytest.mark.parametrize("seed", range(5))
def test_block_mdp_coverability_constants(seed):
    S, A = 3, 2
    blk = gen_blockmdp(S, 3, A, 3, seed=seed)
    for h in (2, 3):
        assert compute_cinf(blk.mdp, None, h)[0] <= S * A + 1e-9
        assert compute_cpush(blk.mdp, h)[0] <= S + 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_block_mdp_collapse_matches_latent(seed):
    blk = gen_blockmdp(3, 2, 2, 4, seed=seed)
    lat_pi = random_policy(blk.latent, seed)
    obs = exact_occupancy(blk.mdp, blk.lift_policy(lat_pi))
    lat = exact_occupancy(blk.latent, lat_pi)
    for h in range(1, 5):
        np.testing.assert_allclose(blk.collapse(obs.layer(h)), lat.layer(h), rtol=0, atol=1e-12)


def test_block_mdp_rows_emit_within_block():
    blk = gen_blockmdp(2, 3, 2, 2, seed=0)
    for s in range(2):
        assert abs(blk.emission[s].sum() - 1) <= 1e-12
        assert np.all(blk.emission[s][blk.decoder != s] == 0)


# --------------------------------------------------------------------------
# counterexamples

@pytest.mark.parametrize("N", [2, 10, 100])
def test_linf_counterexample_cinf(N):
    mdp, cls = counterexample_linf(N)
    c = 1.0 / (2.0 * np.arange(1, N + 1) ** 2)
    np.testing.assert_array_equal(spike_masses(cls), c)
    value, _ = compute_cinf(mdp, cls, 1)
    # ⊥ contributes max_i (1 − c_i) = 1 − c_N, each spike contributes c_i
    assert abs(value - (1 - c[-1] + c.sum())) <= 1e-12
    assert value <= 2.0


@pytest.mark.parametrize("N", [2, 10, 100])
def test_linf_counterexample_measure(N):
    mu, tail = linf_counterexample_measure(N)
    i = np.arange(N + 1, 200_000)
    assert abs(tail - (3 / math.pi ** 2) * (1 / i ** 2).sum()) <= 1e-5
    mdp, cls = counterexample_linf(N)
    d = np.stack([exact_occupancy(mdp, pi).layer(1)[0] for pi in cls])
    # the closed-form μ dominates every occupancy up to a factor 2
    assert np.max(d / mu) <= 2.0 + 1e-12


def test_counterexample_linf_rejects_small_n():
    with pytest.raises(ValueError):
        counterexample_linf(1)


@pytest.mark.parametrize("q,delta", [(2.0, 0.1), (3.0, 0.2), (1.5, 0.5)])
def test_lq_counterexample_cinf(q, delta):
    mdp, cls = counterexample_lq(q, delta, 200)
    assert compute_cinf(mdp, cls, 1)[0] <= 2 + 1 / (delta * q)
    assert np.all(np.diff(spike_masses(cls)) < 0)


def test_lq_counterexample_rejects_bad_args():
    for args in [(1.0, 0.1, 5), (2.0, 0.0, 5), (2.0, 0.1, 1)]:
        with pytest.raises(ValueError):
            counterexample_lq(*args)


# --------------------------------------------------------------------------
# MountainCar

def test_zero_action_never_reaches_goal():
    pos, vel = np.array(START[0]), np.array(START[1])
    top = pos
    for _ in range(60):
        pos, vel = physics_step(pos, vel, 0.0)
        top = max(top, pos)
    assert top < GOAL
    env = mountaincar_discretized(60)
    goal_bins = set(np.unique(bin_of(np.linspace(GOAL, 0.6, 50), np.linspace(-0.07, 0.07, 50))))
    b = env.start_bin
    for _ in range(60):
        b = env.step(b, 1)
        assert b not in goal_bins


def test_always_right_fails_from_valley_floor():
    pos, vel = np.array(-math.pi / 6), np.array(0.0)
    for _ in range(200):
        pos, vel = physics_step(pos, vel, 1.0)
        assert pos < GOAL


def test_goal_is_absorbing():
    p, v = physics_step(np.array([0.5]), np.array([0.03]), np.array([-1.0]))
    assert p[0] == 0.5 and v[0] == 0.0


def test_discretized_rows_are_one_hot():
    env = mountaincar_discretized(5)
    P = env.mdp.transitions[0]
    assert P.shape == (N_BINS, len(ACTIONS), N_BINS)
    assert np.all((P == 1).sum(axis=2) == 1) and np.all(P.sum(axis=2) == 1)
    assert env.mdp.init_dist[env.start_bin] == 1.0
    assert env.start_bin == bin_of(*START)


def test_bins_partition_the_box():
    rng = np.random.default_rng(0)
    p = rng.uniform(-1.2, 0.6, 5000)
    v = rng.uniform(-0.07, 0.07, 5000)
    b = bin_of(p, v)
    assert b.min() >= 0 and b.max() < N_BINS
    assert bin_of(0.6, 0.07) == N_BINS - 1 and bin_of(-1.2, -0.07) == 0


@pytest.mark.parametrize("seed", range(3))
def test_scalar_simulator_matches_vector(seed):
    table = np.random.default_rng(seed).dirichlet(np.ones(3), size=N_BINS)
    b1, a1 = simulate(table, 1, 80, np.random.default_rng(seed))
    b2, a2 = _simulate_one(table, 80, np.random.default_rng(seed), START[0])
    np.testing.assert_array_equal(b1[0], b2)
    np.testing.assert_array_equal(a1[0], a2)


# --------------------------------------------------------------------------
# REINFORCE

def test_zero_reward_keeps_uniform():
    m = gen_random_mdp(3, 3, 2, seed=0)
    pi = reinforce_tabular(m, [np.zeros((3, 2))] * 3, steps=50, rollout_len=60, lr=0.1)
    assert pi.same_as(Policy.uniform(m))


def test_bandit_concentrates_on_rewarded_action():
    m = TabularMdp(np.ones(1), (), 3, (1,))
    r = [np.array([[0.0, 1.0, 0.0]])]
    pi = reinforce_tabular(m, r, steps=1000, rollout_len=400, lr=1e-2, seed=0)
    assert pi.probs[0][0, 1] >= 0.9


def test_reaches_ninety_percent_of_optimum():
    m = gen_random_mdp(3, (1, 4, 4), 2, seed=3, rewards=True)
    best = policy_value(m, dp_plan(m, m.rewards)[0], m.rewards)
    pi = reinforce_tabular(m, m.rewards, steps=1000, rollout_len=300, lr=1e-2, seed=0)
    assert policy_value(m, pi, m.rewards) >= 0.9 * best


def test_reinforce_deterministic_given_seed():
    m = gen_random_mdp(2, 3, 2, seed=1, rewards=True)
    a = reinforce_tabular(m, m.rewards, steps=20, rollout_len=40, lr=0.05, seed=7)
    b = reinforce_tabular(m, m.rewards, steps=20, rollout_len=40, lr=0.05, seed=7)
    assert a.same_as(b)


# --------------------------------------------------------------------------
# count occupancies and exploration rewards

def uniform_counts():
    return CountOccupancy(np.full((N_BINS, 3), 1.0 / (N_BINS * 3)))


def test_count_occupancy_normalized():
    rng = np.random.default_rng(0)
    bins, acts = simulate(np.full((N_BINS, 3), 1 / 3), 5, 30, rng)
    occ = CountOccupancy.from_rollouts(bins, acts)
    assert abs(occ.table.sum() - 1) <= 1e-12
    assert occ.visited_states() == len(np.unique(bins))
    avg = CountOccupancy.average([occ, uniform_counts()])
    assert abs(avg.table.sum() - 1) <= 1e-12
    assert abs(uniform_counts().entropy() - math.log(N_BINS * 3)) <= 1e-12


def test_cover_reward_without_priors_is_constant():
    mu = np.full((N_BINS, 3), 1.0 / (N_BINS * 3))
    r = cover_reward_epsreg([], mu, N_BINS * 3.0, 0.1)
    assert np.all(r == r.flat[0])


def test_cover_reward_uniform_counts_constant():
    mu = uniform_counts().table
    r = cover_reward_epsreg([uniform_counts()] * 3, mu, N_BINS * 3.0, 0.1)
    assert np.all(r == r.flat[0])


def test_cover_reward_prefers_unvisited():
    mu = uniform_counts().table
    t = np.zeros((N_BINS, 3))
    t[:10] = 1.0
    occ = CountOccupancy(t / t.sum())
    r = cover_reward_epsreg([occ], mu, N_BINS * 3.0, 0.1)
    assert r[50].min() > r[:10].max()
    assert r.min() == 0.0 and r.max() == 1.0


def test_maxent_uniform_counts_constant():
    r = maxent_reward(uniform_counts())
    assert np.all(r == r.flat[0])


def test_maxent_least_visited_gets_max():
    rng = np.random.default_rng(1)
    t = rng.random((N_BINS, 3)) + 0.1
    occ = CountOccupancy(t / t.sum())
    r = maxent_reward(occ)
    assert r.flat[np.argmin(occ.table)] == r.max() == 1.0


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    X = rng.dirichlet(np.ones(12)).reshape(4, 3)
    g = kl_uniform_gradient(X)
    h = 1e-7
    for idx in np.ndindex(*X.shape):
        up, dn = X.copy(), X.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (kl_uniform(up) - kl_uniform(dn)) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-6

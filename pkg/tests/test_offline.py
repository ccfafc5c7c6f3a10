import math

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from coverkit.coverage import CoverageParams, l1_coverage
from coverkit.envs import gen_random_mdp
from coverkit.explore_mb import FiniteModelClass
from coverkit.explore_mf import FiniteValueClass
from coverkit.mdp import Policy, PolicyMixture, TabularMdp, dp_plan, policy_value, q_values
from coverkit.offline import (OfflineDataset, collect, complete_value_class, downstream_bound,
                              fqi, offline_mle_policy, optimal_value, suboptimality)


def terminal_reward(env, state=0):
    r = [np.zeros((n, env.num_actions)) for n in env.states_per_layer]
    r[-1][state, :] = 1.0
    return r


def action1_class(env, k, seed):
    """True model plus alternatives that redraw only the rows of action 1."""
    rng = np.random.default_rng(seed)
    models = [env]
    for _ in range(k - 1):
        trans = []
        for P in env.transitions:
            Q = P.copy()
            Q[:, 1, :] = rng.dirichlet(np.ones(P.shape[2]) * 0.3, size=P.shape[0])
            trans.append(Q)
        models.append(TabularMdp(env.init_dist, tuple(trans), env.num_actions,
                                 env.states_per_layer, env.rewards))
    return FiniteModelClass(tuple(models), 0)


def skewed_cover(env, p0=0.97):
    probs = tuple(np.tile([p0, 1 - p0], (n, 1)) for n in env.states_per_layer)
    return [PolicyMixture.point(Policy(probs))] * env.horizon


def uniform_cover(env):
    return [PolicyMixture.point(Policy.uniform(env))] * env.horizon


def test_dataset_shapes():
    env = gen_random_mdp(3, 3, 2, seed=0)
    data = collect(env, uniform_cover(env), 7, seed=1)
    S, A = data.stacked()
    assert S.shape == A.shape == (21, 3)
    with pytest.raises(ValueError):
        collect(env, uniform_cover(env)[:2], 7)
    with pytest.raises(ValueError):
        OfflineDataset(((np.zeros((2, 3), int), np.zeros((2, 3), int)),
                        (np.zeros((2, 2), int), np.zeros((2, 2), int))))


def test_mle_singleton_class_is_optimal():
    env = gen_random_mdp(3, 3, 2, seed=1, rewards=True)
    pi, sub = offline_mle_policy(FiniteModelClass((env,)), uniform_cover(env), env, 5,
                                 env.rewards)
    assert sub == 0.0


def test_fqi_exact_regression_is_optimal():
    env = gen_random_mdp(3, 3, 2, seed=2, rewards=True)
    Q = complete_value_class(env, env.rewards, n_distractors=4, seed=0)
    pi, sub = fqi(Q, uniform_cover(env), env, 5000, env.rewards, seed=0)
    assert sub == 0.0


def test_complete_class_is_bellman_closed():
    env = gen_random_mdp(3, 3, 2, seed=3, rewards=True)
    Q = complete_value_class(env, env.rewards, n_distractors=2, seed=1)
    for h in range(1, 3):
        V = Q.layers[h].max(axis=2)
        backups = env.rewards[h - 1][None] + np.einsum("xay,ky->kxa", env.kernel(h), V)
        for b in backups:
            assert any(np.max(np.abs(b - c)) <= 1e-12 for c in Q.layers[h - 1])
    # and the optimal Q-function is realizable on every layer
    pi, _ = dp_plan(env, env.rewards)
    for Qstar, L in zip(q_values(env, pi, env.rewards), Q.layers):
        assert any(np.max(np.abs(Qstar - c)) <= 1e-12 for c in L)


def test_fqi_rejects_wrong_depth():
    env = gen_random_mdp(3, 3, 2, seed=3, rewards=True)
    Q = FiniteValueClass((np.zeros((1, 3, 2)),) * 2)
    with pytest.raises(ValueError):
        fqi(Q, uniform_cover(env), env, 5, env.rewards)


@pytest.mark.parametrize("seed", range(3))
def test_suboptimality_self_consistent(seed):
    env = gen_random_mdp(3, 3, 2, seed=seed, rewards=True)
    cls = action1_class(env, 4, seed)
    pi, sub = offline_mle_policy(cls, skewed_cover(env), env, 3, env.rewards, seed=seed)
    best = policy_value(env, dp_plan(env, env.rewards)[0], env.rewards)
    assert abs(sub - (best - policy_value(env, PolicyMixture.point(pi), env.rewards))) <= 1e-10
    Q = complete_value_class(env, env.rewards, seed=seed)
    pi, sub = fqi(Q, skewed_cover(env), env, 3, env.rewards, seed=seed)
    assert abs(sub - suboptimality(env, env.rewards, pi)) <= 1e-10
    assert sub >= 0


def test_finite_comparator_class():
    env = gen_random_mdp(2, 2, 2, seed=4, rewards=True)
    pols = [Policy.uniform(env), dp_plan(env, env.rewards)[0]]
    assert optimal_value(env, env.rewards, pols) == policy_value(
        env, PolicyMixture.point(pols[1]), env.rewards)
    pi, sub = offline_mle_policy(FiniteModelClass((env,)), uniform_cover(env), env, 3,
                                 env.rewards, policies=pols)
    assert pi is pols[1] and sub == 0.0


def two_branch():
    """Layer 1 has one state; action 0 leads to a dead end, action 1 to the rewarding branch."""
    P = np.zeros((1, 2, 2))
    P[0, 0, 0] = P[0, 1, 1] = 1.0
    r = [np.zeros((1, 2)), np.array([[0.0, 0.0], [1.0, 1.0]])]
    env = TabularMdp(np.ones(1), (P,), 2, (1, 2), r)
    # the distractor agrees with the truth on action 0 and undervalues the branch;
    # it comes first, so it wins every tie on data that never plays action 1
    Q = FiniteValueClass((np.array([[[0.0, 0.0]], [[0.0, 1.0]]]),
                          np.array([[[0.0, 0.0], [1.0, 1.0]]])))
    return env, Q


def test_uncovered_branch_leaves_floor():
    env, Q = two_branch()
    eps = 0.1
    miss = [PolicyMixture.point(Policy((np.array([[1.0, 0.0]]), np.full((2, 2), 0.5))))] * 2
    full = uniform_cover(env)
    _, sub_full = fqi(Q, full, env, 200, env.rewards, seed=0)
    _, sub_miss = fqi(Q, miss, env, 200, env.rewards, seed=0)
    assert sub_full == 0.0
    assert sub_miss == 1.0
    cov = max(l1_coverage(env, None, miss[h - 1], CoverageParams(h, eps)) for h in (1, 2))
    # the missing branch costs Cov·ε ≥ 1, which is what the bound charges for it
    assert cov * eps >= 1.0 - 1e-12
    assert sub_miss <= downstream_bound(2, cov, math.log(4), 200, eps)


def test_bound_formula():
    v = downstream_bound(3, 2.0, math.log(8), 100, 0.1, delta=0.05, const=8)
    assert abs(v - 8 * 3 * (math.sqrt(2 * (math.log(8) + math.log(20)) / 100) + 0.2)) <= 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_better_covers_give_smaller_suboptimality(seed):
    env = gen_random_mdp(3, 3, 2, seed=seed)
    r = terminal_reward(env)
    env = env.with_rewards(r)
    cls = action1_class(env, 8, seed)
    good, bad = uniform_cover(env), skewed_cover(env)
    eps = 1 / 8
    cov = [max(l1_coverage(env, None, c[h - 1], CoverageParams(h, eps)) for h in range(1, 4))
           for c in (good, bad)]
    assert cov[0] < cov[1]
    g = [offline_mle_policy(cls, good, env, 5, r, seed=s)[1] for s in range(50)]
    b = [offline_mle_policy(cls, bad, env, 5, r, seed=s)[1] for s in range(50)]
    assert mannwhitneyu(g, b, alternative="less").pvalue < 0.05


def test_bounds_hold_in_replications():
    env = gen_random_mdp(3, 3, 2, seed=7, rewards=True)
    cls = action1_class(env, 4, 7)
    Q = complete_value_class(env, env.rewards, seed=7)
    covers = uniform_cover(env)
    eps, n, delta = 1 / 8, 50, 0.05
    cov = max(l1_coverage(env, None, covers[h - 1], CoverageParams(h, eps)) for h in range(1, 4))
    b_mle = downstream_bound(3, cov, math.log(len(cls)), n, eps, delta)
    log_q = math.log(sum(len(L) for L in Q.layers) * 3)
    b_fqi = downstream_bound(3, cov, log_q, n, eps, delta)
    ok_mle = sum(offline_mle_policy(cls, covers, env, n, env.rewards, seed=s)[1] <= b_mle
                 for s in range(20))
    ok_fqi = sum(fqi(Q, covers, env, n, env.rewards, seed=s)[1] <= b_fqi for s in range(20))
    assert ok_mle >= 19 and ok_fqi >= 19

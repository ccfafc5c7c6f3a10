import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coverkit.coverage import (CoverageParams, compute_cinf, compute_cpush, l1_coverage,
                               psi_push)
from coverkit.envs import gen_random_mdp
from coverkit.mdp import TabularMdp, exact_occupancy
from coverkit.plan import (PlanConfig, PotentialPreconditionError, elliptic_potential_bound,
                           elliptic_potential_check, mu_weight, plan_generic,
                           plan_linf_relaxation, plan_pushforward_relaxation, pushforward_weight)

from instances import enumerable_instance as random_instance


def test_config_validation():
    assert PlanConfig(1, 1.0).T == 1
    assert PlanConfig(1, 0.3).T == 4
    assert PlanConfig(1, 1 / 8).T == 8
    with pytest.raises(ValueError):
        PlanConfig(1, 0.0)
    with pytest.raises(ValueError):
        PlanConfig(1, 0.5, eps_opt=0.1)
    with pytest.raises(ValueError):
        PlanConfig(0, 0.5)


def test_single_iteration_is_argmax_of_mu():
    mdp = gen_random_mdp(2, 3, 2, seed=0)
    _, mu = compute_cinf(mdp, None, 2)
    tr = plan_linf_relaxation(mdp, None, mu, PlanConfig(2, 1.0))
    assert len(tr.policies) == 1
    occ = exact_occupancy(mdp, tr.policies[0]).layer(2)
    # the first reward is μ/(C∞ μ) = 1/C∞ on the support, so the value is reach/C∞
    assert abs(tr.values[0] - occ[mu > 0].sum() / tr.constant) <= 1e-12


def test_linf_rejects_missing_mass():
    mdp = gen_random_mdp(2, 3, 2, seed=0)
    mu = np.zeros((3, 2))
    mu[0, 0] = 1.0
    with pytest.raises(ValueError):
        plan_linf_relaxation(mdp, None, mu, PlanConfig(2, 0.5))


@pytest.mark.parametrize("seed", range(25))
def test_linf_planner_bounds(seed):
    mdp = random_instance(seed)
    h = mdp.horizon
    _, mu = compute_cinf(mdp, None, h)
    for eps in (1 / 4, 1 / 8):
        tr = plan_linf_relaxation(mdp, None, mu, PlanConfig(h, eps))
        assert len(tr.policies) == math.ceil(1 / eps)
        assert tr.relaxation_value <= 3 * math.log(2 / eps) + 1e-9
        assert tr.l1_value <= 6 * tr.constant * math.log(2 / eps) + 1e-9
        assert np.all(np.diff(tr.values) <= 1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_pushforward_planner_bounds(seed):
    mdp = random_instance(seed)
    h = mdp.horizon
    for eps in (1 / 4, 1 / 8):
        tr = plan_pushforward_relaxation(mdp, PlanConfig(h, eps))
        cpush = compute_cpush(mdp, h)[0]
        assert tr.constant == cpush
        assert tr.relaxation_value <= 5 * cpush * math.log(2 / eps) + 1e-9
        assert tr.l1_value <= 5 * mdp.num_actions * cpush * math.log(2 / eps) + 1e-9
        assert np.all(np.diff(tr.values) <= 1e-12)
        assert abs(psi_push(mdp, None, tr.mixture, CoverageParams(h, eps)) - tr.relaxation_value) <= 1e-15


def test_pushforward_shared_next_state():
    # every (x, a) moves to state 0 of the next layer; the reward is 1/t at round t
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 1.0
    mdp = TabularMdp(np.array([0.5, 0.5]), (P,), 2, (2, 2))
    tr = plan_pushforward_relaxation(mdp, PlanConfig(2, 1 / 5))
    np.testing.assert_allclose(tr.values, [1 / t for t in range(1, 6)], rtol=0, atol=1e-15)


def test_pushforward_rejects_first_layer():
    mdp = gen_random_mdp(2, 2, 2, seed=0)
    with pytest.raises(ValueError):
        plan_pushforward_relaxation(mdp, PlanConfig(1, 0.5))
    with pytest.raises(ValueError):
        pushforward_weight(mdp, 1)


@pytest.mark.parametrize("seed", range(10))
def test_generic_reproduces_specialized_planners(seed):
    mdp = random_instance(seed)
    h = mdp.horizon
    cfg = PlanConfig(h, 1 / 8)
    _, mu = compute_cinf(mdp, None, h)
    a = plan_linf_relaxation(mdp, None, mu, cfg, evaluate=False)
    b = plan_generic(mdp, mu_weight(mdp, h, mu), cfg, evaluate=False)
    assert all(x.same_as(y) for x, y in zip(a.policies, b.policies))
    c = plan_pushforward_relaxation(mdp, cfg, evaluate=False)
    d = plan_generic(mdp, pushforward_weight(mdp, h), cfg, evaluate=False)
    assert all(x.same_as(y) for x, y in zip(c.policies, d.policies))


@pytest.mark.parametrize("seed", range(10))
def test_generic_certificate_holds(seed):
    mdp = random_instance(seed + 100)
    h = mdp.horizon
    _, mu = compute_cinf(mdp, None, h)
    tr = plan_generic(mdp, mu_weight(mdp, h, mu), PlanConfig(h, 1 / 6))
    assert tr.bound is not None and tr.bound_holds


def test_generic_rejects_nan_reward():
    from coverkit.plan import RelaxationWeight
    mdp = gen_random_mdp(2, 2, 2, seed=0)
    bad = RelaxationWeight("bad", lambda m, p, e: [np.full((2, 2), np.nan)] * 2)
    with pytest.raises(ValueError):
        plan_generic(mdp, bad, PlanConfig(2, 0.5))


def test_trace_json_round_trip():
    import json
    mdp = gen_random_mdp(3, 3, 2, seed=1)
    tr = plan_pushforward_relaxation(mdp, PlanConfig(3, 1 / 4))
    d = json.loads(tr.to_json())
    assert d["T"] == 4 and len(d["policies"]) == 4 and len(d["weights"]) == 4


# --------------------------------------------------------------------------
# elliptic potential

def test_potential_single_round():
    mu = np.array([0.5, 0.5])
    assert elliptic_potential_check([[0.5, 0.25]], mu, 1.0) <= 1.0


def test_potential_harmonic_sum():
    mu = np.array([0.25, 0.75])
    T = 20
    v = elliptic_potential_check([mu * 2.0] * T, mu, 2.0)
    harmonic = sum(1 / t for t in range(1, T + 1))
    assert abs(v - harmonic) <= 1e-12
    assert v <= elliptic_potential_bound(T)


def test_potential_precondition():
    with pytest.raises(PotentialPreconditionError):
        elliptic_potential_check([[0.9, 0.1]], np.array([0.5, 0.5]), 1.0)


def test_potential_random_trials():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        T = int(rng.integers(1, 30))
        k = int(rng.integers(1, 6))
        mu = rng.dirichlet(np.ones(k))
        C = float(rng.uniform(0.5, 5))
        d = rng.random((T, k)) * C * mu
        assert elliptic_potential_check(d, mu, C) <= elliptic_potential_bound(T) + 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.sampled_from([1.0, 0.5, 0.25, 0.2]))
def test_mixture_support_size(seed, eps):
    mdp = gen_random_mdp(3, 3, 2, seed=seed)
    _, mu = compute_cinf(mdp, None, 2)
    tr = plan_linf_relaxation(mdp, None, mu, PlanConfig(2, eps), evaluate=False)
    assert len(tr.mixture.atoms) == math.ceil(1 / eps)
    assert l1_coverage(mdp, None, tr.mixture, CoverageParams(2, eps)) <= 1 / eps + 1e-9

"""Downstream consumers of policy covers: offline model MLE and fitted Q-iteration.

Both collect fresh data from each layer's cover, fit a finite class
exhaustively, plan greedily, and report the exact suboptimality on the true
model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .explore_mb import FiniteModelClass, trajectory_loglik
from .explore_mf import FiniteValueClass
from .mdp import (Policy, PolicyMixture, TabularMdp, _check_reward, _greedy, dp_plan,
                  policy_value, sample_batch)


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Per-layer trajectory batches; ``layers[h-1] = (states, actions)``, each (n, H)."""

    layers: tuple

    def __post_init__(self):
        shapes = {s.shape for S, A in self.layers for s in (S, A)}
        if len({sh[1] for sh in shapes}) > 1:
            raise ValueError("trajectories must share one horizon")

    def stacked(self) -> tuple:
        return (np.concatenate([S for S, _ in self.layers]),
                np.concatenate([A for _, A in self.layers]))


def collect(env: TabularMdp, covers, n: int, seed=0) -> OfflineDataset:
    """n fresh full-horizon trajectories from each cover p_h, h = 1..H."""
    if len(covers) != env.horizon:
        raise ValueError("need one cover per layer")
    rng = np.random.default_rng(seed)
    out = []
    for p in covers:
        if isinstance(p, Policy):
            p = PolicyMixture.point(p)
        out.append(sample_batch(env, p, n, rng))
    return OfflineDataset(tuple(out))


def optimal_value(env: TabularMdp, rewards, policies=None) -> float:
    """max over ``policies`` (all Markov policies when ``None``) of J_R(π)."""
    if policies is None:
        # evaluate the DP policy the same way as the candidate so equal policies give exactly 0
        return policy_value(env, dp_plan(env, rewards)[0], rewards)
    return max(policy_value(env, PolicyMixture.point(pi), rewards) for pi in policies)


def suboptimality(env: TabularMdp, rewards, policy: Policy, policies=None) -> float:
    return optimal_value(env, rewards, policies) - policy_value(env, PolicyMixture.point(policy), rewards)


def offline_mle_policy(cls: FiniteModelClass, covers, env: TabularMdp, n: int, rewards,
                       seed=0, policies=None) -> tuple:
    """Fit M̂ by joint MLE over H·n cover trajectories, then plan on M̂ with the known rewards."""
    rewards = _check_reward(env, rewards)
    data = collect(env, covers, n, seed)
    S, A = data.stacked()
    ll = np.array([trajectory_loglik(m, S, A).sum() for m in cls.models])
    k = int(np.argmax(ll))
    model = cls.models[k]
    if policies is None:
        pi = dp_plan(model, rewards)[0]
    else:
        vals = [policy_value(model, PolicyMixture.point(p), rewards) for p in policies]
        pi = policies[int(np.argmax(vals))]
    return pi, suboptimality(env, rewards, pi, policies)


def fqi(Q: FiniteValueClass, covers, env: TabularMdp, n: int, rewards, seed=0,
        policies=None) -> tuple:
    """Backward regression of r_h + max_a' Q̂_{h+1} onto Q_h, using a fresh batch from p_h per layer."""
    rewards = _check_reward(env, rewards)
    H = env.horizon
    if len(Q.layers) != H:
        raise ValueError("need one value class layer per horizon step")
    data = collect(env, covers, n, seed)
    tables = [None] * H
    nxt = None
    for h in range(H, 0, -1):
        S, A = data.layers[h - 1]
        x, a = S[:, h - 1], A[:, h - 1]
        y = rewards[h - 1][x, a]
        if h < H:
            y = y + nxt.max(axis=1)[S[:, h]]
        nxt = Q.fit(h, x, a, y)
        tables[h - 1] = nxt
    greedy = Policy.from_actions([_greedy(t) for t in tables], env.num_actions)
    return greedy, suboptimality(env, rewards, greedy, policies)


def complete_value_class(env: TabularMdp, rewards, n_distractors: int = 3, seed=0) -> FiniteValueClass:
    """A Bellman-complete finite class on ``env``.

    Built backward: Q_H holds r_H plus random distractors, and Q_h holds the
    Bellman backup of every member of Q_{h+1} plus fresh distractors. A
    layer-h distractor lies in [0, (H−h+1)/H], so backups stay in [0, 1] when
    per-layer rewards are at most 1/H.
    """
    rewards = _check_reward(env, rewards)
    rng = np.random.default_rng(seed)
    H, A = env.horizon, env.num_actions
    layers = [None] * H
    for h in range(H, 0, -1):
        X = env.layer_size(h)
        members = []
        if h == H:
            members.append(rewards[h - 1])
        else:
            V = layers[h].max(axis=2)
            members.extend(rewards[h - 1][None] + np.einsum("xay,ky->kxa", env.kernel(h), V))
        members.extend(rng.uniform(0, (H - h + 1) / H, size=(n_distractors, X, A)))
        layers[h - 1] = np.clip(np.array(members), 0.0, 1.0)
    return FiniteValueClass(tuple(layers))


def downstream_bound(H: int, cov: float, log_size: float, n: int, eps: float,
                     delta: float = 0.05, const: float = 8.0) -> float:
    """const·H·(√(Cov·log(size/δ)/n) + Cov·ε)."""
    return const * H * (math.sqrt(cov * (log_size + math.log(1.0 / delta)) / n) + cov * eps)

"""Model-based exploration over a finite model class.

Each round fits the maximum-likelihood model to the history, plans a policy
cover for every layer on that model, and executes one episode of a policy
drawn from the covers. The reward-driven variant also mixes in the fitted
model's greedy policy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .coverage import CoverageParams, compute_cinf, l1_coverage
from .mdp import (Policy, PolicyMixture, TabularMdp, Trajectory, dp_plan,
                  policy_value, sample_batch)
from .plan import PlanConfig, plan_linf_relaxation, plan_pushforward_relaxation


@dataclass(frozen=True, eq=False)
class FiniteModelClass:
    models: tuple
    true_index: int | None = None

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise ValueError("model class must be nonempty")
        if any(not m.same_shape(models[0]) for m in models):
            raise ValueError("models must share horizon, layer sizes and action count")
        object.__setattr__(self, "models", models)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, i):
        return self.models[i]


@dataclass
class InteractionLog:
    """Chronological (round, policy id, trajectory) records."""

    entries: list = field(default_factory=list)

    def append(self, t: int, policy_id: str, traj: Trajectory) -> None:
        if self.entries and t < self.entries[-1][0]:
            raise ValueError("log entries must be chronological")
        self.entries.append((t, policy_id, traj))

    def __len__(self):
        return len(self.entries)

    def arrays(self) -> tuple:
        if not self.entries:
            return None, None, None
        S = np.stack([e[2].states for e in self.entries])
        A = np.stack([e[2].actions for e in self.entries])
        R = None
        if all(e[2].rewards is not None for e in self.entries):
            R = np.stack([e[2].rewards for e in self.entries])
        return S, A, R


def trajectory_loglik(model: TabularMdp, states: np.ndarray, actions: np.ndarray,
                      rewards: np.ndarray | None = None) -> np.ndarray:
    """Per-trajectory log-likelihood with policy terms omitted; impossible data gives −inf."""
    with np.errstate(divide="ignore"):
        ll = np.log(model.init_dist[states[:, 0]])
        for h in range(model.horizon - 1):
            ll = ll + np.log(model.transitions[h][states[:, h], actions[:, h], states[:, h + 1]])
    if rewards is not None and model.rewards is not None:
        for h in range(model.horizon):
            pred = model.rewards[h][states[:, h], actions[:, h]]
            ll = np.where(np.abs(pred - rewards[:, h]) <= 1e-12, ll, -np.inf)
    return ll


def class_logliks(cls: FiniteModelClass, log: InteractionLog) -> np.ndarray:
    S, A, R = log.arrays()
    if S is None:
        return np.zeros(len(cls))
    return np.array([trajectory_loglik(m, S, A, R).sum() for m in cls.models])


def mle_estimate(cls: FiniteModelClass, log: InteractionLog) -> int:
    """Index of the maximum-likelihood model; ties go to the lowest index."""
    if len(cls) == 0:
        raise ValueError("empty model class")
    return int(np.argmax(class_logliks(cls, log)))


def _same_law(A: TabularMdp, B: TabularMdp) -> bool:
    if not np.array_equal(A.init_dist, B.init_dist):
        return False
    if any(not np.array_equal(p, q) for p, q in zip(A.transitions, B.transitions)):
        return False
    if A.rewards is None or B.rewards is None:
        return True
    return all(np.array_equal(r, s) for r, s in zip(A.rewards, B.rewards))


def hellinger_sq(A: TabularMdp, B: TabularMdp, policy: Policy) -> float:
    """Squared Hellinger distance between the trajectory laws of π under A and B.

    Uses Σ(√p − √q)² = 2 − 2·BC, with the Bhattacharyya coefficient BC computed
    exactly by a forward pass: the policy factor is shared, so √(p q) factorizes
    into √(ρ_A ρ_B)·π·Π_h √(P_A P_B) (times a reward-agreement indicator).
    """
    if not A.same_shape(B):
        raise ValueError("models must share dimensions")
    if A is B or _same_law(A, B):
        return 0.0  # 2 − 2·BC would leave rounding residue
    beta =np.sqrt(A.init_dist * B.init_dist)
    for h in range(A.horizon):
        step = beta[:, None] * policy.probs[h]
        if A.rewards is not None and B.rewards is not None:
            step = step * (np.abs(A.rewards[h] - B.rewards[h]) <= 1e-12)
        if h + 1 < A.horizon:
            beta = np.einsum("xa,xay->y", step, np.sqrt(A.transitions[h] * B.transitions[h]))
        else:
            bc = step.sum()
    return float(max(0.0, 2.0 - 2.0 * bc))


def hellinger_sq_mixture(A: TabularMdp, B: TabularMdp, q: PolicyMixture) -> float:
    return float(sum(w * hellinger_sq(A, B, pi) for w, pi in zip(q.weights, q.atoms)))


@dataclass(frozen=True)
class CodexConfig:
    T: int = 200
    epsilon: float = 0.125
    C: float | None = None
    relaxation: str = "mu"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.relaxation not in ("mu", "pushforward"):
            raise ValueError(f"unknown relaxation {self.relaxation!r}")


@dataclass(frozen=True, eq=False)
class ExplorationReport:
    selected: tuple
    plugin_values: np.ndarray  # (T, H)
    thresholds: np.ndarray  # (T,)
    infeasible: tuple
    covers: tuple
    round_true_coverage: np.ndarray | None  # (T, H)
    true_coverage: np.ndarray | None  # (H,)
    hellinger: np.ndarray | None  # (T,)
    epsilon: float
    policy: PolicyMixture | None = None
    suboptimality: float | None = None

    @property
    def cumulative_hellinger(self):
        return None if self.hellinger is None else np.cumsum(self.hellinger)

    def to_dict(self) -> dict:
        out = {
            "epsilon": self.epsilon,
            "rounds": len(self.selected),
            "selected": list(self.selected),
            "plugin_values": self.plugin_values.tolist(),
            "thresholds": self.thresholds.tolist(),
            "infeasible": list(self.infeasible),
            "cover_weights": [c.weights.tolist() for c in self.covers],
            "true_coverage": None if self.true_coverage is None else self.true_coverage.tolist(),
            "hellinger": None if self.hellinger is None else self.hellinger.tolist(),
            "suboptimality": self.suboptimality,
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self) -> tuple:
        H = self.plugin_values.shape[1]
        header = (["round", "model_index"] + [f"plugin_h{h}" for h in range(1, H + 1)]
                  + [f"true_cov_h{h}" for h in range(1, H + 1)] + ["hellinger"])
        rows = []
        for t, k in enumerate(self.selected):
            tc = (self.round_true_coverage[t].tolist() if self.round_true_coverage is not None
                  else [math.nan] * H)
            hel = self.hellinger[t] if self.hellinger is not None else math.nan
            rows.append([t + 1, k] + self.plugin_values[t].tolist() + tc + [hel])
        return header, rows


class _ModelPlans:
    """Per-model cache of plug-in covers, their plug-in values and the certified threshold."""

    def __init__(self, cls, policies, config):
        self.cls, self.policies, self.config = cls, policies, config
        self.cache = {}

    def get(self, k: int):
        if k in self.cache:
            return self.cache[k]
        M = self.cls[k]
        eps, H = self.config.epsilon, M.horizon
        covers, values = [], []
        cinf = max(compute_cinf(M, None, h)[0] for h in range(1, H + 1))
        for h in range(1, H + 1):
            if self.config.relaxation == "mu" or h == 1:
                if self.config.relaxation == "mu":
                    mu = compute_cinf(M, None, h)[1]
                    cover = plan_linf_relaxation(M, None, mu, PlanConfig(h, eps),
                                                 evaluate=False).mixture
                else:
                    cover = PolicyMixture.point(Policy.uniform(M))
            else:
                cover = plan_pushforward_relaxation(M, PlanConfig(h, eps),
                                                    evaluate=False).mixture_prime
            covers.append(cover)
            values.append(l1_coverage(M, self.policies, cover, CoverageParams(h, eps)))
        if self.config.C is not None:
            C = self.config.C
        elif self.config.relaxation == "mu":
            C = 6.0 * cinf * math.log(2.0 / eps)
        else:
            from .coverage import compute_cpush
            cp = max(compute_cpush(M, h)[0] for h in range(2, H + 1)) if H > 1 else 1.0
            C = max(5.0 * M.num_actions * cp * math.log(2.0 / eps), M.num_actions)
        out = (tuple(covers), np.array(values), C, PolicyMixture.combine(covers))
        self.cache[k] = out
        return out


def _episode(env: TabularMdp, q: PolicyMixture, seed: int, t: int) -> Trajectory:
    rng = np.random.default_rng([seed, t])
    S, A = sample_batch(env, q, 1, rng)
    R = None
    if env.rewards is not None:
        R = np.array([env.rewards[h][S[0, h], A[0, h]] for h in range(env.horizon)])
    return Trajectory(S[0], A[0], R)


def _run(cls, env, policies, config, reward_driven):
    plans = _ModelPlans(cls, policies, config)
    log = InteractionLog()
    H = env.horizon
    loglik = np.zeros(len(cls))
    selected, plugin, thresholds, infeasible, round_covers, greedy = [], [], [], [], [], []
    greedy_cache = {}
    for t in range(1, config.T + 1):
        k = int(np.argmax(loglik))
        covers, values, C, explore = plans.get(k)
        selected.append(k)
        plugin.append(values)
        thresholds.append(C)
        infeasible.append(bool(np.any(values > C)))
        round_covers.append(covers)
        q = explore
        if reward_driven:
            if k not in greedy_cache:
                greedy_cache[k] = dp_plan(cls[k], cls[k].rewards)[0]
            pi_k = greedy_cache[k]
            greedy.append(pi_k)
            q = PolicyMixture.combine([PolicyMixture.point(pi_k), explore])
        traj = _episode(env, q, config.seed, t)
        log.append(t, f"round{t}", traj)
        R = traj.rewards[None] if traj.rewards is not None else None
        loglik = loglik + np.array([trajectory_loglik(m, traj.states[None], traj.actions[None], R)[0]
                                    for m in cls.models])
    final = tuple(PolicyMixture.combine([rc[h] for rc in round_covers]) for h in range(H))

    # diagnostics against the true model
    true_cov = np.array([l1_coverage(env, policies, final[h], CoverageParams(h + 1, config.epsilon))
                         for h in range(H)])
    per_model_cov, per_model_hel = {}, {}
    for k in set(selected):
        covers, _, _, explore = plans.get(k)
        per_model_cov[k] = [l1_coverage(env, policies, covers[h], CoverageParams(h + 1, config.epsilon))
                            for h in range(H)]
        q = explore
        if reward_driven:
            q = PolicyMixture.combine([PolicyMixture.point(greedy_cache[k]), explore])
        per_model_hel[k] = hellinger_sq_mixture(cls[k], env, q)
    round_cov = np.array([per_model_cov[k] for k in selected])
    hel = np.array([per_model_hel[k] for k in selected])
    return (log, selected, np.array(plugin), np.array(thresholds), infeasible, final,
            round_cov, true_cov, hel, greedy)


def codex_reward_free(cls: FiniteModelClass, env: TabularMdp, policies=None,
                      config: CodexConfig = CodexConfig()) -> ExplorationReport:
    """Reward-free plug-in cover optimization against an environment ``env``.

    ``env`` is only sampled from inside the loop; its tables are used
    afterwards to score the covers. ``policies`` is the comparator class
    (``None`` for all Markov policies).
    """
    if not env.same_shape(cls[0]):
        raise ValueError("environment dimensions differ from the model class")
    (_, sel, plugin, thr, inf, final, rcov, tcov, hel, _) = _run(cls, env, policies, config, False)
    return ExplorationReport(tuple(sel), plugin, thr, tuple(inf), final, rcov, tcov, hel,
                             config.epsilon)


def codex_reward_driven(cls: FiniteModelClass, env: TabularMdp, policies=None,
                        config: CodexConfig = CodexConfig()) -> tuple:
    """Reward-driven variant; returns (π̂, report) with π̂ the uniform mixture of greedy policies."""
    if any(m.rewards is None for m in cls.models) or env.rewards is None:
        raise ValueError("reward-driven exploration needs reward tables")
    if not env.same_shape(cls[0]):
        raise ValueError("environment dimensions differ from the model class")
    (_, sel, plugin, thr, inf, final, rcov, tcov, hel, greedy) = _run(cls, env, policies, config, True)
    pi_hat = PolicyMixture.combine([PolicyMixture.point(g) for g in greedy])
    best = policy_value(env, dp_plan(env, env.rewards)[0], env.rewards)
    sub = best - policy_value(env, pi_hat, env.rewards)
    rep = ExplorationReport(tuple(sel), plugin, thr, tuple(inf), final, rcov, tcov, hel,
                            config.epsilon, policy=pi_hat, suboptimality=float(sub))
    return pi_hat, rep

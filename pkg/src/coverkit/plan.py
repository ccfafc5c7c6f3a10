"""Policy-cover computation for a known MDP by iterated reward-driven planning.

Each iteration installs a layer-local reward that is large where the cover
built so far is thin, solves it exactly with :func:`dp_plan`, and appends the
resulting policy. The cover returned is the uniform mixture of the iterates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coverage import (CoverageParams, cinf_of, compute_cpush, l1_coverage,
                       mu_relaxation_reward, psi_mu, psi_push, pushforward_reward,
                       uniform_at)
from .mdp import (PolicyMixture, TabularMdp, dp_plan, exact_occupancy,
                  layer_reward)


class PotentialPreconditionError(ValueError):
    """Some increment d_t(z) exceeds C·μ(z)."""


def iterations_for(eps: float) -> int:
    # guard against 1/eps landing a hair above an integer
    return max(1, math.ceil(1.0 / eps - 1e-9))


@dataclass(frozen=True)
class PlanConfig:
    h: int
    epsilon: float
    eps_opt: float = 0.0
    relaxation: str = "mu"

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if self.relaxation not in ("mu", "pushforward", "custom"):
            raise ValueError(f"unknown relaxation {self.relaxation!r}")
        if self.eps_opt != 0.0:
            raise ValueError("only exact planning (eps_opt = 0) is implemented")

    @property
    def T(self) -> int:
        return iterations_for(self.epsilon)

    @property
    def params(self) -> CoverageParams:
        return CoverageParams(self.h, self.epsilon)


@dataclass(frozen=True, eq=False)
class PlanTrace:
    relaxation: str
    h: int
    epsilon: float
    policies: tuple
    values: tuple
    mixture: PolicyMixture
    relaxation_value: float
    l1_value: float | None
    constant: float
    mixture_prime: PolicyMixture | None = None
    bound: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def bound_holds(self) -> bool | None:
        if self.bound is None or self.l1_value is None:
            return None
        return self.l1_value <= self.bound

    def to_dict(self) -> dict:
        return {
            "relaxation": self.relaxation,
            "h": self.h,
            "epsilon": self.epsilon,
            "T": len(self.policies),
            "constant": self.constant,
            "values": list(self.values),
            "policies": [p.to_dict() for p in self.policies],
            "weights": self.mixture.weights.tolist(),
            "relaxation_value": self.relaxation_value,
            "l1_value": self.l1_value,
            "bound": self.bound,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _evaluate(mdp, policies_eval, p, params, evaluate):
    if not evaluate:
        return None
    return l1_coverage(mdp, policies_eval, p, params)


def plan_linf_relaxation(mdp: TabularMdp, policies_eval, mu: np.ndarray,
                         config: PlanConfig, evaluate: bool = True) -> PlanTrace:
    """Iterated planning on r_t = μ / (Σ_{i<t} d^{π_i} + C∞(μ)·μ) at layer h.

    C∞(μ) is taken over all Markov policies, the class the exact planner
    searches; the L1-Coverage of the output is reported over ``policies_eval``
    (``None`` for all policies).
    """
    h, eps = config.h, config.epsilon
    mu = np.asarray(mu, dtype=float)
    cinf = cinf_of(mdp, None, h, mu)
    if not math.isfinite(cinf):
        raise ValueError("mu has zero mass on a reachable pair")
    acc = np.zeros((mdp.layer_size(h), mdp.num_actions))
    policies, values = [], []
    for _ in range(config.T):
        r = mu_relaxation_reward(acc, mu, 1.0, cinf)
        pi, v = dp_plan(mdp, layer_reward(mdp, h, r))
        policies.append(pi)
        values.append(v)
        acc = acc + exact_occupancy(mdp, pi).layer(h)
    p = PolicyMixture.uniform(policies)
    rv = psi_mu(mdp, None, p, config.params, mu, cinf)
    return PlanTrace("mu", h, eps, tuple(policies), tuple(values), p, rv,
                     _evaluate(mdp, policies_eval, p, config.params, evaluate), cinf)


def plan_pushforward_relaxation(mdp: TabularMdp, config: PlanConfig, policies_eval=None,
                                evaluate: bool = True) -> PlanTrace:
    """Iterated planning on the expected pushforward reward at layer h−1.

    Returns the mixture p of the iterates and, as ``mixture_prime``, the cover
    p ∘_h π_unif whose L1-Coverage is reported.
    """
    h, eps = config.h, config.epsilon
    if h < 2 or h > mdp.horizon:
        raise ValueError("the pushforward relaxation needs 2 <= h <= H")
    P = mdp.kernel(h - 1)
    acc = np.zeros(mdp.layer_size(h))
    policies, values = [], []
    for _ in range(config.T):
        # Σ_x' P·P/(acc + P) is the eps = 1 form of the pushforward reward
        r = pushforward_reward(P, acc, 1.0)
        pi, v = dp_plan(mdp, layer_reward(mdp, h - 1, r))
        policies.append(pi)
        values.append(v)
        acc = acc + exact_occupancy(mdp, pi).states(h)
    p = PolicyMixture.uniform(policies)
    p_prime = uniform_at(mdp, p, h)
    rv = psi_push(mdp, None, p, config.params)
    cpush = compute_cpush(mdp, h)[0]
    return PlanTrace("pushforward", h, eps, tuple(policies), tuple(values), p, rv,
                     _evaluate(mdp, policies_eval, p_prime, config.params, evaluate),
                     cpush, mixture_prime=p_prime)


@dataclass(frozen=True, eq=False)
class RelaxationWeight:
    """Weight w_ε(p; ·) as per-layer reward tables.

    ``reward(mdp, p, eps)`` receives the current mixture (``None`` before the
    first iterate, in which case ``eps`` is ``None`` too) and returns one table
    per layer. ``c1`` and ``c2`` are the certificate constants when known.
    """

    name: str
    reward: Callable
    c1: float | None = None
    c2: float | None = None


def mu_weight(mdp: TabularMdp, h: int, mu: np.ndarray) -> RelaxationWeight:
    mu = np.asarray(mu, dtype=float)
    cinf = cinf_of(mdp, None, h, mu)

    def reward(mdp, p, eps):
        if p is None:
            base, eps = np.zeros_like(mu), 1.0
        else:
            base = p_layer(mdp, p, h)
        return layer_reward(mdp, h, mu_relaxation_reward(base, mu, eps, cinf))

    # Cov ≤ 2C∞·Ψ_μ and 3·log(2T) ≤ 4·log(T+1) for all T ≥ 1
    return RelaxationWeight("mu", reward, c1=2.0 * cinf, c2=4.0)


def pushforward_weight(mdp: TabularMdp, h: int) -> RelaxationWeight:
    if h < 2:
        raise ValueError("the pushforward weight needs h >= 2")
    P = mdp.kernel(h - 1)

    def reward(mdp, p, eps):
        if p is None:
            base, eps = np.zeros(P.shape[2]), 1.0
        else:
            base = p_layer(mdp, p, h).sum(axis=1)
        return layer_reward(mdp, h - 1, pushforward_reward(P, base, eps))

    return RelaxationWeight("pushforward", reward)


def p_layer(mdp: TabularMdp, p: PolicyMixture, h: int) -> np.ndarray:
    acc = np.zeros((mdp.layer_size(h), mdp.num_actions))
    for w, a in zip(p.weights, p.atoms):
        acc += w * exact_occupancy(mdp, a).layer(h)
    return acc


def plan_generic(mdp: TabularMdp, weight: RelaxationWeight, config: PlanConfig,
                 policies_eval=None, evaluate: bool = True) -> PlanTrace:
    """Generic recipe: π_t = argmax E^π[w_{ε_t}(p_t; ·)], p_t = Unif(π_1..π_{t−1}), ε_t = 1/(t−1).

    The returned mixture is Unif(π_1..π_T). When the weight carries constants
    its certificate C1·C2·log(T+1) is recorded as ``bound`` and compared with
    the L1-Coverage at ε = 1/T.
    """
    policies, values = [], []
    for t in range(1, config.T + 1):
        if t == 1:
            r = weight.reward(mdp, None, None)
        else:
            r = weight.reward(mdp, PolicyMixture.uniform(policies), 1.0 / (t - 1))
        if any(np.any(~np.isfinite(x)) for x in r):
            raise ValueError("weight produced a non-finite reward")
        pi, v = dp_plan(mdp, r)
        policies.append(pi)
        values.append(v)
    p = PolicyMixture.uniform(policies)
    params = CoverageParams(config.h, 1.0 / config.T)
    bound = None
    if weight.c1 is not None and weight.c2 is not None:
        bound = weight.c1 * weight.c2 * math.log(config.T + 1)
    l1 = _evaluate(mdp, policies_eval, p, params, evaluate)
    return PlanTrace(weight.name, config.h, config.epsilon, tuple(policies), tuple(values),
                     p, math.nan, l1, math.nan, bound=bound)


def elliptic_potential_bound(T: int) -> float:
    return 2.0 * math.log(2 * T)


def elliptic_potential_check(d_seq, mu, C: float, tol: float = 1e-12) -> float:
    """max_z Σ_t d_t(z) / (Σ_{i<t} d_i(z) + C·μ(z))."""
    d = np.asarray(d_seq, dtype=float)
    cmu = C * np.asarray(mu, dtype=float)
    if np.any(d < 0) or np.any(d > cmu[None] * (1 + tol) + tol):
        raise PotentialPreconditionError("some d_t(z) exceeds C·mu(z)")
    prev = np.cumsum(d, axis=0) - d
    den = prev + cmu[None]
    terms = np.where(d > 0, d / np.where(den > 0, den, 1.0), 0.0)
    return float(terms.sum(axis=0).max())

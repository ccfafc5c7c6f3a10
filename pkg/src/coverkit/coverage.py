"""Coverage objectives, coverability constants and their optimization oracles.

A comparator class is either an explicit :class:`PolicyClass` or ``None``.
``None`` stands for every Markov policy; suprema over it are computed exactly,
either by dynamic programming (linear objectives) or by enumerating the
vertices of the layer-``h`` occupancy polytope (convex objectives).
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import (Policy, PolicyMixture, TabularMdp, dp_plan, exact_occupancy,
                  layer_reward, max_reachability, mixture_occupancy)

ENUM_LIMIT = 20_000


class DivisionByUncovered(ArithmeticError):
    """ε = 0 and the cover puts no mass on a pair some comparator reaches."""


@dataclass(frozen=True)
class CoverageParams:
    h: int
    epsilon: float

    def __post_init__(self):
        if self.h < 1:
            raise ValueError("layer index h must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def check(self, mdp: TabularMdp) -> None:
        if self.h > mdp.horizon:
            raise ValueError(f"layer {self.h} exceeds horizon {mdp.horizon}")


@dataclass(frozen=True, eq=False)
class PolicyClass:
    policies: tuple

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(self.policies))
        if not self.policies:
            raise ValueError("policy class must be nonempty")

    def __len__(self):
        return len(self.policies)

    def __iter__(self):
        return iter(self.policies)

    def __getitem__(self, i):
        return self.policies[i]


@dataclass(frozen=True, eq=False)
class CoverCertificate:
    mixture: PolicyMixture
    objective_value: float
    per_policy_values: tuple

    def to_dict(self) -> dict:
        return {
            "objective_value": self.objective_value,
            "per_policy_values": [[int(i), float(v)] for i, v in self.per_policy_values],
            "weights": self.mixture.weights.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# comparator occupancies

def _as_class(policies):
    if policies is None or isinstance(policies, PolicyClass):
        return policies
    return PolicyClass(tuple(policies))


def class_occupancies(mdp: TabularMdp, policies, h: int) -> np.ndarray:
    """Stack of layer-``h`` occupancies, shape ``(K, X_h, A)``."""
    policies = _as_class(policies)
    if policies is None:
        return all_policy_occupancies(mdp, h)
    return np.stack([exact_occupancy(mdp, pi).layer(h) for pi in policies])


def _dedupe(rows: np.ndarray) -> np.ndarray:
    _, idx = np.unique(np.round(rows, 12), axis=0, return_index=True)
    return rows[np.sort(idx)]


def _expand(S: np.ndarray, P: np.ndarray, limit: int) -> np.ndarray:
    """Candidate extreme points of {Σ_x s(x)·P[x, α(x)] : s ∈ rows of S, α an action map}.

    For a fixed s the set is a Minkowski sum over states, whose extreme points
    are sums of the summands' extreme points, so partial sums are pruned to
    their hull as states are added.
    """
    Y = P.shape[2]
    found = []
    total = 0
    for s in S:
        out = np.zeros((1, Y))
        for x in range(P.shape[0]):
            if s[x] == 0:
                continue
            out = (out[:, None, :] + s[x] * P[x][None]).reshape(-1, Y)
            out = _hull_vertices(_dedupe(out))
        found.append(out)
        total += len(out)
        if total > limit:
            raise ValueError("too many distinct occupancies to enumerate; pass a finite class")
    return _dedupe(np.concatenate(found))


def reachable_state_distributions(mdp: TabularMdp, h: int, limit: int = ENUM_LIMIT) -> np.ndarray:
    """Candidate vertices of the layer-``h`` state-marginal polytope over all Markov policies.

    Every vertex is the marginal of some deterministic policy. Raises
    ValueError when more than ``limit`` candidates would be kept.
    """
    return _reachable_cached(mdp, h, limit)


@functools.lru_cache(maxsize=64)
def _reachable_cached(mdp: TabularMdp, h: int, limit: int) -> np.ndarray:
    S = mdp.init_dist[None, :]
    for l in range(1, h):
        S = _hull_vertices(_expand(S, mdp.kernel(l), limit))
    S.setflags(write=False)
    return S


def _hull_vertices(points: np.ndarray) -> np.ndarray:
    """Rows of ``points`` that can be extreme points of their convex hull.

    Convex objectives over the occupancy polytope peak at a vertex, so the
    interior candidates are dropped. The hull is taken inside the affine span
    of the points; if Qhull rejects the input every point is kept.
    """
    if len(points) <= 2:
        return points
    centered = points - points.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    r = int((sv > 1e-10 * max(1.0, sv[0])).sum())
    if r == 0:
        return points[:1]
    coords = centered @ vt[:r].T
    if r == 1:
        keep = {int(np.argmin(coords[:, 0])), int(np.argmax(coords[:, 0]))}
        return points[sorted(keep)]
    if len(points) <= r + 1:
        return points
    try:
        from scipy.spatial import ConvexHull
        idx = np.sort(ConvexHull(coords).vertices)
    except Exception:  # degenerate input for Qhull: keep everything
        return points
    return points[idx]


def all_policy_occupancies(mdp: TabularMdp, h: int, limit: int = ENUM_LIMIT) -> np.ndarray:
    """Distinct layer-``h`` occupancies of deterministic policies, shape ``(K, X_h, A)``."""
    S = reachable_state_distributions(mdp, h, limit)
    K, X = S.shape
    A = mdp.num_actions
    D = np.zeros((K, X, A))
    for x in range(X):
        D = np.repeat(D, A, axis=0)
        S = np.repeat(S, A, axis=0)
        D[np.arange(len(D)), x, np.tile(np.arange(A), len(D) // A)] = S[:, x]
        _, idx = np.unique(np.round(np.hstack([D.reshape(len(D), -1), S]), 12),
                           axis=0, return_index=True)
        idx = np.sort(idx)
        D, S = D[idx], S[idx]
        if len(D) > limit:
            raise ValueError("too many distinct occupancies to enumerate; pass a finite class")
    return D


# --------------------------------------------------------------------------
# objective terms

def _ratio(num: np.ndarray, base: np.ndarray, eps: float) -> np.ndarray:
    """num / (base + eps·num) with 0/0 = 0 and an error on positive/0."""
    den = base + eps * num
    bad = (num > 0) & (den <= 0)
    if np.any(bad):
        raise DivisionByUncovered("cover assigns zero mass to a reachable pair at eps = 0")
    safe = np.where(num > 0, den, 1.0)
    return np.where(num > 0, num / safe, 0.0)


def _l1_values(D: np.ndarray, dp: np.ndarray, eps: float) -> np.ndarray:
    return (D * _ratio(D, dp[None], eps)).reshape(len(D), -1).sum(axis=1)


def _lq_values(D: np.ndarray, dp: np.ndarray, eps: float, q: float) -> np.ndarray:
    return ((D * _ratio(D, dp[None], eps) ** q).reshape(len(D), -1).sum(axis=1)) ** (1.0 / q)


def _state_max(S: np.ndarray, dp: np.ndarray, eps: float, power: float) -> np.ndarray:
    """Σ_x max_a s(x)·ratio(s(x), d^p(x,a))^power for every candidate marginal s."""
    num = np.broadcast_to(S[:, :, None], S.shape + (dp.shape[1],))
    terms = num * _ratio(num, dp[None], eps) ** power
    return terms.max(axis=2).sum(axis=1)


def _cover_layer(mdp, p, h):
    if isinstance(p, Policy):
        p = PolicyMixture.point(p)
    return mixture_occupancy(mdp, p).layer(h)


def l1_values(mdp: TabularMdp, policies, p, params: CoverageParams) -> np.ndarray:
    """Per-comparator L1-Coverage terms (explicit class only)."""
    params.check(mdp)
    D = class_occupancies(mdp, policies, params.h)
    return _l1_values(D, _cover_layer(mdp, p, params.h), params.epsilon)


def l1_coverage(mdp: TabularMdp, policies, p, params: CoverageParams) -> float:
    params.check(mdp)
    dp = _cover_layer(mdp, p, params.h)
    policies = _as_class(policies)
    if policies is None:
        S = reachable_state_distributions(mdp, params.h)
        return float(_state_max(S, dp, params.epsilon, 1.0).max())
    return float(l1_values(mdp, policies, p, params).max())


def lq_admissible_coverage(mdp: TabularMdp, policies, p, params: CoverageParams,
                           q: float) -> float:
    if q < 1 or not math.isfinite(q):
        raise ValueError("q must be finite and >= 1")
    params.check(mdp)
    dp = _cover_layer(mdp, p, params.h)
    policies = _as_class(policies)
    if policies is None:
        S = reachable_state_distributions(mdp, params.h)
        return float(_state_max(S, dp, params.epsilon, q).max() ** (1.0 / q))
    D = class_occupancies(mdp, policies, params.h)
    return float(_lq_values(D, dp, params.epsilon, q).max())


def linf_admissible_coverage(mdp: TabularMdp, policies, p, params: CoverageParams) -> float:
    params.check(mdp)
    dp = _cover_layer(mdp, p, params.h)
    policies = _as_class(policies)
    if policies is None:
        # the ratio increases with d^π(x,a), whose maximum is the reachability of x
        m = max_reachability(mdp, params.h)
        D = np.broadcast_to(m[:, None], dp.shape)[None]
    else:
        D = class_occupancies(mdp, policies, params.h)
    return float(_ratio(D, dp[None], params.epsilon).max())


# --------------------------------------------------------------------------
# coverability constants

def pointwise_max_occupancy(mdp: TabularMdp, policies, h: int) -> np.ndarray:
    policies = _as_class(policies)
    if policies is None:
        m = max_reachability(mdp, h)
        return np.repeat(m[:, None], mdp.num_actions, axis=1)
    return class_occupancies(mdp, policies, h).max(axis=0)


def compute_cinf(mdp: TabularMdp, policies, h: int) -> tuple:
    """C∞ = Σ_{x,a} max_π d^π(x,a) together with the witness μ ∝ max_π d^π."""
    M = pointwise_max_occupancy(mdp, policies, h)
    value = float(M.sum())
    return value, M / value


def cinf_of(mdp: TabularMdp, policies, h: int, mu: np.ndarray) -> float:
    """C∞(μ) = max_{π,x,a} d^π(x,a)/μ(x,a); infinite if μ misses a reachable pair."""
    M = pointwise_max_occupancy(mdp, policies, h)
    mu = np.asarray(mu, dtype=float)
    if np.any((M > 0) & (mu <= 0)):
        return math.inf
    return float(np.max(np.where(M > 0, M / np.where(mu > 0, mu, 1.0), 0.0)))


def compute_cpush(mdp: TabularMdp, h: int) -> tuple:
    if h < 2 or h > mdp.horizon:
        raise ValueError("pushforward coverability needs 2 <= h <= H")
    M = mdp.kernel(h - 1).max(axis=(0, 1))
    value = float(M.sum())
    return value, M / value


def cpush_of(mdp: TabularMdp, h: int, mu: np.ndarray) -> float:
    M = mdp.kernel(h - 1).max(axis=(0, 1))
    if np.any((M > 0) & (mu <= 0)):
        return math.inf
    return float(np.max(np.where(M > 0, M / np.where(mu > 0, mu, 1.0), 0.0)))


# --------------------------------------------------------------------------
# exponentiated-gradient oracles

def _eg_step(w: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    scale = np.max(np.abs(grad))
    if scale > 0:
        grad = grad / scale
    logits = np.log(w) - eta * grad
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def cov_opt_upper(mdp: TabularMdp, policies, params: CoverageParams,
                  iters: int = 2000, eta0: float = 1.0) -> CoverCertificate:
    """Certified upper bound on the optimal L1-Coverage over mixtures of ``policies``.

    Runs exponentiated gradient on the pointwise max with step ``eta0/sqrt(t)``
    from the uniform mixture and keeps the best iterate.
    """
    if params.epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params.check(mdp)
    policies = _as_class(policies)
    if policies is None:
        raise ValueError("cov_opt_upper needs an explicit policy class")
    eps = params.epsilon
    D = class_occupancies(mdp, policies, params.h).reshape(len(policies), -1)
    K = len(D)
    w = np.full(K, 1.0 / K)
    best_w, best_v = w, math.inf
    for t in range(1, iters + 1):
        dp = w @ D
        vals = _l1_values(D, dp, eps)
        k = int(np.argmax(vals))
        if vals[k] < best_v:
            best_v, best_w = float(vals[k]), w
        den = dp + eps * D[k]
        coef = np.where(D[k] > 0, D[k] ** 2 / np.where(den > 0, den, 1.0) ** 2, 0.0)
        w = _eg_step(w, -(D @ coef), eta0 / math.sqrt(t))
    vals = _l1_values(D, best_w @ D, eps)
    mix = PolicyMixture(policies.policies, best_w)
    return CoverCertificate(mix, float(vals.max()),
                            tuple((i, float(v)) for i, v in enumerate(vals)))


def compute_c1(mdp: TabularMdp, policies, h: int, iters: int = 2000,
               eta0: float = 1.0) -> tuple:
    """Upper bound on min_μ max_π Σ d^π²/μ by exponentiated gradient.

    Returns ``(value, μ, history)`` where ``history`` is the best-so-far value
    after each iteration (nonincreasing).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    D = class_occupancies(mdp, policies, h)
    shape = D.shape[1:]
    D = D.reshape(len(D), -1)
    support = D.max(axis=0) > 0
    Ds = D[:, support]
    mu = np.full(Ds.shape[1], 1.0 / Ds.shape[1])
    best_mu, best_v, history = mu, math.inf, []
    for t in range(1, iters + 1):
        vals = (Ds ** 2 / mu).sum(axis=1)
        k = int(np.argmax(vals))
        if vals[k] < best_v:
            best_v, best_mu = float(vals[k]), mu
        history.append(best_v)
        mu = _eg_step(mu, -(Ds[k] ** 2) / mu ** 2, eta0 / math.sqrt(t))
    full = np.zeros(D.shape[1])
    full[support] = best_mu
    return best_v, full.reshape(shape), np.array(history)


# --------------------------------------------------------------------------
# change of measure and relaxations

def change_of_measure_bound(mdp: TabularMdp, policies, p, params: CoverageParams,
                            g: np.ndarray, B: float | None = None) -> tuple:
    """Per-comparator (lhs, rhs, holds) for E^π[g] ≤ 2√(Ψ·E^p[g²]) + Ψ·ε·B."""
    g = np.asarray(g, dtype=float)
    if np.any(g < 0):
        raise ValueError("g must be nonnegative")
    B = float(g.max()) if B is None else float(B)
    if np.any(g > B):
        raise ValueError("g exceeds the stated bound B")
    policies = _as_class(policies)
    if policies is None:
        raise ValueError("change_of_measure_bound needs an explicit policy class")
    psi = l1_coverage(mdp, policies, p, params)
    dp = _cover_layer(mdp, p, params.h)
    D = class_occupancies(mdp, policies, params.h)
    lhs = (D * g[None]).reshape(len(D), -1).sum(axis=1)
    rhs = 2.0 * math.sqrt(psi * float((dp * g ** 2).sum())) + psi * params.epsilon * B
    rhs = np.full(len(D), rhs)
    return lhs, rhs, lhs <= rhs + 1e-12


def mu_relaxation_reward(dp: np.ndarray, mu: np.ndarray, eps: float, cinf: float) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    den = dp + eps * cinf * mu
    if np.any((mu > 0) & (den <= 0)):
        raise DivisionByUncovered("zero denominator in the mu-relaxation")
    return np.where(mu > 0, mu / np.where(den > 0, den, 1.0), 0.0)


def pushforward_reward(P: np.ndarray, dp_states: np.ndarray, eps: float) -> np.ndarray:
    """Σ_{x'} P(x'|x,a)·P(x'|x,a)/(d^p(x') + ε·P(x'|x,a)) for every (x, a)."""
    den = dp_states[None, None, :] + eps * P
    if np.any((P > 0) & (den <= 0)):
        raise DivisionByUncovered("zero denominator in the pushforward relaxation")
    ratio = np.where(P > 0, P / np.where(den > 0, den, 1.0), 0.0)
    return (P * ratio).sum(axis=2)


def _sup_linear(mdp: TabularMdp, policies, h: int, table: np.ndarray) -> float:
    policies = _as_class(policies)
    if policies is None:
        return dp_plan(mdp, layer_reward(mdp, h, table))[1]
    D = class_occupancies(mdp, policies, h)
    return float((D * table[None]).reshape(len(D), -1).sum(axis=1).max())


def psi_mu(mdp: TabularMdp, policies, p, params: CoverageParams, mu: np.ndarray,
           cinf: float | None = None) -> float:
    params.check(mdp)
    if cinf is None:
        cinf = cinf_of(mdp, policies, params.h, mu)
    if not math.isfinite(cinf):
        raise ValueError("mu misses a reachable pair; C∞(mu) is infinite")
    r = mu_relaxation_reward(_cover_layer(mdp, p, params.h), mu, params.epsilon, cinf)
    return _sup_linear(mdp, policies, params.h, r)


def psi_push(mdp: TabularMdp, policies, p, params: CoverageParams) -> float:
    params.check(mdp)
    h = params.h
    if h < 2:
        raise ValueError("the pushforward relaxation needs h >= 2")
    ds = _cover_layer(mdp, p, h).sum(axis=1)
    r = pushforward_reward(mdp.kernel(h - 1), ds, params.epsilon)
    return _sup_linear(mdp, policies, h - 1, r)


def relaxation_objectives(mdp: TabularMdp, policies, p, params: CoverageParams,
                          mu: np.ndarray | None = None, mode: str = "mu") -> float:
    if mode == "mu":
        if mu is None:
            raise ValueError("mu mode needs a distribution mu")
        return psi_mu(mdp, policies, p, params, mu)
    if mode == "pushforward":
        return psi_push(mdp, policies, p, params)
    raise ValueError(f"unknown relaxation mode {mode!r}")


def uniform_at(mdp: TabularMdp, p, h: int) -> PolicyMixture:
    """p ∘_h π_unif: follow p before layer h, act uniformly from h on."""
    if isinstance(p, Policy):
        p = PolicyMixture.point(p)
    return p.compose(Policy.uniform(mdp), h)

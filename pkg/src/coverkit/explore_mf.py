"""Model-free exploration: density-ratio weights, PSDP and the layerwise cover loop.

The environment is touched only through :class:`SamplingEnv` (episode
rollouts and one-step kernel draws). Its tables are read solely to score
results after the fact.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .coverage import CoverageParams, compute_cpush, psi_push
from .mdp import (Policy, PolicyMixture, TabularMdp, _categorical, _greedy, mixture_occupancy,
                  q_values, sample_batch)
from .plan import iterations_for


class NoFiniteScore(ValueError):
    """Every candidate puts zero weight on some D1 sample."""


class SamplingEnv:
    """Sampling-only access to a tabular environment, with an episode counter."""

    def __init__(self, mdp: TabularMdp, seed=0):
        self.mdp = mdp  # diagnostics only
        self.rng = np.random.default_rng(seed)
        self.episodes = 0
        self._x = None
        self._h = None

    @property
    def horizon(self):
        return self.mdp.horizon

    @property
    def num_actions(self):
        return self.mdp.num_actions

    def layer_size(self, h):
        return self.mdp.layer_size(h)

    def reset(self) -> int:
        self.episodes += 1
        self._h = 1
        self._x = int(_categorical(self.rng, self.mdp.init_dist[None])[0])
        return self._x

    def step(self, a: int) -> int | None:
        if self._h is None or self._h >= self.horizon:
            self._h = None
            return None
        self._x = int(_categorical(self.rng, self.mdp.kernel(self._h)[self._x, a][None])[0])
        self._h += 1
        return self._x

    def rollout(self, policy, n: int, layers: int) -> tuple:
        """``n`` fresh episodes truncated after ``layers`` steps."""
        self.episodes += n
        return sample_batch(self.mdp, policy, n, self.rng, layers)

    def kernel_draw(self, h: int, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Next states at layer h+1 for (x, a) pairs at layer h (continues existing episodes)."""
        return _categorical(self.rng, self.mdp.kernel(h)[x, a])


# --------------------------------------------------------------------------
# weight functions

@dataclass(frozen=True, eq=False)
class WeightFunction:
    table: np.ndarray
    bound: float = 1.0

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if not np.all(np.isfinite(t)) or np.any(t < 0) or np.any(t > self.bound * (1 + 1e-12)):
            raise ValueError("weights must be finite and lie in [0, B]")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)


def _flat(D, shape) -> np.ndarray:
    D = np.asarray(D)
    if D.ndim == 1:
        return D.astype(int)
    return np.ravel_multi_index(tuple(D.T), shape)


@dataclass(frozen=True, eq=False)
class FiniteWeightClass:
    functions: tuple
    bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))
        if not self.functions:
            raise ValueError("weight class must be nonempty")

    def __len__(self):
        return len(self.functions)

    @property
    def shape(self):
        return self.functions[0].table.shape

    @property
    def log_size(self) -> float:
        return math.log(len(self.functions))

    def scores(self, D1, D2, t_scale: float) -> np.ndarray:
        shape = self.shape
        Z = int(np.prod(shape))
        n1 = np.bincount(_flat(D1, shape), minlength=Z) / len(D1)
        n2 = np.bincount(_flat(D2, shape), minlength=Z) / len(D2)
        W = np.stack([f.table.ravel() for f in self.functions])
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(n1[None] > 0, np.log(W), 0.0)
        return (logs * n1[None]).sum(axis=1) - t_scale * (W * n2[None]).sum(axis=1)

    def fit(self, D1, D2, t_scale: float) -> WeightFunction:
        s = self.scores(D1, D2, t_scale)
        if not np.any(np.isfinite(s)):
            raise NoFiniteScore("all candidates score -inf")
        return self.functions[int(np.argmax(s))]


@dataclass(frozen=True, eq=False)
class ProductWeightClass:
    """Weights constant on the cells of ``cell_map``, each cell valued in ``grid``.

    This is the finite class grid^cells; the log-loss objective separates over
    cells, so the exhaustive argmax is taken cell by cell.
    """

    cell_map: np.ndarray
    grid: np.ndarray
    bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "cell_map", np.asarray(self.cell_map, dtype=int))
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))

    @property
    def shape(self):
        return self.cell_map.shape

    @property
    def n_cells(self) -> int:
        return int(self.cell_map.max()) + 1

    @property
    def log_size(self) -> float:
        return self.n_cells * math.log(len(self.grid))

    def fit(self, D1, D2, t_scale: float) -> WeightFunction:
        cells = self.cell_map.ravel()
        c1 = np.bincount(cells[_flat(D1, self.shape)], minlength=self.n_cells) / len(D1)
        c2 = np.bincount(cells[_flat(D2, self.shape)], minlength=self.n_cells) / len(D2)
        g = self.grid[None, :]
        with np.errstate(divide="ignore"):
            logs = np.where(c1[:, None] > 0, np.log(np.where(g > 0, g, 0.0)), 0.0)
        score = c1[:, None] * logs - t_scale * c2[:, None] * g
        choice = np.argmax(score, axis=1)
        return WeightFunction(self.grid[choice][self.cell_map], self.bound)


def sqrt_grid(K: int) -> np.ndarray:
    """{(k/K)² : k = 0..K}: evenly spaced in √w, so rounding costs at most 1/(4K²) in Hellinger."""
    return (np.arange(K + 1) / K) ** 2


def fit_weight_logloss(D1, D2, cls, t_scale: float = 1.0) -> WeightFunction:
    """argmax_w Ê_{D1}[log w] − t_scale·Ê_{D2}[w] over a finite (or product) class."""
    if len(D1) == 0 or len(D2) == 0:
        raise ValueError("datasets must be nonempty")
    return cls.fit(D1, D2, t_scale)


def induce_strong_class(weak: FiniteWeightClass, T: int) -> FiniteWeightClass:
    """All w' = 1/(1 + Σ_{i<t} 1/w_i) over multisets of size ≤ T−1 from ``weak``."""
    tabs = [f.table for f in weak.functions]
    if any(np.any(t <= 0) for t in tabs):
        raise ValueError("weak class entries must be strictly positive")
    inv = [1.0 / t for t in tabs]
    out, seen = [], set()
    for m in range(T):
        for combo in itertools.combinations_with_replacement(range(len(inv)), m):
            w = 1.0 / (1.0 + sum((inv[i] for i in combo), np.zeros_like(inv[0])))
            key = np.round(w, 12).tobytes()
            if key not in seen:
                seen.add(key)
                out.append(WeightFunction(w, 1.0))
    return FiniteWeightClass(tuple(out), 1.0)


def weak_weight(mdp: TabularMdp, policy: Policy, h: int) -> np.ndarray:
    """w^π(x'|x,a) = P_{h−1}(x'|x,a) / d_h^π(x')."""
    from .mdp import exact_occupancy
    d = exact_occupancy(mdp, policy).states(h)
    return mdp.kernel(h - 1) / d[None, None, :]


def strong_target(mdp: TabularMdp, prior, h: int) -> np.ndarray:
    """P/(Σ_{i<t} d_h^{π_i} + P) for the given prior policies."""
    from .mdp import exact_occupancy
    P = mdp.kernel(h - 1)
    acc = np.zeros(P.shape[2])
    for pi in prior:
        acc = acc + exact_occupancy(mdp, pi).states(h)
    den = acc[None, None, :] + P
    return np.where(P > 0, P / np.where(den > 0, den, 1.0), 0.0)


def _mix(p: PolicyMixture, others: list, h: int, unif: Policy) -> PolicyMixture:
    """½·p + ½·mean_i(π_i ∘_h π_unif); just p when there are no others."""
    if not others:
        return p
    comp = PolicyMixture.uniform([pi.compose(unif, h) for pi in others])
    return PolicyMixture.combine([p, comp])


def estimate_weight(env: SamplingEnv, h: int, t: int, p_prev: PolicyMixture, prior,
                    eps: float, delta: float, cls, n: int | None = None) -> tuple:
    """Estimate P/(Σ_{i<t} d^{π_i}_h + P) from samples; returns (ŵ, episodes used)."""
    if h < 2:
        raise ValueError("weights are defined for h >= 2")
    prior = list(prior)
    if len(prior) != t - 1:
        raise ValueError("need exactly t-1 prior policies")
    if n is None:
        n = math.ceil(40.0 * (cls.log_size + math.log(1.0 / delta)) / eps ** 2)
    start = env.episodes
    unif = Policy.uniform(env.mdp)
    q = _mix(p_prev, prior, h - 1, unif)
    S, A = env.rollout(q, n, h)
    base = np.stack([S[:, h - 2], A[:, h - 2], S[:, h - 1]], axis=1)
    D1, D2 = [base], [base]
    for pi in prior:
        S, A = env.rollout(q, n, h)
        xa = np.stack([S[:, h - 2], A[:, h - 2], S[:, h - 1]], axis=1)
        St, _ = env.rollout(pi, n, h)
        D1.append(xa)
        D2.append(np.stack([xa[:, 0], xa[:, 1], St[:, h - 1]], axis=1))
    w = fit_weight_logloss(np.concatenate(D1), np.concatenate(D2), cls, float(t))
    return w, env.episodes - start


def weight_hellinger(mdp: TabularMdp, p_prev: PolicyMixture, h: int, w_hat: np.ndarray,
                     w_true: np.ndarray) -> float:
    """E_{(x,a)∼d^{p}_{h−1}, x'∼P}[(√ŵ − √w)²]."""
    d = mixture_occupancy(mdp, p_prev).layer(h - 1)
    P = mdp.kernel(h - 1)
    return float((d[:, :, None] * P * (np.sqrt(w_hat) - np.sqrt(w_true)) ** 2).sum())


# --------------------------------------------------------------------------
# value classes and PSDP

@dataclass(frozen=True, eq=False)
class FiniteValueClass:
    """Explicit per-layer candidate Q-tables; ``layers[ℓ-1]`` has shape (K_ℓ, X_ℓ, A)."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(np.asarray(L, dtype=float) for L in self.layers)
        if any(len(L) == 0 for L in layers):
            raise ValueError("each layer needs at least one candidate")
        if any(np.any(L < -1e-12) or np.any(L > 1 + 1e-12) for L in layers):
            raise ValueError("Q-tables must lie in [0, 1]")
        object.__setattr__(self, "layers", layers)

    @property
    def log_size(self) -> float:
        return math.log(sum(len(L) for L in self.layers))

    def fit(self, l: int, x: np.ndarray, a: np.ndarray, R: np.ndarray) -> np.ndarray:
        L = self.layers[l - 1]
        shape = L.shape[1:]
        idx = np.ravel_multi_index((x, a), shape)
        Z = int(np.prod(shape))
        cnt = np.bincount(idx, minlength=Z)
        tot = np.bincount(idx, weights=R, minlength=Z)
        Q = L.reshape(len(L), -1)
        sse = (cnt[None] * Q ** 2 - 2.0 * Q * tot[None]).sum(axis=1)
        return L[int(np.argmin(sse))]


@dataclass(frozen=True, eq=False)
class ProductValueClass:
    """Q-tables constant on cells of per-layer ``cell_maps`` and valued in ``grid`` (finite product class)."""

    cell_maps: tuple
    grid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cell_maps", tuple(np.asarray(c, dtype=int) for c in self.cell_maps))
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))

    @property
    def log_size(self) -> float:
        return sum(int(c.max()) + 1 for c in self.cell_maps) * math.log(len(self.grid))

    def fit(self, l: int, x: np.ndarray, a: np.ndarray, R: np.ndarray) -> np.ndarray:
        cmap = self.cell_maps[l - 1]
        nc = int(cmap.max()) + 1
        cells = cmap[x, a]
        cnt = np.bincount(cells, minlength=nc)
        tot = np.bincount(cells, weights=R, minlength=nc)
        g = self.grid[None, :]
        sse = cnt[:, None] * g ** 2 - 2.0 * tot[:, None] * g
        return self.grid[np.argmin(sse, axis=1)][cmap]


def latent_weight_class(decoder: np.ndarray, num_latent: int, num_actions: int,
                        K: int = 100) -> ProductWeightClass:
    """Weights constant on latent cells (φ(x), a, φ(x')), valued on :func:`sqrt_grid`."""
    S, A = num_latent, num_actions
    d = np.asarray(decoder)
    cells = (d[:, None, None] * A + np.arange(A)[None, :, None]) * S + d[None, None, :]
    return ProductWeightClass(np.broadcast_to(cells, (len(d), A, len(d))).copy(), sqrt_grid(K))


def latent_value_class(decoder: np.ndarray, num_actions: int, horizon: int,
                       levels: int = 101) -> ProductValueClass:
    """Q-tables constant on latent cells (φ(x), a), valued on an even grid in [0, 1]."""
    d = np.asarray(decoder)
    cmap = d[:, None] * num_actions + np.arange(num_actions)[None]
    return ProductValueClass(tuple(cmap for _ in range(horizon)), np.linspace(0.0, 1.0, levels))


@dataclass(frozen=True, eq=False)
class WeightReward:
    """Stochastic reward at ``layer``: r = w(x_{layer+1} | x_layer, a_layer)."""

    layer: int
    table: np.ndarray


def _reward_tables(mdp: TabularMdp, reward, h: int) -> list:
    """Expected per-layer reward tables on layers 1..H (zero beyond h)."""
    out = [np.zeros((n, mdp.num_actions)) for n in mdp.states_per_layer]
    if isinstance(reward, WeightReward):
        out[reward.layer - 1] = (mdp.kernel(reward.layer) * reward.table).sum(axis=2)
    else:
        for l in range(h):
            out[l] = np.asarray(reward[l], dtype=float)
    return out


def psdp_sample_size(horizon: int, num_actions: int, log_q: float, eps: float,
                     delta: float, c: float = 8.0) -> int:
    return math.ceil(c * horizon ** 2 * num_actions * (log_q + math.log(horizon / delta)) / eps ** 2)


def psdp(env: SamplingEnv, h: int, covers, reward, eps: float, delta: float, Q,
         n: int | None = None, c: float = 8.0, seed=None) -> Policy:
    """Backward policy search: layer ℓ = h..1 regresses returns-to-go onto Q_ℓ and acts greedily.

    ``covers[ℓ-1]`` is the roll-in mixture for layer ℓ. ``reward`` is a list
    of tables for layers 1..h or a :class:`WeightReward` on layer h.
    Layers after h act uniformly in the returned policy.
    """
    mdp = env.mdp
    H, A = mdp.horizon, mdp.num_actions
    if seed is not None:
        env.rng = np.random.default_rng(seed)
    if len(covers) < h:
        raise ValueError("need one cover per layer up to h")
    if isinstance(reward, WeightReward) and (reward.layer != h or h >= H):
        raise ValueError("a weight reward must sit on the target layer, below the horizon")
    if n is None:
        n = psdp_sample_size(H, A, Q.log_size, eps, delta, c)
    unif = Policy.uniform(mdp)
    tables = list(unif.probs)
    weighted = isinstance(reward, WeightReward)
    for l in range(h, 0, -1):
        p = covers[l - 1]
        if isinstance(p, Policy):
            p = PolicyMixture.point(p)
        tail = Policy(tuple(tables))
        atoms = [Policy(a.probs[:l - 1] + (unif.probs[l - 1],) + tail.probs[l:]) for a in p.atoms]
        S, Aa = env.rollout(PolicyMixture(tuple(atoms), p.weights), n, h)
        R = np.zeros(n)
        if weighted:
            nxt = env.kernel_draw(h, S[:, h - 1], Aa[:, h - 1])
            R += reward.table[S[:, h - 1], Aa[:, h - 1], nxt]
        else:
            for k in range(l, h + 1):
                R += np.asarray(reward[k - 1])[S[:, k - 1], Aa[:, k - 1]]
        Qhat = Q.fit(l, S[:, l - 1], Aa[:, l - 1], R)
        greedy = _greedy(Qhat)
        t = np.zeros((mdp.layer_size(l), A))
        t[np.arange(len(greedy)), greedy] = 1.0
        tables[l - 1] = t
    return Policy(tuple(tables))


def psdp_gap(mdp: TabularMdp, h: int, covers, reward, policy: Policy) -> float:
    """Σ_{ℓ≤h} E_{x∼d_ℓ^{p_ℓ}}[max_a Q^π̂_ℓ(x,a) − Q^π̂_ℓ(x, π̂(x))], computed exactly."""
    r = _reward_tables(mdp, reward, h)
    Qs = q_values(mdp, policy, r)
    gap = 0.0
    for l in range(1, h + 1):
        p = covers[l - 1]
        if isinstance(p, Policy):
            p = PolicyMixture.point(p)
        s = mixture_occupancy(mdp, p).states(l)
        Ql = Qs[l - 1]
        v_pi = (Ql * policy.probs[l - 1]).sum(axis=1)
        gap += float(s @ (Ql.max(axis=1) - v_pi))
    return gap


def realizable_value_class(mdp: TabularMdp, reward, h: int) -> FiniteValueClass:
    """Every Q^π_ℓ(·;r) over deterministic π on layers ℓ+1..h, for ℓ = 1..h."""
    r = _reward_tables(mdp, reward, h)
    A = mdp.num_actions
    layers = [None] * h
    Vs = np.zeros((1, mdp.layer_size(h + 1) if h < mdp.horizon else 1))
    for l in range(h, 0, -1):
        if l < mdp.horizon and l < h:
            Qs = r[l - 1][None] + np.einsum("xay,ky->kxa", mdp.kernel(l), Vs)
        else:
            Qs = r[l - 1][None]
        Qs = np.unique(np.round(Qs, 12), axis=0)
        layers[l - 1] = np.clip(Qs, 0.0, 1.0)
        X = Qs.shape[1]
        choices = np.array(list(itertools.product(range(A), repeat=X)))
        Vs = np.unique(np.round(Qs[:, np.arange(X)[None, :], choices].reshape(-1, X), 12), axis=0)
    return FiniteValueClass(tuple(layers))


# --------------------------------------------------------------------------
# the layerwise cover loop

@dataclass(frozen=True)
class MfConfig:
    epsilon: float = 0.125
    delta: float = 0.05
    c_w: float = 1.0
    c_opt: float = 1.0
    c_psdp: float = 8.0
    n_weight: int | None = None
    n_psdp: int | None = None
    cpush: float | None = None
    seed: int = 0


@dataclass(frozen=True, eq=False)
class MfReport:
    covers: tuple
    cells: tuple
    psi_push: dict
    cpush: float
    episodes: int
    budget: int
    n_weight: int
    n_psdp: int
    epsilon: float

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "cells": [dict(c) for c in self.cells],
            "psi_push": {str(k): v for k, v in self.psi_push.items()},
            "cpush": self.cpush,
            "episodes": self.episodes,
            "budget": self.budget,
            "n_weight": self.n_weight,
            "n_psdp": self.n_psdp,
            "cover_weights": [c.weights.tolist() for c in self.covers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self) -> tuple:
        header = ["h", "t", "hellinger_err", "psdp_gap", "episodes"]
        return header, [[c["h"], c["t"], c["hellinger_err"], c["psdp_gap"], c["episodes"]]
                        for c in self.cells]


def mf_explore(env: SamplingEnv, W: dict, Q, config: MfConfig = MfConfig()) -> MfReport:
    """Layer-by-layer cover construction from estimated weight rewards.

    ``W[h]`` is the weight class for layer h (h = 2..H). ``Q`` must provide
    ``fit(ℓ, x, a, R)`` and ``log_size``; it serves every PSDP call.
    """
    mdp = env.mdp
    H, A = mdp.horizon, mdp.num_actions
    eps, delta = config.epsilon, config.delta
    if not 0 < eps < 0.5 + 1e-12:
        raise ValueError("epsilon must lie in (0, 1/2]")
    T = iterations_for(eps)
    env.rng = np.random.default_rng(config.seed)
    cpush = config.cpush
    if cpush is None:
        cpush = max([compute_cpush(mdp, h)[0] for h in range(2, H + 1)] or [1.0])
    eps_w = config.c_w * math.sqrt(cpush / A) * math.sqrt(eps)
    eps_opt = config.c_opt * eps ** 2
    delta_each = delta / (2 * H * T)
    unif = Policy.uniform(mdp)
    covers = [PolicyMixture.point(unif)]
    cells = []
    n_w_max = n_p_max = 0
    start = env.episodes
    for h in range(2, H + 1):
        cls = W[h]
        prior = []
        n_w = config.n_weight or math.ceil(40 * (cls.log_size + math.log(1 / delta_each)) / eps_w ** 2)
        n_p = config.n_psdp or psdp_sample_size(H, A, Q.log_size, eps_opt, delta_each, config.c_psdp)
        n_w_max, n_p_max = max(n_w_max, n_w), max(n_p_max, n_p)
        for t in range(1, T + 1):
            e0 = env.episodes
            w_hat, _ = estimate_weight(env, h, t, covers[h - 2], prior, eps_w, delta_each, cls, n_w)
            reward = WeightReward(h - 1, w_hat.table)
            pi = psdp(env, h - 1, covers[:h - 1], reward, eps_opt, delta_each, Q, n=n_p)
            cells.append({
                "h": h, "t": t,
                "hellinger_err": weight_hellinger(mdp, covers[h - 2], h, w_hat.table,
                                                  strong_target(mdp, prior, h)),
                "psdp_gap": psdp_gap(mdp, h - 1, covers[:h - 1], reward, pi),
                "episodes": env.episodes - e0,
            })
            prior.append(pi)
        covers.append(PolicyMixture.uniform([pi.compose(unif, h) for pi in prior]))
    psi = {h: psi_push(mdp, None, covers[h - 1], CoverageParams(h, eps)) for h in range(2, H + 1)}
    budget = H * T * (2 * T * n_w_max + H * n_p_max)
    return MfReport(tuple(covers), tuple(cells), psi, cpush, env.episodes - start, budget,
                    n_w_max, n_p_max, eps)

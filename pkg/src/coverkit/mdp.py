"""Layered finite-horizon tabular MDPs, policies, occupancies and exact planning.

Layers are 1-indexed in every public signature (``h`` ranges over ``1..H``)
while the stored per-layer arrays are ordinary 0-indexed tuples, so layer
``h`` lives at position ``h - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CONSTRUCT_TOL = 1e-12
DERIVED_TOL = 1e-10
TIE_TOL = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Layered MDP with per-layer state spaces.

    ``transitions[h-1]`` has shape ``(X_h, A, X_{h+1})`` for ``h = 1..H-1``;
    ``rewards[h-1]``, when present, has shape ``(X_h, A)``.
    """

    init_dist: np.ndarray
    transitions: tuple
    num_actions: int
    states_per_layer: tuple
    rewards: tuple | None = None

    def __post_init__(self):
        init = _frozen(self.init_dist)
        trans = tuple(_frozen(P) for P in self.transitions)
        sizes = tuple(int(s) for s in self.states_per_layer)
        A = int(self.num_actions)
        object.__setattr__(self, "init_dist", init)
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "states_per_layer", sizes)
        object.__setattr__(self, "num_actions", A)
        H = len(sizes)
        if H < 1 or A < 1 or min(sizes) < 1:
            raise ValueError("horizon, layer sizes and action count must be positive")
        if len(trans) != H - 1:
            raise ValueError(f"expected {H - 1} transition tensors, got {len(trans)}")
        if init.shape != (sizes[0],):
            raise ValueError("init_dist does not match layer-1 size")
        if np.any(init < 0) or abs(init.sum() - 1.0) > CONSTRUCT_TOL:
            raise ValueError("init_dist must be a probability vector")
        for h, P in enumerate(trans):
            if P.shape != (sizes[h], A, sizes[h + 1]):
                raise ValueError(f"transition {h + 1} has shape {P.shape}")
            if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > CONSTRUCT_TOL:
                raise ValueError(f"transition {h + 1} rows must be distributions")
        if self.rewards is not None:
            rew = tuple(_frozen(r) for r in self.rewards)
            if len(rew) != H:
                raise ValueError("need one reward table per layer")
            for h, r in enumerate(rew):
                if r.shape != (sizes[h], A):
                    raise ValueError(f"reward {h + 1} has shape {r.shape}")
                if not np.all(np.isfinite(r)) or np.any(r < 0) or np.any(r > 1):
                    raise ValueError("rewards must lie in [0, 1]")
            object.__setattr__(self, "rewards", rew)
            if max_path_reward(self) > 1.0 + CONSTRUCT_TOL:
                raise ValueError("cumulative reward along some trajectory exceeds 1")

    @property
    def horizon(self) -> int:
        return len(self.states_per_layer)

    def layer_size(self, h: int) -> int:
        return self.states_per_layer[h - 1]

    def kernel(self, h: int) -> np.ndarray:
        """Transition tensor from layer ``h`` to ``h + 1``."""
        return self.transitions[h - 1]

    def with_rewards(self, rewards) -> "TabularMdp":
        return TabularMdp(self.init_dist, self.transitions, self.num_actions,
                          self.states_per_layer, rewards)

    def same_shape(self, other: "TabularMdp") -> bool:
        return (self.states_per_layer == other.states_per_layer
                and self.num_actions == other.num_actions)

    # serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "horizon": self.horizon,
            "states_per_layer": list(self.states_per_layer),
            "num_actions": self.num_actions,
            "init_dist": self.init_dist.tolist(),
            "transitions": [P.tolist() for P in self.transitions],
        }
        if self.rewards is not None:
            out["rewards"] = [r.tolist() for r in self.rewards]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        sizes = d["states_per_layer"]
        if int(d["horizon"]) != len(sizes):
            raise ValueError("horizon disagrees with states_per_layer")
        A = int(d["num_actions"])
        trans = [np.array(P, dtype=float).reshape(sizes[h], A, sizes[h + 1])
                 for h, P in enumerate(d["transitions"])]
        rewards = d.get("rewards")
        if rewards is not None:
            rewards = [np.array(r, dtype=float).reshape(sizes[h], A)
                       for h, r in enumerate(rewards)]
        return cls(np.array(d["init_dist"], dtype=float), tuple(trans), A,
                   tuple(sizes), None if rewards is None else tuple(rewards))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


def max_path_reward(mdp: TabularMdp) -> float:
    """Largest cumulative reward over trajectories with positive probability."""
    if mdp.rewards is None:
        return 0.0
    V = np.zeros(mdp.states_per_layer[-1])
    for h in range(mdp.horizon, 0, -1):
        r = mdp.rewards[h - 1]
        if h == mdp.horizon:
            Q = r
        else:
            P = mdp.kernel(h)
            cont = np.where(P > 0, V[None, None, :], -np.inf).max(axis=2)
            Q = r + cont
        V = Q.max(axis=1)
    return float(V[mdp.init_dist > 0].max())


@dataclass(frozen=True, eq=False)
class Policy:
    """Non-stationary Markov policy stored as per-layer tables ``probs[h-1][x, a]``."""

    probs: tuple

    def __post_init__(self):
        probs = tuple(_frozen(p) for p in self.probs)
        for p in probs:
            if p.ndim != 2 or np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > CONSTRUCT_TOL:
                raise ValueError("policy rows must be probability vectors")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_actions(cls, actions: Sequence[Sequence[int]], num_actions: int) -> "Policy":
        tabs = []
        for acts in actions:
            acts = np.asarray(acts, dtype=int)
            t = np.zeros((len(acts), num_actions))
            t[np.arange(len(acts)), acts] = 1.0
            tabs.append(t)
        return cls(tuple(tabs))

    @classmethod
    def uniform(cls, mdp: TabularMdp) -> "Policy":
        A = mdp.num_actions
        return cls(tuple(np.full((n, A), 1.0 / A) for n in mdp.states_per_layer))

    @property
    def horizon(self) -> int:
        return len(self.probs)

    @property
    def kind(self) -> str:
        return "deterministic" if self.is_deterministic else "randomized"

    @property
    def is_deterministic(self) -> bool:
        return all(np.all((p == 0) | (p == 1)) for p in self.probs)

    def actions(self) -> list:
        """Per-layer greedy actions (exact for deterministic policies)."""
        return [p.argmax(axis=1) for p in self.probs]

    def compose(self, other: "Policy", h: int) -> "Policy":
        """Follow ``self`` on layers ``< h`` and ``other`` from layer ``h`` on."""
        return Policy(self.probs[: h - 1] + other.probs[h - 1:])

    def check(self, mdp: TabularMdp) -> None:
        if self.horizon != mdp.horizon or any(
                p.shape != (n, mdp.num_actions)
                for p, n in zip(self.probs, mdp.states_per_layer)):
            raise ValueError("policy dimensions do not match the MDP")

    def to_dict(self) -> dict:
        if self.is_deterministic:
            return {"kind": "deterministic", "actions": [a.tolist() for a in self.actions()]}
        return {"kind": "randomized", "probs": [p.tolist() for p in self.probs]}

    @classmethod
    def from_dict(cls, d: dict, num_actions: int) -> "Policy":
        if d["kind"] == "deterministic":
            return cls.from_actions(d["actions"], num_actions)
        if d["kind"] == "randomized":
            return cls(tuple(np.array(p, dtype=float) for p in d["probs"]))
        raise ValueError(f"unknown policy kind {d['kind']!r}")

    def same_as(self, other: "Policy") -> bool:
        return len(self.probs) == len(other.probs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.probs, other.probs))


@dataclass(frozen=True, eq=False)
class PolicyMixture:
    atoms: tuple
    weights: np.ndarray

    def __post_init__(self):
        atoms = tuple(self.atoms)
        w = _frozen(self.weights)
        if not atoms or w.shape != (len(atoms),):
            raise ValueError("mixture needs one weight per atom and a nonempty support")
        if np.any(w < 0) or abs(w.sum() - 1.0) > CONSTRUCT_TOL:
            raise ValueError("mixture weights must sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, atoms) -> "PolicyMixture":
        atoms = tuple(atoms)
        return cls(atoms, np.full(len(atoms), 1.0 / len(atoms)))

    @classmethod
    def point(cls, policy: Policy) -> "PolicyMixture":
        return cls((policy,), np.ones(1))

    @classmethod
    def combine(cls, mixtures: Sequence["PolicyMixture"], weights=None) -> "PolicyMixture":
        """Flatten a mixture of mixtures, merging atoms that are the same object."""
        if weights is None:
            weights = np.full(len(mixtures), 1.0 / len(mixtures))
        atoms, w, index = [], [], {}
        for m, wm in zip(mixtures, weights):
            for a, wa in zip(m.atoms, m.weights):
                k = id(a)
                if k in index:
                    w[index[k]] += wm * wa
                else:
                    index[k] = len(atoms)
                    atoms.append(a)
                    w.append(wm * wa)
        w = np.array(w)
        return cls(tuple(atoms), w / w.sum())

    def compose(self, other: Policy, h: int) -> "PolicyMixture":
        return PolicyMixture(tuple(a.compose(other, h) for a in self.atoms), self.weights)

    def to_dict(self) -> dict:
        return {"atoms": [a.to_dict() for a in self.atoms], "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict, num_actions: int) -> "PolicyMixture":
        return cls(tuple(Policy.from_dict(a, num_actions) for a in d["atoms"]),
                   np.array(d["weights"], dtype=float))


@dataclass(frozen=True, eq=False)
class OccupancyTable:
    """Per-layer state-action occupancies; ``layers[h-1][x, a] = d_h(x, a)``."""

    layers: tuple

    def layer(self, h: int) -> np.ndarray:
        return self.layers[h - 1]

    def states(self, h: int) -> np.ndarray:
        return self.layers[h - 1].sum(axis=1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = None

    def __post_init__(self):
        if len(self.states) != len(self.actions) or (
                self.rewards is not None and len(self.rewards) != len(self.states)):
            raise ValueError("trajectory fields must share length H")


def _state_flow(mdp: TabularMdp, policy: Policy) -> list:
    policy.check(mdp)
    out = []
    s = mdp.init_dist
    for h in range(1, mdp.horizon + 1):
        d = s[:, None] * policy.probs[h - 1]
        out.append(d)
        if h < mdp.horizon:
            s = np.einsum("xa,xay->y", d, mdp.kernel(h))
    return out


def exact_occupancy(mdp: TabularMdp, policy: Policy) -> OccupancyTable:
    return OccupancyTable(tuple(_state_flow(mdp, policy)))


def mixture_occupancy(mdp: TabularMdp, p: PolicyMixture) -> OccupancyTable:
    layers = [np.zeros((n, mdp.num_actions)) for n in mdp.states_per_layer]
    for w, atom in zip(p.weights, p.atoms):
        for acc, d in zip(layers, _state_flow(mdp, atom)):
            acc += w * d
    return OccupancyTable(tuple(layers))


def occupancy_of(mdp: TabularMdp, p) -> OccupancyTable:
    """Occupancy of either a Policy or a PolicyMixture."""
    if isinstance(p, Policy):
        return exact_occupancy(mdp, p)
    return mixture_occupancy(mdp, p)


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Vectorized draw of one index per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_trajectory(mdp: TabularMdp, policy: Policy, rng_seed: int) -> Trajectory:
    rng = np.random.default_rng(rng_seed)
    states, actions = sample_batch(mdp, policy, 1, rng)
    rewards = None
    if mdp.rewards is not None:
        rewards = np.array([mdp.rewards[h][states[0, h], actions[0, h]]
                            for h in range(mdp.horizon)])
    return Trajectory(states[0], actions[0], rewards)


def sample_batch(mdp: TabularMdp, policy, n: int, rng: np.random.Generator,
                 layers: int | None = None) -> tuple:
    """Sample ``n`` episodes truncated after ``layers`` steps.

    ``policy`` is a Policy or a PolicyMixture (one atom drawn per episode).
    Returns integer arrays ``states`` and ``actions`` of shape ``(n, layers)``.
    """
    L = mdp.horizon if layers is None else layers
    if isinstance(policy, PolicyMixture):
        which = _categorical(rng, np.broadcast_to(policy.weights, (n, len(policy.atoms))))
        tabs = [np.stack([a.probs[h] for a in policy.atoms]) for h in range(L)]
    else:
        which = np.zeros(n, dtype=int)
        tabs = [policy.probs[h][None] for h in range(L)]
    states = np.zeros((n, L), dtype=int)
    actions = np.zeros((n, L), dtype=int)
    x = _categorical(rng, np.broadcast_to(mdp.init_dist, (n, mdp.states_per_layer[0])))
    for h in range(L):
        states[:, h] = x
        a = _categorical(rng, tabs[h][which, x])
        actions[:, h] = a
        if h + 1 < L:
            x = _categorical(rng, mdp.transitions[h][x, a])
    return states, actions


def _check_reward(mdp: TabularMdp, reward) -> list:
    if len(reward) != mdp.horizon:
        raise ValueError("need one reward table per layer")
    out = []
    for h, r in enumerate(reward):
        r = np.asarray(r, dtype=float)
        if r.shape != (mdp.states_per_layer[h], mdp.num_actions):
            raise ValueError(f"reward {h + 1} has shape {r.shape}")
        if np.any(np.isnan(r)):
            raise ValueError("reward contains NaN")
        out.append(r)
    return out


def _greedy(Q: np.ndarray) -> np.ndarray:
    """Argmax per row with ties (up to a relative tolerance) going to the lowest index."""
    best = Q.max(axis=1, keepdims=True)
    tol = TIE_TOL * np.maximum(1.0, np.abs(best))
    return np.argmax(Q >= best - tol, axis=1)


def dp_plan(mdp: TabularMdp, reward) -> tuple:
    """Exact backward induction. Returns (deterministic Policy, optimal value)."""
    reward = _check_reward(mdp, reward)
    acts = [None] * mdp.horizon
    V = np.zeros(mdp.states_per_layer[-1])
    for h in range(mdp.horizon, 0, -1):
        Q = reward[h - 1].copy()
        if h < mdp.horizon:
            Q = Q + mdp.kernel(h) @ V
        a = _greedy(Q)
        acts[h - 1] = a
        V = Q[np.arange(len(a)), a]
    return Policy.from_actions(acts, mdp.num_actions), float(mdp.init_dist @ V)


def q_values(mdp: TabularMdp, policy: Policy, reward) -> list:
    """Per-layer Q^π tables for the given reward tables."""
    reward = _check_reward(mdp, reward)
    Qs = [None] * mdp.horizon
    V = np.zeros(mdp.states_per_layer[-1])
    for h in range(mdp.horizon, 0, -1):
        Q = reward[h - 1].copy()
        if h < mdp.horizon:
            Q = Q + mdp.kernel(h) @ V
        Qs[h - 1] = Q
        V = (Q * policy.probs[h - 1]).sum(axis=1)
    return Qs


def policy_value(mdp: TabularMdp, p, reward) -> float:
    reward = _check_reward(mdp, reward)
    occ = occupancy_of(mdp, p)
    return float(sum((d * r).sum() for d, r in zip(occ.layers, reward)))


def layer_reward(mdp: TabularMdp, h: int, table: np.ndarray) -> list:
    """Reward tables that are zero everywhere except layer ``h``."""
    out = [np.zeros((n, mdp.num_actions)) for n in mdp.states_per_layer]
    out[h - 1] = np.asarray(table, dtype=float)
    return out


def max_reachability(mdp: TabularMdp, h: int) -> np.ndarray:
    """``m[x] = max_π P^π(x_h = x)``, computed by one backward pass per target state."""
    n = mdp.layer_size(h)
    # V[x_l, target] at layer l, vectorized over targets
    V = np.eye(n)
    for l in range(h - 1, 0, -1):
        V = (mdp.kernel(l) @ V).max(axis=1)
    return mdp.init_dist @ V

"""MountainCar on a 12×11 grid, count-based occupancies, tabular REINFORCE and cover rewards.

The continuous dynamics are those of the classic continuous-action task
restricted to actions {−1, 0, 1}. Occupancies are stationary averages
(1/H)·Σ_h d_h of bin-action visit counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import Policy, TabularMdp

POS_RANGE = (-1.2, 0.6)
VEL_RANGE = (-0.07, 0.07)
POWER = 0.0015
GOAL = 0.45
START = (-0.5, 0.0)
TRAIN_RESET = (-0.6, -0.4)
ACTIONS = np.array([-1.0, 0.0, 1.0])
POS_BINS, VEL_BINS = 12, 11
N_BINS = POS_BINS * VEL_BINS
FLOOR = 1e-6


def physics_step(pos, vel, force):
    """One step of the sinusoidal-valley dynamics (vectorized); the goal is absorbing."""
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    done = pos >= GOAL
    v = np.clip(vel + force * POWER - 0.0025 * np.cos(3 * pos), *VEL_RANGE)
    p = np.clip(pos + v, *POS_RANGE)
    v = np.where((p <= POS_RANGE[0]) & (v < 0), 0.0, v)
    return np.where(done, pos, p), np.where(done, 0.0, v)


def bin_of(pos, vel):
    """Row-major bin index: position bin · 11 + velocity bin."""
    pi = np.floor((np.asarray(pos) - POS_RANGE[0]) / (POS_RANGE[1] - POS_RANGE[0]) * POS_BINS)
    vi = np.floor((np.asarray(vel) - VEL_RANGE[0]) / (VEL_RANGE[1] - VEL_RANGE[0]) * VEL_BINS)
    pi = np.clip(pi, 0, POS_BINS - 1).astype(int)
    vi = np.clip(vi, 0, VEL_BINS - 1).astype(int)
    return pi * VEL_BINS + vi


def bin_centers() -> tuple:
    pw = (POS_RANGE[1] - POS_RANGE[0]) / POS_BINS
    vw = (VEL_RANGE[1] - VEL_RANGE[0]) / VEL_BINS
    b = np.arange(N_BINS)
    return POS_RANGE[0] + (b // VEL_BINS + 0.5) * pw, VEL_RANGE[0] + (b % VEL_BINS + 0.5) * vw


@dataclass(frozen=True, eq=False)
class DiscretizedEnv:
    mdp: TabularMdp
    start_bin: int
    table: np.ndarray  # table[b, a] = next bin from the center of b

    def step(self, b: int, a: int) -> int:
        return int(self.table[b, a])


def mountaincar_discretized(H: int = 200) -> DiscretizedEnv:
    """Deterministic bin-to-bin model from simulating one step at each bin center.

    This is a coarse approximation: small steps from a center rarely leave
    the bin, so many bins map to themselves.
    """
    cp, cv = bin_centers()
    table = np.stack([bin_of(*physics_step(cp, cv, f)) for f in ACTIONS], axis=1)
    P = np.zeros((N_BINS, len(ACTIONS), N_BINS))
    P[np.arange(N_BINS)[:, None], np.arange(len(ACTIONS))[None], table] = 1.0
    start = int(bin_of(*START))
    init = np.zeros(N_BINS)
    init[start] = 1.0
    mdp = TabularMdp(init, (P,) * (H - 1), len(ACTIONS), (N_BINS,) * H)
    return DiscretizedEnv(mdp, start, table)


def simulate(policy_table: np.ndarray, n: int, H: int, rng, start=None) -> tuple:
    """Roll out a stationary bin-softmax policy; returns (bins, actions), each (n, H).

    ``start=None`` uses the deterministic start; ``"train"`` draws positions
    uniformly from the training reset interval at zero velocity.
    """
    if start == "train":
        pos = rng.uniform(*TRAIN_RESET, size=n)
    else:
        pos = np.full(n, START[0])
    vel = np.zeros(n)
    cdf = np.cumsum(policy_table, axis=1)
    bins = np.zeros((n, H), dtype=int)
    acts = np.zeros((n, H), dtype=int)
    for h in range(H):
        b = bin_of(pos, vel)
        u = rng.random(n)
        a = np.minimum((u[:, None] > cdf[b]).sum(axis=1), len(ACTIONS) - 1)
        bins[:, h], acts[:, h] = b, a
        pos, vel = physics_step(pos, vel, ACTIONS[a])
    return bins, acts


def _simulate_one(policy_table: np.ndarray, H: int, rng, pos: float) -> tuple:
    """Scalar twin of :func:`simulate` for a single episode (no array overhead per step)."""
    cdf = np.cumsum(policy_table, axis=1).tolist()
    u = rng.random(H).tolist()
    lo, hi = POS_RANGE
    vlo, vhi = VEL_RANGE
    pw, vw = (hi - lo) / POS_BINS, (vhi - vlo) / VEL_BINS
    vel = 0.0
    bins, acts = [0] * H, [0] * H
    for h in range(H):
        pi = min(max(int(math.floor((pos - lo) / pw)), 0), POS_BINS - 1)
        vi = min(max(int(math.floor((vel - vlo) / vw)), 0), VEL_BINS - 1)
        b = pi * VEL_BINS + vi
        row = cdf[b]
        a = 0
        while a < len(ACTIONS) - 1 and u[h] > row[a]:
            a += 1
        bins[h], acts[h] = b, a
        if pos < GOAL:
            vel = min(max(vel + ACTIONS[a] * POWER - 0.0025 * math.cos(3 * pos), vlo), vhi)
            pos = min(max(pos + vel, lo), hi)
            if pos <= lo and vel < 0:
                vel = 0.0
        else:
            vel = 0.0
    return np.array(bins), np.array(acts)


# --------------------------------------------------------------------------
# occupancies and rewards

@dataclass(frozen=True, eq=False)
class CountOccupancy:
    table: np.ndarray  # (bins, actions), sums to 1

    @classmethod
    def from_rollouts(cls, bins: np.ndarray, acts: np.ndarray, num_bins: int = N_BINS,
                      num_actions: int = len(ACTIONS)) -> "CountOccupancy":
        """(1/H)·Σ_h (1/N)·Σ_n 1{x_h^n ∈ b, a_h^n = a}."""
        c = np.bincount((bins * num_actions + acts).ravel(), minlength=num_bins * num_actions)
        return cls((c / c.sum()).reshape(num_bins, num_actions))

    @classmethod
    def average(cls, occs) -> "CountOccupancy":
        return cls(np.mean([o.table for o in occs], axis=0))

    def visited_states(self) -> int:
        return int((self.table.sum(axis=1) > 0).sum())

    def entropy(self) -> float:
        d = self.table[self.table > 0]
        return float(-(d * np.log(d)).sum())


def _renormalize(r: np.ndarray) -> np.ndarray:
    """Affine map onto [0, 1]; a constant table maps to zeros."""
    lo, hi = r.min(), r.max()
    if hi - lo <= 1e-15 * max(1.0, abs(hi)):
        return np.zeros_like(r)
    return (r - lo) / (hi - lo)


def cover_reward_raw(counts, mu: np.ndarray, cinf: float, eps: float) -> np.ndarray:
    """μ/(Σ_i d̂_i + ε·C∞·μ) before renormalization."""
    mu = np.asarray(mu, dtype=float)
    acc = sum((c.table for c in counts), np.zeros_like(mu))
    return mu / (acc + eps * cinf * mu)


def cover_reward_epsreg(counts, mu: np.ndarray, cinf: float, eps: float) -> np.ndarray:
    """ε-regularized cover reward, linearly renormalized to [0, 1]."""
    return _renormalize(cover_reward_raw(counts, mu, cinf, eps))


def kl_uniform(X: np.ndarray) -> float:
    """D_KL(Unif ‖ X) with X floored at 1e-6."""
    U = 1.0 / X.size
    return float((U * (np.log(U) - np.log(np.maximum(X, FLOOR)))).sum())


def kl_uniform_gradient(X: np.ndarray) -> np.ndarray:
    """∂/∂X D_KL(Unif ‖ X) = −U/X (floored)."""
    return -(1.0 / X.size) / np.maximum(X, FLOOR)


def maxent_reward(counts: CountOccupancy) -> np.ndarray:
    """The descent direction −∂KL/∂X = U/X at the counts, renormalized to [0, 1]."""
    return _renormalize(-kl_uniform_gradient(counts.table))


# --------------------------------------------------------------------------
# REINFORCE with tabular softmax policies

class TabularTask:
    """Episodes of a layered TabularMdp; one softmax table per layer."""

    stationary = False

    def __init__(self, mdp: TabularMdp):
        self.mdp = mdp
        self.horizon = mdp.horizon
        self.num_actions = mdp.num_actions
        self.table_shapes = [(n, mdp.num_actions) for n in mdp.states_per_layer]

    def rollout(self, tables, reward, n_steps, rng) -> list:
        from .mdp import _categorical

        m = max(1, n_steps // self.horizon)
        x = _categorical(rng, np.broadcast_to(self.mdp.init_dist, (m, len(self.mdp.init_dist))))
        S, A, R = [], [], []
        for h in range(self.horizon):
            pr = _softmax(tables[h][x])
            a = _categorical(rng, pr)
            S.append(x)
            A.append(a)
            R.append(np.asarray(reward[h])[x, a])
            if h + 1 < self.horizon:
                x = _categorical(rng, self.mdp.kernel(h + 1)[x, a])
        # one episode per row; layer index doubles as the table index
        return [(np.arange(self.horizon), np.stack(S, 1)[i], np.stack(A, 1)[i],
                 np.stack(R, 1)[i]) for i in range(m)]


class MountainCarTask:
    """One continuous MountainCar episode of ``n_steps`` from the training reset per update."""

    stationary = True
    num_actions = len(ACTIONS)
    table_shapes = [(N_BINS, len(ACTIONS))]

    def __init__(self, reset: str | None = "train"):
        self.reset = reset

    def rollout(self, tables, reward, n_steps, rng) -> list:
        pos = rng.uniform(*TRAIN_RESET) if self.reset == "train" else START[0]
        b, a = _simulate_one(_softmax(tables[0]), n_steps, rng, pos)
        return [(np.zeros(n_steps, dtype=int), b, a, np.asarray(reward)[b, a])]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def ascend(self, params, grads):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            p += self.lr * mh / (np.sqrt(vh) + self.eps)


def _train(task, reward, steps, rollout_len, lr, seed, gamma, sigma):
    rng = np.random.default_rng(seed)
    tables = [np.zeros(s) for s in task.table_shapes]
    opt = _Adam(task.table_shapes, lr)
    for _ in range(steps):
        eps = task.rollout(tables, reward, rollout_len, rng)
        grads = [np.zeros(s) for s in task.table_shapes]
        returns = []
        for _, _, _, R in eps:
            G = np.zeros(len(R))
            acc = 0.0
            for k in range(len(R) - 1, -1, -1):
                acc = R[k] + gamma * acc
                G[k] = acc
            returns.append(G)
        # standardize over the whole update batch (one episode for MountainCar)
        flat = np.concatenate(returns)
        mean, scale = flat.mean(), flat.std() + sigma
        for (layer, S, A, _), G in zip(eps, returns):
            G = (G - mean) / scale
            for li in np.unique(layer):
                sel = layer == li
                s, a, g = S[sel], A[sel], G[sel]
                step = -_softmax(tables[li][s]) * g[:, None]
                step[np.arange(len(s)), a] += g
                np.add.at(grads[li], s, step)
        opt.ascend(tables, grads)
        if not all(np.all(np.isfinite(t)) for t in tables):
            return None
    return tables


def reinforce_tabular(task, reward, steps: int = 1000, rollout_len: int = 400, lr: float = 1e-3,
                      seed=0, gamma: float = 0.99, sigma: float = 0.05) -> Policy:
    """Vanilla policy gradient on tabular softmax logits with Adam.

    Returns are discounted, then standardized over the update batch as
    (G − mean)/(std + σ). ``task`` is a :class:`TabularTask` (per-layer
    logits) or :class:`MountainCarTask` (one stationary table). A non-finite
    update restarts training once at half the learning rate.
    """
    if isinstance(task, TabularMdp):
        task = TabularTask(task)
    tables = _train(task, reward, steps, rollout_len, lr, seed, gamma, sigma)
    if tables is None:
        tables = _train(task, reward, steps, rollout_len, lr / 2, seed, gamma, sigma)
        if tables is None:
            raise FloatingPointError("REINFORCE diverged twice")
    return Policy(tuple(_softmax(t) for t in tables))


# --------------------------------------------------------------------------
# the exploration comparison

@dataclass(frozen=True)
class ExperimentConfig:
    epochs: int = 10
    horizon: int = 60
    n_rollouts: int = 20
    reinforce_steps: int = 100
    rollout_len: int = 200
    lr: float = 0.05
    epsilon: float = 1e-4
    seed: int = 0


def _l1_over_atoms(occs, mix: np.ndarray, eps: float) -> float:
    vals = []
    for o in occs:
        d = o.table
        den = mix + eps * d
        vals.append(float(np.where(d > 0, d * d / np.where(den > 0, den, 1.0), 0.0).sum()))
    return max(vals)


def run_experiment(method: str, config: ExperimentConfig = ExperimentConfig()) -> list:
    """Grow a cover for ``method`` ∈ {l1cov, maxent, uniform}; one metrics row per epoch.

    Rows hold (epoch, unique_states, entropy, objective): the visited-bin
    count and (bin, action) entropy of the mixture occupancy, and the
    count-based L1-Coverage of the mixture against its own atoms.
    """
    if method not in ("l1cov", "maxent", "uniform"):
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng([config.seed, 0])
    shape = (N_BINS, len(ACTIONS))
    mu = np.full(shape, 1.0 / (N_BINS * len(ACTIONS)))
    cinf = float(N_BINS * len(ACTIONS))
    occs, rows = [], []
    task = MountainCarTask("train")
    for epoch in range(1, config.epochs + 1):
        if method == "uniform":
            table = np.full(shape, 1.0 / len(ACTIONS))
        else:
            if method == "l1cov":
                r = cover_reward_epsreg(occs, mu, cinf, config.epsilon)
            else:
                mix = CountOccupancy.average(occs) if occs else CountOccupancy(mu.copy())
                r = maxent_reward(mix)
            pol = reinforce_tabular(task, r, config.reinforce_steps, config.rollout_len,
                                    config.lr, seed=[config.seed, epoch])
            table = pol.probs[0]
        bins, acts = simulate(table, config.n_rollouts, config.horizon, rng)
        occs.append(CountOccupancy.from_rollouts(bins, acts))
        mix = CountOccupancy.average(occs)
        rows.append((epoch, mix.visited_states(), mix.entropy(),
                     _l1_over_atoms(occs, mix.table, config.epsilon)))
    return rows

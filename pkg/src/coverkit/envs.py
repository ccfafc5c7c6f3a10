"""Instance generators and explicit constructions.

Random layered MDPs, block MDPs with a known decoder, and the two truncated
counterexamples separating L1-Coverage from its admissible L∞ and Lq
analogues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coverage import PolicyClass
from .mdp import Policy, PolicyMixture, TabularMdp


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _sparse_rows(rng, shape, n_next, sparsity, alpha=1.0):
    k = max(1, int(round((1.0 - sparsity) * n_next)))
    rows = np.zeros(shape + (n_next,))
    for idx in np.ndindex(*shape):
        support = rng.choice(n_next, size=k, replace=False)
        rows[idx + (support,)] = rng.dirichlet(np.full(k, alpha))
    return rows


def gen_random_mdp(H: int, layer_sizes, num_actions: int, sparsity: float = 0.0,
                   seed=0, rewards: bool = False, alpha: float = 1.0) -> TabularMdp:
    """Dirichlet rows; ``sparsity`` is the fraction of next states zeroed per row.

    ``sparsity = 1`` leaves one next state per row (deterministic dynamics).
    Rewards, when requested, are uniform on ``[0, 1/H]`` so every path sums to
    at most 1.
    """
    sizes = [layer_sizes] * H if np.isscalar(layer_sizes) else list(layer_sizes)
    if len(sizes) != H or H < 1 or num_actions < 1 or min(sizes) < 1:
        raise ValueError("degenerate sizes")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    rng = _rng(seed)
    init = rng.dirichlet(np.full(sizes[0], alpha))
    trans = tuple(_sparse_rows(rng, (sizes[h], num_actions), sizes[h + 1], sparsity, alpha)
                  for h in range(H - 1))
    rew = None
    if rewards:
        rew = tuple(rng.uniform(0, 1.0 / H, size=(n, num_actions)) for n in sizes)
    return TabularMdp(init, trans, num_actions, tuple(sizes), rew)


def random_policy(mdp: TabularMdp, seed=0, deterministic: bool = False) -> Policy:
    rng = _rng(seed)
    A = mdp.num_actions
    if deterministic:
        return Policy.from_actions([rng.integers(A, size=n) for n in mdp.states_per_layer], A)
    return Policy(tuple(rng.dirichlet(np.ones(A), size=n) for n in mdp.states_per_layer))


def random_mixture(atoms, seed=0) -> PolicyMixture:
    rng = _rng(seed)
    return PolicyMixture(tuple(atoms), rng.dirichlet(np.ones(len(atoms))))


def random_class(mdp: TabularMdp, k: int, seed=0, deterministic_frac: float = 0.5) -> PolicyClass:
    rng = _rng(seed)
    return PolicyClass(tuple(random_policy(mdp, rng, deterministic=rng.random() < deterministic_frac)
                             for _ in range(k)))


# --------------------------------------------------------------------------
# block MDPs

@dataclass(frozen=True, eq=False)
class BlockMdp:
    mdp: TabularMdp
    latent: TabularMdp
    decoder: np.ndarray  # observation index -> latent index, same map at every layer
    emission: np.ndarray  # emission[s, x] = q(x | s)

    def lift_policy(self, latent_policy: Policy) -> Policy:
        return Policy(tuple(p[self.decoder] for p in latent_policy.probs))

    def collapse(self, table: np.ndarray) -> np.ndarray:
        """Sum an observation-indexed table (first axis) over decoder blocks."""
        out = np.zeros((self.latent.states_per_layer[0],) + table.shape[1:])
        np.add.at(out, self.decoder, table)
        return out


def gen_blockmdp(num_latent: int, obs_per_latent: int, num_actions: int, H: int,
                 seed=0, sparsity: float = 0.0) -> BlockMdp:
    rng = _rng(seed)
    S, k = num_latent, obs_per_latent
    latent = gen_random_mdp(H, S, num_actions, sparsity, rng)
    decoder = np.repeat(np.arange(S), k)
    emission = np.zeros((S, S * k))
    for s in range(S):
        emission[s, s * k:(s + 1) * k] = rng.dirichlet(np.ones(k))
    init = latent.init_dist @ emission
    trans = tuple(np.einsum("sat,tx->sax", T, emission)[decoder] for T in latent.transitions)
    mdp = TabularMdp(init, trans, num_actions, (S * k,) * H)
    return BlockMdp(mdp, latent, decoder, emission)


# --------------------------------------------------------------------------
# counterexamples

def _single_state_mdp(probs_per_action: int) -> TabularMdp:
    return TabularMdp(np.ones(1), (), probs_per_action, (1,))


def _spike_class(c: np.ndarray) -> PolicyClass:
    """π_i puts mass c_i on action i and the rest on the shared action 0."""
    N = len(c)
    pols = []
    for i in range(1, N + 1):
        row = np.zeros((1, N + 1))
        row[0, 0] = 1.0 - c[i - 1]
        row[0, i] = c[i - 1]
        pols.append(Policy((row,)))
    return PolicyClass(tuple(pols))


def counterexample_linf(N: int) -> tuple:
    """One state, actions {⊥, 1..N}; π_i plays i with probability 1/(2i²)."""
    if N < 2:
        raise ValueError("N must be >= 2")
    c = 1.0 / (2.0 * np.arange(1, N + 1) ** 2)
    return _single_state_mdp(N + 1), _spike_class(c)


def linf_counterexample_measure(N: int) -> tuple:
    """The explicit μ (1/2 on ⊥, 3/(π² i²) on i) and its missing tail mass."""
    i = np.arange(1, N + 1)
    mu = np.concatenate([[0.5], 3.0 / (math.pi ** 2 * i ** 2)])
    return mu, 1.0 - mu.sum()


def counterexample_lq(q: float, delta: float, N: int) -> tuple:
    """Spike construction with c_i = 1/(2·i^{1+δq}).

    Its C∞ is at most 1 + ζ(1+δq)/2 ≤ 3/2 + 1/(2δq), while every mixture has
    Lq-Coverage of order ε^{−(1−1/q−δ)} (see :func:`lq_counterexample_lower_bound`).
    """
    if q <= 1 or delta <= 0 or N < 2:
        raise ValueError("need q > 1, delta > 0, N >= 2")
    c = 0.5 / np.arange(1, N + 1) ** (1.0 + delta * q)
    return _single_state_mdp(N + 1), _spike_class(c)


def spike_masses(policies: PolicyClass) -> np.ndarray:
    return np.array([pi.probs[0][0, i + 1] for i, pi in enumerate(policies)])


def lq_counterexample_lower_bound(policies: PolicyClass, q: float, eps: float) -> tuple:
    """Exact inf over mixtures of max_i c_i^{1/q}/(p_i + ε), a lower bound on inf_p Lq-Coverage.

    π_i's spike term alone contributes c_i·(1/(p_i+ε))^q. Minimizing the max over
    the simplex is water-filling: p_i = (a_i/λ − ε)_+ with Σ p_i = 1. Returns
    ``(λ, p)``.
    """
    a = spike_masses(policies) ** (1.0 / q)

    def mass(lam):
        return np.maximum(a / lam - eps, 0.0).sum()

    lo, hi = 1e-12, a.max() / eps
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    lam = hi
    p = np.maximum(a / lam - eps, 0.0)
    return lam, p / p.sum()


def gen_model_class(true_mdp: TabularMdp, n_models: int, seed=0, mix: float = 0.5,
                    true_index: int | None = None):
    """A finite class holding ``true_mdp`` plus perturbed alternatives.

    Each alternative blends every transition row (and the initial
    distribution) with a fresh Dirichlet draw: ``(1 − mix)·P + mix·Q``.
    Rewards are shared. ``true_index`` defaults to a seeded random slot.
    """
    from .explore_mb import FiniteModelClass

    rng = _rng(seed)
    if true_index is None:
        true_index = int(rng.integers(n_models))
    models = []
    for k in range(n_models):
        if k == true_index:
            models.append(true_mdp)
            continue
        init = (1 - mix) * true_mdp.init_dist + mix * rng.dirichlet(np.ones(len(true_mdp.init_dist)))
        trans = tuple((1 - mix) * P + mix * rng.dirichlet(np.ones(P.shape[2]), size=P.shape[:2])
                      for P in true_mdp.transitions)
        models.append(TabularMdp(init / init.sum(), trans, true_mdp.num_actions,
                                 true_mdp.states_per_layer, true_mdp.rewards))
    return FiniteModelClass(tuple(models), true_index)

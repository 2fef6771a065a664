"""Builtin tabular environments."""

from __future__ import annotations

import numpy as np

from .mdp import TabularMDP
from .rng import make_rng

LEFT, RIGHT = 0, 1


def chain_walk(
    num_states: int = 5, success: float = 0.9, horizon: int = 5, start: int = 0
) -> TabularMDP:
    """Chain with actions left/right; a move succeeds w.p. ``success`` and
    otherwise leaves the agent in place. Reward 1 is earned in the last state.
    """
    if num_states < 2:
        raise ValueError("chain needs at least two states")
    S = num_states
    p = np.zeros((S, 2, S))
    for s in range(S):
        for a, step in ((LEFT, -1), (RIGHT, 1)):
            nxt = min(max(s + step, 0), S - 1)
            p[s, a, nxt] += success
            p[s, a, s] += 1.0 - success
    r = np.zeros((S, 2))
    r[S - 1, :] = 1.0
    mu = np.zeros(S)
    mu[start] = 1.0
    return TabularMDP(p, r, mu, horizon, reward_grid=1.0, name=f"chainwalk{S}")


def random_mdp(
    num_states: int,
    num_actions: int,
    horizon: int,
    seed: int,
    reward_levels: int = 3,
    branching: int = 3,
    reward_grid: float = 1.0,
) -> TabularMDP:
    """Random MDP with ``branching`` successors per (s, a) and integer rewards."""
    rng = make_rng("random_mdp", seed)
    S, A = num_states, num_actions
    branching = min(branching, S)
    p = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            succ = rng.choice(S, size=branching, replace=False)
            p[s, a, succ] = rng.dirichlet(np.ones(branching))
    p /= p.sum(axis=2, keepdims=True)
    r = rng.integers(0, reward_levels, size=(S, A)) * reward_grid
    mu = rng.dirichlet(np.ones(S))
    return TabularMDP(p, r, mu, horizon, reward_grid=reward_grid, name=f"random{S}x{A}s{seed}")


def deterministic_chain(num_states: int = 4, horizon: int = 4) -> TabularMDP:
    """Deterministic chain walk (every move succeeds)."""
    mdp = chain_walk(num_states, success=1.0, horizon=horizon)
    return TabularMDP(
        mdp.transition, mdp.reward, mdp.initial_dist, horizon, name=f"detchain{num_states}"
    )


BUILTIN_ENVS = {
    "chainwalk": chain_walk,
    "random": random_mdp,
    "detchain": deterministic_chain,
}


def make_env(name: str, **params) -> TabularMDP:
    try:
        builder = BUILTIN_ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(BUILTIN_ENVS)}") from None
    return builder(**params)

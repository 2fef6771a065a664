"""Finite-horizon tabular MDPs, time-indexed policies and return distributions.

Timesteps are 0-based throughout the package: a horizon-``H`` episode visits
``t = 0, ..., H - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MDP_FORMAT_VERSION = 1
_PROB_TOL = 1e-12


def fnv1a_64(data: bytes) -> str:
    """64-bit FNV-1a hash rendered as 16 lowercase hex chars."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite-horizon MDP with rewards on a grid of spacing ``reward_grid``.

    ``transition[s, a, s']`` is ``p(s'|s,a)``; ``reward[s, a]`` is deterministic.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    horizon: int
    reward_grid: float = 1.0
    name: str = "mdp"

    def __post_init__(self):
        p = _frozen(self.transition)
        r = _frozen(self.reward)
        mu = _frozen(self.initial_dist)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", mu)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        S, A, _ = p.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {r.shape}")
        if mu.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {mu.shape}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.horizon}")
        object.__setattr__(self, "horizon", int(self.horizon))
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(p.sum(axis=2) - 1.0)) > _PROB_TOL:
            raise ValueError("every transition row must sum to 1")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > _PROB_TOL:
            raise ValueError("initial_dist must be a probability vector")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not self.reward_grid > 0:
            raise ValueError("reward_grid must be positive")
        units = r / self.reward_grid
        if np.max(np.abs(units - np.round(units)), initial=0.0) > 1e-9:
            raise ValueError("every reward must be an integer multiple of reward_grid")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def reward_units(self) -> np.ndarray:
        """Rewards as integer multiples of ``reward_grid``."""
        return np.round(self.reward / self.reward_grid).astype(np.int64)

    def same_shape(self, other: "TabularMDP") -> bool:
        return (
            self.transition.shape == other.transition.shape
            and self.horizon == other.horizon
        )

    def to_dict(self) -> dict:
        return {
            "version": MDP_FORMAT_VERSION,
            "name": self.name,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "reward_grid": float(self.reward_grid),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    def to_json(self) -> str:
        # json emits shortest round-trip reprs (17 significant digits at most).
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMDP":
        version = doc.get("version")
        if version != MDP_FORMAT_VERSION:
            raise ValueError(f"unsupported MDP document version {version!r}")
        mdp = cls(
            transition=doc["transition"],
            reward=doc["reward"],
            initial_dist=doc["initial_dist"],
            horizon=doc["horizon"],
            reward_grid=doc["reward_grid"],
            name=doc.get("name", "mdp"),
        )
        if mdp.num_states != doc["num_states"] or mdp.num_actions != doc["num_actions"]:
            raise ValueError("declared num_states/num_actions disagree with arrays")
        return mdp

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        return fnv1a_64(self.to_json().encode("utf-8"))

    def __eq__(self, other):
        if not isinstance(other, TabularMDP):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and self.reward_grid == other.reward_grid
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.initial_dist, other.initial_dist)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class StationaryPolicy:
    """Time-indexed action probabilities ``probs[t, s, a]``.

    The name follows the usual convention for Markov policies; finite-horizon
    optima are time dependent, so every timestep carries its own table.
    """

    probs: np.ndarray
    policy_id: str = "policy"

    def __post_init__(self):
        probs = _frozen(self.probs)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 3:
            raise ValueError(f"probs must have shape (H, S, A), got {probs.shape}")
        if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=2) - 1.0)) > _PROB_TOL:
            raise ValueError("every policy row must be a probability vector")

    @property
    def horizon(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def uniform(cls, mdp: TabularMDP, policy_id: str = "uniform") -> "StationaryPolicy":
        H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
        return cls(np.full((H, S, A), 1.0 / A), policy_id)

    @classmethod
    def deterministic(cls, actions, num_actions: int, policy_id: str = "deterministic"):
        """Build from an integer table ``actions[t, s]``."""
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros(actions.shape + (num_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs, policy_id)

    @classmethod
    def epsilon_greedy(cls, greedy: "StationaryPolicy", epsilon: float) -> "StationaryPolicy":
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        A = greedy.probs.shape[2]
        probs = (1.0 - epsilon) * greedy.probs + epsilon / A
        return cls(probs, f"eps{epsilon:g}-{greedy.policy_id}")

    def check_compatible(self, mdp: TabularMDP) -> None:
        expected = (mdp.horizon, mdp.num_states, mdp.num_actions)
        if self.probs.shape != expected:
            raise ValueError(f"policy shape {self.probs.shape} does not match MDP {expected}")


@dataclass(frozen=True)
class ReturnDistribution:
    """Exact law of the return-to-go at one ``(t, s, a)``."""

    support: np.ndarray
    mass: np.ndarray
    conditioning: tuple = field(default=())

    def __post_init__(self):
        support = _frozen(self.support)
        mass = _frozen(self.mass)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", mass)
        if support.shape != mass.shape or support.ndim != 1:
            raise ValueError("support and mass must be matching vectors")
        if support.size > 1 and np.any(np.diff(support) <= 0):
            raise ValueError("support must be strictly increasing")
        if abs(mass.sum() - 1.0) > 1e-10:
            raise ValueError("masses must sum to 1")

    def mean(self) -> float:
        return float(self.support @ self.mass)

    def std(self) -> float:
        m = self.mean()
        return float(np.sqrt(max(((self.support - m) ** 2) @ self.mass, 0.0)))

    def cdf(self, g: float) -> float:
        return float(self.mass[self.support <= g + 1e-12].sum())

    def prob(self, g: float) -> float:
        hit = np.isclose(self.support, g, rtol=0.0, atol=1e-9)
        return float(self.mass[hit].sum())

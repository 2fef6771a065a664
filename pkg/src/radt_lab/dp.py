"""Exact dynamic programming on finite-horizon tabular MDPs.

Return-to-go laws are carried on the integer grid ``(lo + k) * reward_grid``
so that every conditioning event ``g = f`` is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import ReturnDistribution, StationaryPolicy, TabularMDP


def q_values(mdp: TabularMDP, policy: StationaryPolicy | None = None) -> np.ndarray:
    """Backward induction for ``Q_t(s, a)``.

    With ``policy=None`` this is the optimal Q-function.
    """
    if policy is not None:
        policy.check_compatible(mdp)
    H = mdp.horizon
    q = np.zeros((H, mdp.num_states, mdp.num_actions))
    v_next = np.zeros(mdp.num_states)
    for t in range(H - 1, -1, -1):
        q[t] = mdp.reward + mdp.transition @ v_next
        if policy is None:
            v_next = q[t].max(axis=1)
        else:
            v_next = (policy.probs[t] * q[t]).sum(axis=1)
    return q


def value_iteration(mdp: TabularMDP) -> tuple[StationaryPolicy, float]:
    """Optimal deterministic time-indexed policy and ``J(pi*)``.

    Ties go to the lowest action index.
    """
    q = q_values(mdp)
    greedy = np.argmax(q, axis=2)  # argmax returns the first maximiser
    policy = StationaryPolicy.deterministic(greedy, mdp.num_actions, policy_id="optimal")
    v1 = q[0].max(axis=1)
    return policy, float(mdp.initial_dist @ v1)


def policy_value(mdp: TabularMDP, policy: StationaryPolicy) -> float:
    policy.check_compatible(mdp)
    q = q_values(mdp, policy)
    v1 = (policy.probs[0] * q[0]).sum(axis=1)
    return float(mdp.initial_dist @ v1)


def state_occupancy(mdp: TabularMDP, policy: StationaryPolicy) -> np.ndarray:
    """Forward DP: ``d[t, s] = P(s_t = s)``."""
    policy.check_compatible(mdp)
    d = np.zeros((mdp.horizon, mdp.num_states))
    d[0] = mdp.initial_dist
    for t in range(mdp.horizon - 1):
        sa = d[t][:, None] * policy.probs[t]
        d[t + 1] = np.einsum("sa,sap->p", sa, mdp.transition)
    return d


def return_grid_bounds(mdp: TabularMDP) -> tuple[int, int]:
    """Integer range that contains every partial sum of at most H rewards."""
    units = mdp.reward_units
    lo = mdp.horizon * min(0, int(units.min()))
    hi = mdp.horizon * max(0, int(units.max()))
    return lo, hi


def _shift(mass: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros_like(mass)
    if k >= 0:
        out[..., k:] = mass[..., : mass.shape[-1] - k]
    else:
        out[..., :k] = mass[..., -k:]
    return out


@dataclass(frozen=True, eq=False)
class ReturnTable:
    """Conditional return-to-go laws ``mass[t, s, a, k] = P(g_t = (lo+k)*delta | s_t=s, a_t=a)``."""

    mass: np.ndarray
    lo: int
    delta: float

    @property
    def support(self) -> np.ndarray:
        return (self.lo + np.arange(self.mass.shape[-1])) * self.delta

    def grid_index(self, g) -> np.ndarray:
        """Grid index of each return value; raises if a value is off the grid."""
        g = np.asarray(g, dtype=float)
        units = g / self.delta
        k = np.round(units).astype(np.int64)
        if np.any(np.abs(units - k) > 1e-6):
            raise ValueError("return value is not on the reward grid")
        idx = k - self.lo
        if np.any(idx < 0) or np.any(idx >= self.mass.shape[-1]):
            raise ValueError("return value outside the attainable range")
        return idx

    def distribution(self, t: int, s: int, a: int) -> ReturnDistribution:
        row = self.mass[t, s, a]
        keep = row > 0
        return ReturnDistribution(self.support[keep], row[keep] / row.sum(), (t, s, a))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard deviation for every ``(t, s, a)``."""
        g = self.support
        mean = self.mass @ g
        var = self.mass @ (g**2) - mean**2
        return mean, np.sqrt(np.maximum(var, 0.0))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass, axis=-1)


def return_table(mdp: TabularMDP, policy: StationaryPolicy) -> ReturnTable:
    """Exact return-to-go laws for all ``(t, s, a)`` by backward convolution."""
    policy.check_compatible(mdp)
    lo, hi = return_grid_bounds(mdp)
    G = hi - lo + 1
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    units = mdp.reward_units
    mass = np.zeros((H, S, A, G))
    for t in range(H - 1, -1, -1):
        if t == H - 1:
            future = np.zeros((S, A, G))
            future[..., -lo] = 1.0
        else:
            v_next = np.einsum("sa,sag->sg", policy.probs[t + 1], mass[t + 1])
            future = np.einsum("sap,pg->sag", mdp.transition, v_next)
        for k in np.unique(units):
            hit = units == k
            mass[t][hit] = _shift(future[hit], int(k))
    return ReturnTable(mass, lo, mdp.reward_grid)


def return_to_go_distribution(
    mdp: TabularMDP, policy: StationaryPolicy, t: int, s: int, a: int
) -> ReturnDistribution:
    if not 0 <= t < mdp.horizon:
        raise ValueError(f"timestep {t} outside [0, {mdp.horizon})")
    return return_table(mdp, policy).distribution(t, s, a)


@dataclass(frozen=True, eq=False)
class JointOccupancy:
    """``mass[t, s, a, k] = P(s_t = s, a_t = a, g_t = (lo+k)*delta)``."""

    mass: np.ndarray
    lo: int
    delta: float

    @property
    def support(self) -> np.ndarray:
        return (self.lo + np.arange(self.mass.shape[-1])) * self.delta

    def state_action(self) -> np.ndarray:
        return self.mass.sum(axis=-1)


def joint_occupancy(mdp: TabularMDP, policy: StationaryPolicy) -> JointOccupancy:
    table = return_table(mdp, policy)
    d = state_occupancy(mdp, policy)
    weights = d[:, :, None] * policy.probs
    return JointOccupancy(weights[..., None] * table.mass, table.lo, table.delta)

"""Source-domain construction by perturbing a target MDP's dynamics."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .mdp import TabularMDP
from .rng import make_rng


class ShiftKind(str, enum.Enum):
    TRANSITION_PERTURB = "transition_perturb"
    ACTION_NOISE = "action_noise"
    ACTION_RESTRICT = "action_restrict"
    STATE_MERGE = "state_merge"


@dataclass(frozen=True)
class ShiftSpec:
    """A dynamics shift of a given kind and magnitude in [0, 1].

    ``action`` selects the restricted action for ACTION_RESTRICT (default: the
    last action). ``state``/``neighbor`` select the merged state and where its
    incoming mass is redirected for STATE_MERGE (default: last state, and the
    state just below it).
    """

    kind: ShiftKind
    magnitude: float
    seed: int = 0
    action: int | None = None
    state: int | None = None
    neighbor: int | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ShiftKind(self.kind))
        except ValueError:
            raise ValueError(f"unknown shift kind {self.kind!r}") from None
        m = float(self.magnitude)
        if not (0.0 <= m <= 1.0):
            raise ValueError(f"shift magnitude must lie in [0, 1], got {self.magnitude}")
        object.__setattr__(self, "magnitude", m)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "magnitude": self.magnitude, "seed": self.seed}
        for key in ("action", "state", "neighbor"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


def _perturb(p: np.ndarray, m: float, seed: int) -> np.ndarray:
    rng = make_rng("shift", "transition_perturb", seed)
    S, A, _ = p.shape
    q = rng.dirichlet(np.ones(S), size=(S, A))
    return (1.0 - m) * p + m * q


def _action_noise(p: np.ndarray, m: float) -> np.ndarray:
    mixed = p.mean(axis=1, keepdims=True)
    return (1.0 - m) * p + m * mixed


def _action_restrict(p: np.ndarray, m: float, action: int) -> np.ndarray:
    S = p.shape[0]
    out = p.copy()
    out[:, action, :] = (1.0 - m) * p[:, action, :] + m * np.eye(S)
    return out


def _state_merge(p: np.ndarray, m: float, state: int, neighbor: int) -> np.ndarray:
    out = p.copy()
    moved = m * p[:, :, state]
    out[:, :, state] -= moved
    out[:, :, neighbor] += moved
    return out


def apply_shift(target: TabularMDP, spec: ShiftSpec) -> TabularMDP:
    """Source MDP that differs from ``target`` only in its transition tensor."""
    p = target.transition
    S, A = target.num_states, target.num_actions
    m = spec.magnitude
    if spec.kind is ShiftKind.TRANSITION_PERTURB:
        new = _perturb(p, m, spec.seed)
    elif spec.kind is ShiftKind.ACTION_NOISE:
        new = _action_noise(p, m)
    elif spec.kind is ShiftKind.ACTION_RESTRICT:
        action = A - 1 if spec.action is None else spec.action
        if not 0 <= action < A:
            raise ValueError(f"restricted action {action} out of range")
        new = _action_restrict(p, m, action)
    elif spec.kind is ShiftKind.STATE_MERGE:
        state = S - 1 if spec.state is None else spec.state
        default_neighbor = state - 1 if state > 0 else min(1, S - 1)
        neighbor = default_neighbor if spec.neighbor is None else spec.neighbor
        if not (0 <= state < S and 0 <= neighbor < S):
            raise ValueError("merge state/neighbor out of range")
        new = _state_merge(p, m, state, neighbor)
    else:  # pragma: no cover - ShiftKind is closed
        raise ValueError(f"unknown shift kind {spec.kind!r}")
    if m == 0.0:
        new = p
    else:
        # clean float residue so rows sum to 1 within the MDP tolerance
        new = np.clip(new, 0.0, 1.0)
        new = new / new.sum(axis=2, keepdims=True)
    return TabularMDP(
        new,
        target.reward,
        target.initial_dist,
        target.horizon,
        reward_grid=target.reward_grid,
        name=f"{target.name}-{spec.kind.value}{m:g}",
    )


@dataclass(frozen=True)
class DynamicsGap:
    """Per-(s, a) diagnostics between two transition tensors.

    ``log_ratio`` is the largest ``|log p_T - log p_S|`` over jointly supported
    successors, and ``inf`` when the rows share no support.
    """

    tv: np.ndarray
    log_ratio: np.ndarray
    support_mismatch: np.ndarray

    def max_tv(self) -> float:
        return float(self.tv.max())


def dynamics_gap(source: TabularMDP, target: TabularMDP) -> DynamicsGap:
    if source.transition.shape != target.transition.shape:
        raise ValueError("source and target MDPs have different shapes")
    ps, pt = source.transition, target.transition
    tv = 0.5 * np.abs(ps - pt).sum(axis=2)
    both = (ps > 0) & (pt > 0)
    with np.errstate(divide="ignore"):
        lr = np.abs(np.log(np.where(both, pt, 1.0)) - np.log(np.where(both, ps, 1.0)))
    log_ratio = np.where(both.any(axis=2), lr.max(axis=2), np.inf)
    mismatch = ((ps > 0) != (pt > 0)).any(axis=2)
    return DynamicsGap(tv, log_ratio, mismatch)


def occupancy_ratio(d_target: np.ndarray, d_source: np.ndarray) -> float:
    """Empirical proxy for the domain occupancy overlap constant: max d_T / d_S."""
    d_target = np.asarray(d_target, float)
    d_source = np.asarray(d_source, float)
    if np.any((d_target > 0) & (d_source <= 0)):
        return float("inf")
    live = d_target > 0
    if not live.any():
        return 0.0
    return float((d_target[live] / d_source[live]).max())

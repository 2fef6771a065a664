"""Offline datasets: collection, return-to-go bookkeeping, slicing and storage.

A :class:`Dataset` stores trajectories column-wise as numpy arrays. Each
trajectory has exactly ``H`` steps plus the successor of its last step
(``states[:, H]``), which DARA-style corrections need.
"""

from __future__ import annotations

import enum
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import StationaryPolicy, TabularMDP
from .rng import make_rng

DATASET_FORMAT = "radt-lab-dataset"
DATASET_VERSION = 1
COLLECT_CHUNK = 1024


class DomainTag(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


_TAG_CODE = {DomainTag.SOURCE: 0, DomainTag.TARGET: 1}
_CODE_TAG = {v: k for k, v in _TAG_CODE.items()}


def returns_to_go(rewards: np.ndarray) -> np.ndarray:
    """``g_t = r_t + g_{t+1}`` along the last axis."""
    return np.cumsum(rewards[..., ::-1], axis=-1)[..., ::-1]


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtg: np.ndarray
    final_state: int
    domain_tag: DomainTag

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rtg[0])


@dataclass(eq=False)
class Dataset:
    states: np.ndarray  # (N, H + 1)
    actions: np.ndarray  # (N, H)
    rewards: np.ndarray  # (N, H)
    rtg: np.ndarray  # (N, H)
    domain: np.ndarray  # (N,) 0 = source, 1 = target
    num_states: int
    num_actions: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.rtg = np.asarray(self.rtg, dtype=float)
        self.domain = np.asarray(self.domain, dtype=np.int8)
        n, h = self.actions.shape
        if self.states.shape != (n, h + 1):
            raise ValueError("states must have shape (N, H + 1)")
        if self.rewards.shape != (n, h) or self.rtg.shape != (n, h):
            raise ValueError("rewards and rtg must have shape (N, H)")
        if self.domain.shape != (n,):
            raise ValueError("domain must have shape (N,)")

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def mdp_fingerprint(self) -> str | None:
        return self.meta.get("mdp_fingerprint")

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            self.states[i, :-1].copy(),
            self.actions[i].copy(),
            self.rewards[i].copy(),
            self.rtg[i].copy(),
            int(self.states[i, -1]),
            _CODE_TAG[int(self.domain[i])],
        )

    def __iter__(self):
        return (self.trajectory(i) for i in range(len(self)))

    def tag_counts(self) -> dict[str, int]:
        return {
            DomainTag.TARGET.value: int((self.domain == 1).sum()),
            DomainTag.SOURCE.value: int((self.domain == 0).sum()),
        }

    def with_rtg(self, rtg: np.ndarray, **meta) -> "Dataset":
        return Dataset(
            self.states.copy(),
            self.actions.copy(),
            self.rewards.copy(),
            np.array(rtg, dtype=float),
            self.domain.copy(),
            self.num_states,
            self.num_actions,
            {**self.meta, **meta},
        )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.states[index],
            self.actions[index],
            self.rewards[index],
            self.rtg[index],
            self.domain[index],
            self.num_states,
            self.num_actions,
            dict(self.meta),
        )

    def select_domain(self, tag: DomainTag | str) -> "Dataset":
        code = _TAG_CODE[DomainTag(tag)]
        return self.subset(np.flatnonzero(self.domain == code))

    def same_arrays(self, other: "Dataset") -> bool:
        return (
            self.num_states == other.num_states
            and self.num_actions == other.num_actions
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.rtg, other.rtg)
            and np.array_equal(self.domain, other.domain)
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.same_arrays(other) and self.meta == other.meta

    __hash__ = None

    @classmethod
    def empty(cls, num_states: int, num_actions: int, horizon: int, **meta) -> "Dataset":
        return cls(
            np.zeros((0, horizon + 1), np.int64),
            np.zeros((0, horizon), np.int64),
            np.zeros((0, horizon)),
            np.zeros((0, horizon)),
            np.zeros(0, np.int8),
            num_states,
            num_actions,
            meta,
        )


def _sampling_cdf(probs: np.ndarray) -> np.ndarray:
    """Cumulative table for inverse-CDF sampling that never selects a zero-mass tail."""
    cum = np.cumsum(probs, axis=-1)
    n = probs.shape[-1]
    idx = np.arange(n)
    last = n - 1 - np.argmax((probs > 0)[..., ::-1], axis=-1)
    cum = np.where(idx >= last[..., None], 1.0, cum)
    return cum


def _draw(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (cum_rows <= u[:, None]).sum(axis=1)


def _collect_chunk(mdp, policy, start, count, seed, chunk):
    H = mdp.horizon
    rng = make_rng("collect", seed, chunk)
    u = rng.random((count, 2 * H + 1))
    init_cdf = _sampling_cdf(mdp.initial_dist)
    act_cdf = _sampling_cdf(policy.probs)
    next_cdf = _sampling_cdf(mdp.transition)
    states = np.zeros((count, H + 1), np.int64)
    actions = np.zeros((count, H), np.int64)
    states[:, 0] = np.searchsorted(init_cdf, u[:, 0], side="right")
    for t in range(H):
        s = states[:, t]
        a = _draw(act_cdf[t, s], u[:, 1 + 2 * t])
        actions[:, t] = a
        states[:, t + 1] = _draw(next_cdf[s, a], u[:, 2 + 2 * t])
    return start, states, actions


def collect(
    mdp: TabularMDP,
    policy: StationaryPolicy,
    n: int,
    seed: int,
    domain: DomainTag | str = DomainTag.TARGET,
    jobs: int = 1,
) -> Dataset:
    """Sample ``n`` trajectories under ``policy``.

    Trajectories are generated in fixed chunks of ``COLLECT_CHUNK``; chunk ``c``
    draws from the stream ``("collect", seed, c)`` row by row, so trajectory
    ``i`` depends only on ``(seed, i)`` and ``jobs`` never changes the output.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"need at least one trajectory, got n={n}")
    policy.check_compatible(mdp)
    domain = DomainTag(domain)
    H = mdp.horizon
    n = int(n)
    tasks = [
        (start, min(COLLECT_CHUNK, n - start), c)
        for c, start in enumerate(range(0, n, COLLECT_CHUNK))
    ]
    states = np.zeros((n, H + 1), np.int64)
    actions = np.zeros((n, H), np.int64)

    def run(task):
        start, count, chunk = task
        return _collect_chunk(mdp, policy, start, count, seed, chunk)

    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(task) for task in tasks]
    for start, st, ac in results:
        states[start : start + len(st)] = st
        actions[start : start + len(ac)] = ac
    rewards = mdp.reward[states[:, :-1], actions]
    meta = {
        "mdp_fingerprint": mdp.fingerprint(),
        "behavior_policy_id": policy.policy_id,
        "seed": int(seed),
        "reward_grid": float(mdp.reward_grid),
    }
    return Dataset(
        states,
        actions,
        rewards,
        returns_to_go(rewards),
        np.full(n, _TAG_CODE[domain], np.int8),
        mdp.num_states,
        mdp.num_actions,
        meta,
    )


@dataclass(frozen=True)
class SlicedWindow:
    start: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtg: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def consistent_return_slices(
    traj: Trajectory, k: int, include_partial: bool = False
) -> list[SlicedWindow]:
    """Length-``k`` windows whose returns-to-go are rebuilt backwards.

    Each window keeps the trajectory's (possibly augmented) return-to-go at its
    last index and recomputes earlier entries as ``R_i = r_i + R_{i+1}``. Windows
    start at ``0 .. H-k``. With ``include_partial`` the shorter trailing
    windows that start after ``H-k`` are appended as well.
    """
    H = traj.horizon
    if not 1 <= k <= H:
        raise ValueError(f"window length {k} outside [1, {H}]")
    last_start = H - 1 if include_partial else H - k
    windows = []
    for start in range(last_start + 1):
        stop = min(start + k, H)
        rewards = traj.rewards[start:stop]
        rtg = np.empty(stop - start)
        rtg[-1] = traj.rtg[stop - 1]
        for i in range(len(rtg) - 2, -1, -1):
            rtg[i] = rewards[i] + rtg[i + 1]
        windows.append(
            SlicedWindow(start, traj.states[start:stop], traj.actions[start:stop], rewards, rtg)
        )
    return windows


def mix(target_ds: Dataset, source_ds: Dataset, seed: int | None = None) -> Dataset:
    """Target trajectories first, then source; optionally a seeded shuffle."""
    if (target_ds.num_states, target_ds.num_actions) != (
        source_ds.num_states,
        source_ds.num_actions,
    ) or target_ds.horizon != source_ds.horizon:
        raise ValueError("datasets disagree on state/action shapes or horizon")
    if len(source_ds) == 0 and seed is None:
        return target_ds
    cat = lambda name: np.concatenate([getattr(target_ds, name), getattr(source_ds, name)])
    meta = dict(target_ds.meta)
    meta["mix"] = {
        "target_fingerprint": target_ds.mdp_fingerprint,
        "source_fingerprint": source_ds.mdp_fingerprint,
        "counts": [len(target_ds), len(source_ds)],
        "shuffle_seed": seed,
    }
    mixed = Dataset(
        cat("states"),
        cat("actions"),
        cat("rewards"),
        cat("rtg"),
        cat("domain"),
        target_ds.num_states,
        target_ds.num_actions,
        meta,
    )
    if seed is None:
        return mixed
    perm = make_rng("mix", seed).permutation(len(mixed))
    shuffled = mixed.subset(perm)
    shuffled.meta = meta
    return shuffled


def _header(ds: Dataset) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "num_states": ds.num_states,
        "num_actions": ds.num_actions,
        "horizon": ds.horizon,
        "count": len(ds),
        "meta": ds.meta,
    }


def save(ds: Dataset, path) -> Path:
    """Write JSON lines: a header, then one trajectory per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(ds), sort_keys=True) + "\n")
        for i in range(len(ds)):
            steps = [
                [int(s), int(a), float(r)]
                for s, a, r in zip(ds.states[i, :-1], ds.actions[i], ds.rewards[i])
            ]
            line = {
                "steps": steps,
                "final_state": int(ds.states[i, -1]),
                "rtg": [float(g) for g in ds.rtg[i]],
                "domain_tag": _CODE_TAG[int(ds.domain[i])].value,
            }
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return path


def load(path, expected_fingerprint: str | None = None) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed header: {exc}") from None
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: not a {DATASET_FORMAT} v{DATASET_VERSION} file")
    H = int(header["horizon"])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != header["count"]:
        raise ValueError(f"{path}: header declares {header['count']} trajectories, found {len(body)}")
    n = len(body)
    states = np.zeros((n, H + 1), np.int64)
    actions = np.zeros((n, H), np.int64)
    rewards = np.zeros((n, H))
    rtg = np.zeros((n, H))
    domain = np.zeros(n, np.int8)
    for i, ln in enumerate(body):
        try:
            rec = json.loads(ln)
            steps = rec["steps"]
            if len(steps) != H or len(rec["rtg"]) != H:
                raise ValueError("trajectory length differs from horizon")
            states[i, :H] = [st[0] for st in steps]
            actions[i] = [st[1] for st in steps]
            rewards[i] = [st[2] for st in steps]
            states[i, H] = rec["final_state"]
            rtg[i] = rec["rtg"]
            domain[i] = _TAG_CODE[DomainTag(rec["domain_tag"])]
        except (KeyError, ValueError, TypeError, IndexError) as exc:
            raise ValueError(f"{path}: malformed trajectory on line {i + 2}: {exc}") from None
    ds = Dataset(
        states, actions, rewards, rtg, domain, header["num_states"], header["num_actions"], header["meta"]
    )
    if expected_fingerprint is not None and ds.mdp_fingerprint != expected_fingerprint:
        warnings.warn(
            f"{path}: dataset fingerprint {ds.mdp_fingerprint} does not match {expected_fingerprint}",
            stacklevel=2,
        )
    return ds

"""Return-conditioned policies ``pi(a | s, g)``.

Three policy families share one interface, ``action_probs(t, s, g)``, which
returns a ``(n, A)`` probability array and a boolean mask telling whether the
queried conditioning value was represented in training:

* :class:`TabularRcslPolicy` counts ``(s, bin(g), a)`` co-occurrences (the
  maximum-likelihood solution of the conditional NLL);
* :class:`NeuralRcslPolicy` is a one-hidden-layer tanh network trained by
  mini-batch Adam on the same loss;
* :class:`OracleRcslPolicy` is the infinite-data policy read off an exact
  joint occupancy of ``(t, s, a, g)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, DomainTag, Trajectory, _sampling_cdf, _draw
from .dp import JointOccupancy, joint_occupancy
from .mdp import StationaryPolicy, TabularMDP
from .rng import make_rng


class CoverageError(ValueError):
    """The conditioning event ``g = f`` has zero probability under the behavior policy."""


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


def _as_dataset(ds) -> Dataset:
    return ds.dataset if hasattr(ds, "dataset") and not isinstance(ds, Dataset) else ds


# --------------------------------------------------------------------------- binning


@dataclass(frozen=True)
class ReturnBinner:
    """Maps a return to the integer index of the nearest bin centre ``origin + k * bin_width``."""

    bin_width: float = 1.0
    origin: float = 0.0

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")

    def index(self, g) -> np.ndarray:
        return np.floor((np.asarray(g, float) - self.origin) / self.bin_width + 0.5).astype(np.int64)

    def center(self, k) -> np.ndarray:
        return self.origin + np.asarray(k) * self.bin_width


# --------------------------------------------------------------------------- tabular


@dataclass(frozen=True, eq=False)
class TabularRcslPolicy:
    """Smoothed co-occurrence table ``counts[t, s, k, a]``.

    When ``time_indexed`` is false the table has a single time slice that
    serves every step. Bin ``k`` of the table holds returns with binner index
    ``k + bin_offset``.
    """

    counts: np.ndarray
    binner: ReturnBinner
    bin_offset: int
    smoothing: float = 0.0
    time_indexed: bool = True
    policy_id: str = "tabular-rcsl"

    def __post_init__(self):
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")
        if self.counts.ndim != 4:
            raise ValueError("counts must have shape (T, S, bins, A)")

    @property
    def num_actions(self) -> int:
        return self.counts.shape[-1]

    def _lookup(self, t, s, g):
        t = np.asarray(t)
        s = np.asarray(s)
        k = self.binner.index(g) - self.bin_offset
        inside = (k >= 0) & (k < self.counts.shape[2])
        kk = np.clip(k, 0, self.counts.shape[2] - 1)
        tt = t if self.time_indexed else np.zeros_like(t)
        row = self.counts[tt, s, kk]
        row = np.where(inside[..., None], row, 0.0)
        return row, inside

    def action_probs(self, t, s, g) -> tuple[np.ndarray, np.ndarray]:
        row, _ = self._lookup(t, s, g)
        total = row.sum(axis=-1, keepdims=True)
        A = self.num_actions
        seen = total[..., 0] > 0
        denom = total + self.smoothing * A
        with np.errstate(invalid="ignore", divide="ignore"):
            probs = (row + self.smoothing) / denom
        probs = np.where(denom > 0, probs, 1.0 / A)
        return probs, seen

    def nll(self, ds) -> float:
        """Mean negative log-likelihood of the dataset's actions."""
        ds = _as_dataset(ds)
        N, H = ds.actions.shape
        t = np.broadcast_to(np.arange(H), (N, H)).ravel()
        probs, _ = self.action_probs(t, ds.states[:, :-1].ravel(), ds.rtg.ravel())
        p = probs[np.arange(probs.shape[0]), ds.actions.ravel()]
        with np.errstate(divide="ignore"):
            return float(-np.log(p).mean())

    def to_dict(self) -> dict:
        return {
            "kind": "tabular",
            "policy_id": self.policy_id,
            "counts": self.counts.astype(int).tolist(),
            "bin_width": self.binner.bin_width,
            "origin": self.binner.origin,
            "bin_offset": self.bin_offset,
            "smoothing": self.smoothing,
            "time_indexed": self.time_indexed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularRcslPolicy":
        return cls(
            np.asarray(doc["counts"], float),
            ReturnBinner(doc["bin_width"], doc["origin"]),
            int(doc["bin_offset"]),
            float(doc["smoothing"]),
            bool(doc["time_indexed"]),
            doc.get("policy_id", "tabular-rcsl"),
        )


def fit_tabular(
    ds,
    binner: ReturnBinner | None = None,
    smoothing: float = 0.0,
    time_indexed: bool = True,
    policy_id: str = "tabular-rcsl",
) -> TabularRcslPolicy:
    """Count ``(t, s_t, bin(g_t), a_t)`` over every step of every trajectory."""
    ds = _as_dataset(ds)
    if len(ds) == 0:
        raise ValueError("cannot fit a policy to an empty dataset")
    binner = binner or ReturnBinner(float(ds.meta.get("reward_grid", 1.0)))
    N, H = ds.actions.shape
    S, A = ds.num_states, ds.num_actions
    k = binner.index(ds.rtg)
    offset = int(k.min())
    B = int(k.max()) - offset + 1
    T = H if time_indexed else 1
    t = np.broadcast_to(np.arange(H), (N, H)) if time_indexed else np.zeros((N, H), np.int64)
    key = ((t * S + ds.states[:, :-1]) * B + (k - offset)) * A + ds.actions
    counts = np.bincount(key.ravel(), minlength=T * S * B * A).reshape(T, S, B, A).astype(float)
    return TabularRcslPolicy(counts, binner, offset, float(smoothing), time_indexed, policy_id)


# --------------------------------------------------------------------------- neural


@dataclass(frozen=True)
class NeuralConfig:
    width: int = 64
    lr: float = 3e-4
    epochs: int = 100
    batch: int = 64
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.lr <= 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError(f"invalid neural learner config {self}")


def _unpack(params: np.ndarray, d_in: int, width: int, A: int):
    i = 0
    w1 = params[i : i + d_in * width].reshape(d_in, width)
    i += d_in * width
    b1 = params[i : i + width]
    i += width
    w2 = params[i : i + width * A].reshape(width, A)
    i += width * A
    b2 = params[i : i + A]
    return w1, b1, w2, b2


def num_parameters(d_in: int, width: int, A: int) -> int:
    return d_in * width + width + width * A + A


def network_forward(params, x, width: int, A: int):
    w1, b1, w2, b2 = _unpack(params, x.shape[1], width, A)
    h = np.tanh(x @ w1 + b1)
    z = h @ w2 + b2
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return h, logp


def nll_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray, width: int, A: int):
    """Mean NLL of labels ``y`` and its gradient with respect to the flat parameters."""
    n, d_in = x.shape
    w1, b1, w2, b2 = _unpack(params, d_in, width, A)
    h, logp = network_forward(params, x, width, A)
    loss = float(-logp[np.arange(n), y].mean())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gw2 = h.T @ dz
    gb2 = dz.sum(axis=0)
    dh = (dz @ w2.T) * (1.0 - h**2)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return loss, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


@dataclass(frozen=True, eq=False)
class NeuralRcslPolicy:
    params: np.ndarray
    num_states: int
    num_actions: int
    g_shift: float
    g_scale: float
    config: NeuralConfig
    history: tuple = field(default=())
    policy_id: str = "neural-rcsl"

    def __post_init__(self):
        if not np.all(np.isfinite(self.params)):
            raise ValueError("network parameters must be finite")

    def features(self, s, g) -> np.ndarray:
        s = np.asarray(s).ravel()
        g = np.asarray(g, float).ravel()
        x = np.zeros((s.size, self.num_states + 1))
        x[np.arange(s.size), s] = 1.0
        x[:, -1] = (g - self.g_shift) / self.g_scale
        return x

    def action_probs(self, t, s, g) -> tuple[np.ndarray, np.ndarray]:
        shape = np.broadcast(np.asarray(s), np.asarray(g, float)).shape
        s_b, g_b = np.broadcast_arrays(np.asarray(s), np.asarray(g, float))
        _, logp = network_forward(self.params, self.features(s_b, g_b), self.config.width, self.num_actions)
        return np.exp(logp).reshape(shape + (self.num_actions,)), np.ones(shape, bool)

    def nll(self, ds) -> float:
        ds = _as_dataset(ds)
        x = self.features(ds.states[:, :-1], ds.rtg)
        _, logp = network_forward(self.params, x, self.config.width, self.num_actions)
        return float(-logp[np.arange(x.shape[0]), ds.actions.ravel()].mean())

    def to_dict(self) -> dict:
        return {
            "kind": "neural",
            "policy_id": self.policy_id,
            "params": self.params.tolist(),
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "g_shift": self.g_shift,
            "g_scale": self.g_scale,
            "config": asdict(self.config),
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NeuralRcslPolicy":
        return cls(
            np.asarray(doc["params"], float),
            int(doc["num_states"]),
            int(doc["num_actions"]),
            float(doc["g_shift"]),
            float(doc["g_scale"]),
            NeuralConfig(**doc["config"]),
            tuple(doc.get("history", ())),
            doc.get("policy_id", "neural-rcsl"),
        )


def fit_neural(ds, cfg: NeuralConfig | None = None, policy_id: str = "neural-rcsl") -> NeuralRcslPolicy:
    """Adam on the conditional NLL with seeded shuffling.

    Raises :class:`DivergenceError` if the loss stops being finite.
    """
    cfg = cfg or NeuralConfig()
    ds = _as_dataset(ds)
    if len(ds) == 0:
        raise ValueError("cannot fit a policy to an empty dataset")
    S, A = ds.num_states, ds.num_actions
    g = ds.rtg.ravel()
    shift = float(g.mean())
    scale = float(g.std()) or 1.0
    template = NeuralRcslPolicy(np.zeros(1), S, A, shift, scale, cfg)
    x = template.features(ds.states[:, :-1], ds.rtg)
    y = ds.actions.ravel()
    d_in = S + 1
    rng = make_rng("neural", cfg.seed)
    params = np.concatenate(
        [
            rng.normal(0.0, cfg.init_scale / np.sqrt(d_in), d_in * cfg.width),
            np.zeros(cfg.width),
            rng.normal(0.0, cfg.init_scale / np.sqrt(cfg.width), cfg.width * A),
            np.zeros(A),
        ]
    )
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = x.shape[0]
    history = [nll_and_grad(params, x, y, cfg.width, A)[0]]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            batch = order[start : start + cfg.batch]
            _, grad = nll_and_grad(params, x[batch], y[batch], cfg.width, A)
            step += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            params = params - cfg.lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        loss = nll_and_grad(params, x, y, cfg.width, A)[0]
        if not (np.isfinite(loss) and np.all(np.isfinite(params))):
            raise DivergenceError(f"loss became non-finite in epoch {epoch}", epoch - 1)
        history.append(loss)
    return NeuralRcslPolicy(params, S, A, shift, scale, cfg, tuple(history), policy_id)


# --------------------------------------------------------------------------- oracle


def rcsl_policy_table(joint: JointOccupancy) -> tuple[np.ndarray, np.ndarray]:
    """Infinite-data RCSL policy ``P(a | t, s, g)`` from a joint law over ``(t, s, a, g)``.

    Returns ``(probs[t, s, k, a], covered[t, s, k])``; uncovered rows are uniform.
    """
    mass = np.moveaxis(joint.mass, 2, 3)  # (H, S, G, A)
    total = mass.sum(axis=-1, keepdims=True)
    covered = total[..., 0] > 0
    A = mass.shape[-1]
    probs = np.where(total > 0, mass / np.where(total > 0, total, 1.0), 1.0 / A)
    return probs, covered


@dataclass(frozen=True, eq=False)
class OracleRcslPolicy:
    probs: np.ndarray  # (H, S, G, A)
    covered: np.ndarray  # (H, S, G)
    lo: int
    delta: float
    policy_id: str = "oracle-rcsl"

    @classmethod
    def from_joint(cls, joint: JointOccupancy, policy_id: str = "oracle-rcsl") -> "OracleRcslPolicy":
        probs, covered = rcsl_policy_table(joint)
        return cls(probs, covered, joint.lo, joint.delta, policy_id)

    @classmethod
    def from_mdp(cls, mdp: TabularMDP, beta: StationaryPolicy) -> "OracleRcslPolicy":
        return cls.from_joint(joint_occupancy(mdp, beta), f"oracle-rcsl:{beta.policy_id}")

    @property
    def num_actions(self) -> int:
        return self.probs.shape[-1]

    def action_probs(self, t, s, g) -> tuple[np.ndarray, np.ndarray]:
        g = np.asarray(g, float)
        units = g / self.delta
        k = np.round(units).astype(np.int64) - self.lo
        on_grid = np.abs(units - np.round(units)) <= 1e-9
        inside = on_grid & (k >= 0) & (k < self.probs.shape[2])
        kk = np.clip(k, 0, self.probs.shape[2] - 1)
        t, s = np.asarray(t), np.asarray(s)
        seen = inside & self.covered[t, s, kk]
        probs = np.where(seen[..., None], self.probs[t, s, kk], 1.0 / self.num_actions)
        return probs, seen


def oracle_rcsl_policy(mdp: TabularMDP, beta: StationaryPolicy, f_value: float, t: int, s: int) -> np.ndarray:
    """Exact ``P_beta(a | s_t = s, g_t = f_value)`` in ``mdp``."""
    joint = joint_occupancy(mdp, beta)
    units = f_value / joint.delta
    k = int(round(units)) - joint.lo
    if abs(units - round(units)) > 1e-9 or not 0 <= k < joint.mass.shape[-1]:
        raise CoverageError(f"return coverage fails: f={f_value} is not an attainable grid return")
    col = joint.mass[t, s, :, k]
    total = col.sum()
    if total <= 0:
        raise CoverageError(f"return coverage fails: P(g={f_value} | t={t}, s={s}) = 0 under the behavior policy")
    return col / total


# --------------------------------------------------------------------------- acting


class ConditioningMode(str, enum.Enum):
    RTG_DECREMENT = "rtg_decrement"


@dataclass(frozen=True)
class ConditioningFunction:
    """Return target ``f``; after each step ``f <- f - r``."""

    initial_target: float
    mode: ConditioningMode = ConditioningMode.RTG_DECREMENT

    def update(self, f, reward):
        return f - reward


@dataclass
class RolloutBatch:
    states: np.ndarray  # (n, H + 1)
    actions: np.ndarray  # (n, H)
    rewards: np.ndarray  # (n, H)
    targets: np.ndarray  # (n, H) conditioning value used at each step
    fallbacks: int

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def act(policy, t: int, s: int, g: float, seed: int) -> int:
    probs, _ = policy.action_probs(np.array([t]), np.array([s]), np.array([g], float))
    u = make_rng("act", seed).random(1)
    return int(_draw(_sampling_cdf(probs), u)[0])


def rollouts(policy, mdp: TabularMDP, f: ConditioningFunction | float, n: int, seed: int) -> RolloutBatch:
    """``n`` episodes of ``pi(. | s, f)`` in ``mdp`` with ``f`` decremented by each reward.

    All randomness for the batch comes from the stream ``("rollout", seed)``.
    """
    if n < 1:
        raise ValueError("need at least one rollout")
    cond = f if isinstance(f, ConditioningFunction) else ConditioningFunction(float(f))
    H = mdp.horizon
    u = make_rng("rollout", seed).random((n, 2 * H + 1))
    next_cdf = _sampling_cdf(mdp.transition)
    states = np.zeros((n, H + 1), np.int64)
    actions = np.zeros((n, H), np.int64)
    rewards = np.zeros((n, H))
    targets = np.zeros((n, H))
    states[:, 0] = np.searchsorted(_sampling_cdf(mdp.initial_dist), u[:, 0], side="right")
    g = np.full(n, float(cond.initial_target))
    fallbacks = 0
    for t in range(H):
        s = states[:, t]
        targets[:, t] = g
        probs, seen = policy.action_probs(np.full(n, t), s, g)
        fallbacks += int((~seen).sum())
        a = _draw(_sampling_cdf(probs), u[:, 1 + 2 * t])
        actions[:, t] = a
        rewards[:, t] = mdp.reward[s, a]
        states[:, t + 1] = _draw(next_cdf[s, a], u[:, 2 + 2 * t])
        g = cond.update(g, rewards[:, t])
    return RolloutBatch(states, actions, rewards, targets, fallbacks)


def rollout(policy, mdp: TabularMDP, f: ConditioningFunction | float, seed: int) -> Trajectory:
    batch = rollouts(policy, mdp, f, 1, seed)
    rewards = batch.rewards[0]
    rtg = np.cumsum(rewards[::-1])[::-1]
    return Trajectory(batch.states[0, :-1], batch.actions[0], rewards, rtg, int(batch.states[0, -1]), DomainTag.TARGET)


# --------------------------------------------------------------------------- persistence


def policy_to_json(policy) -> str:
    return json.dumps(policy.to_dict(), sort_keys=True)


def policy_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "tabular":
        return TabularRcslPolicy.from_dict(doc)
    if kind == "neural":
        return NeuralRcslPolicy.from_dict(doc)
    raise ValueError(f"unknown policy kind {kind!r}")


def save_policy(path, policy, **meta) -> None:
    doc = {**policy.to_dict(), "meta": meta}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_policy(path):
    with open(path, encoding="utf-8") as fh:
        return policy_from_dict(json.load(fh))

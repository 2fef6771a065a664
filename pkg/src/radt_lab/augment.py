"""Return-to-go transformations applied to source-domain data.

Every transform leaves states, actions and rewards untouched and only
rewrites ``rtg``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .classifiers import DeltaRTable
from .data import Dataset, returns_to_go
from .dp import JointOccupancy, ReturnTable, q_values, return_table, state_occupancy
from .mdp import StationaryPolicy, TabularMDP, fnv1a_64
from .rng import make_rng

PSI_CHUNK = 1024


class PsiKind(str, enum.Enum):
    IDENTITY = "identity"
    DARA = "dara"
    MEAN_VARIANCE = "mv"
    MEAN_VARIANCE_EMPIRICAL = "mv_empirical"
    EXACT_CDF = "exact_cdf"


class Estimator(str, enum.Enum):
    EXACT_DP = "exact_dp"
    FITTED_VALUE = "fitted_value"
    TRAJECTORY_EMPIRICAL = "trajectory_empirical"


@dataclass(frozen=True, eq=False)
class ReturnStats:
    """Per-``(t, s, a)`` return-to-go moments with a per-``t`` global fallback.

    Stationary estimates (``time_indexed=False``) are broadcast over ``t``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    count: np.ndarray
    estimator: Estimator
    global_mu: np.ndarray
    global_sigma: np.ndarray
    time_indexed: bool = True

    def __post_init__(self):
        if np.any(self.sigma < 0) or np.any(self.global_sigma < 0):
            raise ValueError("standard deviations must be non-negative")
        if self.mu.shape != self.sigma.shape or self.mu.shape != self.count.shape:
            raise ValueError("mu, sigma and count must share a shape")

    @property
    def supported(self) -> np.ndarray:
        return self.count > 0

    def lookup(self, t, s, a):
        """Moments at each step; unsupported entries fall back to the global ones."""
        ok = self.supported[t, s, a]
        mu = np.where(ok, self.mu[t, s, a], self.global_mu[t])
        sigma = np.where(ok, self.sigma[t, s, a], self.global_sigma[t])
        return mu, sigma, ok

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator.value,
            "time_indexed": self.time_indexed,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "count": self.count.tolist(),
            "global_mu": self.global_mu.tolist(),
            "global_sigma": self.global_sigma.tolist(),
        }


def _pool_over_time(weight, mean, var):
    """Mixture moments over ``t`` with weights ``weight[t, s, a]``."""
    w = weight.sum(axis=0)
    safe = np.where(w > 0, w, 1.0)
    mu = (weight * mean).sum(axis=0) / safe
    second = (weight * (var + mean**2)).sum(axis=0) / safe
    var_p = np.maximum(second - mu**2, 0.0)
    return np.broadcast_to(mu, mean.shape).copy(), np.broadcast_to(np.sqrt(var_p), mean.shape).copy(), w


def _exact_stats(mdp: TabularMDP, policy: StationaryPolicy, time_indexed: bool) -> ReturnStats:
    table = return_table(mdp, policy)
    mean, std = table.moments()
    d = state_occupancy(mdp, policy)
    weight = d[:, :, None] * policy.probs
    g = table.support
    g_law = np.einsum("tsa,tsag->tg", weight, table.mass)
    gm = g_law @ g
    gs = np.sqrt(np.maximum(g_law @ g**2 - gm**2, 0.0))
    if time_indexed:
        count = np.ones_like(mean)
    else:
        mean, std, w = _pool_over_time(weight, mean, std**2)
        count = np.broadcast_to((w > 0).astype(float), mean.shape).copy()
        pooled = g_law.sum(axis=0) / mdp.horizon
        pm = pooled @ g
        gm = np.full(mdp.horizon, pm)
        gs = np.full(mdp.horizon, np.sqrt(max(pooled @ g**2 - pm**2, 0.0)))
    return ReturnStats(mean, std, count, Estimator.EXACT_DP, gm, gs, time_indexed)


def _group_moments(keys, values, n_keys):
    count = np.bincount(keys, minlength=n_keys).astype(float)
    total = np.bincount(keys, weights=values, minlength=n_keys)
    safe = np.where(count > 0, count, 1.0)
    mean = total / safe
    resid = values - mean[keys]
    var = np.bincount(keys, weights=resid**2, minlength=n_keys) / safe
    return count, mean, np.sqrt(var)


def _empirical_stats(ds: Dataset, time_indexed: bool) -> ReturnStats:
    N, H = ds.actions.shape
    S, A = ds.num_states, ds.num_actions
    t = np.broadcast_to(np.arange(H), (N, H))
    s = ds.states[:, :-1]
    a = ds.actions
    g = ds.rtg
    if time_indexed:
        keys = ((t * S + s) * A + a).ravel()
        count, mean, std = _group_moments(keys, g.ravel(), H * S * A)
        shape = (H, S, A)
        count, mean, std = count.reshape(shape), mean.reshape(shape), std.reshape(shape)
        gm = g.mean(axis=0) if N else np.zeros(H)
        gs = g.std(axis=0) if N else np.zeros(H)
    else:
        keys = (s * A + a).ravel()
        count, mean, std = _group_moments(keys, g.ravel(), S * A)
        shape = (S, A)
        count, mean, std = (np.broadcast_to(x.reshape(shape), (H, S, A)).copy() for x in (count, mean, std))
        gm = np.full(H, g.mean() if N else 0.0)
        gs = np.full(H, g.std() if N else 0.0)
    return ReturnStats(mean, std, count, Estimator.TRAJECTORY_EMPIRICAL, gm, gs, time_indexed)


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    """Maximum-likelihood tabular model built from transition counts."""

    mdp: TabularMDP
    visited: np.ndarray  # (S, A) bool
    behavior: StationaryPolicy


def empirical_model(ds: Dataset, horizon: int | None = None) -> EmpiricalModel:
    N, H = ds.actions.shape
    H = horizon or H
    S, A = ds.num_states, ds.num_actions
    s = ds.states[:, :-1].ravel()
    a = ds.actions.ravel()
    s2 = ds.states[:, 1:].ravel()
    counts = np.bincount((s * A + a) * S + s2, minlength=S * A * S).reshape(S, A, S).astype(float)
    n_sa = counts.sum(axis=2)
    visited = n_sa > 0
    p = np.where(visited[:, :, None], counts / np.where(n_sa > 0, n_sa, 1.0)[:, :, None], 0.0)
    p[~visited] = np.eye(S)[np.nonzero(~visited)[0]]  # placeholder self-loop
    r_sum = np.bincount(s * A + a, weights=ds.rewards.ravel(), minlength=S * A).reshape(S, A)
    r = np.where(visited, r_sum / np.where(n_sa > 0, n_sa, 1.0), 0.0)
    # rewards are deterministic per (s, a); snap residue back onto the grid
    grid = float(ds.meta.get("reward_grid", 1.0))
    r = np.round(r / grid) * grid
    t = np.broadcast_to(np.arange(H), (N, H)).ravel()
    beta_counts = np.bincount((t * S + s) * A + a, minlength=H * S * A).reshape(H, S, A).astype(float)
    pooled = beta_counts.sum(axis=0)
    beta = beta_counts.copy()
    for tt in range(H):
        empty = beta[tt].sum(axis=1) == 0
        beta[tt][empty] = pooled[empty]
    empty = beta.sum(axis=2) == 0
    beta[empty] = 1.0
    beta /= beta.sum(axis=2, keepdims=True)
    mu0 = np.bincount(ds.states[:, 0], minlength=S).astype(float)
    mu0 = mu0 / mu0.sum() if mu0.sum() > 0 else np.full(S, 1.0 / S)
    model = TabularMDP(p, r, mu0, H, reward_grid=grid, name="empirical")
    return EmpiricalModel(model, visited, StationaryPolicy(beta, "empirical-behavior"))


def _softmax(q: np.ndarray, temperature: float) -> np.ndarray:
    z = q / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fitted_value_stats(
    ds: Dataset,
    n_action_samples: int,
    seed: int,
    temperature: float,
    value_target: str,
    time_indexed: bool,
) -> ReturnStats:
    model = empirical_model(ds)
    mdp = model.mdp
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    if value_target == "behavior":
        q = q_values(mdp, model.behavior)
    elif value_target == "optimal":
        q = _optimal_q_visited(mdp, model.visited)
    else:
        raise ValueError(f"unknown value_target {value_target!r}")
    # spread of Q over sampled actions: the same sigma for every action at (t, s)
    rng = make_rng("fitted_value", seed)
    q_for_policy = np.where(model.visited[None], q, -np.inf)
    q_for_policy = np.where(model.visited.any(axis=1)[None, :, None], q_for_policy, 0.0)
    probs = _softmax(q_for_policy, temperature)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random((H, S, n_action_samples))
    picks = (cdf[:, :, None, :] <= u[..., None]).sum(axis=-1).clip(0, A - 1)
    sampled_q = np.take_along_axis(q, picks, axis=2)
    sigma_state = sampled_q.std(axis=2)
    sigma = np.broadcast_to(sigma_state[:, :, None], (H, S, A)).copy()
    count = np.broadcast_to(model.visited[None].astype(float), (H, S, A)).copy()
    if not time_indexed:
        weight = _empirical_stats(ds, time_indexed=True).count
        q, sigma, _ = _pool_over_time(weight, q, sigma**2)
    g = ds.rtg
    gm = g.mean(axis=0) if len(ds) else np.zeros(H)
    gs = g.std(axis=0) if len(ds) else np.zeros(H)
    if not time_indexed:
        gm = np.full(H, g.mean() if len(ds) else 0.0)
        gs = np.full(H, g.std() if len(ds) else 0.0)
    return ReturnStats(q, sigma, count, Estimator.FITTED_VALUE, gm, gs, time_indexed)


def _optimal_q_visited(mdp: TabularMDP, visited: np.ndarray) -> np.ndarray:
    """Optimal Q where the max only ranges over actions seen in the data."""
    H = mdp.horizon
    q = np.zeros((H, mdp.num_states, mdp.num_actions))
    v_next = np.zeros(mdp.num_states)
    for t in range(H - 1, -1, -1):
        q[t] = mdp.reward + mdp.transition @ v_next
        masked = np.where(visited, q[t], -np.inf)
        v_next = np.where(visited.any(axis=1), masked.max(axis=1), 0.0)
    return q


def estimate_return_stats(
    source,
    estimator: Estimator | str,
    policy: StationaryPolicy | None = None,
    n_action_samples: int = 10,
    seed: int = 0,
    temperature: float = 1.0,
    value_target: str = "optimal",
    time_indexed: bool = True,
) -> ReturnStats:
    """Return-to-go moments from an MDP plus behavior policy, or from a dataset.

    ``EXACT_DP`` needs ``source`` to be a :class:`TabularMDP` and ``policy``.
    ``FITTED_VALUE`` builds a count-based model from the dataset and uses its
    Q-values as means; the spread of Q over ``n_action_samples`` actions drawn
    from a softmax at ``temperature`` is the standard deviation.
    ``TRAJECTORY_EMPIRICAL`` uses sample moments of the observed returns-to-go.
    """
    estimator = Estimator(estimator)
    if estimator is Estimator.EXACT_DP:
        if not isinstance(source, TabularMDP) or policy is None:
            raise ValueError("exact_dp needs an MDP and a behavior policy")
        return _exact_stats(source, policy, time_indexed)
    if not isinstance(source, Dataset):
        raise ValueError(f"{estimator.value} needs a dataset")
    if estimator is Estimator.TRAJECTORY_EMPIRICAL:
        return _empirical_stats(source, time_indexed)
    if n_action_samples < 1 or temperature <= 0:
        raise ValueError("need n_action_samples >= 1 and temperature > 0")
    return _fitted_value_stats(source, n_action_samples, seed, temperature, value_target, time_indexed)


@dataclass(frozen=True)
class ClipConfig:
    """Bounds for the target/source std ratio, and a floor on the source std."""

    theta_lo: float = 0.9
    theta_hi: float = 1.25
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if not (self.theta_lo > 0 and self.theta_hi >= self.theta_lo and self.sigma_floor >= 0):
            raise ValueError(f"invalid clip configuration {self}")


@dataclass(eq=False)
class AugmentedDataset:
    base: Dataset
    dataset: Dataset
    psi_kind: PsiKind
    params: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def rtg(self) -> np.ndarray:
        return self.dataset.rtg

    @property
    def provenance(self) -> str:
        return self.dataset.meta["provenance"]


def _finish(base: Dataset, rtg: np.ndarray, kind: PsiKind, params: dict, diagnostics: dict) -> AugmentedDataset:
    blob = json.dumps(
        {"base": base.mdp_fingerprint, "seed": base.meta.get("seed"), "n": len(base), "kind": kind.value, "params": params},
        sort_keys=True,
        default=str,
    )
    provenance = fnv1a_64(blob.encode("utf-8"))
    ds = base.with_rtg(rtg, psi_kind=kind.value, psi_params=params, provenance=provenance)
    return AugmentedDataset(base, ds, kind, params, diagnostics)


def psi_identity(ds: Dataset) -> AugmentedDataset:
    return _finish(ds, ds.rtg.copy(), PsiKind.IDENTITY, {}, {})


def psi_dara(ds: Dataset, dr: DeltaRTable, eta: float = 0.1) -> AugmentedDataset:
    """``psi(g_t) = g_t + eta * sum_{h >= t} delta_r(s_h, a_h, s_{h+1})``."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    s, a, s2 = ds.states[:, :-1], ds.actions, ds.states[:, 1:]
    values, supported = dr.lookup(s, a, s2)
    rtg = ds.rtg + eta * returns_to_go(values)
    diagnostics = {
        "unsupported_transitions": int((~supported).sum()),
        "steps": int(supported.size),
        "sa_term_max": dr.sa_term_max,
    }
    return _finish(ds, rtg, PsiKind.DARA, {"eta": eta, "clamp": dr.clamp_bound}, diagnostics)


def psi_mean_variance(
    ds: Dataset,
    src: ReturnStats,
    tgt: ReturnStats,
    clip: ClipConfig | None = None,
    kind: PsiKind = PsiKind.MEAN_VARIANCE,
) -> AugmentedDataset:
    """Standardise with source moments, rescale with target moments.

    The std ratio is clipped to ``[theta_lo, theta_hi]`` after flooring the
    source std at ``sigma_floor``.
    """
    clip = clip or ClipConfig()
    kind = PsiKind(kind)
    N, H = ds.actions.shape
    t = np.broadcast_to(np.arange(H), (N, H))
    s, a = ds.states[:, :-1], ds.actions
    mu_s, sig_s, ok_s = src.lookup(t, s, a)
    mu_t, sig_t, ok_t = tgt.lookup(t, s, a)
    denom = np.maximum(sig_s, clip.sigma_floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(denom > 0, sig_t / np.where(denom > 0, denom, 1.0), np.where(sig_t > 0, np.inf, 1.0))
    ratio = np.clip(raw, clip.theta_lo, clip.theta_hi)
    rtg = (ds.rtg - mu_s) * ratio + mu_t
    steps = max(int(raw.size), 1)
    diagnostics = {
        "source_fallbacks": int((~ok_s).sum()),
        "target_fallbacks": int((~ok_t).sum()),
        "clip_rate": float(((raw < clip.theta_lo) | (raw > clip.theta_hi)).sum() / steps),
        "steps": int(raw.size),
    }
    params = {
        "theta_lo": clip.theta_lo,
        "theta_hi": clip.theta_hi,
        "sigma_floor": clip.sigma_floor,
        "source_estimator": src.estimator.value,
        "target_estimator": tgt.estimator.value,
        "time_indexed": src.time_indexed,
    }
    return _finish(ds, rtg, kind, params, diagnostics)


def _robust_cdf(mass: np.ndarray) -> np.ndarray:
    """CDF rows that reach exactly 1 at the last atom with positive mass."""
    cdf = np.cumsum(mass, axis=-1)
    G = mass.shape[-1]
    last = G - 1 - np.argmax((mass > 0)[..., ::-1], axis=-1)
    return np.where(np.arange(G) >= last[..., None], 1.0, np.minimum(cdf, 1.0))


def psi_exact_cdf(
    ds: Dataset, source_dists: ReturnTable, target_dists: ReturnTable, seed: int = 0
) -> AugmentedDataset:
    """Quantile transport ``G_T^{-1}(G_S(g))`` per ``(t, s, a)`` with randomised ranks.

    A return that sits on an atom of the source law gets a rank drawn
    uniformly inside that atom, so the transformed value follows the target
    law exactly. Randomness for trajectory ``i`` comes from the stream
    ``("psi_exact_cdf", seed, i // PSI_CHUNK)``.
    """
    if source_dists.mass.shape[:3] != target_dists.mass.shape[:3]:
        raise ValueError("source and target return tables differ in (t, s, a) shape")
    if source_dists.delta != target_dists.delta:
        raise ValueError("source and target return tables use different grids")
    N, H = ds.actions.shape
    if H != source_dists.mass.shape[0]:
        raise ValueError("dataset horizon does not match the return tables")
    t = np.broadcast_to(np.arange(H), (N, H))
    s, a = ds.states[:, :-1], ds.actions
    k = source_dists.grid_index(ds.rtg)
    src_mass = source_dists.mass[t, s, a]  # (N, H, G)
    p_atom = np.take_along_axis(src_mass, k[..., None], axis=-1)[..., 0]
    if np.any(p_atom <= 0):
        bad = np.argwhere(p_atom <= 0)[0]
        raise ValueError(f"return at trajectory {bad[0]}, t={bad[1]} has zero source probability")
    src_cdf = np.cumsum(src_mass, axis=-1)
    below = np.take_along_axis(src_cdf, k[..., None], axis=-1)[..., 0] - p_atom
    v = np.empty((N, H))
    for c, start in enumerate(range(0, N, PSI_CHUNK)):
        stop = min(start + PSI_CHUNK, N)
        v[start:stop] = 1.0 - make_rng("psi_exact_cdf", seed, c).random((stop - start, H))
    u = np.clip(below + v * p_atom, 0.0, 1.0)
    tgt_cdf = _robust_cdf(target_dists.mass)[t, s, a]
    j = (tgt_cdf < u[..., None]).sum(axis=-1)
    j = np.minimum(j, tgt_cdf.shape[-1] - 1)
    rtg = (target_dists.lo + j) * target_dists.delta
    return _finish(ds, rtg, PsiKind.EXACT_CDF, {"seed": seed}, {"steps": int(rtg.size)})


def cdf_transport_plan(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Comonotone coupling of two laws on the same grid.

    ``plan[i, j]`` is the probability that source atom ``i`` is sent to
    target atom ``j`` by the randomised-rank quantile map.
    """
    fp = np.concatenate([[0.0], np.cumsum(p)])
    fq = np.concatenate([[0.0], np.cumsum(q)])
    fp[-1] = fq[-1] = 1.0
    hi = np.minimum(fp[1:, None], fq[None, 1:])
    lo = np.maximum(fp[:-1, None], fq[None, :-1])
    plan = np.maximum(hi - lo, 0.0)
    plan[p <= 0] = 0.0
    return plan


def pushforward_occupancy(
    source_joint: JointOccupancy, source_dists: ReturnTable, target_dists: ReturnTable
) -> JointOccupancy:
    """Joint law of ``(t, s, a, psi(g))`` under the source domain."""
    H, S, A, G = source_joint.mass.shape
    out = np.zeros_like(source_joint.mass)
    for t in range(H):
        for s in range(S):
            for a in range(A):
                p = source_dists.mass[t, s, a]
                plan = cdf_transport_plan(p, target_dists.mass[t, s, a])
                kernel = plan / np.where(p > 0, p, 1.0)[:, None]
                out[t, s, a] = source_joint.mass[t, s, a] @ kernel
    return JointOccupancy(out, source_joint.lo, source_joint.delta)


def pushforward_distance(aug: AugmentedDataset | Dataset, target_dists: ReturnTable, min_count: int = 1) -> dict:
    """Total variation between the transformed returns at each ``(t, s, a)`` and the target law.

    Off-grid values are rounded to the nearest grid point. Diagnostic only.
    """
    ds = aug.dataset if isinstance(aug, AugmentedDataset) else aug
    N, H = ds.actions.shape
    G = target_dists.mass.shape[-1]
    t = np.broadcast_to(np.arange(H), (N, H)).ravel()
    s = ds.states[:, :-1].ravel()
    a = ds.actions.ravel()
    k = np.clip(np.round(ds.rtg.ravel() / target_dists.delta).astype(int) - target_dists.lo, 0, G - 1)
    S, A = ds.num_states, ds.num_actions
    cell = (t * S + s) * A + a
    hist = np.bincount(cell * G + k, minlength=H * S * A * G).reshape(H * S * A, G)
    counts = hist.sum(axis=1)
    live = counts >= min_count
    emp = hist[live] / counts[live, None]
    tv = 0.5 * np.abs(emp - target_dists.mass.reshape(H * S * A, G)[live]).sum(axis=1)
    return {"cells": int(live.sum()), "mean_tv": float(tv.mean()) if tv.size else 0.0, "max_tv": float(tv.max()) if tv.size else 0.0}


def augment(ds: Dataset, kind: PsiKind | str, **params) -> AugmentedDataset:
    """Dispatch to the transform named by ``kind``.

    dara: ``delta_r`` (DeltaRTable), ``eta``.
    mv / mv_empirical: ``source_stats``, ``target_stats``, ``clip``.
    exact_cdf: ``source_dists``, ``target_dists``, ``seed``.
    """
    try:
        kind = PsiKind(kind)
    except ValueError:
        raise ValueError(f"unknown augmentation kind {kind!r}") from None
    if kind is PsiKind.IDENTITY:
        return psi_identity(ds)
    if kind is PsiKind.DARA:
        return psi_dara(ds, params["delta_r"], params.get("eta", 0.1))
    if kind in (PsiKind.MEAN_VARIANCE, PsiKind.MEAN_VARIANCE_EMPIRICAL):
        return psi_mean_variance(
            ds, params["source_stats"], params["target_stats"], params.get("clip"), kind=kind
        )
    return psi_exact_cdf(ds, params["source_dists"], params["target_dists"], params.get("seed", 0))

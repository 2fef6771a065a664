"""Source-vs-target domain classifiers and the DARA reward correction.

Both classifiers are logistic models over one-hot features, either of the
transition ``(s, a, s')`` or of the pair ``(s, a)``. Label 1 means *target*.
The reward correction is the difference of their log-odds,
``delta_r(s, a, s') = logit_sas(s, a, s') - logit_sa(s, a)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .mdp import TabularMDP
from .rng import make_rng

EPS = 1e-6
LOGIT_BOUND = float(np.log((1.0 - EPS) / EPS))


class FeatureKind(str, enum.Enum):
    SAS = "sas"
    SA = "sa"


@dataclass(frozen=True, eq=False)
class LogisticModel:
    feature_kind: FeatureKind
    num_states: int
    num_actions: int
    weights: np.ndarray
    bias: float = 0.0
    support: np.ndarray | None = None
    history: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "feature_kind", FeatureKind(self.feature_kind))
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.num_features,):
            raise ValueError(f"expected {self.num_features} weights, got {w.shape}")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)
        if self.support is not None:
            object.__setattr__(self, "support", np.asarray(self.support, dtype=bool))

    @property
    def table_shape(self) -> tuple[int, ...]:
        S, A = self.num_states, self.num_actions
        return (S, A, S) if self.feature_kind is FeatureKind.SAS else (S, A)

    @property
    def num_features(self) -> int:
        return int(np.prod(self.table_shape))

    def feature_index(self, s, a, s_next=None) -> np.ndarray:
        s = np.asarray(s)
        a = np.asarray(a)
        idx = s * self.num_actions + a
        if self.feature_kind is FeatureKind.SAS:
            if s_next is None:
                raise ValueError("SAS features need the successor state")
            idx = idx * self.num_states + np.asarray(s_next)
        return idx

    def logits(self, idx) -> np.ndarray:
        z = self.weights[np.asarray(idx)] + self.bias
        return np.clip(z, -LOGIT_BOUND, LOGIT_BOUND)

    def predict(self, idx) -> np.ndarray:
        """P(target | features), confined to [EPS, 1 - EPS]."""
        return 1.0 / (1.0 + np.exp(-self.logits(idx)))

    def logit_table(self) -> np.ndarray:
        return self.logits(np.arange(self.num_features)).reshape(self.table_shape)

    def to_dict(self) -> dict:
        out = {
            "feature_kind": self.feature_kind.value,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
        }
        if self.support is not None:
            out["support"] = self.support.astype(int).tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "LogisticModel":
        support = doc.get("support")
        return cls(
            doc["feature_kind"],
            doc["num_states"],
            doc["num_actions"],
            np.asarray(doc["weights"], float),
            float(doc["bias"]),
            None if support is None else np.asarray(support, bool),
        )


def loss_and_grad(weights, bias, idx, labels, sample_weights, l2):
    """Weighted mean cross-entropy plus ``l2/2 * |w|^2``, and its gradient."""
    z = weights[idx] + bias
    total = sample_weights.sum()
    # softplus(z) - y z, computed stably
    nll = np.logaddexp(0.0, z) - labels * z
    loss = float((sample_weights * nll).sum() / total + 0.5 * l2 * weights @ weights)
    p = 1.0 / (1.0 + np.exp(-z))
    dz = sample_weights * (p - labels) / total
    grad_w = np.bincount(idx, weights=dz, minlength=weights.size) + l2 * weights
    grad_b = float(dz.sum())
    return loss, grad_w, grad_b


@dataclass(frozen=True)
class ClassifierConfig:
    lr: float = 0.05
    epochs: int = 200
    batch: int = 256
    seed: int = 0
    l2: float = 1e-5

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1 or self.l2 < 0:
            raise ValueError(f"invalid classifier config {self}")


def _fit_logistic(kind, S, A, idx, labels, cfg: ClassifierConfig, stream) -> LogisticModel:
    """Adam on mini-batches with a linearly decaying step size."""
    n_feat = S * A * S if kind is FeatureKind.SAS else S * A
    n = len(idx)
    n_pos = labels.sum()
    n_neg = n - n_pos
    # balanced weighting: each class carries half of the total weight
    cw = np.where(labels == 1, n / (2.0 * max(n_pos, 1)), n / (2.0 * max(n_neg, 1)))
    params = np.zeros(n_feat + 1)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    rng = make_rng("classifier", cfg.seed, stream)
    steps_per_epoch = -(-n // cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0

    def full_loss():
        return loss_and_grad(params[:-1], params[-1], idx, labels, cw, cfg.l2)[0]

    history = [full_loss()]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            batch = order[start : start + cfg.batch]
            _, gw, gb = loss_and_grad(params[:-1], params[-1], idx[batch], labels[batch], cw[batch], cfg.l2)
            g = np.append(gw, gb)
            step += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**step)
            vhat = v / (1 - b2**step)
            lr = cfg.lr * (1.0 - (step - 1) / total_steps)
            params -= lr * mhat / (np.sqrt(vhat) + adam_eps)
        history.append(full_loss())
    support = np.bincount(idx, minlength=n_feat) > 0
    return LogisticModel(kind, S, A, params[:-1].copy(), float(params[-1]), support, tuple(history))


def transitions(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ``(s_t, a_t, s_{t+1})`` of a dataset, flattened."""
    s = ds.states[:, :-1].ravel()
    a = ds.actions.ravel()
    s_next = ds.states[:, 1:].ravel()
    return s, a, s_next


def train_classifiers(
    source_ds: Dataset, target_ds: Dataset, cfg: ClassifierConfig | None = None
) -> tuple[LogisticModel, LogisticModel]:
    """Fit ``(q_sas, q_sa)`` to separate target (label 1) from source (label 0)."""
    cfg = cfg or ClassifierConfig()
    if len(source_ds) == 0 or len(target_ds) == 0:
        raise ValueError("both datasets must be nonempty")
    if (source_ds.num_states, source_ds.num_actions) != (target_ds.num_states, target_ds.num_actions):
        raise ValueError("datasets disagree on state/action shapes")
    S, A = source_ds.num_states, source_ds.num_actions
    ss, sa_, sn = transitions(source_ds)
    ts, ta, tn = transitions(target_ds)
    s = np.concatenate([ts, ss])
    a = np.concatenate([ta, sa_])
    s_next = np.concatenate([tn, sn])
    labels = np.concatenate([np.ones(len(ts)), np.zeros(len(ss))])
    sas_idx = (s * A + a) * S + s_next
    sa_idx = s * A + a
    q_sas = _fit_logistic(FeatureKind.SAS, S, A, sas_idx, labels, cfg, "sas")
    q_sa = _fit_logistic(FeatureKind.SA, S, A, sa_idx, labels, cfg, "sa")
    return q_sas, q_sa


def _log_odds(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.log(num) - np.log(den)
    z = np.where((num == 0) & (den == 0), 0.0, z)
    z = np.where((num > 0) & (den == 0), LOGIT_BOUND, z)
    z = np.where((num == 0) & (den > 0), -LOGIT_BOUND, z)
    return np.clip(z, -LOGIT_BOUND, LOGIT_BOUND)


def bayes_classifier_oracle(
    source: TabularMDP,
    target: TabularMDP,
    visitation: np.ndarray,
    source_visitation: np.ndarray | None = None,
) -> tuple[LogisticModel, LogisticModel]:
    """Classifiers whose log-odds are the exact Bayes log-odds under equal class priors.

    ``visitation`` is the target ``(s, a)`` law; ``source_visitation`` defaults
    to the same table.
    """
    if source.transition.shape != target.transition.shape:
        raise ValueError("source and target MDPs have different shapes")
    d_t = np.asarray(visitation, float)
    d_s = d_t if source_visitation is None else np.asarray(source_visitation, float)
    for d in (d_t, d_s):
        if d.shape != source.reward.shape or np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError("visitation must be a distribution over (s, a)")
    S, A = source.num_states, source.num_actions
    joint_t = target.transition * d_t[:, :, None]
    joint_s = source.transition * d_s[:, :, None]
    sas = LogisticModel(
        FeatureKind.SAS, S, A, _log_odds(joint_t, joint_s).ravel(), 0.0,
        ((joint_t > 0) | (joint_s > 0)).ravel(),
    )
    sa = LogisticModel(
        FeatureKind.SA, S, A, _log_odds(d_t, d_s).ravel(), 0.0, ((d_t > 0) | (d_s > 0)).ravel()
    )
    return sas, sa


@dataclass(frozen=True, eq=False)
class DeltaRTable:
    values: np.ndarray  # (S, A, S)
    clamp_bound: float
    support: np.ndarray  # (S, A, S) bool
    sa_term_max: float = 0.0  # largest |log-odds| of the (s, a) classifier on supported pairs

    def lookup(self, s, a, s_next) -> tuple[np.ndarray, np.ndarray]:
        """Correction and support flag for each transition (0 where unsupported)."""
        return self.values[s, a, s_next], self.support[s, a, s_next]

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "clamp_bound": self.clamp_bound,
            "support": self.support.astype(int).tolist(),
            "sa_term_max": self.sa_term_max,
        }


def delta_r(sas: LogisticModel, sa: LogisticModel, clamp: float = 10.0) -> DeltaRTable:
    if sas.feature_kind is not FeatureKind.SAS or sa.feature_kind is not FeatureKind.SA:
        raise ValueError("expected an (SAS, SA) classifier pair")
    if (sas.num_states, sas.num_actions) != (sa.num_states, sa.num_actions):
        raise ValueError("classifiers use different feature vocabularies")
    if clamp < 0:
        raise ValueError("clamp bound must be non-negative")
    values = sas.logit_table() - sa.logit_table()[:, :, None]
    values = np.clip(values, -clamp, clamp)
    if sas.support is None:
        support = np.ones(sas.table_shape, bool)
    else:
        support = sas.support.reshape(sas.table_shape)
    values = np.where(support, values, 0.0)
    # the SA term corrects for unequal (s, a) occupancy between the domains;
    # a large value means the two datasets cover different parts of the MDP
    sa_logits = np.abs(sa.logit_table())
    sa_support = support.any(axis=2)
    sa_term_max = float(sa_logits[sa_support].max()) if sa_support.any() else 0.0
    return DeltaRTable(values, float(clamp), support, sa_term_max)


def save_classifiers(path, sas: LogisticModel, sa: LogisticModel, **meta) -> None:
    doc = {"sas": sas.to_dict(), "sa": sa.to_dict(), "meta": meta}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_classifiers(path) -> tuple[LogisticModel, LogisticModel]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return LogisticModel.from_dict(doc["sas"]), LogisticModel.from_dict(doc["sa"])

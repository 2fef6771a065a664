"""Target-domain evaluation, experiment matrices and the sample-size study.

Policies are scored two ways: by Monte Carlo rollouts, and exactly, by
forward dynamic programming on the product chain of (state, reward
accumulated so far). The exact value is what the headline comparisons use;
rollouts are reported next to it as a cross-check.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import (
    ClipConfig,
    Estimator,
    psi_dara,
    psi_exact_cdf,
    psi_identity,
    psi_mean_variance,
    estimate_return_stats,
)
from .classifiers import ClassifierConfig, delta_r, train_classifiers
from .config import ALL_METHODS, ExperimentConfig
from .data import Dataset, collect, mix
from .dp import return_grid_bounds, return_table, state_occupancy, value_iteration
from .envs import make_env
from .mdp import StationaryPolicy, TabularMDP
from .rcsl import NeuralConfig, ReturnBinner, fit_neural, fit_tabular, rollouts
from .rng import derive_seed
from .shifts import apply_shift, dynamics_gap, occupancy_ratio

DEFAULT_QUANTILES = (0.5, 0.9, 1.0)


# --------------------------------------------------------------------------- single policy


def exact_conditioned_value(policy, mdp: TabularMDP, f0: float) -> float:
    """Exact ``J(pi_f)`` for a return-conditioned policy with ``f_t = f0 - sum_{h<t} r_h``.

    The conditioning value is a function of the reward accumulated so far, so
    the pair (state, accumulated reward) is Markov and a forward pass over it
    gives the exact expected return.
    """
    lo, hi = return_grid_bounds(mdp)
    C = hi - lo + 1
    S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
    units = mdp.reward_units
    dist = np.zeros((S, C))
    dist[:, -lo] = mdp.initial_dist
    s_idx, c_idx = np.meshgrid(np.arange(S), np.arange(C), indexing="ij")
    g = f0 - (lo + c_idx) * mdp.reward_grid
    value = 0.0
    for t in range(H):
        probs, _ = policy.action_probs(np.full(s_idx.shape, t), s_idx, g)
        w = dist[:, :, None] * probs  # (S, C, A)
        value += float((w * mdp.reward[:, None, :]).sum())
        nxt = np.zeros((S, C))
        for k in np.unique(units):
            part = np.einsum("sca,sap->pc", w * (units == k)[:, None, :], mdp.transition)
            if k >= 0:
                nxt[:, k:] += part[:, : C - k]
            else:
                nxt[:, :k] += part[:, -k:]
        dist = nxt
    return value


@dataclass
class EvalReport:
    """Evaluation of one policy at each conditioning target in ``f_grid``."""

    policy_id: str
    psi_kind: str
    dataset_spec: dict
    f_grid: list
    mean_return: list
    std_error: list
    exact_return: list
    optimal_value: float
    n_rollouts: int
    seed: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def suboptimality(self) -> list:
        """``J(pi*) - J(pi_f)``, from the exact value where available."""
        out = []
        for mc, ex in zip(self.mean_return, self.exact_return):
            out.append(self.optimal_value - (mc if ex is None else ex))
        return out

    @property
    def headline(self) -> int:
        """Index of the largest conditioning target."""
        return int(np.argmax(self.f_grid))

    def sane(self) -> bool:
        """No conditioning target beats the optimum by more than 3 standard errors."""
        return all(
            self.optimal_value - m >= -3.0 * se - 1e-12 for m, se in zip(self.mean_return, self.std_error)
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["suboptimality"] = self.suboptimality
        return out


def evaluate(
    policy,
    target_mdp: TabularMDP,
    f_grid,
    n_rollouts: int,
    seed: int,
    psi_kind: str = "none",
    dataset_spec: dict | None = None,
    exact: bool = True,
    optimal_value: float | None = None,
) -> EvalReport:
    f_grid = [float(f) for f in f_grid]
    if not f_grid:
        raise ValueError("f_grid must contain at least one conditioning target")
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    if optimal_value is None:
        optimal_value = value_iteration(target_mdp)[1]
    means, ses, exacts, fallback = [], [], [], 0
    for i, f in enumerate(f_grid):
        batch = rollouts(policy, target_mdp, f, n_rollouts, derive_seed(seed, "eval", i))
        ret = batch.returns
        means.append(float(ret.mean()))
        ses.append(float(ret.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else float("inf"))
        exacts.append(exact_conditioned_value(policy, target_mdp, f) if exact else None)
        fallback += batch.fallbacks
    diagnostics = {"fallback_rate": fallback / (len(f_grid) * n_rollouts * target_mdp.horizon)}
    return EvalReport(
        getattr(policy, "policy_id", type(policy).__name__),
        psi_kind,
        dict(dataset_spec or {}),
        f_grid,
        means,
        ses,
        exacts,
        float(optimal_value),
        int(n_rollouts),
        int(seed),
        diagnostics,
    )


# --------------------------------------------------------------------------- experiment pieces


@dataclass(frozen=True, eq=False)
class Problem:
    target: TabularMDP
    source: TabularMDP
    behavior: StationaryPolicy
    optimal_value: float


def build_problem(cfg: ExperimentConfig) -> Problem:
    target = make_env(cfg.env.name, **cfg.env.params)
    source = apply_shift(target, cfg.shift.spec())
    pi_star, j_star = value_iteration(target)
    if cfg.data.behavior == "uniform":
        beta = StationaryPolicy.uniform(target)
    else:
        beta = StationaryPolicy.epsilon_greedy(pi_star, cfg.data.epsilon)
    return Problem(target, source, beta, j_star)


def default_f_grid(returns: np.ndarray, quantiles=DEFAULT_QUANTILES) -> list:
    """Dataset-return quantiles (lower interpolation, so values stay on the grid) plus the max."""
    qs = [float(np.quantile(returns, q, method="lower")) for q in quantiles]
    return sorted(set(qs + [float(returns.max())]))


def fit_policy(cfg: ExperimentConfig, ds: Dataset, seed: int, policy_id: str):
    lc = cfg.learner
    if lc.kind == "tabular":
        return fit_tabular(ds, ReturnBinner(lc.bin_width), lc.smoothing, lc.time_indexed, policy_id)
    ncfg = NeuralConfig(width=lc.width, lr=lc.lr, epochs=lc.epochs, batch=lc.batch, seed=seed)
    return fit_neural(ds, ncfg, policy_id)


def _datasets(cfg: ExperimentConfig, problem: Problem, seed: int, n_small: int, n_large: int, n_source: int):
    """1T is the prefix of 10T: both come from the same collection stream."""
    stream = derive_seed(cfg.root_seed, "target-data", seed)
    large = collect(problem.target, problem.behavior, max(n_small, n_large), stream, "target")
    small = large.subset(np.arange(n_small))
    large = large.subset(np.arange(n_large))
    source = collect(problem.source, problem.behavior, n_source, derive_seed(cfg.root_seed, "source-data", seed), "source")
    return small, large, source


def _augment_source(cfg, problem, method, small, source, seed):
    a = cfg.augment
    clip = ClipConfig(a.clip_lo, a.clip_hi, a.sigma_floor)
    if method == "1T10S":
        return psi_identity(source)
    if method == "RADT-DARA":
        ccfg = ClassifierConfig(cfg.classifier.lr, cfg.classifier.epochs, cfg.classifier.batch,
                                derive_seed(cfg.root_seed, "classifier", seed), cfg.classifier.l2)
        sas, sa = train_classifiers(source, small, ccfg)
        return psi_dara(source, delta_r(sas, sa, a.dara_clamp), a.eta)
    if method in ("RADT-MV", "RADT-MV-empirical"):
        est = Estimator(a.estimator) if method == "RADT-MV" else Estimator.TRAJECTORY_EMPIRICAL
        kwargs = dict(time_indexed=a.time_indexed)
        if est is Estimator.FITTED_VALUE:
            kwargs.update(n_action_samples=a.n_action_samples, temperature=a.temperature, value_target=a.value_target)
        src = estimate_return_stats(source, est, seed=derive_seed(cfg.root_seed, "stats-source", seed), **kwargs)
        tgt = estimate_return_stats(small, est, seed=derive_seed(cfg.root_seed, "stats-target", seed), **kwargs)
        kind = "mv" if method == "RADT-MV" else "mv_empirical"
        return psi_mean_variance(source, src, tgt, clip, kind=kind)
    if method == "RADT-ExactCDF":
        return psi_exact_cdf(
            source,
            return_table(problem.source, problem.behavior),
            return_table(problem.target, problem.behavior),
            seed=derive_seed(cfg.root_seed, "psi", seed),
        )
    raise ValueError(f"unknown method {method!r}")


def training_set(cfg, problem, method, small, large, source, seed) -> tuple[Dataset, str, dict]:
    if method == "1T":
        return small, "none", {}
    if method == "10T":
        return large, "none", {}
    aug = _augment_source(cfg, problem, method, small, source, seed)
    mixed = mix(small, aug.dataset, seed=derive_seed(cfg.root_seed, "mix", seed))
    return mixed, aug.psi_kind.value, aug.diagnostics


def _seed_diagnostics(problem: Problem) -> dict:
    d_t = state_occupancy(problem.target, problem.behavior)
    d_s = state_occupancy(problem.source, problem.behavior)
    gap = dynamics_gap(problem.source, problem.target)
    return {"occupancy_ratio": occupancy_ratio(d_t, d_s), "max_tv": gap.max_tv()}


def run_seed(cfg: ExperimentConfig, seed: int, methods=None) -> list[EvalReport]:
    """Every method for one seed; datasets are shared across methods."""
    problem = build_problem(cfg)
    methods = tuple(methods or cfg.eval.methods)
    d = cfg.data
    small, large, source = _datasets(cfg, problem, seed, d.n_target_small, d.n_target_large, d.n_source)
    f_grid = list(cfg.eval.f_grid) or default_f_grid(small.rtg[:, 0])
    shared = _seed_diagnostics(problem)
    reports = []
    for method in methods:
        spec = {"method": method, "n_target": len(small) if method != "10T" else len(large),
                "n_source": len(source) if method not in ("1T", "10T") else 0}
        try:
            ds, psi_kind, aug_diag = training_set(cfg, problem, method, small, large, source, seed)
            policy = fit_policy(cfg, ds, derive_seed(cfg.root_seed, "learner", seed), method)
            report = evaluate(
                policy, problem.target, f_grid, cfg.eval.n_rollouts,
                derive_seed(cfg.root_seed, "rollouts", seed, method), psi_kind, spec,
                optimal_value=problem.optimal_value,
            )
            report.seed = seed
            report.diagnostics.update(aug_diag)
        except Exception as exc:  # a failing cell must not stop the matrix
            nan = [float("nan")] * len(f_grid)
            report = EvalReport(method, "error", spec, f_grid, nan, nan, nan, problem.optimal_value,
                                cfg.eval.n_rollouts, seed, {"error": f"{type(exc).__name__}: {exc}"})
        report.diagnostics.update(shared)
        reports.append(report)
    return reports


def _run_seed_task(args):
    cfg, seed, methods = args
    return run_seed(cfg, seed, methods)


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def run_matrix(cfg: ExperimentConfig, jobs: int | None = None, on_seed=None, methods=None) -> list[EvalReport]:
    """All methods x seeds. Seeds run in a process pool; results keep seed order.

    ``on_seed(seed, reports)`` is called in seed order as results become
    available, so a single writer can stream them to disk.
    """
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    tasks = [(cfg, seed, methods) for seed in cfg.seeds]
    out = []
    if jobs == 1 or len(tasks) == 1:
        results = map(_run_seed_task, tasks)
        for seed, reports in zip(cfg.seeds, results):
            out.extend(reports)
            if on_seed:
                on_seed(seed, reports)
        return out
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        for seed, reports in zip(cfg.seeds, pool.map(_run_seed_task, tasks)):
            out.extend(reports)
            if on_seed:
                on_seed(seed, reports)
    return out


# --------------------------------------------------------------------------- summaries


def summarize(reports: list[EvalReport]) -> dict:
    """Per-method mean over seeds of the headline (largest-f) exact return, with its standard error."""
    by_method: dict[str, list[float]] = {}
    for r in reports:
        by_method.setdefault(r.policy_id, [])
        value = r.exact_return[r.headline]
        value = r.mean_return[r.headline] if value is None else value
        if np.isfinite(value):
            by_method[r.policy_id].append(float(value))
    out = {}
    for method, vals in by_method.items():
        v = np.asarray(vals)
        n = len(v)
        out[method] = {
            "n_seeds": n,
            "mean_return": float(v.mean()) if n else float("nan"),
            "std_error": float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan"),
        }
    return out


def pooled_se(a: dict, b: dict) -> float:
    return float(np.hypot(a["std_error"], b["std_error"]))


# --------------------------------------------------------------------------- rate study


@dataclass
class RateStudyResult:
    n_grid: list
    median_suboptimality: list
    per_seed: list  # per_seed[i][j]: seed j at grid point i
    slope: float

    def to_dict(self) -> dict:
        return asdict(self)


def loglog_slope(n_grid, medians) -> float:
    """Least-squares slope of log(median) against log(N) over positive medians (0.0 if fewer than two)."""
    n = np.asarray(n_grid, float)
    m = np.asarray(medians, float)
    keep = m > 0
    if keep.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(n[keep]), np.log(m[keep]), 1)[0])


def _rate_task(args):
    cfg, seed, n_total = args
    problem = build_problem(cfg)
    n_t = max(1, int(round(n_total * cfg.rate_study.target_fraction)))
    n_s = max(1, n_total - n_t)
    small, _, source = _datasets(cfg, problem, seed, n_t, n_t, n_s)
    ds, _, _ = training_set(cfg, problem, "RADT-ExactCDF", small, small, source, seed)
    policy = fit_policy(cfg, ds, derive_seed(cfg.root_seed, "learner", seed), "RADT-ExactCDF")
    f = max(cfg.eval.f_grid) if cfg.eval.f_grid else float(ds.rtg[:, 0].max())
    return problem.optimal_value - exact_conditioned_value(policy, problem.target, f)


def rate_study(cfg: ExperimentConfig, n_grid=None, jobs: int | None = None) -> RateStudyResult:
    """Median exact suboptimality of RADT-ExactCDF over seeds at each total sample size."""
    n_grid = [int(n) for n in (n_grid or cfg.rate_study.n_grid)]
    if len(n_grid) < 3 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid needs at least three strictly increasing sizes")
    tasks = [(cfg, seed, n) for n in n_grid for seed in cfg.seeds]
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1:
        values = list(map(_rate_task, tasks))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_rate_task, tasks))
    k = len(cfg.seeds)
    per_seed = [values[i * k : (i + 1) * k] for i in range(len(n_grid))]
    medians = [float(np.median(v)) for v in per_seed]
    return RateStudyResult(n_grid, medians, per_seed, loglog_slope(n_grid, medians))


# --------------------------------------------------------------------------- writers

CSV_COLUMNS = [
    ("method", "experiment cell (1T, 10T, 1T10S, RADT-DARA, RADT-MV, RADT-MV-empirical, RADT-ExactCDF)"),
    ("seed", "replicate seed"),
    ("f", "initial conditioning target f_0"),
    ("mean_return", "Monte Carlo mean target return"),
    ("std_error", "standard error of mean_return"),
    ("exact_return", "exact target return from product-chain dynamic programming"),
    ("optimal_value", "exact optimal target value J(pi*)"),
    ("suboptimality", "optimal_value minus exact_return"),
    ("n_rollouts", "Monte Carlo episodes per f"),
    ("psi_kind", "return transformation applied to the source data"),
    ("n_target", "target trajectories in the training set"),
    ("n_source", "source trajectories in the training set"),
    ("fallback_rate", "fraction of rollout steps whose conditioning value was unseen in training"),
    ("clip_rate", "fraction of source steps where the std-ratio clip was active (mean-variance only)"),
    ("unsupported_transitions", "source steps without a classifier correction (DARA only)"),
    ("sa_term_max", "largest |log-odds| of the (s, a) domain classifier (DARA only)"),
    ("occupancy_ratio", "max over (t, s) of target/source behavior state occupancy"),
    ("error", "failure message for a cell that could not be run"),
    ("config_hash", "hash of the canonical experiment config"),
    ("tool_version", "package version that produced the row"),
    ("root_seed", "root seed of the experiment"),
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def report_rows(reports: list[EvalReport], stamp: dict) -> list[list[str]]:
    rows = []
    for r in reports:
        for i, f in enumerate(r.f_grid):
            d = r.diagnostics
            exact = r.exact_return[i]
            values = {
                "method": r.policy_id,
                "seed": r.seed,
                "f": f,
                "mean_return": r.mean_return[i],
                "std_error": r.std_error[i],
                "exact_return": exact,
                "optimal_value": r.optimal_value,
                "suboptimality": r.suboptimality[i],
                "n_rollouts": r.n_rollouts,
                "psi_kind": r.psi_kind,
                "n_target": r.dataset_spec.get("n_target"),
                "n_source": r.dataset_spec.get("n_source"),
                "fallback_rate": d.get("fallback_rate"),
                "clip_rate": d.get("clip_rate"),
                "unsupported_transitions": d.get("unsupported_transitions"),
                "sa_term_max": d.get("sa_term_max"),
                "occupancy_ratio": d.get("occupancy_ratio"),
                "error": d.get("error", ""),
                **stamp,
            }
            rows.append([_fmt(values[name]) for name, _ in CSV_COLUMNS])
    return rows


class ReportWriter:
    """Single writer that streams rows to ``reports.csv`` as seeds complete."""

    def __init__(self, directory, stamp: dict):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.stamp = stamp
        self.csv_path = self.directory / "reports.csv"
        self._fh = open(self.csv_path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow([name for name, _ in CSV_COLUMNS])

    def write(self, reports: list[EvalReport]) -> None:
        self._writer.writerows(report_rows(reports, self.stamp))
        self._fh.flush()

    def close(self, reports: list[EvalReport]) -> dict:
        self._fh.close()
        summary = {"stamp": self.stamp, "methods": summarize(reports)}
        (self.directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        schema = {"stamp": self.stamp, "columns": [{"name": n, "description": d} for n, d in CSV_COLUMNS]}
        (self.directory / "reports.schema.json").write_text(json.dumps(schema, indent=2) + "\n")
        return summary


def reports_csv(reports: list[EvalReport], stamp: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([name for name, _ in CSV_COLUMNS])
    w.writerows(report_rows(reports, stamp))
    return buf.getvalue()

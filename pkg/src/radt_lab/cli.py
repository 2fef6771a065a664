"""``radt-lab`` command-line interface.

Every subcommand reads an experiment config (``--config``), lets flags
override individual config keys, and writes its artifacts under
``output_dir/{datasets,models,reports}``. Exit codes: 0 success, 2 usage or
config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import ClipConfig, Estimator, PsiKind, augment, estimate_return_stats
from .classifiers import ClassifierConfig, delta_r, load_classifiers, save_classifiers, train_classifiers
from .config import ConfigError, ExperimentConfig, load_config, override
from .data import collect, load, mix, save
from .dp import return_table
from .evaluation import (
    ReportWriter,
    build_problem,
    default_f_grid,
    default_jobs,
    evaluate,
    fit_policy,
    rate_study,
    run_matrix,
)
from .mdp import TabularMDP
from .rcsl import load_policy, save_policy
from .rng import derive_seed

log = logging.getLogger("radt_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------- helpers


def _dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    root = Path(cfg.output_dir)
    out = {name: root / name for name in ("datasets", "models", "reports")}
    for d in out.values():
        d.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _stamped(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    stamp = cfg.stamp()
    if seed is not None:
        stamp["seed"] = int(seed)
    return stamp


def _apply_flags(cfg: ExperimentConfig, args, mapping: dict) -> ExperimentConfig:
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg = override(cfg, key, value)
    return cfg


def _positive(name: str, value) -> None:
    if value is not None and value < 1:
        raise ConfigError(name, f"must be at least 1, got {value}")


# --------------------------------------------------------------------------- subcommands


def cmd_make_env(cfg, args) -> int:
    problem = build_problem(cfg)
    models = _dirs(cfg)["models"]
    for label, mdp in (("target", problem.target), ("source", problem.source)):
        doc = {"mdp": mdp.to_dict(), "fingerprint": mdp.fingerprint(), **_stamped(cfg)}
        path = _write_json(models / f"{label}_mdp.json", doc)
        print(f"{label}: {mdp.name} fingerprint={mdp.fingerprint()} -> {path}")
    return EXIT_OK


def cmd_collect(cfg, args) -> int:
    _positive("collect.n", args.n)
    problem = build_problem(cfg)
    seed = args.seed if args.seed is not None else derive_seed(cfg.root_seed, f"{args.domain}-data", 0)
    mdp = problem.target if args.domain == "target" else problem.source
    n = args.n or (cfg.data.n_target_small if args.domain == "target" else cfg.data.n_source)
    ds = collect(mdp, problem.behavior, n, seed, args.domain, jobs=args.jobs or 1)
    ds.meta.update(_stamped(cfg, seed))
    path = Path(args.out) if args.out else _dirs(cfg)["datasets"] / f"{args.domain}.jsonl"
    save(ds, path)
    print(f"collected {n} {args.domain} trajectories -> {path}")
    return EXIT_OK


def cmd_train_classifiers(cfg, args) -> int:
    source, target = load(args.source), load(args.target)
    c = cfg.classifier
    seed = args.seed if args.seed is not None else derive_seed(cfg.root_seed, "classifier", 0)
    sas, sa = train_classifiers(source, target, ClassifierConfig(c.lr, c.epochs, c.batch, seed, c.l2))
    path = Path(args.out) if args.out else _dirs(cfg)["models"] / "classifiers.json"
    save_classifiers(path, sas, sa, **_stamped(cfg, seed), final_loss=[sas.history[-1], sa.history[-1]])
    print(f"classifier losses sas {sas.history[0]:.4f}->{sas.history[-1]:.4f}, "
          f"sa {sa.history[0]:.4f}->{sa.history[-1]:.4f} -> {path}")
    return EXIT_OK


def cmd_augment(cfg, args) -> int:
    cfg = _apply_flags(cfg, args, {"clip_lo": "augment.clip_lo", "clip_hi": "augment.clip_hi", "eta": "augment.eta"})
    ds = load(args.input)
    kind = PsiKind(args.kind)
    a = cfg.augment
    seed = args.seed if args.seed is not None else derive_seed(cfg.root_seed, "psi", 0)
    params = {}
    if kind is PsiKind.DARA:
        if not args.classifiers:
            raise ConfigError("augment.classifiers", "dara needs --classifiers")
        sas, sa = load_classifiers(args.classifiers)
        params = {"delta_r": delta_r(sas, sa, a.dara_clamp), "eta": a.eta}
    elif kind in (PsiKind.MEAN_VARIANCE, PsiKind.MEAN_VARIANCE_EMPIRICAL):
        if not args.target:
            raise ConfigError("augment.target", f"{kind.value} needs --target for target statistics")
        target = load(args.target)
        est = Estimator(a.estimator) if kind is PsiKind.MEAN_VARIANCE else Estimator.TRAJECTORY_EMPIRICAL
        kw = {"time_indexed": a.time_indexed}
        if est is Estimator.FITTED_VALUE:
            kw.update(n_action_samples=a.n_action_samples, temperature=a.temperature, value_target=a.value_target)
        params = {
            "source_stats": estimate_return_stats(ds, est, seed=derive_seed(seed, "source"), **kw),
            "target_stats": estimate_return_stats(target, est, seed=derive_seed(seed, "target"), **kw),
            "clip": ClipConfig(a.clip_lo, a.clip_hi, a.sigma_floor),
        }
    elif kind is PsiKind.EXACT_CDF:
        problem = build_problem(cfg)
        params = {
            "source_dists": return_table(problem.source, problem.behavior),
            "target_dists": return_table(problem.target, problem.behavior),
            "seed": seed,
        }
    aug = augment(ds, kind, **params)
    out = aug.dataset
    out.meta.update(_stamped(cfg, seed))
    out.meta["psi_diagnostics"] = aug.diagnostics
    path = Path(args.out) if args.out else _dirs(cfg)["datasets"] / f"augmented_{kind.value}.jsonl"
    save(out, path)
    print(f"{kind.value}: {len(out)} trajectories, diagnostics {aug.diagnostics} -> {path}")
    return EXIT_OK


def cmd_fit(cfg, args) -> int:
    cfg = _apply_flags(cfg, args, {"learner": "learner.kind", "bin_width": "learner.bin_width"})
    datasets = [load(p) for p in args.input]
    ds = datasets[0]
    for extra in datasets[1:]:
        ds = mix(ds, extra)
    seed = args.seed if args.seed is not None else derive_seed(cfg.root_seed, "learner", 0)
    policy = fit_policy(cfg, ds, seed, args.policy_id)
    path = Path(args.out) if args.out else _dirs(cfg)["models"] / "policy.json"
    save_policy(path, policy, **_stamped(cfg, seed), inputs=[str(p) for p in args.input])
    print(f"fitted {cfg.learner.kind} policy on {len(ds)} trajectories, NLL {policy.nll(ds):.4f} -> {path}")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    cfg = _apply_flags(cfg, args, {"n_rollouts": "eval.n_rollouts"})
    policy = load_policy(args.policy)
    problem = build_problem(cfg)
    f_grid = args.f if args.f else list(cfg.eval.f_grid)
    if not f_grid:
        raise ConfigError("eval.f_grid", "empty; pass --f or set eval.f_grid")
    seed = args.seed if args.seed is not None else derive_seed(cfg.root_seed, "eval", 0)
    report = evaluate(policy, problem.target, f_grid, cfg.eval.n_rollouts, seed, optimal_value=problem.optimal_value)
    path = Path(args.out) if args.out else _dirs(cfg)["reports"] / "eval.json"
    _write_json(path, {**report.to_dict(), **_stamped(cfg, seed)})
    for f, m, se, ex, sub in zip(report.f_grid, report.mean_return, report.std_error, report.exact_return,
                                  report.suboptimality):
        print(f"f={f:g}: MC {m:.4f} +- {se:.4f}, exact {ex:.6f}, suboptimality {sub:.6f}")
    return EXIT_OK


def cmd_experiment(cfg, args) -> int:
    reports_dir = _dirs(cfg)["reports"]
    writer = ReportWriter(reports_dir, cfg.stamp())
    jobs = args.jobs or default_jobs()
    reports = run_matrix(cfg, jobs=jobs, on_seed=lambda seed, reps: writer.write(reps))
    summary = writer.close(reports)
    failed = sum(1 for r in reports if "error" in r.diagnostics)
    for method, s in summary["methods"].items():
        print(f"{method:18s} mean return {s['mean_return']:.4f} +- {s['std_error']:.4f} ({s['n_seeds']} seeds)")
    print(f"{len(reports)} reports ({failed} failed) -> {writer.csv_path}")
    return EXIT_OK


def cmd_rate_study(cfg, args) -> int:
    n_grid = args.n_grid or list(cfg.rate_study.n_grid)
    if args.n_grid:
        cfg = override(cfg, "rate_study.n_grid", list(n_grid))
    result = rate_study(cfg, n_grid, jobs=args.jobs or default_jobs())
    path = _write_json(_dirs(cfg)["reports"] / "rate_study.json", {**result.to_dict(), **cfg.stamp()})
    for n, m in zip(result.n_grid, result.median_suboptimality):
        print(f"N={n:6d} median suboptimality {m:.6f}")
    print(f"log-log slope {result.slope:.4f} -> {path}")
    return EXIT_OK


def _inspect_dataset(path: Path) -> None:
    ds = load(path)
    returns = ds.rtg[:, 0] if len(ds) else np.zeros(0)
    print(f"dataset {path}: {len(ds)} trajectories, horizon {ds.horizon}, "
          f"|S|={ds.num_states}, |A|={ds.num_actions}")
    print(f"  tags: {ds.tag_counts()}")
    if len(ds):
        print(f"  return mean {returns.mean():.4f}, min {returns.min():g}, max {returns.max():g}")
        print(f"  default f_grid: {default_f_grid(returns)}")
    for key in ("mdp_fingerprint", "psi_kind", "psi_params", "psi_diagnostics", "config_hash", "tool_version", "seed"):
        if key in ds.meta:
            print(f"  {key}: {ds.meta[key]}")


def cmd_inspect(cfg, args) -> int:
    path = Path(args.path)
    if path.suffix == ".jsonl":
        _inspect_dataset(path)
        return EXIT_OK
    doc = json.loads(path.read_text(encoding="utf-8"))
    if "mdp" in doc:
        mdp = TabularMDP.from_dict(doc["mdp"])
        print(f"mdp {mdp.name}: |S|={mdp.num_states} |A|={mdp.num_actions} H={mdp.horizon} "
              f"fingerprint={mdp.fingerprint()}")
    elif doc.get("kind") in ("tabular", "neural"):
        print(f"{doc['kind']} policy {doc.get('policy_id')}")
        if doc["kind"] == "tabular":
            counts = np.asarray(doc["counts"])
            print(f"  table shape {counts.shape}, {int(counts.sum())} counted steps, smoothing {doc['smoothing']}")
        else:
            print(f"  {len(doc['params'])} parameters, final NLL {doc['history'][-1]:.4f}")
    elif "methods" in doc:
        print(f"experiment summary, {len(doc['methods'])} methods")
        for name, row in doc["methods"].items():
            print(f"  {name:<18} {row['mean_return']:.4f} +- {row['std_error']:.4f}  ({row['n_seeds']} seeds)")
    elif "sas" in doc and "sa" in doc:
        print(f"classifier pair: sas {len(doc['sas']['weights'])} weights, sa {len(doc['sa']['weights'])} weights")
    else:
        print(json.dumps({k: v for k, v in doc.items() if not isinstance(v, (list, dict))}, indent=2, sort_keys=True))
    for key in ("config_hash", "tool_version", "seed"):
        value = doc.get(key, doc.get("meta", {}).get(key))
        if value is not None:
            print(f"  {key}: {value}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radt-lab", description="Off-dynamics return-conditioned learning lab.")
    parser.add_argument("--version", action="version", version=f"radt-lab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_text, config_required=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=config_required, help="experiment config (TOML)")
        p.add_argument("--output-dir", help="override output_dir")
        p.add_argument("--seed", type=int, help="seed for this step (default: derived from the root seed)")
        p.set_defaults(func=func)
        return p

    add("make-env", cmd_make_env, "write the target and shifted source MDPs")

    p = add("collect", cmd_collect, "collect trajectories under the behavior policy")
    p.add_argument("--domain", choices=("target", "source"), default="target")
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--jobs", type=int, help="parallel chunks (output is independent of this)")
    p.add_argument("--out", help="output path")

    p = add("train-classifiers", cmd_train_classifiers, "train the source/target domain classifier pair")
    p.add_argument("--source", required=True, help="source dataset")
    p.add_argument("--target", required=True, help="target dataset")
    p.add_argument("--out", help="output path")

    p = add("augment", cmd_augment, "transform source returns-to-go")
    p.add_argument("--input", required=True, help="source dataset")
    p.add_argument("--kind", required=True, choices=[k.value for k in PsiKind])
    p.add_argument("--classifiers", help="classifier pair (dara)")
    p.add_argument("--target", help="target dataset for statistics (mv, mv_empirical)")
    p.add_argument("--clip-lo", type=float, help="override augment.clip_lo")
    p.add_argument("--clip-hi", type=float, help="override augment.clip_hi")
    p.add_argument("--eta", type=float, help="override augment.eta")
    p.add_argument("--out", help="output path")

    p = add("fit", cmd_fit, "fit a return-conditioned policy")
    p.add_argument("--input", required=True, nargs="+", help="dataset(s); several are mixed in order")
    p.add_argument("--learner", choices=("tabular", "neural"), help="override learner.kind")
    p.add_argument("--bin-width", type=float, help="override learner.bin_width")
    p.add_argument("--policy-id", default="rcsl", help="name recorded in reports")
    p.add_argument("--out", help="output path")

    p = add("eval", cmd_eval, "evaluate a policy in the target MDP")
    p.add_argument("--policy", required=True, help="fitted policy")
    p.add_argument("--f", type=float, nargs="+", help="conditioning targets (default: eval.f_grid)")
    p.add_argument("--n-rollouts", type=int, help="override eval.n_rollouts")
    p.add_argument("--out", help="output path")

    p = add("experiment", cmd_experiment, "run the full method x seed matrix")
    p.add_argument("--jobs", type=int, help="worker processes (default: available cores)")

    p = add("rate-study", cmd_rate_study, "median suboptimality against total sample size")
    p.add_argument("--n-grid", type=int, nargs="+", help="override rate_study.n_grid")
    p.add_argument("--jobs", type=int, help="worker processes (default: available cores)")

    p = add("inspect", cmd_inspect, "summarise a dataset, model or report file", config_required=False)
    p.add_argument("path", help="file to inspect")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"radt-lab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = ExperimentConfig()
        if args.output_dir:
            cfg = override(cfg, "output_dir", args.output_dir)
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise ConfigError("jobs", "must be at least 1")
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"radt-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"radt-lab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

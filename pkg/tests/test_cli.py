import json

import numpy as np
import pytest

from radt_lab.cli import main
from radt_lab.data import load

TINY = """
name = "tiny"
seeds = 2
output_dir = "{out}"

[env]
name = "chainwalk"

[data]
n_target_small = 20
n_target_large = 40
n_source = 60

[classifier]
epochs = 5

[eval]
f_grid = [1.0]
n_rollouts = 100

[rate_study]
n_grid = [40, 80, 160]
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(out=(tmp_path / "out").as_posix()))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_unknown_subcommand_exits_2(capsys):
    assert run("frobnicate") == 2
    assert "usage" in capsys.readouterr().err.lower()
    assert run() == 2


def test_collect_n_zero_is_a_config_error(cfg_path, capsys):
    assert run("collect", "--config", cfg_path, "--n", "0") == 2
    assert "collect.n" in capsys.readouterr().err


def test_bad_config_key_reports_path(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[data]\nn_sauce = 3\n")
    assert run("make-env", "--config", bad) == 2
    assert "data.n_sauce" in capsys.readouterr().err


def test_runtime_failure_exits_3(cfg_path, tmp_path):
    missing = tmp_path / "missing.jsonl"
    assert run("fit", "--config", cfg_path, "--input", missing) == 3


def test_full_pipeline(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("make-env", "--config", cfg_path) == 0
    assert (out / "models" / "target_mdp.json").exists()
    assert run("collect", "--config", cfg_path, "--domain", "target", "--n", 30) == 0
    assert run("collect", "--config", cfg_path, "--domain", "source", "--n", 60, "--jobs", 2) == 0
    target = out / "datasets" / "target.jsonl"
    source = out / "datasets" / "source.jsonl"
    assert run("train-classifiers", "--config", cfg_path, "--source", source, "--target", target) == 0
    classifiers = out / "models" / "classifiers.json"
    for kind, extra in [
        ("identity", []),
        ("dara", ["--classifiers", classifiers]),
        ("mv_empirical", ["--target", target]),
        ("exact_cdf", []),
    ]:
        assert run("augment", "--config", cfg_path, "--input", source, "--kind", kind, *extra) == 0
    aug = out / "datasets" / "augmented_exact_cdf.jsonl"
    policy = out / "models" / "policy.json"
    assert run("fit", "--config", cfg_path, "--input", target, aug) == 0
    assert run("eval", "--config", cfg_path, "--policy", policy, "--f", 0, 1) == 0
    report = json.loads((out / "reports" / "eval.json").read_text())
    assert report["f_grid"] == [0.0, 1.0]
    assert report["config_hash"]
    for path in (target, policy, classifiers, out / "models" / "target_mdp.json"):
        assert run("inspect", path) == 0
    assert "config_hash" in capsys.readouterr().out


def test_augment_header_round_trip(cfg_path, tmp_path):
    out = tmp_path / "out"
    run("collect", "--config", cfg_path, "--domain", "target")
    run("collect", "--config", cfg_path, "--domain", "source")
    dest = tmp_path / "mv.jsonl"
    code = run(
        "augment", "--config", cfg_path, "--input", out / "datasets" / "source.jsonl", "--kind", "mv",
        "--target", out / "datasets" / "target.jsonl", "--clip-lo", 0.9, "--clip-hi", 1.25, "--out", dest,
    )
    assert code == 0
    ds = load(dest)
    assert ds.meta["psi_kind"] == "mv"
    assert ds.meta["psi_params"]["theta_lo"] == 0.9
    assert ds.meta["psi_params"]["theta_hi"] == 1.25
    assert {"config_hash", "tool_version", "seed"} <= set(ds.meta)
    source = load(out / "datasets" / "source.jsonl")
    assert np.array_equal(ds.states, source.states)


def test_augment_missing_inputs_are_config_errors(cfg_path, tmp_path):
    run("collect", "--config", cfg_path, "--domain", "source")
    src = tmp_path / "out" / "datasets" / "source.jsonl"
    assert run("augment", "--config", cfg_path, "--input", src, "--kind", "dara") == 2
    assert run("augment", "--config", cfg_path, "--input", src, "--kind", "mv") == 2


def test_collect_is_reproducible(cfg_path, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("collect", "--config", cfg_path, "--out", a) == 0
    assert run("collect", "--config", cfg_path, "--out", b, "--jobs", 3) == 0
    assert a.read_bytes() == b.read_bytes()


def test_seed_env_var_changes_collection(cfg_path, tmp_path, monkeypatch):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run("collect", "--config", cfg_path, "--out", a)
    monkeypatch.setenv("RADT_LAB_SEED", "11")
    run("collect", "--config", cfg_path, "--out", b)
    assert load(b).meta["root_seed"] == 11
    assert a.read_bytes() != b.read_bytes()


def test_experiment_and_rate_study(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("experiment", "--config", cfg_path, "--jobs", 1) == 0
    first = (out / "reports" / "reports.csv").read_bytes()
    assert run("inspect", out / "reports" / "summary.json") == 0
    assert "RADT-ExactCDF" in capsys.readouterr().out
    assert run("experiment", "--config", cfg_path, "--jobs", 2) == 0
    assert (out / "reports" / "reports.csv").read_bytes() == first
    assert run("rate-study", "--config", cfg_path, "--jobs", 1) == 0
    study = json.loads((out / "reports" / "rate_study.json").read_text())
    assert study["n_grid"] == [40, 80, 160]
    assert np.isfinite(study["slope"])


def test_output_dir_flag_and_jobs_validation(cfg_path, tmp_path):
    elsewhere = tmp_path / "elsewhere"
    assert run("make-env", "--config", cfg_path, "--output-dir", elsewhere) == 0
    assert (elsewhere / "models" / "source_mdp.json").exists()
    assert run("experiment", "--config", cfg_path, "--jobs", 0) == 2

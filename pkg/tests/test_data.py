import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chi2_pvalue
from radt_lab.augment import estimate_return_stats, psi_mean_variance, ClipConfig
from radt_lab.data import (
    Dataset,
    DomainTag,
    Trajectory,
    collect,
    consistent_return_slices,
    load,
    mix,
    returns_to_go,
    save,
)
from radt_lab.dp import policy_value
from radt_lab.envs import deterministic_chain
from radt_lab.mdp import StationaryPolicy


def test_collect_is_deterministic_and_populates_rtg(chain, uniform):
    a = collect(chain, uniform, 300, seed=4)
    b = collect(chain, uniform, 300, seed=4)
    assert a == b
    np.testing.assert_array_equal(a.rtg, returns_to_go(a.rewards))
    np.testing.assert_array_equal(a.rtg[:, 0], a.rewards.sum(axis=1))
    assert a.meta["mdp_fingerprint"] == chain.fingerprint()
    assert a.meta["behavior_policy_id"] == "uniform"
    assert a.meta["seed"] == 4


def test_parallel_collection_equals_serial(chain, uniform):
    serial = collect(chain, uniform, 5000, seed=1, jobs=1)
    parallel = collect(chain, uniform, 5000, seed=1, jobs=4)
    assert serial == parallel


def test_trajectories_depend_only_on_seed_and_index(chain, uniform):
    short = collect(chain, uniform, 1500, seed=2)
    long = collect(chain, uniform, 3000, seed=2)
    assert short.same_arrays(long.subset(np.arange(1500)))


def test_deterministic_mdp_and_policy_repeat_one_trajectory():
    mdp = deterministic_chain(4, 4)
    pi = StationaryPolicy.deterministic(np.ones((4, 4), int), 2)
    ds = collect(mdp, pi, 50, seed=0)
    assert np.all(ds.states == ds.states[0])
    assert np.all(ds.actions == ds.actions[0])


def test_single_trajectory(chain, uniform):
    ds = collect(chain, uniform, 1, seed=0)
    assert len(ds) == 1
    assert ds.trajectory(0).horizon == chain.horizon


@pytest.mark.parametrize("n", [0, -3, 2.5])
def test_collect_rejects_bad_counts(chain, uniform, n):
    with pytest.raises(ValueError):
        collect(chain, uniform, n, seed=0)


def test_mean_return_matches_exact_value(chain, uniform):
    ds = collect(chain, uniform, 10**5, seed=11)
    g = ds.rtg[:, 0]
    assert abs(g.mean() - policy_value(chain, uniform)) <= 3 * g.std() / np.sqrt(len(g))


def test_empirical_transitions_pass_chi_square(chain, uniform):
    ds = collect(chain, uniform, 10**5, seed=12)
    s, a, s2 = ds.states[:, :-1].ravel(), ds.actions.ravel(), ds.states[:, 1:].ravel()
    for si in range(5):
        for ai in range(2):
            hit = (s == si) & (a == ai)
            if hit.sum() < 50:
                continue
            obs = np.bincount(s2[hit], minlength=5)
            assert chi2_pvalue(obs, chain.transition[si, ai]) > 1e-3


def _traj(rewards, rtg=None, seed=0):
    rewards = np.asarray(rewards, float)
    H = len(rewards)
    rng = np.random.default_rng(seed)
    return Trajectory(
        rng.integers(0, 3, H),
        rng.integers(0, 2, H),
        rewards,
        returns_to_go(rewards) if rtg is None else np.asarray(rtg, float),
        0,
        DomainTag.SOURCE,
    )


def test_slices_of_unaugmented_trajectory_match_original_rtg():
    traj = _traj([1.0, 0.0, 2.0, 1.0, 3.0])
    windows = consistent_return_slices(traj, 3)
    assert len(windows) == 5 - 3 + 1
    for w in windows:
        np.testing.assert_array_equal(w.rtg, traj.rtg[w.start : w.start + 3])


def test_slices_of_zeroed_rtg_follow_the_recurrence():
    traj = _traj([1.0, 2.0, 3.0, 4.0], rtg=[0, 0, 0, 0])
    for w in consistent_return_slices(traj, 2):
        assert w.rtg.tolist() == [w.rewards[0], 0.0]


def test_slices_after_mean_variance_augmentation_are_consistent(chain_pair, uniform):
    target, source = chain_pair
    ds = collect(source, uniform, 200, seed=3, domain="source")
    stats_s = estimate_return_stats(source, "exact_dp", uniform)
    stats_t = estimate_return_stats(target, "exact_dp", uniform)
    aug = psi_mean_variance(ds, stats_s, stats_t, ClipConfig(1e-3, 1e3))
    for i in range(len(aug.dataset)):
        traj = aug.dataset.trajectory(i)
        for w in consistent_return_slices(traj, 3):
            # independent rescan: walk forward accumulating rewards from the anchor
            anchor = traj.rtg[w.start + len(w) - 1]
            expected = [anchor + w.rewards[j:-1].sum() for j in range(len(w))]
            np.testing.assert_allclose(w.rtg, expected, atol=1e-12)


def test_partial_windows_are_opt_in():
    traj = _traj([1.0, 1.0, 1.0, 1.0])
    assert len(consistent_return_slices(traj, 3)) == 2
    with_partial = consistent_return_slices(traj, 3, include_partial=True)
    assert len(with_partial) == 4
    assert with_partial[-1].rtg.tolist() == [traj.rtg[-1]]


def test_slice_length_validated():
    traj = _traj([1.0, 2.0])
    with pytest.raises(ValueError):
        consistent_return_slices(traj, 0)
    with pytest.raises(ValueError):
        consistent_return_slices(traj, 3)


@settings(max_examples=200, deadline=None)
@given(
    rewards=st.lists(st.integers(-3, 3), min_size=1, max_size=8),
    noise=st.lists(st.floats(-5, 5, allow_nan=False), min_size=8, max_size=8),
    data=st.data(),
)
def test_slices_are_consistent_for_arbitrary_rtg(rewards, noise, data):
    H = len(rewards)
    k = data.draw(st.integers(1, H))
    rtg = np.asarray(noise[:H])
    traj = _traj(rewards, rtg=rtg)
    windows = consistent_return_slices(traj, k)
    assert len(windows) == H - k + 1
    for w in windows:
        assert w.rtg[-1] == traj.rtg[w.start + k - 1]
        for i in range(k - 1):
            assert w.rtg[i] == w.rewards[i] + w.rtg[i + 1]


def test_mix_cardinality_tags_and_identity(chain_pair, uniform):
    target, source = chain_pair
    t = collect(target, uniform, 100, seed=1)
    s = collect(source, uniform, 1000, seed=2, domain="source")
    m = mix(t, s, seed=5)
    assert len(m) == 1100
    assert m.tag_counts() == {"target": 100, "source": 1000}
    assert m.meta["mix"]["shuffle_seed"] == 5
    unshuffled = mix(t, s)
    assert np.all(unshuffled.domain[:100] == 1) and np.all(unshuffled.domain[100:] == 0)
    empty = Dataset.empty(5, 2, 5)
    assert mix(t, empty) is t


def test_mix_rejects_shape_mismatch(chain, uniform):
    t = collect(chain, uniform, 5, seed=1)
    with pytest.raises(ValueError):
        mix(t, Dataset.empty(4, 2, 5))


@pytest.mark.parametrize("n", [0, 1, 10**4])
def test_save_load_round_trip(tmp_path, chain, uniform, n):
    ds = Dataset.empty(5, 2, 5, note="empty") if n == 0 else collect(chain, uniform, n, seed=7)
    path = save(ds, tmp_path / "d.jsonl")
    assert load(path) == ds


def test_round_trip_preserves_mixed_tags_and_order(tmp_path, chain_pair, uniform):
    target, source = chain_pair
    m = mix(collect(target, uniform, 30, seed=1), collect(source, uniform, 70, seed=2, domain="source"), seed=3)
    back = load(save(m, tmp_path / "m.jsonl"))
    assert back == m
    np.testing.assert_array_equal(back.domain, m.domain)


def test_load_reports_malformed_files(tmp_path, chain, uniform):
    path = save(collect(chain, uniform, 3, seed=0), tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join([lines[0], "{not json", *lines[2:]]))
    with pytest.raises(ValueError, match="line 2"):
        load(bad)
    header = json.loads(lines[0])
    header["count"] = 9
    bad.write_text("\n".join([json.dumps(header), *lines[1:]]))
    with pytest.raises(ValueError, match="declares"):
        load(bad)
    bad.write_text("")
    with pytest.raises(ValueError):
        load(bad)


def test_fingerprint_mismatch_warns(tmp_path, chain, uniform):
    path = save(collect(chain, uniform, 3, seed=0), tmp_path / "d.jsonl")
    with pytest.warns(UserWarning, match="fingerprint"):
        load(path, expected_fingerprint="0" * 16)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load(path, expected_fingerprint=chain.fingerprint())

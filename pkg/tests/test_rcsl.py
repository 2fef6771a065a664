from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import enumerate_paths
from radt_lab.data import Dataset, collect
from radt_lab.dp import joint_occupancy, policy_value
from radt_lab.envs import deterministic_chain
from radt_lab.mdp import StationaryPolicy, TabularMDP
from radt_lab.rcsl import (
    ConditioningFunction,
    CoverageError,
    DivergenceError,
    NeuralConfig,
    OracleRcslPolicy,
    ReturnBinner,
    TabularRcslPolicy,
    act,
    fit_neural,
    fit_tabular,
    load_policy,
    nll_and_grad,
    num_parameters,
    oracle_rcsl_policy,
    rollout,
    rollouts,
    save_policy,
)
from radt_lab.rng import make_rng


def _dataset(states, actions, rtg, S, A):
    """Hand-built dataset with given per-step states, actions and returns-to-go."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    N, H = actions.shape
    full = np.concatenate([states, states[:, -1:]], axis=1)
    rtg = np.asarray(rtg, float)
    rewards = rtg - np.concatenate([rtg[:, 1:], np.zeros((N, 1))], axis=1)
    return Dataset(full, actions, rewards, rtg, np.ones(N, np.int8), S, A, {})


@pytest.fixture(scope="module")
def chain_data():
    from radt_lab.envs import chain_walk

    mdp = chain_walk()
    beta = StationaryPolicy.uniform(mdp)
    return mdp, beta, collect(mdp, beta, 10**5, seed=17)


# ---- binning and the tabular learner --------------------------------------


def test_binner_puts_grid_returns_on_centres():
    b = ReturnBinner(0.5, origin=-1.0)
    g = -1.0 + 0.5 * np.arange(-3, 8)
    k = b.index(g)
    np.testing.assert_array_equal(k, np.arange(-3, 8))
    np.testing.assert_allclose(b.center(k), g)
    with pytest.raises(ValueError):
        ReturnBinner(0.0)


def test_tabular_purity():
    # action = (s + g) mod 2
    rng = make_rng("purity", 0)
    s = rng.integers(0, 3, (200, 4))
    g = rng.integers(0, 3, (200, 4)).astype(float)
    a = ((s + g) % 2).astype(int)
    pol = fit_tabular(_dataset(s, a, g, 3, 2), time_indexed=False)
    for si in range(3):
        for gi in range(3):
            probs, seen = pol.action_probs(np.array([0]), np.array([si]), np.array([float(gi)]))
            assert seen[0]
            assert probs[0, (si + gi) % 2] == 1.0


def test_tabular_matches_exact_conditional_on_chain(chain_data):
    mdp, beta, ds = chain_data
    pol = fit_tabular(ds, time_indexed=False)
    # pooled over time: d(a | s, g) = sum_t d_t(s, a, g) / sum_t d_t(s, g)
    joint = joint_occupancy(mdp, beta).mass.sum(axis=0)  # (S, A, G)
    denom = joint.sum(axis=1)
    worst = 0.0
    for s in range(5):
        for k in range(joint.shape[-1]):
            if denom[s, k] <= 0:
                continue
            g = (joint_occupancy(mdp, beta).lo + k) * mdp.reward_grid
            probs, seen = pol.action_probs(np.array([0]), np.array([s]), np.array([g]))
            if not seen[0]:
                continue
            worst = max(worst, np.max(np.abs(probs[0] - joint[s, :, k] / denom[s, k])))
    assert worst <= 0.02


def test_smoothing_limit_is_uniform(chain, uniform):
    ds = collect(chain, uniform, 200, seed=1)
    pol = fit_tabular(ds, smoothing=1e12)
    probs, _ = pol.action_probs(np.zeros(5, int), np.arange(5), np.zeros(5))
    np.testing.assert_allclose(probs, 0.5, atol=1e-9)


def test_unseen_return_falls_back_to_uniform(chain, uniform):
    pol = fit_tabular(collect(chain, uniform, 50, seed=1))
    probs, seen = pol.action_probs(np.array([0]), np.array([0]), np.array([99.0]))
    assert not seen[0]
    np.testing.assert_allclose(probs, 0.5)


def test_tabular_rows_sum_to_one(chain, uniform):
    pol = fit_tabular(collect(chain, uniform, 300, seed=2), smoothing=0.5)
    t, s, g = np.meshgrid(np.arange(5), np.arange(5), np.arange(-1, 7, dtype=float), indexing="ij")
    probs, _ = pol.action_probs(t.ravel(), s.ravel(), g.ravel())
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 1.0))
def test_counts_maximise_the_likelihood(seed, scale):
    rng = make_rng("mle", seed)
    s = rng.integers(0, 2, (30, 3))
    g = rng.integers(0, 2, (30, 3)).astype(float)
    a = rng.integers(0, 3, (30, 3))
    ds = _dataset(s, a, g, 2, 3)
    pol = fit_tabular(ds, time_indexed=False)
    best = pol.nll(ds)
    # any other strictly positive table does no better
    noise = rng.normal(scale=scale, size=pol.counts.shape)
    other = pol.counts + 1e-3 + np.abs(noise)
    rival = TabularRcslPolicy(other, pol.binner, pol.bin_offset, 0.0, False)
    assert best <= rival.nll(ds) + 1e-12


def test_fit_rejects_empty_dataset():
    empty = Dataset.empty(3, 2, 4)
    with pytest.raises(ValueError):
        fit_tabular(empty)
    with pytest.raises(ValueError):
        fit_neural(empty)


def test_time_indexed_counts_are_exact(chain, uniform):
    ds = collect(chain, uniform, 40, seed=3)
    pol = fit_tabular(ds)
    assert pol.counts.sum() == ds.actions.size
    assert pol.counts[0].sum() == len(ds)
    t, i = 2, 5
    k = pol.binner.index(ds.rtg[i, t]) - pol.bin_offset
    assert pol.counts[t, ds.states[i, t], k, ds.actions[i, t]] >= 1


# ---- neural learner -------------------------------------------------------


@pytest.mark.parametrize("point", range(10))
def test_neural_gradient_matches_finite_differences(point):
    rng = make_rng("gradcheck-neural", point)
    S, A, width = 3, 3, 5
    d_in = S + 1
    params = rng.normal(size=num_parameters(d_in, width, A))
    x = np.zeros((16, d_in))
    x[np.arange(16), rng.integers(0, S, 16)] = 1.0
    x[:, -1] = rng.normal(size=16)
    y = rng.integers(0, A, 16)
    _, grad = nll_and_grad(params, x, y, width, A)
    h = 1e-5
    for i in range(params.size):
        up, down = params.copy(), params.copy()
        up[i] += h
        down[i] -= h
        numeric = (nll_and_grad(up, x, y, width, A)[0] - nll_and_grad(down, x, y, width, A)[0]) / (2 * h)
        assert abs(grad[i] - numeric) <= 1e-4 * max(abs(numeric), 1e-6)


def test_neural_single_mode_concentrates():
    ds = _dataset(np.ones((50, 2), int), np.full((50, 2), 2), np.full((50, 2), 1.0), 3, 3)
    pol = fit_neural(ds, NeuralConfig(width=8, lr=0.05, epochs=60, batch=16))
    probs, _ = pol.action_probs(0, np.array([1]), np.array([1.0]))
    assert probs[0, 2] >= 0.99
    assert pol.history[-1] <= pol.history[0]


def test_neural_nll_close_to_tabular_optimum(chain, uniform):
    ds = collect(chain, uniform, 2000, seed=9)
    pol = fit_neural(ds, NeuralConfig(epochs=30, lr=3e-3, seed=1))
    # the network sees (s, g) but not t, so the matching optimum is the pooled table
    optimum = fit_tabular(ds, time_indexed=False).nll(ds)
    assert pol.history[-1] <= pol.history[0]
    assert pol.nll(ds) <= 1.05 * optimum
    probs, _ = pol.action_probs(0, np.arange(5), np.zeros(5))
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_neural_divergence_is_reported(chain, uniform):
    ds = collect(chain, uniform, 20, seed=0)
    with pytest.raises(DivergenceError) as info:
        fit_neural(ds, NeuralConfig(width=4, lr=1e308, epochs=5, batch=8, init_scale=1e150))
    assert info.value.last_finite_epoch >= -1


def test_neural_training_is_seeded(chain, uniform):
    ds = collect(chain, uniform, 50, seed=0)
    cfg = NeuralConfig(width=6, epochs=3, seed=4)
    assert np.array_equal(fit_neural(ds, cfg).params, fit_neural(ds, cfg).params)


def test_policies_round_trip_through_json(tmp_path, chain, uniform):
    ds = collect(chain, uniform, 60, seed=0)
    for pol in (fit_tabular(ds, smoothing=0.25), fit_neural(ds, NeuralConfig(width=4, epochs=2))):
        save_policy(tmp_path / "p.json", pol, note="x")
        back = load_policy(tmp_path / "p.json")
        t, s, g = np.zeros(5, int), np.arange(5), np.ones(5)
        np.testing.assert_array_equal(back.action_probs(t, s, g)[0], pol.action_probs(t, s, g)[0])


# ---- infinite-data oracle -------------------------------------------------


def test_oracle_single_step_is_forced_by_the_target():
    p = np.ones((1, 3, 1))
    mdp = TabularMDP(p, [[0.0, 1.0, 2.0]], [1.0], 1)
    beta = StationaryPolicy.uniform(mdp)
    for a in range(3):
        probs = oracle_rcsl_policy(mdp, beta, float(a), 0, 0)
        assert probs.tolist() == [1.0 if b == a else 0.0 for b in range(3)]


def test_oracle_matches_path_enumeration(chain, uniform):
    t, s, f = 0, 0, 1.0  # first step; from state 0 at step 1 the goal is out of reach
    probs = oracle_rcsl_policy(chain, uniform, f, t, s)
    weight = defaultdict(float)
    for prob, states, actions, rewards in enumerate_paths(chain, uniform):
        if states[t] == s and sum(rewards[t:]) == f:
            weight[actions[t]] += prob
    total = sum(weight.values())
    for a in range(2):
        assert probs[a] == pytest.approx(weight[a] / total, abs=1e-12)


def test_oracle_coverage_errors(chain, uniform):
    with pytest.raises(CoverageError, match="grid"):
        oracle_rcsl_policy(chain, uniform, 0.5, 0, 0)
    with pytest.raises(CoverageError, match="coverage"):
        oracle_rcsl_policy(chain, uniform, 5.0, 0, 0)  # needs reward at t=0 from state 0
    with pytest.raises(CoverageError, match="coverage"):
        oracle_rcsl_policy(chain, uniform, 1.0, 1, 0)


def test_oracle_with_max_return_beats_behavior(chain_data):
    mdp, beta, ds = chain_data
    pol = OracleRcslPolicy.from_mdp(mdp, beta)
    f = float(ds.rtg[:, 0].max())
    batch = rollouts(pol, mdp, f, 10**4, seed=2)
    assert batch.returns.mean() >= policy_value(mdp, beta)


# ---- acting and rollouts --------------------------------------------------


def test_deterministic_policy_rollouts_reproduce(chain):
    mdp = deterministic_chain(4, 4)
    pure = _dataset(np.zeros((3, 4), int), np.ones((3, 4), int), np.zeros((3, 4)), 4, 2)
    pol = fit_tabular(pure, time_indexed=False)
    a = rollout(pol, mdp, 0.0, seed=5)
    b = rollout(pol, mdp, 0.0, seed=5)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
    other = rollouts(fit_tabular(collect(chain, StationaryPolicy.uniform(chain), 100, seed=0)), chain, 1.0, 20, 3)
    again = rollouts(fit_tabular(collect(chain, StationaryPolicy.uniform(chain), 100, seed=0)), chain, 1.0, 20, 3)
    assert np.array_equal(other.actions, again.actions)


def test_conditioning_identity_holds_every_step(chain_data):
    mdp, beta, ds = chain_data
    pol = fit_tabular(ds.subset(np.arange(2000)))
    batch = rollouts(pol, mdp, ConditioningFunction(2.0), 500, seed=8)
    spent = np.concatenate([np.zeros((500, 1)), np.cumsum(batch.rewards, axis=1)[:, :-1]], axis=1)
    assert np.array_equal(batch.targets, 2.0 - spent)


def test_zero_reward_mdp_keeps_target_at_zero():
    mdp = TabularMDP(np.full((2, 2, 2), 0.5), np.zeros((2, 2)), [0.5, 0.5], 6)
    pol = fit_tabular(collect(mdp, StationaryPolicy.uniform(mdp), 30, seed=0))
    batch = rollouts(pol, mdp, 0.0, 50, seed=1)
    assert np.all(batch.targets == 0.0)
    assert batch.fallbacks == 0


def test_act_is_seeded_and_valid(chain, uniform):
    pol = fit_tabular(collect(chain, uniform, 100, seed=0))
    draws = [act(pol, 0, 0, 1.0, seed) for seed in range(30)]
    assert set(draws) <= {0, 1}
    assert draws == [act(pol, 0, 0, 1.0, seed) for seed in range(30)]


def test_rollouts_validate_count(chain, uniform):
    pol = fit_tabular(collect(chain, uniform, 10, seed=0))
    with pytest.raises(ValueError):
        rollouts(pol, chain, 1.0, 0, seed=0)

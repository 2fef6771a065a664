"""Independent brute-force oracles shared by the tests."""

import itertools

import numpy as np


def enumerate_paths(mdp, policy):
    """Every (probability, states, actions, rewards) path of positive probability.

    Brute force over all state/action sequences; used as an independent oracle.
    """
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    out = []

    def rec(t, prob, states, actions, rewards):
        if t == H:
            out.append((prob, tuple(states), tuple(actions), tuple(rewards)))
            return
        s = states[-1]
        for a in range(A):
            pa = policy.probs[t, s, a]
            if pa == 0:
                continue
            r = mdp.reward[s, a]
            if t == H - 1:
                rec(t + 1, prob * pa, states, actions + [a], rewards + [r])
                continue
            for s2 in range(S):
                ps = mdp.transition[s, a, s2]
                if ps > 0:
                    rec(t + 1, prob * pa * ps, states + [s2], actions + [a], rewards + [r])

    for s0 in range(S):
        if mdp.initial_dist[s0] > 0:
            rec(0, mdp.initial_dist[s0], [s0], [], [])
    return out


def open_loop_values(mdp):
    """Expected return of every open-loop action sequence."""
    values = {}
    for plan in itertools.product(range(mdp.num_actions), repeat=mdp.horizon):
        d = mdp.initial_dist.copy()
        total = 0.0
        for a in plan:
            total += float(d @ mdp.reward[:, a])
            d = d @ mdp.transition[:, a, :]
        values[plan] = total
    return values


def chi2_pvalue(observed, expected_probs):
    """Pearson goodness of fit, merging expected cells below 5 into their neighbour."""
    from scipy import stats

    observed = np.asarray(observed, float)
    expected = np.asarray(expected_probs, float) * observed.sum()
    keep = expected > 0
    if np.any(observed[~keep] > 0):
        return 0.0
    observed, expected = observed[keep], expected[keep]
    # merge small cells from the left
    obs_m, exp_m = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= 5:
            obs_m.append(acc_o)
            exp_m.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0:
        if exp_m:
            obs_m[-1] += acc_o
            exp_m[-1] += acc_e
        else:
            obs_m.append(acc_o)
            exp_m.append(acc_e)
    if len(exp_m) < 2:
        return 1.0
    return float(stats.chisquare(obs_m, exp_m).pvalue)

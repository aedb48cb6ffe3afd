from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkrl.envs import (
    BehaviorPolicySpec,
    ChainEnv,
    PointMassEnv,
    TabularEnv,
    TwoPhaseGridEnv,
    expert_policy,
    generate_dataset,
    make_env,
    markov_behavior_table,
)
from chunkrl.mdp import load_dataset, save_dataset


def _envs():
    return [ChainEnv(L=6), ChainEnv(L=5, p_slip=0.2), TwoPhaseGridEnv(), TwoPhaseGridEnv(W=6, H=4, p_contact=0.4)]


@pytest.mark.parametrize("env", _envs(), ids=lambda e: f"{e.name}-{e.n_states}")
def test_transition_tensors_are_stochastic_and_goal_absorbs(env):
    for t in range(6):
        P = env.transition_tensor(t)
        np.testing.assert_allclose(P.sum(-1), 1.0)
        assert np.all(P[env.goal, :, env.goal] == 1.0)
    R = env.reward_tensor()
    assert np.all(R[env.goal] == 0.0)
    assert np.all(R[:, :, env.goal] == 0.0)
    assert set(np.unique(R)) <= {-1.0, 0.0}


def test_sampled_steps_match_tensor():
    env = TwoPhaseGridEnv(p_contact=0.4)
    s = env.index(3, 2)
    counts = np.zeros(env.n_states)
    n = 20000
    for i in range(n):
        env.reset(seed=i, state=s)
        s2, _, _ = env.step(TwoPhaseGridEnv.RIGHT)
        counts[s2] += 1
    P = env.transition_tensor(0)[s, TwoPhaseGridEnv.RIGHT]
    assert np.max(np.abs(counts / n - P)) < 0.015


def test_open_loop_perturbation_grows_then_saturates():
    env = TwoPhaseGridEnv(p_contact=0.3, tau_acc=2.0, p_max=0.6)
    s = env.index(4, 0)
    probs = [env.perturb_prob(s, t) for t in range(6)]
    assert probs == pytest.approx([0.3, 0.45, 0.6, 0.6, 0.6, 0.6])
    assert env.perturb_prob(env.index(0, 0), 5) == 0.0
    assert env.open_loop_key(10) == env.open_loop_key(2)


def test_step_contract():
    env = ChainEnv(L=4)
    with pytest.raises(RuntimeError):
        env.state
    env.reset(0)
    with pytest.raises(ValueError):
        env.step(2)
    rewards = [env.step(1)[1] for _ in range(3)]
    assert rewards == [-1.0, -1.0, 0.0] and env.done and env.reached_goal
    with pytest.raises(RuntimeError):
        env.step(1)


def test_time_limit():
    env = ChainEnv(L=5, T_max=3)
    env.reset(0)
    for _ in range(3):
        _, _, done = env.step(0)
    assert done and not env.reached_goal


@pytest.mark.parametrize("bad", [dict(L=2), dict(p_slip=0.5)])
def test_chain_validation(bad):
    with pytest.raises(ValueError):
        ChainEnv(**bad)


@pytest.mark.parametrize("bad", [dict(p_contact=0.0), dict(p_contact=0.7, p_max=0.8), dict(contact_width=5),
                                 dict(goal=(0, 2))])
def test_grid_validation(bad):
    with pytest.raises(ValueError):
        TwoPhaseGridEnv(**bad)


def test_make_env_roundtrips_params():
    for env in _envs() + [PointMassEnv()]:
        clone = make_env(env.name, env.params())
        assert clone.params() == env.params()
    with pytest.raises(ValueError):
        make_env("maze")


def test_expert_is_optimal_on_chain():
    assert expert_policy(ChainEnv(L=6)).tolist()[:-1] == [1] * 5


@given(st.floats(0.0, 1.0), st.one_of(st.none(), st.floats(0.0, 1.0)))
@settings(max_examples=25, deadline=None)
def test_markov_behavior_table_is_row_stochastic(eps, eps_c):
    env = TwoPhaseGridEnv()
    pi = markov_behavior_table(env, BehaviorPolicySpec(epsilon=eps, epsilon_contact=eps_c))
    np.testing.assert_allclose(pi.sum(1), 1.0)
    assert np.all(pi >= 0)


def test_behavior_frequencies_match_table():
    env = ChainEnv(L=8)
    spec = BehaviorPolicySpec(epsilon=0.4)
    ds = generate_dataset(env, spec, 300, seed=1)
    pi = markov_behavior_table(env, spec)
    s = np.concatenate([t.states[:-1] for t in ds])
    a = np.concatenate([t.actions for t in ds])
    assert not env.terminal_mask()[s].any()
    # Every non-goal state has the same right-move probability; pool them and allow 4 standard errors.
    assert np.allclose(pi[:-1, 1], pi[0, 1])
    emp = np.mean(a == 1)
    se = np.sqrt(pi[0, 1] * (1 - pi[0, 1]) / len(a))
    assert abs(emp - pi[0, 1]) < 4 * se


def test_persistence_makes_behavior_non_markov():
    with pytest.raises(ValueError):
        markov_behavior_table(ChainEnv(), BehaviorPolicySpec(persistence=0.5))
    env = ChainEnv(L=12)
    ds = generate_dataset(env, BehaviorPolicySpec(epsilon=0.3, persistence=0.9), 200, seed=0)
    a = np.concatenate([t.actions for t in ds])
    left_runs = np.mean((a[1:] == 0) & (a[:-1] == 0)) / max(np.mean(a[:-1] == 0), 1e-9)
    assert left_runs > 0.5


def test_generate_dataset_deterministic(tmp_path):
    env = TwoPhaseGridEnv()
    spec = BehaviorPolicySpec(epsilon=0.3)
    save_dataset(generate_dataset(env, spec, 20, seed=5), tmp_path / "a.jsonl")
    save_dataset(generate_dataset(env, spec, 20, seed=5), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert load_dataset(tmp_path / "a.jsonl").metadata["env"] == "grid"


def test_pointmass_dataset_is_continuous():
    env = PointMassEnv()
    ds = generate_dataset(env, BehaviorPolicySpec(ou_sigma=0.3), 3, seed=0)
    traj = ds.trajectories[0]
    assert traj.states.shape[1] == 4 and traj.actions.shape[1] == 2
    assert np.all(np.abs(traj.actions) <= 1.0)


def test_tabular_env_terminals():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 1] = 1.0
    R = np.full((2, 1, 2), 3.0)
    env = TabularEnv(P, R, terminals=[1])
    assert env.reward_tensor()[1].sum() == 0.0
    env.reset(0)
    assert env.step(0) == (1, 3.0, True)
    with pytest.raises(ValueError):
        TabularEnv(P * 2, R, terminals=[1])

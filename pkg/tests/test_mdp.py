from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import horner_return
from chunkrl.mdp import (
    ChunkBatch,
    Dataset,
    ScaleSet,
    Trajectory,
    chunk_arrays,
    chunk_starts,
    discounted_partial_return,
    extract_chunks,
    load_dataset,
    save_dataset,
)

rewards_st = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30)


@given(rewards_st, st.floats(0.01, 0.999))
def test_partial_return_matches_horner(rewards, gamma):
    assert discounted_partial_return(rewards, gamma) == pytest.approx(horner_return(rewards, gamma), abs=1e-9)


@given(rewards_st, st.floats(0.01, 0.999), st.integers(1, 29))
def test_partial_return_splits_at_any_point(rewards, gamma, j):
    j = min(j, len(rewards) - 1)
    if j == 0:
        return
    whole = discounted_partial_return(rewards, gamma)
    head = discounted_partial_return(rewards[:j], gamma)
    tail = discounted_partial_return(rewards[j:], gamma)
    assert whole == pytest.approx(head + gamma**j * tail, abs=1e-8)


def test_partial_return_rejects_bad_input():
    with pytest.raises(ValueError):
        discounted_partial_return([], 0.9)
    with pytest.raises(ValueError):
        discounted_partial_return([1.0, float("nan")], 0.9)


@given(st.integers(1, 40), st.lists(st.integers(1, 40), min_size=1, max_size=6))
def test_scale_set_from_horizon(h, universe):
    K = ScaleSet.from_horizon(h, universe)
    assert K.h == h
    assert list(K) == sorted(set(K))
    assert all(k <= h for k in K)
    assert set(K) == {k for k in universe if k <= h} | {h}
    assert K.partial() == tuple(k for k in K if k != h)


def test_scale_set_defaults_and_validation():
    assert ScaleSet.from_horizon(5).scales == (1, 5)
    assert ScaleSet.from_horizon(12).scales == (1, 5, 10, 12)
    assert ScaleSet.from_horizon(25).scales == (1, 5, 10, 25)
    for bad in [(), (0, 1), (2, 1), (1, 1)]:
        with pytest.raises(ValueError):
            ScaleSet(bad)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.arange(3), np.arange(3), np.zeros(3), False)
    with pytest.raises(ValueError):
        Trajectory(np.arange(4), np.arange(3), np.zeros(2), False)
    with pytest.raises(ValueError):
        Trajectory(np.arange(3), np.arange(2), np.array([0.0, np.inf]), False)
    t = Trajectory(np.arange(3), np.arange(2), np.zeros(2), True)
    with pytest.raises(ValueError):
        t.states[0] = 5


@pytest.mark.parametrize("T,k,terminal,stride,expected", [
    (5, 2, False, 1, [0, 1, 2, 3]),
    (5, 2, True, 1, [0, 1, 2, 3, 4]),
    (5, 5, False, 1, [0]),
    (4, 5, False, 1, []),
    (4, 5, True, 1, [0, 1, 2, 3]),
    (7, 2, False, 2, [0, 2, 4]),
])
def test_chunk_starts(T, k, terminal, stride, expected):
    assert chunk_starts(T, k, terminal, stride) == expected


def _traj(T, terminal, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory(rng.integers(0, 9, T + 1), rng.integers(0, 2, T), -rng.integers(0, 2, T).astype(float),
                      terminal)


@given(st.integers(1, 12), st.booleans(), st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
@pytest.mark.filterwarnings("ignore:chunk size")
def test_extract_chunks_agrees_with_chunk_arrays(T, terminal, k, seed):
    gamma = 0.9
    traj = _traj(T, terminal, seed)
    items = extract_chunks([traj], k, gamma)
    batch = chunk_arrays([traj], k)
    assert len(items) == len(batch)
    if not items:
        return
    _, a, ret, s_next, mask = batch.prefix(k, gamma)
    for i, tr in enumerate(items):
        assert tr.state == batch.states[i, 0]
        np.testing.assert_array_equal(tr.chunk, a[i])
        assert tr.partial_return == pytest.approx(ret[i], abs=1e-12)
        assert tr.next_state == s_next[i]
        assert tr.mask == mask[i]
        assert tr.partial_return == pytest.approx(horner_return(traj.rewards[tr.start:tr.start + tr.length], gamma))


def test_terminal_tail_padding_and_mask():
    traj = Trajectory(np.array([0, 1, 2]), np.array([1, 0]), np.array([-1.0, 0.0]), True)
    items = extract_chunks([traj], 3, 0.5)
    assert [t.start for t in items] == [0, 1]
    np.testing.assert_array_equal(items[1].chunk, [0, 0, 0])
    assert items[1].mask == 0.0 and items[1].next_state == 2 and items[1].length == 1
    batch = chunk_arrays([traj], 3)
    np.testing.assert_array_equal(batch.alive[0], [True, True, False, False])
    np.testing.assert_array_equal(batch.states[1], [1, 2, 2, 2])


def test_time_limit_episode_has_no_tail():
    traj = _traj(4, terminal=False)
    assert [t.start for t in extract_chunks([traj], 3, 0.9)] == [0, 1]


def test_prefix_consistency_across_scales():
    batch = chunk_arrays([_traj(10, True, 3), _traj(8, False, 4)], 5)
    gamma = 0.95
    for k in range(1, 6):
        s, a, ret, s_next, mask = batch.prefix(k, gamma)
        np.testing.assert_array_equal(s, batch.states[:, 0])
        expected = [horner_return(r[:k], gamma) for r in batch.rewards]
        np.testing.assert_allclose(ret, expected)
    with pytest.raises(ValueError):
        batch.prefix(6, gamma)


def test_concatenate_and_take():
    b = chunk_arrays([_traj(6, True, 1)], 2)
    both = ChunkBatch.concatenate([b, b])
    assert len(both) == 2 * len(b)
    sub = both.take(np.array([0, len(b)]))
    np.testing.assert_array_equal(sub.states[0], sub.states[1])


def test_dataset_roundtrip(tmp_path):
    ds = Dataset([_traj(5, True, 1), _traj(3, False, 2)], {"env": "chain", "discrete": True})
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.metadata["env"] == "chain"
    assert len(back) == 2
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        assert a.terminal == b.terminal
    save_dataset(back, tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == path.read_bytes()


def test_dataset_rejects_unknown_version(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"type": "header", "version": 99}\n')
    with pytest.raises(ValueError):
        load_dataset(p)

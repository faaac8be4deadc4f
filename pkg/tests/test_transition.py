import numpy as np
import pytest

from commdecode.env import (Cell, State, all_cells, all_pairs, decode_batch,
                            encode_batch, move_batch, step)
from commdecode.errors import DomainError
from commdecode.transition import (TransitionData, TransitionModel, dataset_loss,
                                   generate_transitions, one_hot, rollout_accuracy, train_transition)


def test_samples_consistent_with_env(transition_data, grid):
    feats = transition_data.features
    listener, goal = decode_batch(feats, grid)
    nxt = transition_data.next
    assert (nxt[:, :2] == goal).all()
    for i in range(0, len(feats), 97):
        out = step(State(Cell(*listener[i]), Cell(*goal[i])), int(transition_data.actions[i]), grid)
        assert tuple(nxt[i, 2:]) == out.next_state.listener


def test_generation_deterministic(policy5, grid):
    a = generate_transitions(policy5, grid, 3000, np.random.default_rng(4))
    b = generate_transitions(policy5, grid, 3000, np.random.default_rng(4))
    assert len(a) == 3000
    assert np.array_equal(a.features, b.features) and np.array_equal(a.actions, b.actions)


def _greedy_pairs(q, grid):
    mask = q.greedy_mask()
    return {(lc, a) for lc in all_cells(grid) for a in range(4)
            if any(mask[lc[0], lc[1], g[0], g[1], a] for g in all_cells(grid))}


def _covered(data, grid):
    listener, _ = decode_batch(data.features, grid)
    return {(tuple(map(int, l)), int(a)) for l, a in zip(listener, data.actions)}


def test_coverage_of_optimal_play(policy5, q5, grid):
    # every (listener cell, greedy action) pair, including both sides of ties
    data = generate_transitions(policy5, grid, 10_000, np.random.default_rng(6))
    assert _greedy_pairs(q5, grid) <= _covered(data, grid)


def test_argmax_mode_follows_policy(policy5, grid):
    data = generate_transitions(policy5, grid, 2000, np.random.default_rng(6), sample=False)
    listener, goal = decode_batch(data.features, grid)
    assert np.array_equal(data.actions, policy5.act(listener, goal))


def test_untrained_model_is_near_chance(transition_data, policy5, grid):
    model = TransitionModel.init(grid, np.random.default_rng(9))
    pred = model.predict(transition_data.features[:5000], transition_data.actions[:5000])
    listener, goal = decode_batch(pred, grid)
    acc_x = (listener[:, 0] == transition_data.next[:5000, 2]).mean()
    assert acc_x < 0.5
    assert rollout_accuracy(model, policy5, grid, 500, np.random.default_rng(1)) < 0.1


def test_trained_loss_and_accuracy(transition_run, tmodel5, policy5, grid):
    losses = transition_run.losses
    assert len(losses) == 1000
    assert min(losses[-50:]) < 1e-3
    held_out = generate_transitions(policy5, grid, 5000, np.random.default_rng(77))
    pred = tmodel5.predict(held_out.features, held_out.actions)
    truth = encode_batch(held_out.next[:, 2:], held_out.next[:, :2], grid)
    assert (pred == truth).all()
    assert rollout_accuracy(tmodel5, policy5, grid, 1000, np.random.default_rng(3)) == 1.0


def test_goal_factors_identity_on_optimal_play(tmodel5, q5, grid):
    pairs = all_pairs(grid)
    listener = np.array([s.listener for s in pairs])
    goal = np.array([s.goal for s in pairs])
    mask = q5.greedy_mask()[listener[:, 0], listener[:, 1], goal[:, 0], goal[:, 1]]
    rows, acts = np.nonzero(mask)
    pred = tmodel5.predict(encode_batch(listener[rows], goal[rows], grid), acts)
    l2, g2 = decode_batch(pred, grid)
    assert (g2 == goal[rows]).all()
    assert (l2 == move_batch(listener[rows], acts, grid)).all()


def test_distribution_shift_probe(policy5, grid):
    data = generate_transitions(policy5, grid, 60_000, np.random.default_rng(12))
    _, goal = decode_batch(data.features, grid)
    keep = (goal == [0, 0]).all(axis=1)
    narrow = TransitionData(data.features[keep], data.actions[keep], data.next[keep])
    model = train_transition(narrow, grid, np.random.default_rng(0), steps=300).model
    starts = np.array([[x, y] for x in range(5) for y in range(5) if (x, y) != (4, 4)])
    goal44 = np.tile([4, 4], (len(starts), 1))
    pos, pred = starts.copy(), encode_batch(starts, goal44, grid)
    matched = total = 0
    alive = np.ones(len(starts), dtype=bool)
    while alive.any():
        idx = np.flatnonzero(alive)
        a = policy5.act(pos[idx], goal44[idx])
        pos[idx] = move_batch(pos[idx], a, grid)
        pred[idx] = model.predict(pred[idx], a)
        matched += int((pred[idx] == encode_batch(pos[idx], goal44[idx], grid)).all(axis=1).sum())
        total += len(idx)
        alive[idx] = ~(pos[idx] == goal44[idx]).all(axis=1)
    assert matched / total < 1.0


def test_training_deterministic(transition_data, grid):
    small = TransitionData(transition_data.features[:2000], transition_data.actions[:2000],
                           transition_data.next[:2000])
    a = train_transition(small, grid, np.random.default_rng(1), steps=20, hidden=(16,))
    b = train_transition(small, grid, np.random.default_rng(1), steps=20, hidden=(16,))
    assert a.losses == b.losses
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.model.params, b.model.params))
    with pytest.raises(DomainError):
        train_transition(TransitionData(small.features[:0], small.actions[:0], small.next[:0]), grid,
                         np.random.default_rng(0))


def test_persistence(tmp_path, tmodel5, transition_data, grid):
    small = TransitionData(transition_data.features[:50], transition_data.actions[:50],
                           transition_data.next[:50])
    small.save_jsonl(tmp_path / "t.jsonl")
    first = (tmp_path / "t.jsonl").read_text().splitlines()[0]
    assert first.startswith('{"s": [') and '"a": ' in first and '"next": [' in first
    again = TransitionData.load_jsonl(tmp_path / "t.jsonl")
    assert np.array_equal(again.features, small.features) and np.array_equal(again.next, small.next)
    tmodel5.save(tmp_path / "tm.json")
    loaded = TransitionModel.load(tmp_path / "tm.json")
    assert dataset_loss(loaded, small) == dataset_loss(tmodel5, small)
    assert loaded.arch()["sizes"][0] == 24 and loaded.arch()["sizes"][-1] == 20
    assert len(small.samples()) == 50
    assert one_hot(np.array([2]), 4).tolist() == [[0, 0, 1, 0]]


import numpy as np
import pytest

from commdecode.env import Action, Cell, GridConfig, State, all_pairs, encode_batch, manhattan, step
from commdecode.errors import DomainError, TrainingFailure, UsageError
from commdecode.planner import (DistillConfig, DifferentiablePolicy, QTable, TIE_EPS,
                                argmax_violations, distill_policy, greedy_action_set,
                                greedy_rollout, sample_action, sample_actions, value_iteration)
from oracles import best_return, move as oracle_move


def bfs_distance(start, goal, w, h):
    seen, frontier, d = {start}, [start], 0
    while goal not in seen:
        d += 1
        frontier = [oracle_move(c, a, w, h) for c in frontier for a in range(4)]
        frontier = [c for c in frontier if c not in seen]
        seen.update(frontier)
    return d


def test_values_equal_two_minus_bfs_distance(grid, q5):
    for s in all_pairs(grid):
        assert q5.value(s) == 2 - bfs_distance(s.listener, s.goal, 5, 5)


def test_corner_to_corner_by_brute_force(q5):
    s = State(Cell(0, 0), Cell(4, 4))
    assert q5.value(s) == -6 == best_return((0, 0), (4, 4), 5, 5, 8)


def test_small_grid_against_exhaustive_rollouts():
    cfg = GridConfig(3, 3)
    q = value_iteration(cfg)
    for s in all_pairs(cfg):
        assert q.value(s) == best_return(s.listener, s.goal, 3, 3, cfg.horizon)


def test_adjacent_value_and_convergence(q5):
    assert q5.value(State(Cell(2, 2), Cell(2, 3))) == 1
    assert q5.sweeps <= q5.config.horizon + 1


def test_bellman_optimality(grid, q5):
    for s in all_pairs(grid):
        for a in Action:
            out = step(s, a, grid)
            expected = 1.0 if out.terminated else -1.0 + q5.value(out.next_state)
            assert q5.q(s)[a] == expected


def test_wall_noop_never_better(grid, q5):
    for s in all_pairs(grid):
        row = q5.q(s)
        reducing = [a for a in Action
                    if manhattan(step(s, a, grid).next_state.listener, s.goal) < manhattan(s.listener, s.goal)]
        for a in Action:
            if step(s, a, grid).next_state.listener == s.listener:
                assert all(row[a] < row[b] for b in reducing)


@pytest.mark.parametrize("state,expected", [
    (State(Cell(1, 2), Cell(4, 2)), {Action.RIGHT}),
    (State(Cell(1, 1), Cell(3, 3)), {Action.UP, Action.RIGHT}),
    (State(Cell(0, 0), Cell(0, 1)), {Action.UP}),
])
def test_greedy_action_set_examples(q5, state, expected):
    assert greedy_action_set(q5, state) == expected


def test_greedy_sets_reduce_distance(grid, q5):
    for s in all_pairs(grid):
        acts = greedy_action_set(q5, s)
        assert acts
        for a in acts:
            assert manhattan(step(s, a, grid).next_state.listener, s.goal) == manhattan(s.listener, s.goal) - 1


def test_greedy_set_terminal_error(q5):
    with pytest.raises(UsageError):
        greedy_action_set(q5, State(Cell(1, 1), Cell(1, 1)))


def test_greedy_mask_matches_sets(grid, q5):
    mask = q5.greedy_mask()
    for s in all_pairs(grid):
        row = mask[s.listener.x, s.listener.y, s.goal.x, s.goal.y]
        assert {Action(a) for a in np.flatnonzero(row)} == greedy_action_set(q5, s)
    assert not mask[2, 2, 2, 2].any()


def test_sample_action_greedy_unique_and_tied(q5):
    rng = np.random.default_rng(0)
    assert {sample_action(q5, State(Cell(1, 2), Cell(4, 2)), 0, rng) for _ in range(200)} == {Action.RIGHT}
    s = State(Cell(1, 1), Cell(3, 3))
    rows = np.repeat(q5.q(s)[None], 10_000, axis=0)
    draws = sample_actions(rows, 0.0, rng)
    assert set(np.unique(draws)) == {Action.UP, Action.RIGHT}
    assert abs((draws == Action.UP).mean() - 0.5) < 0.02


def test_sample_action_high_temperature_is_uniform(q5):
    rows = np.repeat(q5.q(State(Cell(0, 0), Cell(4, 4)))[None], 20_000, axis=0)
    freq = np.bincount(sample_actions(rows, 1e6, np.random.default_rng(1)), minlength=4) / 20_000
    assert np.abs(freq - 0.25).max() < 0.02


def test_sample_action_softmax_frequencies():
    rows = np.tile([1.0, 0.0, -1.0, 0.5], (50_000, 1))
    freq = np.bincount(sample_actions(rows, 0.7, np.random.default_rng(2)), minlength=4) / 50_000
    expected = np.exp(rows[0] / 0.7) / np.exp(rows[0] / 0.7).sum()
    assert np.abs(freq - expected).max() < 0.01


def test_sample_action_errors(q5):
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        sample_action(q5, State(Cell(0, 0), Cell(1, 1)), -0.1, rng)
    with pytest.raises(UsageError):
        sample_action(q5, State(Cell(1, 1), Cell(1, 1)), 0.0, rng)


def test_sample_action_deterministic(q5):
    rows = np.repeat(q5.q(State(Cell(1, 1), Cell(3, 3)))[None], 100, axis=0)
    a = sample_actions(rows, 0.0, np.random.default_rng(5))
    b = sample_actions(rows, 0.0, np.random.default_rng(5))
    assert (a == b).all()


def test_qtable_csv_round_trip(tmp_path, q5, grid):
    path = tmp_path / "q.csv"
    q5.save_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "listener_x,listener_y,goal_x,goal_y,q_up,q_down,q_left,q_right"
    loaded = QTable.load_csv(path, grid)
    assert np.array_equal(loaded.values, q5.values)


def test_distilled_policy_optimal_everywhere(grid, q5, policy5):
    assert argmax_violations(policy5, q5) == []
    for s in all_pairs(grid):
        path = greedy_rollout(policy5, s, grid.horizon)
        assert len(path) == manhattan(s.listener, s.goal) and path[-1] == s.goal
        assert 2 - len(path) == q5.value(s)


def test_distilled_policy_robust_to_small_noise(grid, policy5):
    pairs = all_pairs(grid)
    listener = np.array([s.listener for s in pairs])
    goal = np.array([s.goal for s in pairs])
    feats = encode_batch(listener, goal, grid)
    noisy = feats + np.random.default_rng(4).uniform(-1e-3, 1e-3, feats.shape)
    assert (policy5.logits(feats).data.argmax(1) == policy5.logits(noisy).data.argmax(1)).all()


def test_distill_failure_lists_states(q5):
    with pytest.raises(TrainingFailure) as info:
        distill_policy(q5, DistillConfig(hidden=(2,), min_steps=1, max_steps=10, check_every=5),
                       np.random.default_rng(0))
    assert info.value.offending and all(isinstance(s, State) for s in info.value.offending)


def test_policy_checkpoint_round_trip(tmp_path, policy5, grid):
    path = tmp_path / "policy.json"
    policy5.save(path)
    loaded = DifferentiablePolicy.load(path)
    pairs = all_pairs(grid)
    feats = encode_batch(np.array([s.listener for s in pairs]), np.array([s.goal for s in pairs]), grid)
    assert np.array_equal(loaded.logits(feats).data, policy5.logits(feats).data)
    import json
    payload = json.loads(path.read_text())
    assert payload["format_version"] == 1 and payload["arch"]["sizes"] == [20, 64, 64, 4]


def test_tie_tolerance_constant():
    assert TIE_EPS == 1e-6

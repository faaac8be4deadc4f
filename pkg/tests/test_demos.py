import json
from collections import Counter

import numpy as np
import pytest

from commdecode.demos import (DemoDataset, MessageMapping, assign_messages, batch_from_demos,
                              generate_demo_batch, generate_demos, load_demos)
from commdecode.env import GridConfig, State, all_cells, manhattan, step
from commdecode.errors import DomainError
from commdecode.exact_decoder import consistent_pairs


def test_mapping_is_bijection_and_deterministic(grid):
    m = assign_messages(grid, 42)
    assert sorted(m.table.values()) == list(range(25))
    assert set(m.table) == set(all_cells(grid))
    assert assign_messages(grid, 42) == m
    assert assign_messages(grid, 43) != m
    assert MessageMapping.from_json(m.to_json()) == m
    assert json.loads(m.to_json())["seed"] == 42


def test_mapping_alphabet_too_small():
    with pytest.raises(DomainError):
        assign_messages(GridConfig(5, 5, message_alphabet_size=16), 0)


def test_greedy_demos_terminate_in_exactly_d_and_pass_filter(q5, grid):
    mapping = assign_messages(grid, 0)
    ds = generate_demos(q5, mapping, 500, 0.0, grid, seed=3)
    assert len(ds) == 500 and ds.metadata["discarded_nonterminating"] == 0
    for d in ds.demos:
        assert d.terminated
        assert len(d.actions) == manhattan(d.start, d.goal)
        assert d.message == mapping[d.goal]
        state = State(d.start, d.goal)
        for a in d.actions:
            out = step(state, a, grid)
            state = out.next_state
        assert out.terminated
        assert (d.start, d.goal) in consistent_pairs(d.actions, True, q5)


def test_length_histogram_matches_closed_form(q5, grid):
    mapping = assign_messages(grid, 0)
    batch = generate_demo_batch(q5, mapping, 60_000, 0.0, grid, np.random.default_rng(5))
    cells = all_cells(grid)
    exact = Counter(manhattan(a, b) for a in cells for b in cells if a != b)
    observed = Counter(batch.lengths.tolist())
    for d, n in exact.items():
        assert abs(observed[d] / len(batch) - n / 600) < 0.01


def test_tempered_demos_discard(q5, grid):
    mapping = assign_messages(grid, 0)
    batch = generate_demo_batch(q5, mapping, 300, 5.0, grid, np.random.default_rng(0))
    assert len(batch) == 300 and batch.discarded > 0
    assert (batch.lengths >= 1).all()


def test_negative_temperature(q5, grid):
    with pytest.raises(DomainError):
        generate_demo_batch(q5, assign_messages(grid, 0), 5, -1.0, grid, np.random.default_rng(0))


def test_jsonl_round_trip_and_oracle_namespace(tmp_path, q5, grid):
    ds = generate_demos(q5, assign_messages(grid, 9), 50, 0.0, grid, seed=1)
    path = tmp_path / "demos.jsonl"
    ds.save_jsonl(path)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"message", "actions", "terminated", "oracle"}
    assert set(first["oracle"]) == {"start", "goal"}
    assert load_demos(path) == ds.demos
    blind = load_demos(path, with_oracle=False)
    assert all(d.start is None and d.goal is None for d in blind)


def test_regeneration_is_bit_exact(tmp_path, q5, grid):
    mapping = assign_messages(grid, 4)
    a = generate_demos(q5, mapping, 200, 0.5, grid, seed=8)
    meta = a.metadata
    b = generate_demos(q5, assign_messages(grid, meta["mapping_seed"]), meta["count"],
                       meta["temperature"], GridConfig.from_dict(meta["env"]), meta["seed"])
    a.save_jsonl(tmp_path / "a.jsonl")
    b.save_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"message": 1, "actions": [0], "terminated": true}\n{"message": 2}\n')
    with pytest.raises(DomainError, match=":2:"):
        load_demos(path)


def test_batch_from_demos(q5, grid):
    ds = generate_demos(q5, assign_messages(grid, 2), 20, 0.0, grid, seed=0)
    batch = batch_from_demos(ds.demos, grid.horizon)
    assert batch.to_demonstrations() == ds.demos
    assert DemoDataset(ds.demos).demos == ds.demos

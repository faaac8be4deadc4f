"""Goal inference under the assumption that demonstrators act optimally.

For each demonstration we keep every (start, goal) pair from which each
observed action is a greedy action and the episode ends (or not) exactly as
recorded. The candidate goals of a message are then intersected across all
demonstrations that carry it.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .env import Cell, GridConfig, all_pairs, move_batch
from .planner import QTable


class VacuousEvidenceWarning(UserWarning):
    """An empty action list constrains nothing."""


class EmptyIntersectionWarning(UserWarning):
    """No goal is consistent with every demonstration of a message.

    Either the demonstrators were not rational or the environment model is
    wrong. The offending symbols are listed in ``messages``.
    """

    def __init__(self, messages):
        self.messages = sorted(messages)
        super().__init__(f"empty goal set for message(s) {self.messages}: "
                         "demonstrators irrational or model mismatch")


@dataclass(frozen=True)
class Demonstration:
    message: int
    actions: tuple[int, ...]
    terminated: bool
    # ground truth for evaluation only; decoding never reads these
    start: Cell | None = None
    goal: Cell | None = None

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        object.__setattr__(self, "message", int(self.message))


def consistent_pairs(actions: Sequence[int], terminated: bool, q: QTable,
                     config: GridConfig | None = None) -> frozenset[tuple[Cell, Cell]]:
    """All (start, goal) pairs under which the demonstration is optimal."""
    config = config or q.config
    actions = tuple(int(a) for a in actions)
    if not actions:
        warnings.warn("empty action list: every start != goal pair is consistent",
                      VacuousEvidenceWarning, stacklevel=2)
        return frozenset((s.listener, s.goal) for s in all_pairs(config))
    return _consistent_pairs(actions, bool(terminated), q)


def _consistent_pairs(actions: tuple[int, ...], terminated: bool, q: QTable):
    config = q.config
    pairs = all_pairs(config)
    start = np.array([s.listener for s in pairs])
    goal = np.array([s.goal for s in pairs])
    mask = q.greedy_mask()
    pos = start.copy()
    ok = np.ones(len(pairs), dtype=bool)
    for a in actions:
        # greedy mask is False on terminal states, so reaching the goal early fails here
        ok &= mask[pos[:, 0], pos[:, 1], goal[:, 0], goal[:, 1], a]
        pos = move_batch(pos, np.full(len(pos), a), config)
    at_goal = (pos == goal).all(axis=1)
    ok &= at_goal if terminated else ~at_goal
    return frozenset((pairs[i].listener, pairs[i].goal) for i in np.flatnonzero(ok))


def goals_of(pairs: Iterable[tuple[Cell, Cell]]) -> frozenset[Cell]:
    return frozenset(g for _, g in pairs)


def decode_dataset(demos: Iterable[Demonstration], q: QTable,
                   config: GridConfig | None = None) -> dict[int, frozenset[Cell]]:
    """Intersect per-demonstration goal sets by message.

    Messages with an empty intersection stay in the result (as empty sets)
    and trigger a single ``EmptyIntersectionWarning``.
    """
    config = config or q.config

    @lru_cache(maxsize=None)
    def goal_set(actions, terminated):
        return goals_of(consistent_pairs(actions, terminated, q, config))

    result: dict[int, frozenset[Cell]] = {}
    for d in demos:
        goals = goal_set(d.actions, d.terminated)
        result[d.message] = goals if d.message not in result else result[d.message] & goals
    empty = [m for m, g in result.items() if not g]
    if empty:
        warnings.warn(EmptyIntersectionWarning(empty), stacklevel=2)
    return dict(sorted(result.items()))


def goal_sets_to_json(goal_sets: Mapping[int, frozenset[Cell]]) -> str:
    payload = {str(m): sorted([int(c.x), int(c.y)] for c in cells)
               for m, cells in sorted(goal_sets.items())}
    return json.dumps(payload, sort_keys=False) + "\n"


def goal_sets_from_json(text: str) -> dict[int, frozenset[Cell]]:
    return {int(m): frozenset(Cell(*c) for c in cells) for m, cells in json.loads(text).items()}


def goal_sets_table(goal_sets: Mapping[int, frozenset[Cell]]) -> str:
    lines = [f"{'message':>7}  {'n':>3}  goals"]
    for m, cells in sorted(goal_sets.items()):
        listed = " ".join(f"({c.x},{c.y})" for c in sorted(cells))
        lines.append(f"{m:>7}  {len(cells):>3}  {listed or '<empty: irrational or mismatched>'}")
    return "\n".join(lines) + "\n"

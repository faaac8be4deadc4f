"""Goal-signalling gridworld.

The speaker sees the goal cell, the listener sees its own cell. Only the
listener moves. Every step costs -1 unless it lands on the goal, which pays
+1 and ends the episode. (0, 0) is the bottom-left cell and Up increments y.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, UsageError


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


N_ACTIONS = len(Action)

# (dx, dy) per action index
MOVES = np.array([[0, 1], [0, -1], [-1, 0], [1, 0]], dtype=np.int64)


@dataclass(frozen=True)
class GridConfig:
    width: int = 5
    height: int = 5
    horizon: int | None = None
    message_alphabet_size: int | None = None

    def __post_init__(self):
        for name in ("width", "height"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise DomainError(f"{name} must be a positive integer, got {value!r}")
        if self.horizon is None:
            object.__setattr__(self, "horizon", self.width - 1 + self.height - 1)
        if self.message_alphabet_size is None:
            object.__setattr__(self, "message_alphabet_size", self.width * self.height)
        if self.horizon < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if self.message_alphabet_size < 1:
            raise DomainError(
                f"message_alphabet_size must be >= 1, got {self.message_alphabet_size}"
            )

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def feature_size(self) -> int:
        return 2 * (self.width + self.height)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GridConfig":
        return cls(**data)


class Cell(NamedTuple):
    x: int
    y: int


class State(NamedTuple):
    listener: Cell
    goal: Cell


class StepOutcome(NamedTuple):
    next_state: State
    reward: int
    terminated: bool


def in_grid(cell: Cell, config: GridConfig) -> bool:
    return 0 <= cell[0] < config.width and 0 <= cell[1] < config.height


def check_state(state: State, config: GridConfig) -> None:
    for name, cell in (("listener", state.listener), ("goal", state.goal)):
        if not in_grid(cell, config):
            raise DomainError(f"{name} cell {tuple(cell)} outside {config.width}x{config.height} grid")


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def move(cell: Cell, action: int, config: GridConfig) -> Cell:
    dx, dy = MOVES[int(action)]
    x = min(max(cell[0] + int(dx), 0), config.width - 1)
    y = min(max(cell[1] + int(dy), 0), config.height - 1)
    return Cell(x, y)


def step(state: State, action: int, config: GridConfig) -> StepOutcome:
    check_state(state, config)
    if int(action) not in range(N_ACTIONS):
        raise DomainError(f"unknown action {action!r}")
    if state.listener == state.goal:
        raise UsageError(f"cannot step terminated state {state}")
    listener = move(state.listener, action, config)
    arrived = listener == state.goal
    return StepOutcome(State(listener, state.goal), 1 if arrived else -1, arrived)


def all_cells(config: GridConfig) -> list[Cell]:
    return [Cell(x, y) for x in range(config.width) for y in range(config.height)]


def all_pairs(config: GridConfig) -> list[State]:
    """Every (listener, goal) state with listener != goal."""
    cells = all_cells(config)
    return [State(s, g) for s in cells for g in cells if s != g]


def sample_initial(config: GridConfig, rng: np.random.Generator) -> State:
    starts, goals = sample_initial_batch(config, 1, rng)
    return State(Cell(*map(int, starts[0])), Cell(*map(int, goals[0])))


def sample_initial_batch(config: GridConfig, n: int, rng: np.random.Generator):
    """Draw `n` (listener, goal) pairs uniformly with listener != goal.

    Returns two int arrays of shape (n, 2).
    """
    cells = config.n_cells
    if cells < 2:
        raise DomainError("grid has a single cell; no listener != goal state exists")
    start = rng.integers(0, cells, size=n)
    # shift trick: uniform over the other cells-1 cells
    offset = rng.integers(1, cells, size=n)
    goal = (start + offset) % cells
    return _unflatten(start, config), _unflatten(goal, config)


def _unflatten(index: np.ndarray, config: GridConfig) -> np.ndarray:
    return np.stack([index // config.height, index % config.height], axis=-1).astype(np.int64)


def encode_state_features(state: State, config: GridConfig) -> np.ndarray:
    check_state(state, config)
    w, h = config.width, config.height
    out = np.zeros(config.feature_size)
    out[state.goal.x] = 1.0
    out[w + state.goal.y] = 1.0
    out[w + h + state.listener.x] = 1.0
    out[2 * w + h + state.listener.y] = 1.0
    return out


def encode_batch(listener: np.ndarray, goal: np.ndarray, config: GridConfig) -> np.ndarray:
    """Vectorised feature encoding for int arrays of shape (n, 2)."""
    w, h = config.width, config.height
    n = len(listener)
    out = np.zeros((n, config.feature_size))
    rows = np.arange(n)
    out[rows, goal[:, 0]] = 1.0
    out[rows, w + goal[:, 1]] = 1.0
    out[rows, w + h + listener[:, 0]] = 1.0
    out[rows, 2 * w + h + listener[:, 1]] = 1.0
    return out


def factor_slices(config: GridConfig) -> list[slice]:
    """Slices of goal_x, goal_y, listener_x, listener_y in a feature vector."""
    w, h = config.width, config.height
    bounds = np.cumsum([0, w, h, w, h])
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def decode_state_features(features: np.ndarray, config: GridConfig) -> State:
    """Argmax-decode each factor; inverse of `encode_state_features` on one-hots."""
    gx, gy, lx, ly = (int(np.argmax(features[..., sl])) for sl in factor_slices(config))
    return State(Cell(lx, ly), Cell(gx, gy))


def decode_batch(features: np.ndarray, config: GridConfig):
    gx, gy, lx, ly = (np.argmax(features[:, sl], axis=1) for sl in factor_slices(config))
    return np.stack([lx, ly], axis=1), np.stack([gx, gy], axis=1)


def move_batch(listener: np.ndarray, actions: np.ndarray, config: GridConfig) -> np.ndarray:
    nxt = listener + MOVES[actions]
    nxt[:, 0] = np.clip(nxt[:, 0], 0, config.width - 1)
    nxt[:, 1] = np.clip(nxt[:, 1], 0, config.height - 1)
    return nxt

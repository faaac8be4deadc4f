"""Exact optimal action values and their differentiable distillation."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from . import nn
from .env import (MOVES, N_ACTIONS, Action, Cell, GridConfig, State, all_pairs, check_state,
                  encode_batch, move_batch)
from .errors import DomainError, TrainingFailure, UsageError

log = logging.getLogger(__name__)

TIE_EPS = 1e-6
CSV_HEADER = ["listener_x", "listener_y", "goal_x", "goal_y", "q_up", "q_down", "q_left", "q_right"]


@dataclass(frozen=True)
class QTable:
    """Optimal action values indexed ``values[lx, ly, gx, gy, action]``.

    Entries for terminal states (listener on goal) are zero and never used.
    """

    config: GridConfig
    values: np.ndarray
    sweeps: int = 0

    def q(self, state: State) -> np.ndarray:
        (lx, ly), (gx, gy) = state
        return self.values[lx, ly, gx, gy]

    def value(self, state: State) -> float:
        return float(self.q(state).max())

    def rows(self, listener: np.ndarray, goal: np.ndarray) -> np.ndarray:
        return self.values[listener[:, 0], listener[:, 1], goal[:, 0], goal[:, 1]]

    def greedy_mask(self) -> np.ndarray:
        """Boolean (W, H, W, H, 4) mask of greedy actions; all False on terminal states."""
        return self._greedy

    @cached_property
    def _greedy(self) -> np.ndarray:
        v = self.values
        mask = v >= v.max(axis=-1, keepdims=True) - TIE_EPS
        w, h = self.config.width, self.config.height
        for x in range(w):
            for y in range(h):
                mask[x, y, x, y] = False
        return mask

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(CSV_HEADER)
            for idx in np.ndindex(self.values.shape[:4]):
                out.writerow([*idx, *(repr(float(v)) for v in self.values[idx])])

    @classmethod
    def load_csv(cls, path, config: GridConfig) -> "QTable":
        values = np.zeros((config.width, config.height, config.width, config.height, N_ACTIONS))
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise DomainError(f"{path}: unexpected header {header}")
            for row in reader:
                lx, ly, gx, gy = map(int, row[:4])
                values[lx, ly, gx, gy] = [float(v) for v in row[4:]]
        return cls(config, values)


def value_iteration(config: GridConfig, max_sweeps: int | None = None) -> QTable:
    """Undiscounted stationary value iteration for the goal-signalling grid."""
    w, h = config.width, config.height
    lx, ly, gx, gy = np.indices((w, h, w, h))
    terminal = (lx == gx) & (ly == gy)
    successors = []
    for dx, dy in MOVES:
        nlx = np.clip(lx + dx, 0, w - 1)
        nly = np.clip(ly + dy, 0, h - 1)
        successors.append((nlx, nly, (nlx == gx) & (nly == gy)))

    if max_sweeps is None:
        max_sweeps = 2 * w * h + 2
    v = np.zeros((w, h, w, h))
    q = np.zeros((w, h, w, h, N_ACTIONS))
    for sweep in range(1, max_sweeps + 1):
        for a, (nlx, nly, arrive) in enumerate(successors):
            q[..., a] = np.where(arrive, 1.0, -1.0 + v[nlx, nly, gx, gy])
        q[terminal] = 0.0
        v_new = q.max(axis=-1)
        if np.array_equal(v_new, v):
            return QTable(config, q, sweep)
        v = v_new
    raise TrainingFailure(f"value iteration did not converge in {max_sweeps} sweeps")


def greedy_action_set(q: QTable, state: State) -> set[Action]:
    check_state(state, q.config)
    if state.listener == state.goal:
        raise UsageError(f"no actions in terminated state {state}")
    row = q.q(state)
    return {Action(a) for a in np.flatnonzero(row >= row.max() - TIE_EPS)}


def sample_actions(rows: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Sample one action per row of action values.

    Temperature 0 picks uniformly among the maximisers (within ``TIE_EPS``);
    a positive temperature samples from ``softmax(rows / temperature)`` via
    the Gumbel-max trick.
    """
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        greedy = rows >= rows.max(axis=1, keepdims=True) - TIE_EPS
        keys = np.where(greedy, rng.random(rows.shape), -1.0)
        return keys.argmax(axis=1)
    return (rows / temperature + nn.sample_gumbel(rows.shape, rng)).argmax(axis=1)


def sample_action(q: QTable, state: State, temperature: float, rng: np.random.Generator) -> Action:
    check_state(state, q.config)
    if state.listener == state.goal:
        raise UsageError(f"no actions in terminated state {state}")
    return Action(int(sample_actions(q.q(state)[None, :], temperature, rng)[0]))


# ------------------------------------------------------------- distillation

@dataclass(frozen=True)
class DistillConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 3e-3
    min_steps: int = 1500
    max_steps: int = 10000
    check_every: int = 100
    # extra target weight on the lowest-index greedy action, so tied states
    # get a clear argmax while keeping mass on every greedy action
    tie_bias: float = 0.2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class DifferentiablePolicy:
    """Feed-forward map from (possibly relaxed) state features to action logits."""

    def __init__(self, config: GridConfig, params: list[nn.Tensor], hidden=(64, 64)):
        self.config = config
        self.params = params
        self.hidden = tuple(hidden)

    @classmethod
    def init(cls, config: GridConfig, rng: np.random.Generator, hidden=(64, 64)):
        sizes = [config.feature_size, *hidden, N_ACTIONS]
        return cls(config, nn.init_mlp(sizes, rng), hidden)

    def logits(self, features) -> nn.Tensor:
        return nn.forward_mlp(self.params, features)

    def act(self, listener: np.ndarray, goal: np.ndarray) -> np.ndarray:
        feats = encode_batch(listener, goal, self.config)
        return self.logits(feats).data.argmax(axis=1)

    def frozen(self) -> "DifferentiablePolicy":
        return DifferentiablePolicy(self.config, nn.freeze(self.params), self.hidden)

    def arch(self) -> dict:
        return {"kind": "policy_mlp", "env": self.config.to_dict(),
                "sizes": [self.config.feature_size, *self.hidden, N_ACTIONS], "activation": "relu"}

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.arch(), self.params)

    @classmethod
    def load(cls, path) -> "DifferentiablePolicy":
        arch, params = nn.load_checkpoint(path)
        if arch.get("kind") != "policy_mlp":
            raise DomainError(f"{path}: not a policy checkpoint")
        return cls(GridConfig.from_dict(arch["env"]), params, arch["sizes"][1:-1])


def _greedy_targets(q: QTable):
    pairs = all_pairs(q.config)
    listener = np.array([s.listener for s in pairs])
    goal = np.array([s.goal for s in pairs])
    mask = q.greedy_mask()[listener[:, 0], listener[:, 1], goal[:, 0], goal[:, 1]]
    return pairs, encode_batch(listener, goal, q.config), mask


def argmax_violations(policy: DifferentiablePolicy, q: QTable) -> list[State]:
    """States whose policy argmax falls outside the QTable greedy set."""
    pairs, feats, mask = _greedy_targets(q)
    chosen = policy.logits(feats).data.argmax(axis=1)
    bad = ~mask[np.arange(len(pairs)), chosen]
    return [pairs[i] for i in np.flatnonzero(bad)]


def distill_policy(q: QTable, cfg: DistillConfig | None = None,
                   rng: np.random.Generator | None = None) -> DifferentiablePolicy:
    """Fit a policy network to the uniform distribution over greedy actions.

    Full-batch cross-entropy over every non-terminal state. Stops at the first
    check after ``min_steps`` where every state's argmax is greedy.
    """
    cfg = cfg or DistillConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    policy = DifferentiablePolicy.init(q.config, rng, cfg.hidden)
    pairs, feats, mask = _greedy_targets(q)
    weights = mask.astype(float)
    weights[np.arange(len(pairs)), mask.argmax(axis=1)] += cfg.tie_bias
    targets = weights / weights.sum(axis=1, keepdims=True)
    opt = nn.Adam(policy.params, lr=cfg.lr)
    rows = np.arange(len(pairs))
    bad = rows
    for step in range(1, cfg.max_steps + 1):
        loss = nn.soft_cross_entropy(policy.logits(feats), targets).mean()
        nn.backward_and_step(loss, policy.params, opt)
        if step % cfg.check_every == 0:
            chosen = policy.logits(feats).data.argmax(axis=1)
            bad = np.flatnonzero(~mask[rows, chosen])
            log.debug("distill step %d loss %.5f violations %d", step, loss.data, len(bad))
            if step >= cfg.min_steps and len(bad) == 0:
                return policy
    raise TrainingFailure(
        f"distilled policy still disagrees with the greedy set on {len(bad)} states",
        offending=[pairs[i] for i in bad])


def greedy_rollout(policy: DifferentiablePolicy, state: State, max_steps: int) -> list[Cell]:
    """Listener trajectory (excluding the start) under the policy argmax."""
    listener = np.array([state.listener])
    goal = np.array([state.goal])
    path = []
    for _ in range(max_steps):
        a = policy.act(listener, goal)
        listener = move_batch(listener, a, policy.config)
        path.append(Cell(*map(int, listener[0])))
        if path[-1] == state.goal:
            break
    return path

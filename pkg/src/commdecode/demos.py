"""Demonstrator corpora: message assignment, rollouts, filtering, persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env import Cell, GridConfig, all_cells, move_batch, sample_initial_batch
from .errors import DomainError, TrainingFailure
from .exact_decoder import Demonstration
from .planner import QTable, sample_actions

MAX_DISCARD_RATE = 0.99


@dataclass(frozen=True)
class MessageMapping:
    seed: int
    table: dict  # Cell -> symbol

    def __getitem__(self, goal) -> int:
        return self.table[Cell(*goal)]

    def inverse(self) -> dict[int, Cell]:
        return {m: c for c, m in self.table.items()}

    def as_array(self, config: GridConfig) -> np.ndarray:
        out = np.full((config.width, config.height), -1, dtype=np.int64)
        for c, m in self.table.items():
            out[c] = m
        return out

    def to_json(self) -> str:
        payload = {"seed": self.seed,
                   "map": {f"{c.x},{c.y}": int(m) for c, m in sorted(self.table.items())}}
        return json.dumps(payload) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MessageMapping":
        payload = json.loads(text)
        table = {Cell(*map(int, k.split(","))): int(v) for k, v in payload["map"].items()}
        return cls(int(payload["seed"]), table)


def assign_messages(config: GridConfig, seed: int) -> MessageMapping:
    """A uniformly random injection from goal cells into the alphabet."""
    cells = all_cells(config)
    if config.message_alphabet_size < len(cells):
        raise DomainError(
            f"alphabet of {config.message_alphabet_size} symbols cannot name "
            f"{len(cells)} goals injectively")
    rng = np.random.default_rng(seed)
    symbols = rng.choice(config.message_alphabet_size, size=len(cells), replace=False)
    return MessageMapping(seed, {c: int(m) for c, m in zip(cells, symbols)})


@dataclass
class DemoBatch:
    """Array form of a set of demonstrations; actions padded with -1."""

    messages: np.ndarray
    actions: np.ndarray
    lengths: np.ndarray
    starts: np.ndarray
    goals: np.ndarray
    discarded: int = 0

    def __len__(self):
        return len(self.messages)

    def to_demonstrations(self) -> list[Demonstration]:
        return [Demonstration(int(m), tuple(int(a) for a in acts[:n]), True,
                              Cell(*map(int, s)), Cell(*map(int, g)))
                for m, acts, n, s, g in zip(self.messages, self.actions, self.lengths,
                                            self.starts, self.goals)]


def generate_demo_batch(q: QTable, mapping: MessageMapping, count: int, temperature: float,
                        config: GridConfig, rng: np.random.Generator) -> DemoBatch:
    """Roll out `count` terminating episodes from uniform initial states.

    Episodes that hit the horizon without reaching the goal are discarded and
    replaced, so exactly `count` demonstrations come back.
    """
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    msg_of = mapping.as_array(config)
    horizon = config.horizon
    kept = {k: [] for k in ("actions", "lengths", "starts", "goals")}
    have, generated, discarded = 0, 0, 0
    while have < count:
        n = count - have
        starts, goals = sample_initial_batch(config, n, rng)
        pos = starts.copy()
        actions = np.full((n, horizon), -1, dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        alive = np.ones(n, dtype=bool)
        for t in range(horizon):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            a = sample_actions(q.rows(pos[idx], goals[idx]), temperature, rng)
            actions[idx, t] = a
            pos[idx] = move_batch(pos[idx], a, config)
            lengths[idx] += 1
            alive[idx] = ~(pos[idx] == goals[idx]).all(axis=1)
        ok = ~alive
        generated += n
        discarded += int(alive.sum())
        if generated >= 100 and discarded / generated > MAX_DISCARD_RATE:
            raise TrainingFailure(
                f"discarded {discarded} of {generated} episodes at temperature {temperature}")
        kept["actions"].append(actions[ok])
        kept["lengths"].append(lengths[ok])
        kept["starts"].append(starts[ok])
        kept["goals"].append(goals[ok])
        have += int(ok.sum())
    arrays = {k: np.concatenate(v)[:count] for k, v in kept.items()}
    messages = msg_of[arrays["goals"][:, 0], arrays["goals"][:, 1]]
    return DemoBatch(messages, arrays["actions"], arrays["lengths"], arrays["starts"],
                     arrays["goals"], discarded)


@dataclass
class DemoDataset:
    demos: list[Demonstration]
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.demos)

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for d in self.demos:
                fh.write(json.dumps(demo_to_record(d)) + "\n")

    @classmethod
    def load_jsonl(cls, path, metadata: dict | None = None) -> "DemoDataset":
        return cls(load_demos(path), metadata or {})


def generate_demos(q: QTable, mapping: MessageMapping, count: int, temperature: float,
                   config: GridConfig, seed: int, policy_id: str = "value_iteration") -> DemoDataset:
    rng = np.random.default_rng(seed)
    batch = generate_demo_batch(q, mapping, count, temperature, config, rng)
    meta = {"seed": seed, "count": count, "temperature": temperature, "policy": policy_id,
            "mapping_seed": mapping.seed, "discarded_nonterminating": batch.discarded,
            "discarded_immediate": 0, "env": config.to_dict()}
    return DemoDataset(batch.to_demonstrations(), meta)


def demo_to_record(d: Demonstration) -> dict:
    rec = {"message": d.message, "actions": list(d.actions), "terminated": d.terminated}
    if d.start is not None and d.goal is not None:
        rec["oracle"] = {"start": list(d.start), "goal": list(d.goal)}
    return rec


def record_to_demo(rec: dict, with_oracle: bool = True) -> Demonstration:
    oracle = rec.get("oracle") if with_oracle else None
    if oracle:
        return Demonstration(rec["message"], rec["actions"], rec["terminated"],
                             Cell(*oracle["start"]), Cell(*oracle["goal"]))
    return Demonstration(rec["message"], rec["actions"], rec["terminated"])


def load_demos(path, with_oracle: bool = True) -> list[Demonstration]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_to_demo(json.loads(line), with_oracle))
            except (KeyError, TypeError, ValueError) as exc:
                raise DomainError(f"{path}:{lineno}: malformed demonstration ({exc})") from exc
    return out


def batch_from_demos(demos: list[Demonstration], horizon: int) -> DemoBatch:
    n = len(demos)
    actions = np.full((n, horizon), -1, dtype=np.int64)
    for i, d in enumerate(demos):
        if len(d.actions) > horizon:
            raise DomainError(f"demonstration {i} longer than horizon {horizon}")
        actions[i, :len(d.actions)] = d.actions
    starts = np.array([d.start if d.start is not None else (-1, -1) for d in demos], dtype=np.int64)
    goals = np.array([d.goal if d.goal is not None else (-1, -1) for d in demos], dtype=np.int64)
    return DemoBatch(np.array([d.message for d in demos], dtype=np.int64), actions,
                     np.array([len(d.actions) for d in demos], dtype=np.int64),
                     starts.reshape(n, 2), goals.reshape(n, 2))

"""Run configuration: one JSON document covering every pipeline stage."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .env import GridConfig
from .errors import DomainError
from .planner import DistillConfig
from .state_decoder import DecoderConfig
from .transition import DEFAULT_HIDDEN

SEED_ENV = "COMMDECODE_SEED"


class ConfigError(DomainError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _defaults() -> dict:
    return {
        "seed": 0,
        "output_dir": "runs/default",
        "env": {"width": 5, "height": 5, "horizon": None, "message_alphabet_size": None},
        "planner": DistillConfig().to_dict(),
        "transition": {"count": 50000, "steps": 1000, "lr": 1e-3, "batch_size": 512,
                       "hidden": list(DEFAULT_HIDDEN), "eval_episodes": 1000},
        "decoder": DecoderConfig().to_dict(),
        "demos": {"count": 10000, "temperature": 0.0, "mapping_seed": None},
        "equiv": {"width": 3, "height": 1, "goals": [[0, 0], [2, 0]], "alphabet_size": 2,
                  "horizon": 2},
    }


DEFAULTS = _defaults()


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value`` with value read as JSON when possible, else as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(text, "override must look like key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _set_path(tree: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(".".join(parts[:i + 1]), "unknown section")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown key")
    if isinstance(node[parts[-1]], dict):
        raise ConfigError(key, "cannot replace a whole section")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    raw: dict = field(default_factory=_defaults)

    def __post_init__(self):
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"invalid JSON ({exc})") from exc
            if not isinstance(data, dict):
                raise ConfigError(str(path), "top level must be an object")
        tree = _merge(DEFAULTS, data)
        if SEED_ENV in os.environ:
            try:
                tree["seed"] = int(os.environ[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(SEED_ENV, "must be an integer") from exc
        for text in overrides:
            _set_path(tree, *parse_override(text))
        if seed is not None:
            tree["seed"] = seed
        return cls(tree)

    def validate(self) -> None:
        r = self.raw
        if not isinstance(r.get("seed"), int) or isinstance(r["seed"], bool) or r["seed"] < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        for section, builder in (("env", self._grid), ("planner", self._distill),
                                 ("decoder", self._decoder)):
            try:
                builder()
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(section, str(exc)) from exc
        checks = [("transition.count", r["transition"]["count"], int, 1),
                  ("transition.steps", r["transition"]["steps"], int, 0),
                  ("transition.batch_size", r["transition"]["batch_size"], int, 1),
                  ("transition.eval_episodes", r["transition"]["eval_episodes"], int, 1),
                  ("transition.lr", r["transition"]["lr"], (int, float), 0),
                  ("demos.count", r["demos"]["count"], int, 1),
                  ("demos.temperature", r["demos"]["temperature"], (int, float), 0)]
        for key, value, kind, low in checks:
            if isinstance(value, bool) or not isinstance(value, kind) or value < low:
                raise ConfigError(key, f"expected a number >= {low}, got {value!r}")
        ms = r["demos"]["mapping_seed"]
        if ms is not None and (not isinstance(ms, int) or ms < 0):
            raise ConfigError("demos.mapping_seed", "must be null or a non-negative integer")

    def _grid(self) -> GridConfig:
        try:
            return GridConfig(**self.raw["env"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("env", str(exc)) from exc

    def _distill(self) -> DistillConfig:
        d = dict(self.raw["planner"])
        d["hidden"] = tuple(d["hidden"])
        try:
            return DistillConfig(**d)
        except TypeError as exc:
            raise ConfigError("planner", str(exc)) from exc

    def _decoder(self) -> DecoderConfig:
        try:
            cfg = DecoderConfig.from_dict(self.raw["decoder"])
        except TypeError as exc:
            raise ConfigError("decoder", str(exc)) from exc
        if cfg.total_steps < 1:
            raise ConfigError("decoder.total_steps", "must be positive")
        if cfg.schedule.end <= 0 or cfg.schedule.start <= 0:
            raise ConfigError("decoder.schedule", "temperatures must be positive")
        return cfg

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def grid(self) -> GridConfig:
        return self._grid()

    @property
    def distill(self) -> DistillConfig:
        return self._distill()

    @property
    def decoder(self) -> DecoderConfig:
        return self._decoder()

    @property
    def mapping_seed(self) -> int:
        ms = self.raw["demos"]["mapping_seed"]
        return self.seed if ms is None else ms

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

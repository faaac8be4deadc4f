"""Learned decoder of hidden initial states from (message, actions).

An action encoder (GRU) embeds the action sequence. A speaker generator maps
the message to goal logits and a listener generator maps (message,
embedding) to listener-position logits. The four factors are relaxed with
Gumbel-Softmax into a soft initial state, which is rolled forward through the
frozen transition model using the demonstrator's own actions. The frozen
policy scores each soft state, and the summed cross-entropy against the
demonstrator actions trains the encoder and both generators.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .demos import DemoBatch, MessageMapping, generate_demo_batch
from .env import N_ACTIONS, Cell, GridConfig, factor_slices, manhattan
from .errors import DomainError, NumericError
from .planner import DifferentiablePolicy, QTable
from .transition import TransitionModel, one_hot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Exponential decay from ``start`` to ``end``, held constant between updates."""

    start: float = 10.0
    end: float = 0.5
    decay_steps: int = 15000
    update_every: int = 500

    def __call__(self, step: int) -> float:
        k = (step // self.update_every) * self.update_every
        frac = min(k, self.decay_steps) / self.decay_steps
        return self.start * (self.end / self.start) ** frac


@dataclass(frozen=True)
class DecoderConfig:
    total_steps: int = 20000
    batch_size: int = 512
    lr: float = 1e-3
    encoder_hidden: int = 64
    generator_hidden: int = 64
    demo_temperature: float = 0.0
    log_every: int = 100
    eval_every: int = 500
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DecoderConfig":
        data = dict(data)
        if "schedule" in data:
            data["schedule"] = TemperatureSchedule(**data["schedule"])
        return cls(**data)


class DecoderParams:
    """Encoder, speaker-generator and listener-generator parameters."""

    def __init__(self, config: GridConfig, encoder, speaker, listener,
                 encoder_hidden: int = 64, generator_hidden: int = 64):
        self.config = config
        self.encoder = encoder
        self.speaker = speaker
        self.listener = listener
        self.encoder_hidden = encoder_hidden
        self.generator_hidden = generator_hidden

    @classmethod
    def init(cls, config: GridConfig, rng: np.random.Generator, encoder_hidden: int = 64,
             generator_hidden: int = 64) -> "DecoderParams":
        a, wh = config.message_alphabet_size, config.width + config.height
        encoder = nn.init_gru(N_ACTIONS, encoder_hidden, rng)
        speaker = nn.init_mlp([a, generator_hidden, wh], rng)
        listener = nn.init_mlp([a + encoder_hidden, generator_hidden, wh], rng)
        return cls(config, encoder, speaker, listener, encoder_hidden, generator_hidden)

    @property
    def params(self) -> list[nn.Tensor]:
        return [*self.encoder, *self.speaker, *self.listener]

    def arch(self) -> dict:
        return {"kind": "state_decoder", "env": self.config.to_dict(),
                "encoder_hidden": self.encoder_hidden, "generator_hidden": self.generator_hidden,
                "layout": ["gru:w_x,w_h,b_x,b_h", "speaker_mlp", "listener_mlp"]}

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.arch(), self.params)

    @classmethod
    def load(cls, path) -> "DecoderParams":
        arch, params = nn.load_checkpoint(path)
        if arch.get("kind") != "state_decoder":
            raise DomainError(f"{path}: not a state decoder checkpoint")
        return cls(GridConfig.from_dict(arch["env"]), params[:4], params[4:8], params[8:12],
                   arch["encoder_hidden"], arch["generator_hidden"])


def _message_onehot(messages: np.ndarray, config: GridConfig) -> np.ndarray:
    messages = np.asarray(messages)
    if (messages < 0).any() or (messages >= config.message_alphabet_size).any():
        raise DomainError(f"message symbol outside alphabet of {config.message_alphabet_size}")
    return one_hot(messages, config.message_alphabet_size)


def _action_steps(actions: np.ndarray, lengths: np.ndarray):
    """Per-step one-hot inputs and 0/1 masks for a padded (n, T) action array."""
    safe = np.where(actions < 0, 0, actions)
    steps = [one_hot(safe[:, t], N_ACTIONS) for t in range(actions.shape[1])]
    masks = [(t < lengths).astype(np.float64)[:, None] for t in range(actions.shape[1])]
    return safe, steps, masks


def encode_actions(params: DecoderParams, actions, lengths=None) -> nn.Tensor:
    """Final GRU state over one-hot actions.

    ``actions`` is a single action list, or an (n, T) array padded with -1
    together with ``lengths``.
    """
    if lengths is None:
        actions = [int(a) for a in actions]
        if not actions:
            raise DomainError("cannot encode an empty action list")
        return nn.forward_rnn(params.encoder, [one_hot(np.array([a]), N_ACTIONS)[0] for a in actions])
    actions = np.asarray(actions)
    lengths = np.asarray(lengths)
    if (lengths < 1).any():
        raise DomainError("cannot encode an empty action list")
    width = int(lengths.max())
    _, steps, masks = _action_steps(actions[:, :width], lengths)
    return nn.forward_rnn(params.encoder, steps, masks)


def speaker_logits(params: DecoderParams, messages) -> nn.Tensor:
    return nn.forward_mlp(params.speaker, _message_onehot(np.atleast_1d(messages), params.config))


def listener_logits(params: DecoderParams, messages, embedding: nn.Tensor) -> nn.Tensor:
    m = _message_onehot(np.atleast_1d(messages), params.config)
    if embedding.data.ndim == 1:
        embedding = nn.reshape(embedding, (1, -1))
    return nn.forward_mlp(params.listener, nn.concat([m, embedding], axis=1))


def generate_initial_state(params: DecoderParams, messages, embedding: nn.Tensor, tau: float,
                           rng: np.random.Generator) -> nn.Tensor:
    """Relaxed initial state: [goal_x, goal_y, listener_x, listener_y] simplices."""
    goal = speaker_logits(params, messages)
    lst = listener_logits(params, messages, embedding)
    logits = nn.concat([goal, lst], axis=1)
    return nn.gumbel_softmax_factors(logits, factor_slices(params.config), tau, rng)


def simulated_rollout(s0: nn.Tensor, actions: np.ndarray, policy: DifferentiablePolicy,
                      tmodel: TransitionModel, tau: float, rng: np.random.Generator,
                      steps: int | None = None):
    """Roll a relaxed state forward under given actions.

    Returns ``(states, logits)`` where ``states[t]`` is the relaxed state
    after t+1 transitions and ``logits[t] = policy(s_t)``. ``actions`` has
    shape (n, L); by default all L transitions are simulated.
    """
    actions = np.atleast_2d(np.asarray(actions))
    if s0.data.ndim == 1:
        s0 = nn.reshape(s0, (1, -1))
    horizon = policy.config.horizon
    if actions.shape[1] > horizon:
        raise DomainError(f"{actions.shape[1]} actions exceed horizon {horizon}")
    steps = actions.shape[1] if steps is None else steps
    slices = factor_slices(policy.config)
    safe = np.where(actions < 0, 0, actions)
    state, states, logits = s0, [], []
    for t in range(actions.shape[1]):
        logits.append(policy.logits(state))
        if t < steps:
            nxt = tmodel.logits(state, one_hot(safe[:, t], N_ACTIONS))
            state = nn.gumbel_softmax_factors(nxt, slices, tau, rng)
            states.append(state)
    return states, logits


def reconstruction_loss(logits, actions, lengths=None) -> nn.Tensor:
    """Per-demo sum over t < L of cross-entropy(logits[t], actions[t]).

    With a single demo (``lengths`` None) returns a scalar; otherwise the
    per-demo sums as an (n,) tensor, masking steps beyond each length.
    """
    if lengths is None:
        actions = [int(a) for a in actions]
        if len(logits) != len(actions):
            raise DomainError(f"{len(logits)} logit steps for {len(actions)} actions")
        total = None
        for lg, a in zip(logits, actions):
            lg = lg if lg.data.ndim == 1 else nn.reshape(lg, (-1,))
            ce = nn.cross_entropy(lg, a)
            total = ce if total is None else nn.add(total, ce)
        return total
    actions = np.asarray(actions)
    if len(logits) != actions.shape[1]:
        raise DomainError(f"{len(logits)} logit steps for {actions.shape[1]} action columns")
    safe = np.where(actions < 0, 0, actions)
    total = None
    for t, lg in enumerate(logits):
        ce = nn.mul(nn.cross_entropy(lg, safe[:, t]), (t < lengths).astype(np.float64))
        total = ce if total is None else nn.add(total, ce)
    return total


def batch_loss(params: DecoderParams, batch: DemoBatch, policy: DifferentiablePolicy,
               tmodel: TransitionModel, tau: float, rng: np.random.Generator) -> nn.Tensor:
    """Mean over demonstrations of the action-reconstruction loss."""
    width = int(batch.lengths.max())
    actions = batch.actions[:, :width]
    emb = encode_actions(params, actions, batch.lengths)
    s0 = generate_initial_state(params, batch.messages, emb, tau, rng)
    # the state after the final action is never scored
    _, logits = simulated_rollout(s0, actions, policy, tmodel, tau, rng, steps=width - 1)
    return reconstruction_loss(logits, actions, batch.lengths).mean()


def demo_loss(params: DecoderParams, message: int, actions, policy: DifferentiablePolicy,
              tmodel: TransitionModel, tau: float, rng: np.random.Generator) -> nn.Tensor:
    """Action-reconstruction loss of a single demonstration."""
    actions = np.array([list(actions)], dtype=np.int64)
    batch = DemoBatch(np.array([message]), actions, np.array([actions.shape[1]]),
                      np.zeros((1, 2), dtype=np.int64), np.zeros((1, 2), dtype=np.int64))
    return batch_loss(params, batch, policy, tmodel, tau, rng)


# ------------------------------------------------------------- prediction

def predict_goals(params: DecoderParams, messages) -> np.ndarray:
    """Argmax goal (x, y) per message from the speaker generator; shape (n, 2)."""
    out = speaker_logits(params, messages).data
    gx, gy = factor_slices(params.config)[:2]
    return np.stack([out[:, gx].argmax(axis=1), out[:, gy].argmax(axis=1)], axis=1)


def predict_goal(params: DecoderParams, message: int, actions=None) -> Cell:
    """Deterministic goal prediction; depends on the message only."""
    x, y = predict_goals(params, [int(message)])[0]
    return Cell(int(x), int(y))


def message_accuracy(params: DecoderParams, mapping: MessageMapping) -> float:
    inverse = mapping.inverse()
    msgs = np.array(sorted(inverse))
    pred = predict_goals(params, msgs)
    truth = np.array([inverse[m] for m in msgs])
    return float((pred == truth).all(axis=1).mean())


# --------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: DecoderParams
    losses: list[float]
    log_rows: list[dict]

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.DictWriter(fh, ["step", "loss", "tau", "eval_accuracy"], lineterminator="\n")
            out.writeheader()
            out.writerows(self.log_rows)


def train_state_decoder(config: GridConfig, cfg: DecoderConfig, policy: DifferentiablePolicy,
                        tmodel: TransitionModel, q: QTable, mapping: MessageMapping,
                        rng: np.random.Generator,
                        callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise decoder parameters against freshly generated demo batches.

    Policy and transition parameters are frozen copies; only the decoder is
    updated. Each step draws ``batch_size`` terminating greedy (or tempered)
    demonstrations.
    """
    policy, tmodel = policy.frozen(), tmodel.frozen()
    params = DecoderParams.init(config, rng, cfg.encoder_hidden, cfg.generator_hidden)
    opt = nn.Adam(params.params, lr=cfg.lr)
    losses, rows, window = [], [], []
    for step in range(cfg.total_steps):
        tau = cfg.schedule(step)
        batch = generate_demo_batch(q, mapping, cfg.batch_size, cfg.demo_temperature, config, rng)
        try:
            loss = batch_loss(params, batch, policy, tmodel, tau, rng)
            nn.backward_and_step(loss, params.params, opt)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        value = float(loss.data)
        losses.append(value)
        window.append(value)
        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.total_steps:
            row = {"step": done, "loss": repr(float(np.mean(window))), "tau": repr(tau),
                   "eval_accuracy": ""}
            if done % cfg.eval_every == 0 or done == cfg.total_steps:
                row["eval_accuracy"] = repr(message_accuracy(params, mapping))
            rows.append(row)
            window = []
            log.info("step %d loss %s tau %.3f acc %s", done, row["loss"], tau, row["eval_accuracy"])
            if callback:
                callback(row)
    return TrainResult(params, losses, rows)


# ------------------------------------------------------------- evaluation

def evaluate(params: DecoderParams, demos) -> dict:
    """Goal accuracy, Manhattan-error histogram and prediction heatmaps.

    ``heatmaps[tx, ty, px, py]`` is the fraction of demos with true goal
    (tx, ty) whose predicted goal is (px, py).
    """
    config = params.config
    if any(d.goal is None for d in demos):
        raise DomainError("evaluation demos must carry ground-truth goals")
    if not demos:
        raise DomainError("no evaluation demos")
    msgs = np.array([d.message for d in demos])
    truth = np.array([d.goal for d in demos])
    pred = predict_goals(params, msgs)
    w, h = config.width, config.height
    counts = np.zeros((w, h, w, h))
    np.add.at(counts, (truth[:, 0], truth[:, 1], pred[:, 0], pred[:, 1]), 1.0)
    totals = counts.sum(axis=(2, 3), keepdims=True)
    heatmaps = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    dist = np.abs(truth - pred).sum(axis=1)
    histogram = {int(k): int(v) for k, v in zip(*np.unique(dist, return_counts=True))}
    per_goal = {}
    for tx in range(w):
        for ty in range(h):
            if totals[tx, ty, 0, 0] == 0:
                continue
            px, py = np.unravel_index(int(counts[tx, ty].argmax()), (w, h))
            per_goal[f"{tx},{ty}"] = {"predicted": [int(px), int(py)],
                                      "distance": int(manhattan((tx, ty), (px, py))),
                                      "n": int(totals[tx, ty, 0, 0])}
    misses = [g["distance"] for g in per_goal.values() if g["distance"] > 0]
    return {
        "accuracy": float((dist == 0).mean()),
        "coordinate_accuracy": {"x": float((truth[:, 0] == pred[:, 0]).mean()),
                                "y": float((truth[:, 1] == pred[:, 1]).mean())},
        "n_demos": len(demos),
        "distance_histogram": histogram,
        "goals_exact": sum(1 for g in per_goal.values() if g["distance"] == 0),
        "goals_total": len(per_goal),
        "miss_distances": sorted(misses),
        "max_goal_distance": max((g["distance"] for g in per_goal.values()), default=0),
        "per_goal": per_goal,
        "heatmaps": heatmaps,
    }


def heatmap_rows(heatmaps: np.ndarray):
    w, h = heatmaps.shape[:2]
    for tx in range(w):
        for ty in range(h):
            for px in range(w):
                for py in range(h):
                    yield tx, ty, px, py, float(heatmaps[tx, ty, px, py])


def write_heatmap_csv(heatmaps: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["true_gx", "true_gy", "pred_gx", "pred_gy", "proportion"])
        for tx, ty, px, py, p in heatmap_rows(heatmaps):
            out.writerow([tx, ty, px, py, repr(p)])


def passes_headline(metrics: dict, min_accuracy: float = 0.40, max_distance: int = 2,
                    min_near_miss_fraction: float = 0.80) -> tuple[bool, list[str]]:
    """Check the decoder against the headline thresholds; returns (ok, reasons)."""
    reasons = []
    if metrics["accuracy"] < min_accuracy:
        reasons.append(f"accuracy {metrics['accuracy']:.3f} < {min_accuracy}")
    if metrics["max_goal_distance"] > max_distance:
        reasons.append(f"a goal is predicted {metrics['max_goal_distance']} steps away")
    misses = metrics["miss_distances"]
    if misses:
        near = sum(1 for d in misses if d == 1) / len(misses)
        if near < min_near_miss_fraction:
            reasons.append(f"only {near:.2f} of misses at distance 1")
    return not reasons, reasons

"""Strategic equivalence of factored joint policies on small Dec-POMDP-Comms.

A joint policy gives each agent a communication map (own observation ->
symbol) and an environment map ((own observation, symbols heard from the
other agents) -> environment action). Two joint policies are
environment-level equivalent when the composed joint environment action
agrees on every joint observation. Two such policies are communication-level
equivalent when each agent's symbols differ only by a bijective relabelling.

Everything here is exhaustive, so instances must stay tiny.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, SizeError, UsageError

DEFAULT_POLICY_CAP = 10 ** 6
RETURN_TOL = 1e-9


@dataclass(frozen=True)
class AgentSpec:
    name: str
    observations: tuple
    env_actions: tuple
    alphabet: tuple


@dataclass(frozen=True)
class MicroDecPOMDPComm:
    """Deterministic Dec-POMDP-Comm with explicit tables.

    ``observe[i][state]`` is agent i's observation; ``transitions`` and
    ``rewards`` are keyed by ``(state, joint_env_action)`` and never see
    messages.
    """

    states: tuple
    agents: tuple
    observe: tuple
    transitions: dict
    rewards: dict
    initial: dict
    terminal: frozenset = frozenset()
    horizon: int = 1
    policy_cap: int = DEFAULT_POLICY_CAP

    def __post_init__(self):
        for i, agent in enumerate(self.agents):
            for s in self.states:
                if self.observe[i][s] not in agent.observations:
                    raise DomainError(f"agent {agent.name}: observation of {s!r} not in its set")
        for s in self.states:
            if s in self.terminal:
                continue
            for a in self.joint_env_actions():
                if (s, a) not in self.transitions or (s, a) not in self.rewards:
                    raise DomainError(f"missing transition or reward for state {s!r}, action {a!r}")
        if abs(sum(self.initial.values()) - 1.0) > 1e-9:
            raise DomainError("initial distribution must sum to 1")
        # cached index layout; the relation checks call these in tight loops
        radices = [len(a.alphabet) for a in self.agents]
        object.__setattr__(self, "_incoming", tuple(
            math.prod(r for j, r in enumerate(radices) if j != i) for i in range(len(radices))))
        object.__setattr__(self, "_others", tuple(
            tuple((j, r) for j, r in enumerate(radices) if j != i) for i in range(len(radices))))
        object.__setattr__(self, "_joint_obs", tuple(itertools.product(
            *(range(len(a.observations)) for a in self.agents))))

    def joint_env_actions(self):
        return list(itertools.product(*(a.env_actions for a in self.agents)))

    def joint_observations(self):
        return list(self._joint_obs)

    def incoming_size(self, i: int) -> int:
        return self._incoming[i]

    def policy_space_size(self) -> int:
        total = 1
        for i, a in enumerate(self.agents):
            n_obs = len(a.observations)
            total *= len(a.alphabet) ** n_obs
            total *= len(a.env_actions) ** (n_obs * self.incoming_size(i))
        return total

    # ------------------------------------------------------------ json io

    def to_json(self) -> str:
        payload = {
            "states": list(self.states),
            "agents": [{"name": a.name, "observations": list(a.observations),
                        "env_actions": list(a.env_actions), "alphabet": list(a.alphabet),
                        "observe": {s: self.observe[i][s] for s in self.states}}
                       for i, a in enumerate(self.agents)],
            "transitions": [{"state": s, "actions": list(a), "next": nxt,
                             "reward": self.rewards[(s, a)]}
                            for (s, a), nxt in self.transitions.items()],
            "initial": dict(self.initial),
            "terminal": sorted(self.terminal),
            "horizon": self.horizon,
        }
        return json.dumps(payload, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, policy_cap: int = DEFAULT_POLICY_CAP) -> "MicroDecPOMDPComm":
        d = json.loads(text)
        try:
            agents = tuple(AgentSpec(a["name"], tuple(a["observations"]), tuple(a["env_actions"]),
                                     tuple(a["alphabet"])) for a in d["agents"])
            observe = tuple(dict(a["observe"]) for a in d["agents"])
            transitions, rewards = {}, {}
            for row in d["transitions"]:
                key = (row["state"], tuple(row["actions"]))
                transitions[key] = row["next"]
                rewards[key] = float(row["reward"])
            return cls(tuple(d["states"]), agents, observe, transitions, rewards,
                       dict(d["initial"]), frozenset(d.get("terminal", [])), int(d["horizon"]),
                       policy_cap)
        except KeyError as exc:
            raise DomainError(f"micro-instance is missing key {exc}") from exc


@dataclass(frozen=True)
class AgentPolicy:
    comm: tuple  # obs index -> symbol index
    env: tuple   # obs index * incoming_size + incoming index -> action index


FactoredJointPolicy = tuple  # tuple[AgentPolicy, ...]


def _incoming_index(m: MicroDecPOMDPComm, i: int, symbols: Sequence[int]) -> int:
    idx = 0
    for j, radix in m._others[i]:
        idx = idx * radix + symbols[j]
    return idx


def joint_env_action(m: MicroDecPOMDPComm, policy, joint_obs: Sequence[int]) -> tuple:
    symbols = [p.comm[o] for p, o in zip(policy, joint_obs)]
    return tuple(p.env[o * m._incoming[i] + _incoming_index(m, i, symbols)]
                 for i, (p, o) in enumerate(zip(policy, joint_obs)))


def env_signature(m: MicroDecPOMDPComm, policy) -> tuple:
    """Joint environment action for every joint observation, in product order."""
    return tuple(joint_env_action(m, policy, o) for o in m._joint_obs)


def _check_domain(m: MicroDecPOMDPComm, policy) -> None:
    if len(policy) != len(m.agents):
        raise DomainError(f"policy has {len(policy)} agents, instance has {len(m.agents)}")
    for i, (p, agent) in enumerate(zip(policy, m.agents)):
        n_obs = len(agent.observations)
        if len(p.comm) != n_obs or len(p.env) != n_obs * m.incoming_size(i):
            raise DomainError(f"agent {agent.name}: policy tables do not match its observation set")


def env_equiv(m: MicroDecPOMDPComm, a, b) -> bool:
    _check_domain(m, a)
    _check_domain(m, b)
    return env_signature(m, a) == env_signature(m, b)


def _kernel(comm: Sequence[int]) -> tuple:
    """Relabel symbols by first appearance; equal kernels <=> bijective relabelling."""
    seen: dict = {}
    return tuple(seen.setdefault(s, len(seen)) for s in comm)


def comm_signature(policy) -> tuple:
    return tuple(_kernel(p.comm) for p in policy)


def comm_equiv(m: MicroDecPOMDPComm, a, b) -> bool:
    """Per-agent bijective relabelling test; defined only for env-equivalent pairs."""
    _check_domain(m, a)
    _check_domain(m, b)
    for o in m.joint_observations():
        if joint_env_action(m, a, o) != joint_env_action(m, b, o):
            labels = tuple(ag.observations[k] for ag, k in zip(m.agents, o))
            raise UsageError(f"policies are not environment-level equivalent: they differ on "
                             f"joint observation {labels}")
    for pa, pb in zip(a, b):
        forward, backward = {}, {}
        for sa, sb in zip(pa.comm, pb.comm):
            if forward.setdefault(sb, sa) != sa or backward.setdefault(sa, sb) != sb:
                return False
    return True


def partition_classes(m: MicroDecPOMDPComm, policies: Iterable, relation: str = "env") -> list[list]:
    """Partition policies into equivalence classes, canonically ordered."""
    policies = list(dict.fromkeys(policies))
    for p in policies:
        _check_domain(m, p)
    if relation == "env":
        key = lambda p: env_signature(m, p)
    elif relation == "comm":
        envs = {env_signature(m, p) for p in policies}
        if len(envs) > 1:
            raise UsageError("communication-level classes are only defined inside one "
                             f"environment-level class; input spans {len(envs)}")
        key = comm_signature
    else:
        raise DomainError(f"unknown relation {relation!r}")
    groups: dict = {}
    for p in policies:
        groups.setdefault(key(p), []).append(p)
    classes = [sorted(g, key=_policy_sort_key) for g in groups.values()]
    return sorted(classes, key=lambda c: _policy_sort_key(c[0]))


def _policy_sort_key(p):
    return tuple((a.comm, a.env) for a in p)


def enumerate_policies(m: MicroDecPOMDPComm):
    size = m.policy_space_size()
    if size > m.policy_cap:
        raise SizeError(f"policy space has {size} joint policies, cap is {m.policy_cap}", size)
    per_agent = []
    for i, agent in enumerate(m.agents):
        n_obs = len(agent.observations)
        comms = itertools.product(range(len(agent.alphabet)), repeat=n_obs)
        envs = list(itertools.product(range(len(agent.env_actions)),
                                      repeat=n_obs * m.incoming_size(i)))
        per_agent.append([AgentPolicy(c, e) for c in comms for e in envs])
    return (tuple(p) for p in itertools.product(*per_agent))


def expected_return(m: MicroDecPOMDPComm, policy) -> float:
    obs_index = [{o: k for k, o in enumerate(a.observations)} for a in m.agents]
    total = 0.0
    for s0, prob in m.initial.items():
        if prob == 0:
            continue
        s, ret = s0, 0.0
        for _ in range(m.horizon):
            if s in m.terminal:
                break
            o = [obs_index[i][m.observe[i][s]] for i in range(len(m.agents))]
            a = tuple(ag.env_actions[k]
                      for ag, k in zip(m.agents, joint_env_action(m, policy, o)))
            ret += m.rewards[(s, a)]
            s = m.transitions[(s, a)]
        total += prob * ret
    return total


@dataclass
class UnionReport:
    n_policies: int
    optimal_value: float
    n_optimal: int
    n_classes: int
    class_sizes: list
    union_holds: bool
    non_optimal_in_union: int = 0
    optimal_outside_union: int = 0
    comm_classes_per_env_class: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def table(self) -> str:
        lines = [f"joint policies       {self.n_policies}",
                 f"optimal value        {self.optimal_value:.6g}",
                 f"|optimal set|        {self.n_optimal}",
                 f"optimal env classes  {self.n_classes}",
                 f"union == optimal set {self.union_holds}",
                 "class  size  comm-classes"]
        for k, (size, cc) in enumerate(zip(self.class_sizes, self.comm_classes_per_env_class)):
            lines.append(f"{k:>5}  {size:>4}  {cc:>12}")
        return "\n".join(lines) + "\n"


def verify_optimal_union(m: MicroDecPOMDPComm) -> UnionReport:
    """Check that the optimal set equals the union of its env-level classes.

    Every class ``[pi]`` is taken over the whole policy space, not just over
    the optimal policies, so the identity is a real check.
    """
    policies = list(enumerate_policies(m))
    returns = np.array([expected_return(m, p) for p in policies])
    best = float(returns.max())
    optimal = {p for p, r in zip(policies, returns) if r >= best - RETURN_TOL}
    by_sig: dict = {}
    for p in policies:
        by_sig.setdefault(env_signature(m, p), []).append(p)
    optimal_sigs = sorted({env_signature(m, p) for p in optimal})
    union = set()
    sizes, comm_counts = [], []
    for sig in optimal_sigs:
        members = by_sig[sig]
        union.update(members)
        sizes.append(len(members))
        comm_counts.append(len({comm_signature(p) for p in members}))
    return UnionReport(
        n_policies=len(policies), optimal_value=best, n_optimal=len(optimal),
        n_classes=len(optimal_sigs), class_sizes=sizes, union_holds=union == optimal,
        non_optimal_in_union=len(union - optimal), optimal_outside_union=len(optimal - union),
        comm_classes_per_env_class=comm_counts)


# ---------------------------------------------------------------- builders

GRID_ACTIONS = ("up", "down", "left", "right")
_DELTA = {"up": (0, 1), "down": (0, -1), "left": (-1, 0), "right": (1, 0)}


def goal_signalling_micro(width: int = 3, height: int = 1, goals=((0, 0), (2, 0)),
                          alphabet_size: int = 2, horizon: int = 2,
                          listener_actions: Sequence[str] = GRID_ACTIONS,
                          policy_cap: int = DEFAULT_POLICY_CAP) -> MicroDecPOMDPComm:
    """A tiny goal-signalling grid: the speaker sees the goal and only talks,
    the listener sees its cell and only moves."""
    cells = [(x, y) for x in range(width) for y in range(height)]
    goals = [tuple(g) for g in goals]
    label = lambda c: f"{c[0]},{c[1]}"
    states = tuple(f"l{label(c)}|g{label(g)}" for c in cells for g in goals)
    speaker = AgentSpec("speaker", tuple(f"g{label(g)}" for g in goals), ("noop",),
                        tuple(f"m{k}" for k in range(alphabet_size)))
    listener = AgentSpec("listener", tuple(f"l{label(c)}" for c in cells),
                         tuple(listener_actions), ("silent",))
    observe = ({s: s.split("|")[1] for s in states}, {s: s.split("|")[0] for s in states})
    transitions, rewards, terminal, initial = {}, {}, set(), {}
    for c in cells:
        for g in goals:
            s = f"l{label(c)}|g{label(g)}"
            if c == g:
                terminal.add(s)
                continue
            initial[s] = 1.0
            for act in listener_actions:
                dx, dy = _DELTA[act]
                nc = (min(max(c[0] + dx, 0), width - 1), min(max(c[1] + dy, 0), height - 1))
                transitions[(s, ("noop", act))] = f"l{label(nc)}|g{label(g)}"
                rewards[(s, ("noop", act))] = 1.0 if nc == g else -1.0
    n = len(initial)
    initial = {s: 1.0 / n for s in initial}
    return MicroDecPOMDPComm(states, (speaker, listener), observe, transitions, rewards, initial,
                             frozenset(terminal), horizon, policy_cap)


def relabel_messages(m: MicroDecPOMDPComm, policy, agent: int, perm: Sequence[int]):
    """Apply a symbol permutation to one agent's messages, adjusting every
    listener's env map so the joint behaviour is unchanged."""
    perm = list(perm)
    out = []
    for i, p in enumerate(policy):
        if i == agent:
            out.append(AgentPolicy(tuple(perm[s] for s in p.comm), p.env))
            continue
        inc = m.incoming_size(i)
        n_obs = len(m.agents[i].observations)
        others = [j for j in range(len(m.agents)) if j != i]
        radices = [len(m.agents[j].alphabet) for j in others]
        env = list(p.env)
        for o in range(n_obs):
            for idx, syms in enumerate(itertools.product(*(range(r) for r in radices))):
                new = list(syms)
                new[others.index(agent)] = perm[syms[others.index(agent)]]
                new_idx = 0
                for r, s in zip(radices, new):
                    new_idx = new_idx * r + s
                env[o * inc + new_idx] = p.env[o * inc + idx]
        out.append(AgentPolicy(p.comm, tuple(env)))
    return tuple(out)


def random_policy(m: MicroDecPOMDPComm, rng: np.random.Generator):
    out = []
    for i, agent in enumerate(m.agents):
        n_obs = len(agent.observations)
        comm = tuple(int(v) for v in rng.integers(0, len(agent.alphabet), n_obs))
        env = tuple(int(v) for v in rng.integers(0, len(agent.env_actions),
                                                  n_obs * m.incoming_size(i)))
        out.append(AgentPolicy(comm, env))
    return tuple(out)

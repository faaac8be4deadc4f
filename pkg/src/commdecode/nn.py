"""A small reverse-mode autodiff engine on top of numpy.

Every op builds a node holding its value, its parents and a closure that maps
the output gradient to parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order, accumulating gradients additively across
fan-out. All values are float64; any non-finite value, forward or backward,
raises ``NumericError`` naming the op that produced it.

The layers built on it (MLP, GRU cell, Gumbel-Softmax, cross-entropy, Adam)
are what the planner, transition model and state decoder are made of.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError

CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None, strict: bool = False):
        """Propagate gradients from this node to every leaf requiring them.

        Finiteness is checked on this node's value and on the accumulated
        leaf gradients. When either check fails the graph is searched (or the
        pass rerun with per-op checks) so the error names the offending op.
        """
        if grad is None:
            if self.data.size != 1:
                raise DomainError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        if not _finite(self.data):
            culprit = next((n for n in order if not _finite(n.data)), self)
            raise NumericError(f"non-finite value produced by op '{culprit.op}'")
        leaves = [n for n in order if not n._parents]
        before = {id(n): n.grad for n in leaves}
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if strict and not _finite(pg):
                    raise NumericError(f"non-finite gradient flowing out of op '{node.op}'")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not strict and not all(_finite(n.grad) for n in leaves if n.grad is not None):
            for n in leaves:
                n.grad = before[id(n)]
            self.backward(grad, strict=True)
            raise NumericError("non-finite gradient from the leaves' own accumulation")

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)


def _finite(a: np.ndarray) -> bool:
    # NaN and inf both propagate through a sum; one pass, no temporaries
    return math.isfinite(float(np.sum(a)))


def check_finite(t: "Tensor", where: str) -> "Tensor":
    if not _finite(t.data):
        raise NumericError(f"non-finite value produced by {where}")
    return t


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for x of shape (n, in)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DomainError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")

    def backward(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _make(x.data @ w.data + b.data, "linear", (x, w, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(x.data.sum(axis=axis), "sum", (x,), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), "concat", tuple(parts), backward)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis)))
                for k in (key if isinstance(key, tuple) else (key,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(x.data[key], "getitem", (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, "softmax", (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, "log_softmax", (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def factor_softmax(x, slices: Sequence[slice]) -> Tensor:
    """Independent softmax over each column block of a (n, k) tensor."""
    x = as_tensor(x)
    y = np.empty_like(x.data)
    for sl in slices:
        z = x.data[:, sl] - x.data[:, sl].max(axis=1, keepdims=True)
        e = np.exp(z)
        y[:, sl] = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        gy = g * y
        out = np.empty_like(g)
        for sl in slices:
            out[:, sl] = gy[:, sl] - y[:, sl] * gy[:, sl].sum(axis=1, keepdims=True)
        return (out,)

    return _make(y, "factor_softmax", (x,), backward)


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ------------------------------------------------------------------- losses

def cross_entropy(logits, target) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``.

    ``logits`` has shape (k,) or (n, k); ``target`` is an int or an int array
    of shape (n,). Returns a scalar tensor for a single row, else shape (n,).
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    data = logits.data[None, :] if single else logits.data
    t = np.atleast_1d(np.asarray(target))
    k = data.shape[1]
    if t.shape != (data.shape[0],) or not np.issubdtype(t.dtype, np.integer):
        raise DomainError(f"targets must be {data.shape[0]} integer indices, got {target!r}")
    if (t < 0).any() or (t >= k).any():
        raise DomainError(f"target index out of range for {k} classes: {target!r}")
    z = data - data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(t))
    loss = lse - z[rows, t]

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        out = p * np.reshape(g, (-1, 1))
        return (out[0] if single else out,)

    return _make(loss[0] if single else loss, "cross_entropy", (logits,), backward)


def soft_cross_entropy(logits, target_probs: np.ndarray) -> Tensor:
    """Per-row cross-entropy against a target distribution."""
    logits = as_tensor(logits)
    return mul(tsum(mul(log_softmax(logits), target_probs), axis=-1), -1.0)


# ------------------------------------------------------------ gumbel-softmax

def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, temperature: float, rng: np.random.Generator,
                          noise: np.ndarray | None = None) -> Tensor:
    """Soft relaxed categorical sample ``softmax((logits + g) / temperature)``.

    Gradients flow to ``logits``; no straight-through rounding is applied.
    """
    if not temperature > 0:
        raise DomainError(f"Gumbel-Softmax temperature must be > 0, got {temperature}")
    logits = as_tensor(logits)
    g = sample_gumbel(logits.shape, rng) if noise is None else noise
    return softmax(mul(add(logits, g), 1.0 / temperature))


def gumbel_softmax_factors(logits, slices: Sequence[slice], temperature: float,
                           rng: np.random.Generator) -> Tensor:
    """One relaxed sample per column block, each block its own categorical."""
    if not temperature > 0:
        raise DomainError(f"Gumbel-Softmax temperature must be > 0, got {temperature}")
    logits = as_tensor(logits)
    g = sample_gumbel(logits.shape, rng)
    return factor_softmax(mul(add(logits, g), 1.0 / temperature), slices)


# -------------------------------------------------------------------- layers

def init_mlp(sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False,
             gain: float = 1.0) -> list[Tensor]:
    """Uniform fan-in initialisation, U(-gain/sqrt(fan_in), gain/sqrt(fan_in))."""
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = gain / math.sqrt(fan_in)
        if zero_last and i == len(sizes) - 2:
            w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        params += [Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)]
    return params


def forward_mlp(params: Sequence[Tensor], x) -> Tensor:
    """Affine layers with ReLU between them; the last layer stays linear."""
    x = as_tensor(x)
    single = x.data.ndim == 1
    if single:
        x = reshape(x, (1, -1))
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        if x.shape[-1] != w.shape[0]:
            raise DomainError(f"layer {i} expects width {w.shape[0]}, got {x.shape[-1]}")
        x = linear(x, w, b)
        if i < n_layers - 1:
            x = relu(x)
    check_finite(x, "forward_mlp")
    return getitem(x, 0) if single else x


GRU_NAMES = ("w_x", "w_h", "b_x", "b_h")


def init_gru(input_size: int, hidden_size: int, rng: np.random.Generator) -> list[Tensor]:
    """Gate weights stacked as [reset | update | candidate] along the output axis."""
    bound = 1.0 / math.sqrt(hidden_size)
    shapes = [(input_size, 3 * hidden_size), (hidden_size, 3 * hidden_size),
              (3 * hidden_size,), (3 * hidden_size,)]
    return [Tensor(rng.uniform(-bound, bound, size=s), requires_grad=True) for s in shapes]


def gru_cell(params: Sequence[Tensor], x, h) -> Tensor:
    """One GRU step as a single fused op: h' = cand + z * (h - cand)."""
    w_x, w_h, b_x, b_h = params
    x, h = as_tensor(x), as_tensor(h)
    n = w_h.shape[0]
    gx = x.data @ w_x.data + b_x.data
    gh = h.data @ w_h.data + b_h.data
    rz = 1.0 / (1.0 + np.exp(-(gx[:, :2 * n] + gh[:, :2 * n])))
    r, z = rz[:, :n], rz[:, n:]
    gh_c = gh[:, 2 * n:]
    cand = np.tanh(gx[:, 2 * n:] + r * gh_c)
    out = cand + z * (h.data - cand)

    def backward(g):
        d_pre_c = g * (1.0 - z) * (1.0 - cand * cand)
        d_r = d_pre_c * gh_c
        d_z = g * (h.data - cand)
        d_rz = np.concatenate([d_r, d_z], axis=1) * rz * (1.0 - rz)
        d_gx = np.concatenate([d_rz, d_pre_c], axis=1)
        d_gh = np.concatenate([d_rz, d_pre_c * r], axis=1)
        return (d_gx @ w_x.data.T if x.requires_grad else None,
                d_gh @ w_h.data.T + g * z if h.requires_grad else None,
                x.data.T @ d_gx if w_x.requires_grad else None,
                h.data.T @ d_gh if w_h.requires_grad else None,
                d_gx.sum(axis=0) if b_x.requires_grad else None,
                d_gh.sum(axis=0) if b_h.requires_grad else None)

    return _make(out, "gru_cell", (x, h, w_x, w_h, b_x, b_h), backward)


def forward_rnn(params: Sequence[Tensor], sequence: Sequence, masks: Sequence | None = None) -> Tensor:
    """Run the GRU from a zero state and return the final hidden state.

    Each element of ``sequence`` has shape (n, input) (or (input,) for a
    single sequence). ``masks``, if given, holds per-step (n, 1) arrays of
    0/1; a masked step carries the previous hidden state through unchanged,
    which lets padded batches of different lengths share one pass.
    """
    if len(sequence) == 0:
        raise DomainError("forward_rnn needs a nonempty sequence")
    seq = [as_tensor(x) for x in sequence]
    single = seq[0].data.ndim == 1
    if single:
        seq = [reshape(x, (1, -1)) for x in seq]
    width = seq[0].shape[1]
    if any(x.shape[1] != width for x in seq):
        raise DomainError("all sequence elements must share one width")
    if width != params[0].shape[0]:
        raise DomainError(f"GRU expects input width {params[0].shape[0]}, got {width}")
    h = Tensor(np.zeros((seq[0].shape[0], params[1].shape[0])))
    for t, x in enumerate(seq):
        h_new = gru_cell(params, x, h)
        if masks is None:
            h = h_new
        else:
            h = add(h, mul(masks[t], sub(h_new, h)))
    check_finite(h, "forward_rnn")
    return getitem(h, 0) if single else h


# ----------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias correction; state is one (m, v) pair per parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def backward_and_step(loss: Tensor, params: Sequence[Tensor], opt: Adam) -> list[Tensor]:
    """Backpropagate ``loss``, apply one Adam update, then clear gradients."""
    for p in params:
        p.grad = None
    loss.backward()
    opt.step()
    for p in params:
        p.grad = None
    return list(params)


# --------------------------------------------------------------- checkpoints

def params_to_lists(params: Sequence[Tensor]) -> list:
    return [p.data.tolist() for p in params]


def params_from_lists(arrays: Sequence, requires_grad: bool = True) -> list[Tensor]:
    return [Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad) for a in arrays]


def save_checkpoint(path, arch: dict, params: Sequence[Tensor]) -> None:
    payload = {"format_version": CHECKPOINT_VERSION, "arch": arch, "params": params_to_lists(params)}
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict, list[Tensor]]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {payload.get('format_version')!r}")
    return payload["arch"], params_from_lists(payload["params"])


def freeze(params: Sequence[Tensor]) -> list[Tensor]:
    """Copies that never receive gradients."""
    return [Tensor(p.data.copy()) for p in params]

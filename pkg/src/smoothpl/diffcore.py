"""Small reverse-mode autodiff over numpy arrays, MLPs and SGD.

Values live in ``Node`` objects recorded on a ``Tape``. Every op in this
module is polymorphic: given plain arrays it just computes the value, given
at least one ``Node`` it records itself so ``backward`` can run later.
``sg`` turns a node into a constant, which is how pseudo-label weights are
kept out of the gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")
SCHEDULES = ("cosine", "constant")


class InputError(ValueError):
    """Raised on malformed arguments (shapes, ranges, non-scalar roots)."""


class TrainingFault(RuntimeError):
    """Raised when an optimizer step would consume a non-finite value."""

    def __init__(self, message: str, step: int, detail: dict | None = None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.detail = detail or {}


# ---------------------------------------------------------------------------
# Tape and nodes
# ---------------------------------------------------------------------------


class Node:
    """A recorded value. ``requires_grad`` is False for constants and sg()."""

    __slots__ = ("tape", "id", "value", "op", "parents", "vjp", "requires_grad")
    __array_priority__ = 1000  # make ndarray <op> Node defer to Node

    def __init__(self, tape, value, op, parents=(), vjp=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

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

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise InputError("division by a Node is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Linear record of nodes; node ids are positions, so inputs precede outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._bound: dict[int, tuple[ModelParams, list[Node]]] = {}

    def variable(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=float), "var", requires_grad=True)

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=float), "const")

    def bind(self, params: "ModelParams") -> list[Node]:
        """Leaf nodes for every array of ``params``; repeated calls share them."""
        key = id(params)
        if key not in self._bound:
            self._bound[key] = (params, [self.variable(a) for a in params.arrays()])
        return self._bound[key][1]

    def bound_params(self) -> list["ModelParams"]:
        return [p for p, _ in self._bound.values()]

    def record(self, value, op, parents, vjp) -> Node:
        needs = any(isinstance(p, Node) and p.requires_grad for p in parents)
        return Node(self, value, op, parents, vjp if needs else None, needs)


def sg(x):
    """Stop-gradient: same value, zero adjoint."""
    if isinstance(x, Node):
        return Node(x.tape, x.value, "sg")
    return np.asarray(x, dtype=float)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _as_node(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise InputError("nodes from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(name, x, y, fn, vjp_x, vjp_y):
    tape = _tape_of(x, y)
    xv, yv = value_of(x), value_of(y)
    out = fn(xv, yv)
    if tape is None:
        return out
    xn, yn = _as_node(tape, x), _as_node(tape, y)

    def vjp(g):
        return (
            _unbroadcast(vjp_x(g, xv, yv, out), np.shape(xv)),
            _unbroadcast(vjp_y(g, xv, yv, out), np.shape(yv)),
        )

    return tape.record(out, name, (xn, yn), vjp)


def _unary(name, x, fn, vjp_fn):
    if not isinstance(x, Node):
        return fn(np.asarray(x, dtype=float))
    xv = x.value
    out = fn(xv)
    return x.tape.record(out, name, (x,), lambda g: (vjp_fn(g, xv, out),))


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def add(x, y):
    return _binary("add", x, y, np.add, lambda g, *_: g, lambda g, *_: g)


def sub(x, y):
    return _binary("sub", x, y, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(x, y):
    return _binary(
        "mul", x, y, np.multiply, lambda g, xv, yv, _: g * yv, lambda g, xv, yv, _: g * xv
    )


def matmul(x, y):
    tape = _tape_of(x, y)
    xv, yv = value_of(x), value_of(y)
    if xv.ndim != 2 or yv.ndim != 2:
        raise InputError("matmul expects 2-D operands")
    out = xv @ yv
    if tape is None:
        return out
    return tape.record(
        out,
        "matmul",
        (_as_node(tape, x), _as_node(tape, y)),
        lambda g: (g @ yv.T, xv.T @ g),
    )


def linear(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` for a vector or a row batch."""
    tape = _tape_of(x, weight, bias)
    xv, wv, bv = value_of(x), value_of(weight), value_of(bias)
    if xv.shape[-1] != wv.shape[1]:
        raise InputError(f"input dimension {xv.shape[-1]} != layer input {wv.shape[1]}")
    out = xv @ wv.T + bv
    if tape is None:
        return out

    def vjp(g):
        if xv.ndim == 1:
            return g @ wv, np.outer(g, xv), g
        return g @ wv, g.T @ xv, g.sum(axis=0)

    parents = (_as_node(tape, x), _as_node(tape, weight), _as_node(tape, bias))
    return tape.record(out, "linear", parents, vjp)


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, v, _: g * (v > 0))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, v, out: g * (1.0 - out * out))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, v, out: g * out)


def log(x):
    return _unary("log", x, np.log, lambda g, v, _: g / v)


def clip_min(x, floor: float):
    """``max(x, floor)`` with a unit derivative only where ``x > floor``."""
    return _unary(
        "clip_min", x, lambda v: np.maximum(v, floor), lambda g, v, _: g * (v > floor)
    )


def power(x, exponent: float):
    """``x ** exponent`` for ``x >= 0``; the derivative is taken as 0 at ``x = 0``."""

    def fwd(v):
        return np.power(v, exponent)

    def back(g, v, _):
        safe = np.where(v > 0, v, 1.0)
        return np.where(v > 0, g * exponent * np.power(safe, exponent - 1.0), 0.0)

    return _unary("power", x, fwd, back)


def sum_(x, axis=None):
    def back(g, v, _):
        if axis is None:
            return np.broadcast_to(g, v.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), v.shape).copy()

    return _unary("sum", x, lambda v: np.sum(v, axis=axis), back)


def mean(x, axis=None):
    n = np.size(value_of(x)) if axis is None else np.shape(value_of(x))[axis]
    if n == 0:
        raise InputError("mean of an empty array")
    return mul(sum_(x, axis), 1.0 / n)


def _log_softmax_value(v):
    shifted = v - np.max(v, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_softmax(x):
    """Numerically stable log-softmax along the last axis."""

    def back(g, v, out):
        return g - np.exp(out) * np.sum(g, axis=-1, keepdims=True)

    return _unary("log_softmax", x, _log_softmax_value, back)


def softmax(x):
    def back(g, v, out):
        return out * (g - np.sum(g * out, axis=-1, keepdims=True))

    return _unary("softmax", x, lambda v: np.exp(_log_softmax_value(v)), back)


def pick(x, index):
    """Select ``x[i, index[i]]`` from a 2-D array (or ``x[index]`` from 1-D)."""
    index = np.asarray(index, dtype=int)

    def fwd(v):
        if v.ndim == 1:
            return v[index]
        return v[np.arange(v.shape[0]), index]

    def back(g, v, _):
        out = np.zeros_like(v)
        if v.ndim == 1:
            np.add.at(out, index, g)
        else:
            out[np.arange(v.shape[0]), index] = g
        return out

    return _unary("pick", x, fwd, back)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def backward(tape: Tape, root: Node, wrt: Sequence[Node] | None = None):
    """Gradients of scalar ``root``.

    With ``wrt`` given, returns one array per node (zeros where unreachable).
    Otherwise returns a ``ModelParams`` of gradients for the single parameter
    set bound to the tape.
    """
    if not isinstance(root, Node) or root.tape is not tape:
        raise InputError("root must be a node recorded on this tape")
    if np.size(root.value) != 1:
        raise InputError(f"root must be scalar, got shape {root.shape}")

    adjoint: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    for node in reversed(tape.nodes[: root.id + 1]):
        g = adjoint.pop(node.id, None) if node.vjp is not None else adjoint.get(node.id)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.id in adjoint:
                adjoint[parent.id] = adjoint[parent.id] + pg
            else:
                adjoint[parent.id] = np.asarray(pg, dtype=float)

    def grad_for(n: Node):
        return adjoint.get(n.id, np.zeros_like(n.value))

    if wrt is not None:
        return [grad_for(n) for n in wrt]
    if len(tape._bound) != 1:
        raise InputError("tape must have exactly one bound ModelParams when wrt is omitted")
    params, leaves = next(iter(tape._bound.values()))
    return params.with_arrays([grad_for(n) for n in leaves])


# ---------------------------------------------------------------------------
# MLP parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """Weights ``(W[out, in], b[out])`` per layer; hidden layers share one activation."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise InputError("at least one layer is required")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InputError(f"layer {k}: bad shapes {w.shape}, {b.shape}")
            if k and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise InputError(f"layer {k} input does not chain with layer {k - 1}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, activation="relu"):
        """He-uniform weights, zero biases. ``sizes`` = (in, hidden..., out)."""
        if len(sizes) < 2:
            raise InputError("sizes needs an input and an output dimension")
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / fan_in)
            layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
        return cls(layers, activation)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise InputError("array count does not match layer structure")
        layers = []
        for k, (w, b) in enumerate(self.layers):
            nw, nb = np.asarray(arrays[2 * k], dtype=float), np.asarray(arrays[2 * k + 1], dtype=float)
            if nw.shape != w.shape or nb.shape != b.shape:
                raise InputError(f"layer {k}: shape mismatch")
            layers.append((nw, nb))
        return ModelParams(layers, self.activation)

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "ModelParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, ModelParams) or self.activation != other.activation:
            return False
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        layers = [(np.asarray(l["weight"], dtype=float), np.asarray(l["bias"], dtype=float)) for l in d["layers"]]
        return cls(layers, d.get("activation", "relu"))


def mlp_forward(params: ModelParams, x, tape: Tape | None = None):
    """Logits of the MLP for one input vector or a batch of rows.

    Without a tape this is plain numpy. With a tape the parameters are bound
    as leaves (shared across calls on the same tape) and the graph is recorded.
    """
    xv = value_of(x)
    if xv.ndim not in (1, 2) or xv.shape[-1] != params.sizes[0]:
        raise InputError(f"input shape {xv.shape} does not match first layer ({params.sizes[0]})")
    act = relu if params.activation == "relu" else tanh
    if tape is None:
        h = xv
        for k, (w, b) in enumerate(params.layers):
            h = h @ w.T + b
            if k < len(params.layers) - 1:
                h = act(h)
        return h
    leaves = tape.bind(params)
    h = x if isinstance(x, Node) else tape.constant(xv)
    n_layers = len(params.layers)
    for k in range(n_layers):
        h = linear(h, leaves[2 * k], leaves[2 * k + 1])
        if k < n_layers - 1:
            h = act(h)
    return h


def softmax_ce(logits, target, tape: Tape | None = None):
    """Cross-entropy ``-log softmax(logits)[argmax target]`` for a one-hot target.

    Accepts a single vector or a batch (rows); batches return the mean.
    """
    t = np.asarray(target, dtype=float)
    lv = value_of(logits)
    if t.shape != lv.shape:
        raise InputError(f"target shape {t.shape} != logits shape {lv.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=-1) == 1)):
        raise InputError("target is not one-hot")
    if tape is not None and not isinstance(logits, Node):
        logits = tape.constant(lv)
    idx = np.argmax(t, axis=-1)
    picked = pick(log_softmax(logits), idx)
    loss = mul(picked, -1.0)
    if lv.ndim == 2:
        loss = mean(loss)
    return loss if isinstance(loss, Node) else float(loss)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def lr_schedule(step: int, total_steps: int, base: float) -> float:
    """Cosine decay ``base * cos(7*pi*step / (16*total_steps))``."""
    if total_steps <= 0:
        raise InputError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    return base * math.cos(7.0 * math.pi * step / (16.0 * total_steps))


@dataclass
class OptimState:
    """SGD-with-momentum state plus the EMA copy of the parameters."""

    momentum: list[np.ndarray]
    ema: ModelParams
    lr: float = 0.03
    beta: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    total_steps: int = 1
    schedule: str = "cosine"
    step: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise InputError("learning rate must be nonnegative")
        if not 0.0 <= self.beta < 1.0:
            raise InputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InputError("weight decay must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InputError("ema decay must lie in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise InputError(f"unknown schedule {self.schedule!r}")
        shapes = [a.shape for a in self.ema.arrays()]
        if [m.shape for m in self.momentum] != shapes:
            raise InputError("momentum buffers must mirror the parameter shapes")

    @classmethod
    def fresh(cls, params: ModelParams, **hyper) -> "OptimState":
        return cls(momentum=[np.zeros_like(a) for a in params.arrays()], ema=params.copy(), **hyper)

    def current_lr(self) -> float:
        if self.schedule == "constant":
            return self.lr
        return lr_schedule(min(self.step, self.total_steps), self.total_steps, self.lr)


def sgd_step(params: ModelParams, grads: ModelParams, state: OptimState):
    """One coupled-weight-decay momentum step; returns ``(params, state)`` anew."""
    theta, g_arrays = params.arrays(), grads.arrays()
    if [a.shape for a in theta] != [g.shape for g in g_arrays]:
        raise InputError("gradient shapes do not match parameters")
    for k, g in enumerate(g_arrays):
        if not np.all(np.isfinite(g)):
            raise TrainingFault("non-finite gradient", state.step, {"array": k})
    lr = state.current_lr()
    new_theta, new_v = [], []
    for p, g, v in zip(theta, g_arrays, state.momentum):
        v = state.beta * v + (g + state.weight_decay * p)
        new_v.append(v)
        new_theta.append(p - lr * v)
    d = state.ema_decay
    new_ema = [d * e + (1.0 - d) * p for e, p in zip(state.ema.arrays(), new_theta)]
    new_state = OptimState(
        momentum=new_v,
        ema=state.ema.with_arrays(new_ema),
        lr=state.lr,
        beta=state.beta,
        weight_decay=state.weight_decay,
        ema_decay=state.ema_decay,
        total_steps=state.total_steps,
        schedule=state.schedule,
        step=state.step + 1,
    )
    return params.with_arrays(new_theta), new_state


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

LossBuilder = Callable[[Tape, ModelParams, ModelParams], Node]


def grad_check(
    loss_builder: LossBuilder,
    params: ModelParams,
    eps: float = 1e-5,
    *,
    freeze_stop_gradient: bool = True,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between ``backward`` and central differences.

    ``loss_builder(tape, theta, phi)`` must build the scalar loss where
    ``theta`` is the differentiated parameter set and ``phi`` feeds every
    stop-gradient branch (pseudo-labels and their weights). The analytic
    gradient is taken at ``theta = phi = params``.

    With ``freeze_stop_gradient`` the finite differences move ``theta`` only,
    which is exactly the derivative ``backward`` computes. Without it ``phi``
    moves too, so the differences see the full dependence, including any jump
    of a hard threshold. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    tape = Tape()
    root = loss_builder(tape, params, params)
    analytic = backward(tape, root, tape.bind(params))

    def value_at(arrays):
        theta = params.with_arrays(arrays)
        phi = params if freeze_stop_gradient else theta
        return float(value_of(loss_builder(Tape(), theta, phi)))

    base = [a.copy() for a in params.arrays()]
    worst = 0.0
    for k, a in enumerate(base):
        for idx in np.ndindex(a.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            numeric = (value_at(plus) - value_at(minus)) / (2.0 * eps)
            exact = float(analytic[k][idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    return worst

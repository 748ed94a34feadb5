"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the primitives an LSTM classifier/regressor and the quadratic
consolidation penalties need are provided. Every forward op records a
backward rule on the tape that owns its inputs; ``Tape.backward`` replays
the tape once, in reverse, and *adds* parameter gradients into a
``ParameterStore`` (callers zero them explicitly).

    >>> store = ParameterStore({"x": np.array([3.0])})
    >>> tape = Tape()
    >>> x = tape.parameter(store, "x")
    >>> tape.backward((x * x).sum(), store)
    >>> store.grad("x")
    array([6.])
"""

from __future__ import annotations

import functools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "ParameterStore",
    "Tape",
    "Node",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "sigmoid",
    "tanh",
    "concat",
    "slice",
    "dropout",
    "softmax_cross_entropy",
    "mean_squared_error",
    "lstm",
    "weighted_square_distance",
    "finite_difference_gradient",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rule."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached the tape."""


def _check_finite(value: np.ndarray, what: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite values in {what}")


class ParameterStore:
    """Named float64 parameters backed by one flat buffer.

    ``store[name]`` and ``store.grad(name)`` are views into ``flat`` and
    ``flat_grad``; optimizers may work on the flat buffers directly. Names
    keep insertion order, which fixes the flat layout.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.flat = np.zeros(0, dtype=DTYPE)
        self.flat_grad = np.zeros(0, dtype=DTYPE)
        self._views: dict[str, np.ndarray] = {}
        self._grad_views: dict[str, np.ndarray] = {}
        if arrays:
            for name, value in arrays.items():
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._layout:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=DTYPE)
        if value.ndim == 0 or value.size == 0:
            raise ShapeError(f"parameter {name!r} needs a non-empty array, got shape {value.shape}")
        offset = self.flat.size
        self._layout[name] = (offset, value.shape)
        self.flat = np.concatenate([self.flat, value.ravel()])
        self.flat_grad = np.concatenate([self.flat_grad, np.zeros(value.size)])
        self._rebuild_views()

    def _rebuild_views(self) -> None:
        self._views = {}
        self._grad_views = {}
        for name, (offset, shape) in self._layout.items():
            size = int(np.prod(shape))
            self._views[name] = self.flat[offset:offset + size].reshape(shape)
            self._grad_views[name] = self.flat_grad[offset:offset + size].reshape(shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self._views[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != view.shape:
            raise ShapeError(f"parameter {name!r} has shape {view.shape}, got {value.shape}")
        view[...] = value

    def __contains__(self, name: object) -> bool:
        return name in self._layout

    def __iter__(self):
        return iter(self._layout)

    def __len__(self) -> int:
        return len(self._layout)

    def names(self) -> list[str]:
        return list(self._layout)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: shape for name, (_, shape) in self._layout.items()}

    def items(self):
        return self._views.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grad_views[name]

    def grads(self) -> dict[str, np.ndarray]:
        return dict(self._grad_views)

    def zero_grad(self) -> None:
        self.flat_grad[...] = 0.0

    @property
    def size(self) -> int:
        return self.flat.size

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep copy of every parameter, keyed by name."""
        return {name: view.copy() for name, view in self._views.items()}

    def grad_snapshot(self) -> dict[str, np.ndarray]:
        return {name: view.copy() for name, view in self._grad_views.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._layout) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, value in arrays.items():
            self[name] = value

    def split(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Views of a flat vector laid out like this store."""
        out = {}
        for name, (offset, shape) in self._layout.items():
            size = int(np.prod(shape))
            out[name] = flat[offset:offset + size].reshape(shape)
        return out


class Node:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum(self)


# backward rule: (upstream grad, which parents need a grad) -> grads per parent
BackwardRule = Callable[[np.ndarray, Sequence[bool]], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of forward operations.

    Nodes are appended as they are computed, so every operation's inputs
    precede it and the reverse index order is a valid backward schedule.
    A tape can be replayed backward once.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._parents: list[tuple[int, ...]] = []
        self._rules: list[BackwardRule | None] = []
        self._needs_grad: list[bool] = []
        self._param_names: dict[int, str] = {}
        self._param_nodes: dict[tuple[int, str], Node] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, value, parents, rule, needs_grad) -> Node:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        node = Node(value, self, len(self._nodes))
        self._nodes.append(node)
        self._parents.append(parents)
        self._rules.append(rule)
        self._needs_grad.append(needs_grad)
        return node

    def constant(self, value) -> Node:
        value = np.asarray(value, dtype=DTYPE)
        _check_finite(value, "constant")
        return self._append(value, (), None, False)

    def parameter(self, store: ParameterStore, name: str) -> Node:
        """Leaf node for ``store[name]`` (the live view, not a copy)."""
        key = (id(store), name)
        node = self._param_nodes.get(key)
        if node is None:
            value = store[name]
            _check_finite(value, f"parameter {name!r}")
            node = self._append(value, (), None, True)
            self._param_names[node.index] = name
            self._param_nodes[key] = node
        return node

    def record(self, value: np.ndarray, inputs: Sequence[Node], rule: BackwardRule) -> Node:
        _check_finite(value, "operation output")
        parents = tuple(n.index for n in inputs)
        needs = any(self._needs_grad[i] for i in parents)
        return self._append(value, parents, rule if needs else None, needs)

    def backward(self, loss: Node, store: ParameterStore) -> None:
        """Add d(loss)/d(parameter) into ``store``'s gradient slots.

        Parameters that never reached ``loss`` receive nothing.
        """
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        self._consumed = True
        adjoint: list[np.ndarray | None] = [None] * (loss.index + 1)
        adjoint[loss.index] = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            g = adjoint[idx]
            if g is None or not self._needs_grad[idx]:
                continue
            adjoint[idx] = None
            name = self._param_names.get(idx)
            if name is not None:
                store.grad(name)[...] += g
                continue
            parents = self._parents[idx]
            needs = [self._needs_grad[p] for p in parents]
            grads = self._rules[idx](g, needs)
            for p, need, pg in zip(parents, needs, grads):
                if not need or pg is None:
                    continue
                if adjoint[p] is None:
                    adjoint[p] = pg
                else:
                    adjoint[p] = adjoint[p] + pg


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one operand must be a Node")


def _as_node(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only the trailing-bias pattern (..., n) + (n,) is supported
    if g.shape == shape:
        return g
    return g.reshape(-1, *shape).sum(axis=0)


def _check_add_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not conform")

    def rule(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return tape.record(av @ bv, (a, b), rule)


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_add_shapes(a.value, b.value, "add")
    sa, sb = a.value.shape, b.value.shape

    def rule(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return tape.record(a.value + b.value, (a, b), rule)


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_add_shapes(a.value, b.value, "sub")
    sa, sb = a.value.shape, b.value.shape

    def rule(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, -_unbroadcast(g, sb) if needs[1] else None)

    return tape.record(a.value - b.value, (a, b), rule)


def mul(a, b) -> Node:
    """Elementwise product (same shapes, or a trailing bias-shaped vector)."""
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_add_shapes(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def rule(g, needs):
        return (
            _unbroadcast(g * bv, av.shape) if needs[0] else None,
            _unbroadcast(g * av, bv.shape) if needs[1] else None,
        )

    return tape.record(av * bv, (a, b), rule)


def scale(a: Node, k: float) -> Node:
    """Multiply by a plain Python scalar."""
    k = float(k)
    if not np.isfinite(k):
        raise NonFiniteError("non-finite scale factor")

    def rule(g, needs):
        return (g * k,)

    return a.tape.record(a.value * k, (a,), rule)


def sum(a: Node) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = a.value.shape

    def rule(g, needs):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return a.tape.record(np.array(a.value.sum()), (a,), rule)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a: Node) -> Node:
    y = _sigmoid(a.value)

    def rule(g, needs):
        return (g * y * (1.0 - y),)

    return a.tape.record(y, (a,), rule)


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)

    def rule(g, needs):
        return (g * (1.0 - y * y),)

    return a.tape.record(y, (a,), rule)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_as_node(tape, n) for n in nodes]
    values = [n.value for n in nodes]
    ndim = values[0].ndim
    ax = axis % ndim
    for v in values[1:]:
        if v.ndim != ndim or any(v.shape[d] != values[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: shapes {values[0].shape} and {v.shape} do not conform on axis {axis}")
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]

    def rule(g, needs):
        return np.split(g, bounds, axis=ax)

    return tape.record(np.concatenate(values, axis=ax), nodes, rule)


def slice(a: Node, index) -> Node:  # noqa: A001
    """Basic numpy indexing (ints and slices); ints drop their axis."""
    shape = a.value.shape
    try:
        y = a.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {shape}") from exc
    y = np.array(y, dtype=DTYPE)

    def rule(g, needs):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] += g
        return (out,)

    return a.tape.record(y, (a,), rule)


def dropout(a: Node, p: float, train: bool, rng: np.random.Generator | None = None) -> Node:
    """Inverted dropout; the identity (same node) when ``train`` is false."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(a.value.shape) >= p) / (1.0 - p)

    def rule(g, needs):
        return (g * mask,)

    return a.tape.record(a.value * mask, (a,), rule)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


def softmax_cross_entropy(logits: Node, targets) -> Node:
    """Mean negative log-likelihood of integer class ``targets``."""
    lv = logits.value
    targets = np.asarray(targets)
    if lv.ndim == 1:
        lv = lv[None, :]
    if targets.ndim == 0:
        targets = targets[None]
    if lv.ndim != 2 or targets.shape != (lv.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.value.shape} vs targets {targets.shape}")
    if targets.dtype.kind not in "iu" or targets.min() < 0 or targets.max() >= lv.shape[1]:
        raise ValueError("targets must be integer class indices within range")
    n = lv.shape[0]
    logp = log_softmax(lv)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    orig_shape = logits.value.shape

    def rule(g, needs):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return ((g / n) * d.reshape(orig_shape),)

    return logits.tape.record(np.array(loss), (logits,), rule)


def mean_squared_error(pred: Node, target) -> Node:
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pred.value.shape:
        raise ShapeError(f"mean_squared_error: prediction {pred.value.shape} vs target {target.shape}")
    _check_finite(target, "regression target")
    diff = pred.value - target
    n = diff.size

    def rule(g, needs):
        return (g * (2.0 / n) * diff,)

    return pred.tape.record(np.array((diff * diff).mean()), (pred,), rule)


# batch * hidden at or below which the compiled scalar forward beats numpy
SMALL_LSTM = 256


@functools.lru_cache(maxsize=None)
def _gate_affine(H: int) -> tuple[np.ndarray, np.ndarray]:
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so all four gates share one tanh
    pre = np.full(4 * H, 0.5)
    pre[2 * H:3 * H] = 1.0
    post_add = np.full(4 * H, 0.5)
    post_add[2 * H:3 * H] = 0.0
    return pre, post_add


def lstm(x: Node, w_in: Node, w_rec: Node, bias: Node) -> Node:
    """Run one LSTM layer over a batch of sequences from a zero state.

    ``x`` is (batch, time, input), ``w_in`` is (input, 4H), ``w_rec`` is
    (H, 4H) and ``bias`` is (4H,), gate blocks ordered input, forget,
    candidate, output. Returns every hidden state, (batch, time, H).

    This is a fused primitive: the result equals the cell composed from
    matmul/add/slice/sigmoid/tanh/mul (see ``network.lstm_reference``),
    but records one tape entry per layer instead of ~15 per time step.
    """
    tape = _tape_of(x, w_in, w_rec, bias)
    xv, wv, uv, bv = x.value, w_in.value, w_rec.value, bias.value
    if xv.ndim != 3:
        raise ShapeError(f"lstm: input must be (batch, time, features), got {xv.shape}")
    B, T, I = xv.shape
    H = uv.shape[0]
    if wv.shape != (I, 4 * H) or uv.shape != (H, 4 * H) or bv.shape != (4 * H,):
        raise ShapeError(
            f"lstm: input {xv.shape} incompatible with weights {wv.shape}, {uv.shape}, bias {bv.shape}"
        )
    xw = (xv.reshape(B * T, I) @ wv).reshape(B, T, 4 * H) + bv
    hs = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    cs = np.zeros((B, T + 1, H))  # cs[:, t + 1] is the cell state after step t
    tcs = np.empty((B, T, H))
    if B * H <= SMALL_LSTM:
        _kernels.lstm_forward(xw, uv, gates, cs, tcs, hs)
    else:
        pre, post_add = _gate_affine(H)
        h = np.zeros((B, H))
        for t in range(T):
            z = xw[:, t] + h @ uv
            a = np.tanh(z * pre)
            a *= pre
            a += post_add
            gates[:, t] = a
            c = a[:, H:2 * H] * cs[:, t] + a[:, :H] * a[:, 2 * H:3 * H]
            cs[:, t + 1] = c
            tc = np.tanh(c)
            tcs[:, t] = tc
            h = a[:, 3 * H:] * tc
            hs[:, t] = h

    def rule(g, needs):
        dz_all = np.empty((B, T, 4 * H))
        _kernels.lstm_backward(np.ascontiguousarray(g), gates, cs, tcs, np.ascontiguousarray(uv.T), dz_all)
        flat_dz = dz_all.reshape(B * T, 4 * H)
        dx = (flat_dz @ wv.T).reshape(B, T, I) if needs[0] else None
        dw = xv.reshape(B * T, I).T @ flat_dz if needs[1] else None
        d_rec = None
        if needs[2] and T > 1:
            d_rec = hs[:, :-1].reshape(B * (T - 1), H).T @ dz_all[:, 1:].reshape(B * (T - 1), 4 * H)
        elif needs[2]:
            d_rec = np.zeros_like(uv)
        db = flat_dz.sum(axis=0) if needs[3] else None
        return (dx, dw, d_rec, db)

    return tape.record(hs, (x, w_in, w_rec, bias), rule)


def weighted_square_distance(theta: Node, anchor, weight) -> Node:
    """Scalar sum(weight * (theta - anchor)**2) with constant anchor/weight.

    Same value and gradient as the composed sub/mul/mul/sum chain, in
    fewer passes over large parameter arrays.
    """
    anchor = np.asarray(anchor, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    if anchor.shape != theta.value.shape or weight.shape != theta.value.shape:
        raise ShapeError(
            f"weighted_square_distance: parameter {theta.value.shape}, anchor {anchor.shape}, weight {weight.shape}"
        )
    diff = theta.value - anchor
    wdiff = weight * diff
    value = np.array(np.dot(wdiff.ravel(), diff.ravel()))

    def rule(g, needs):
        return (wdiff * (2.0 * float(g)),)

    return theta.tape.record(value, (theta,), rule)


def finite_difference_gradient(
    f: Callable[[ParameterStore], float],
    store: ParameterStore,
    step: float = 1e-5,
    names: Iterable[str] | None = None,
    order: int = 2,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at the store's values.

    ``order=2`` is (f(x+h) - f(x-h)) / 2h. ``order=4`` uses the five-point
    stencil (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h, whose
    truncation error is small enough at larger steps to keep rounding
    noise well below 1e-4 relative on entries near 1e-8.
    Each parameter element is perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    base = float(f(store))
    if float(f(store)) != base:
        raise ValueError("f is not deterministic: two evaluations at the same point differ")
    out = {}
    for name in names if names is not None else store.names():
        view = store[name]
        grad = np.zeros_like(view)
        flat_view = view.reshape(-1)
        flat_grad = grad.reshape(-1)
        for k in range(flat_view.size):
            orig = flat_view[k]

            def at(offset):
                flat_view[k] = orig + offset
                return float(f(store))

            near = at(step) - at(-step)
            if order == 2:
                flat_grad[k] = near / (2.0 * step)
            else:
                far = at(2.0 * step) - at(-2.0 * step)
                flat_grad[k] = (8.0 * near - far) / (12.0 * step)
            flat_view[k] = orig
        out[name] = grad
    return out

"""Consolidation penalties: EWC, online EWC and synaptic intelligence.

All three add ``strength * sum_i w_i * (theta_i - theta*_i)**2`` to the
task loss and differ only in where the weights ``w`` and anchors
``theta*`` come from:

* EWC keeps one (Fisher diagonal, parameter snapshot) pair per finished task.
* Online EWC keeps a single running Fisher, ``F <- gamma * F + F_new``,
  anchored at the most recent snapshot.
* SI accumulates per-parameter importance from the path integral of
  ``-grad * delta_theta`` over each task, damped by the squared total
  displacement plus ``xi``.

There is deliberately no factor 1/2 in any penalty.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Node, ParameterStore, ShapeError, Tape

STRATEGIES = ("none", "ewc", "online_ewc", "si")

DEFAULT_LAMBDA = 500_000.0
DEFAULT_GAMMA = 2.0
DEFAULT_C = 200.0
DEFAULT_XI = 0.01

CHECKPOINT_FORMAT = "batterycl-checkpoint"
CHECKPOINT_VERSION = 1


class StrategyStateError(RuntimeError):
    """Strategy state is missing or does not match the network."""


@dataclass(frozen=True)
class StrategyKind:
    kind: str = "none"
    lam: float = DEFAULT_LAMBDA
    gamma: float = DEFAULT_GAMMA
    c: float = DEFAULT_C
    xi: float = DEFAULT_XI

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {', '.join(STRATEGIES)}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.c < 0:
            raise ValueError("c must be >= 0")
        if self.xi <= 0:
            raise ValueError("xi must be > 0")

    @property
    def strength(self) -> float:
        if self.kind in ("ewc", "online_ewc"):
            return self.lam
        if self.kind == "si":
            return self.c
        return 0.0


def _check_aligned(store: ParameterStore, arrays: Mapping[str, np.ndarray], what: str) -> None:
    names = store.names()
    if set(arrays) != set(names):
        raise ShapeError(f"{what}: parameter names {sorted(arrays)} do not match the network {sorted(names)}")
    for name in names:
        if arrays[name].shape != store[name].shape:
            raise ShapeError(f"{what}: {name!r} has shape {arrays[name].shape}, network has {store[name].shape}")


def _zeros_like_store(store: ParameterStore) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in store.items()}


def quadratic_penalty(
    tape: Tape,
    store: ParameterStore,
    anchor: Mapping[str, np.ndarray],
    weight: Mapping[str, np.ndarray],
) -> Node:
    """sum over parameters of weight * (theta - anchor)**2 (no strength factor)."""
    total = None
    for name in store.names():
        term = T.weighted_square_distance(tape.parameter(store, name), anchor[name], weight[name])
        total = term if total is None else T.add(total, term)
    return total


# --------------------------------------------------------------------------
# Fisher information


def fisher_diagonal(net, windows: np.ndarray, sample_count: int | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    """Monte-Carlo diagonal Fisher with labels sampled from the model itself.

    For each datapoint (all of them, or ``sample_count`` drawn without
    replacement, kept in dataset order) one label is drawn from the model's
    eval-mode softmax by inverse-CDF sampling with ``rng.random()``; the
    squared gradient of its log-likelihood is averaged over datapoints.
    The network's gradient slots are restored afterwards.
    """
    if getattr(net, "head", None) != "classification":
        raise ValueError("Fisher information needs a classification head (prediction likelihoods)")
    windows = np.asarray(windows, dtype=np.float64)
    n = len(windows)
    if n == 0:
        raise ValueError("Fisher estimation needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    if sample_count is None or sample_count == n:
        chosen = np.arange(n)
    elif 0 < sample_count < n:
        chosen = np.sort(rng.choice(n, size=sample_count, replace=False))
    else:
        raise ValueError(f"sample_count must be in [1, {n}], got {sample_count}")

    store: ParameterStore = net.store
    saved = store.flat_grad.copy()
    acc = np.zeros(store.size)
    try:
        for k in chosen:
            tape = Tape()
            logits = net.forward(tape, windows[k:k + 1], train=False)
            probs = T.softmax(logits.value.reshape(-1))
            label = sample_label(probs, rng.random())
            store.zero_grad()
            tape.backward(T.softmax_cross_entropy(logits, np.array([label])), store)
            # grad of -log p is the negated score; the square is unaffected
            acc += store.flat_grad * store.flat_grad
    finally:
        store.flat_grad[...] = saved
    acc /= len(chosen)
    return {name: view.copy() for name, view in store.split(acc).items()}


def sample_label(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw: the first class whose cumulative probability exceeds ``u``."""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


# --------------------------------------------------------------------------
# EWC


@dataclass
class TaskAnchor:
    task_id: str
    theta_star: dict[str, np.ndarray]
    fisher_diag: dict[str, np.ndarray]


def ewc_penalty(store: ParameterStore, anchors: Sequence[TaskAnchor], lam: float, tape: Tape | None = None) -> Node:
    """lam * sum over anchors of sum_i F_i (theta_i - theta*_i)**2."""
    if tape is None:
        tape = Tape()
    total = None
    for anchor in anchors:
        _check_aligned(store, anchor.theta_star, f"anchor {anchor.task_id}")
        _check_aligned(store, anchor.fisher_diag, f"anchor {anchor.task_id}")
        term = quadratic_penalty(tape, store, anchor.theta_star, anchor.fisher_diag)
        total = term if total is None else T.add(total, term)
    if total is None:
        return tape.constant(0.0)
    return T.scale(total, lam)


def consolidate_ewc(
    anchors: list[TaskAnchor], store: ParameterStore, fisher: Mapping[str, np.ndarray], task_id: str
) -> TaskAnchor:
    """Append a new anchor (deep copies of parameters and Fisher)."""
    if any(a.task_id == task_id for a in anchors):
        raise ValueError(f"task {task_id!r} already consolidated")
    _check_aligned(store, fisher, "fisher")
    for name, f in fisher.items():
        if (f < 0).any():
            raise ValueError(f"negative Fisher entries for {name!r}")
    anchor = TaskAnchor(task_id, store.snapshot(), {n: np.array(f, dtype=np.float64) for n, f in fisher.items()})
    anchors.append(anchor)
    return anchor


# --------------------------------------------------------------------------
# Online EWC


@dataclass
class OnlineAnchor:
    theta_star: dict[str, np.ndarray]
    running_fisher: dict[str, np.ndarray]
    gamma: float = DEFAULT_GAMMA
    tasks: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, store: ParameterStore, gamma: float = DEFAULT_GAMMA) -> "OnlineAnchor":
        return cls(store.snapshot(), _zeros_like_store(store), gamma, [])


def consolidate_online_ewc(
    anchor: OnlineAnchor, store: ParameterStore, new_fisher: Mapping[str, np.ndarray], task_id: str | None = None
) -> OnlineAnchor:
    """running_fisher <- gamma * running_fisher + new_fisher; re-anchor at theta."""
    _check_aligned(store, new_fisher, "fisher")
    running = {}
    for name in store.names():
        f = np.asarray(new_fisher[name], dtype=np.float64)
        if (f < 0).any():
            raise ValueError(f"negative Fisher entries for {name!r}")
        running[name] = anchor.gamma * anchor.running_fisher[name] + f
    tasks = anchor.tasks + ([task_id] if task_id is not None else [f"task{len(anchor.tasks) + 1}"])
    return OnlineAnchor(store.snapshot(), running, anchor.gamma, tasks)


def online_ewc_penalty(store: ParameterStore, anchor: OnlineAnchor, lam: float, tape: Tape | None = None) -> Node:
    if tape is None:
        tape = Tape()
    _check_aligned(store, anchor.theta_star, "online anchor")
    _check_aligned(store, anchor.running_fisher, "online anchor")
    return T.scale(quadratic_penalty(tape, store, anchor.theta_star, anchor.running_fisher), lam)


# --------------------------------------------------------------------------
# Synaptic intelligence


@dataclass
class SiState:
    omega: dict[str, np.ndarray]
    path_w: dict[str, np.ndarray]
    theta_task_start: dict[str, np.ndarray]
    theta_star: dict[str, np.ndarray]
    xi: float = DEFAULT_XI
    consolidations: int = 0

    @classmethod
    def start(cls, store: ParameterStore, xi: float = DEFAULT_XI) -> "SiState":
        return cls(_zeros_like_store(store), _zeros_like_store(store), store.snapshot(), store.snapshot(), xi, 0)


def si_step(si: SiState, unreg_grads: Mapping[str, np.ndarray], delta_theta: Mapping[str, np.ndarray]) -> SiState:
    """path_w += -grad * delta_theta, in place; grads of the task loss only."""
    if set(unreg_grads) != set(si.path_w) or set(delta_theta) != set(si.path_w):
        raise ShapeError("si_step: gradient/update names do not match the SI state")
    for name, acc in si.path_w.items():
        g, d = unreg_grads[name], delta_theta[name]
        if g.shape != acc.shape or d.shape != acc.shape:
            raise ShapeError(f"si_step: shape mismatch for {name!r}")
        acc -= g * d
    return si


def si_consolidate(si: SiState, store: ParameterStore) -> SiState:
    """omega += max(path_w, 0) / (displacement**2 + xi); start a new task."""
    for name in store.names():
        theta_end = store[name]
        disp = theta_end - si.theta_task_start[name]
        si.omega[name] += np.maximum(si.path_w[name], 0.0) / (disp * disp + si.xi)
        si.path_w[name][...] = 0.0
    si.theta_star = store.snapshot()
    si.theta_task_start = store.snapshot()
    si.consolidations += 1
    return si


def si_penalty(store: ParameterStore, si: SiState, c: float, tape: Tape | None = None) -> Node:
    if tape is None:
        tape = Tape()
    _check_aligned(store, si.omega, "SI state")
    if si.consolidations == 0:
        return tape.constant(0.0)
    return T.scale(quadratic_penalty(tape, store, si.theta_star, si.omega), c)


# --------------------------------------------------------------------------
# common interface used by the trainer


class Strategy:
    """Penalty plus consolidation bookkeeping for one training run."""

    kind = "none"
    needs_unregularized_grads = False

    def __init__(self, spec: StrategyKind, store: ParameterStore):
        if spec.kind != self.kind:
            raise StrategyStateError(f"{type(self).__name__} cannot run strategy {spec.kind!r}")
        self.spec = spec
        self.store = store
        self.names = store.names()
        self.consolidated: list[str] = []

    def check_store(self, store: ParameterStore) -> None:
        if store.names() != self.names:
            raise StrategyStateError("strategy state parameter names do not match the network")

    @property
    def active(self) -> bool:
        """Whether the penalty can be non-zero right now."""
        return self.spec.strength > 0 and bool(self.consolidated)

    def penalty(self, tape: Tape, store: ParameterStore) -> Node | None:
        return None

    def begin_task(self, store: ParameterStore, task_id: str) -> None:
        self.check_store(store)

    def observe_step(self, unreg_grads, delta_theta) -> None:
        pass

    def end_task(self, net, train_windows: np.ndarray, task_id: str, seed: int) -> None:
        self.check_store(net.store)
        if task_id in self.consolidated:
            raise StrategyStateError(f"task {task_id!r} consolidated twice")
        self._consolidate(net, train_windows, task_id, seed)
        self.consolidated.append(task_id)

    def _consolidate(self, net, train_windows, task_id, seed) -> None:
        pass

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], consolidated: Sequence[str]) -> None:
        self.consolidated = list(consolidated)


class NoRegularization(Strategy):
    kind = "none"


class Ewc(Strategy):
    kind = "ewc"

    def __init__(self, spec, store):
        super().__init__(spec, store)
        self.anchors: list[TaskAnchor] = []

    def penalty(self, tape, store):
        return ewc_penalty(store, self.anchors, self.spec.lam, tape)

    def _consolidate(self, net, train_windows, task_id, seed):
        consolidate_ewc(self.anchors, net.store, fisher_diagonal(net, train_windows, seed=seed), task_id)

    def state_arrays(self):
        out = {}
        for k, a in enumerate(self.anchors):
            for name in self.names:
                out[f"anchor{k}/theta_star/{name}"] = a.theta_star[name]
                out[f"anchor{k}/fisher/{name}"] = a.fisher_diag[name]
        return out

    def load_state_arrays(self, arrays, consolidated):
        super().load_state_arrays(arrays, consolidated)
        self.anchors = [
            TaskAnchor(
                task_id,
                {n: np.array(arrays[f"anchor{k}/theta_star/{n}"]) for n in self.names},
                {n: np.array(arrays[f"anchor{k}/fisher/{n}"]) for n in self.names},
            )
            for k, task_id in enumerate(consolidated)
        ]


class OnlineEwc(Strategy):
    kind = "online_ewc"

    def __init__(self, spec, store):
        super().__init__(spec, store)
        self.anchor = OnlineAnchor.empty(store, spec.gamma)

    def penalty(self, tape, store):
        return online_ewc_penalty(store, self.anchor, self.spec.lam, tape)

    def _consolidate(self, net, train_windows, task_id, seed):
        self.anchor = consolidate_online_ewc(self.anchor, net.store, fisher_diagonal(net, train_windows, seed=seed), task_id)

    def state_arrays(self):
        out = {}
        for name in self.names:
            out[f"online/theta_star/{name}"] = self.anchor.theta_star[name]
            out[f"online/fisher/{name}"] = self.anchor.running_fisher[name]
        return out

    def load_state_arrays(self, arrays, consolidated):
        super().load_state_arrays(arrays, consolidated)
        self.anchor = OnlineAnchor(
            {n: np.array(arrays[f"online/theta_star/{n}"]) for n in self.names},
            {n: np.array(arrays[f"online/fisher/{n}"]) for n in self.names},
            self.spec.gamma,
            list(consolidated),
        )


class SynapticIntelligence(Strategy):
    kind = "si"
    needs_unregularized_grads = True

    def __init__(self, spec, store):
        super().__init__(spec, store)
        self.state = SiState.start(store, spec.xi)

    def penalty(self, tape, store):
        return si_penalty(store, self.state, self.spec.c, tape)

    def observe_step(self, unreg_grads, delta_theta):
        si_step(self.state, unreg_grads, delta_theta)

    def _consolidate(self, net, train_windows, task_id, seed):
        si_consolidate(self.state, net.store)

    def state_arrays(self):
        out = {}
        for key in ("omega", "path_w", "theta_task_start", "theta_star"):
            for name in self.names:
                out[f"si/{key}/{name}"] = getattr(self.state, key)[name]
        return out

    def load_state_arrays(self, arrays, consolidated):
        super().load_state_arrays(arrays, consolidated)
        self.state = SiState(
            *({n: np.array(arrays[f"si/{key}/{n}"]) for n in self.names}
              for key in ("omega", "path_w", "theta_task_start", "theta_star")),
            xi=self.spec.xi,
            consolidations=len(consolidated),
        )


_CLASSES = {cls.kind: cls for cls in (NoRegularization, Ewc, OnlineEwc, SynapticIntelligence)}


def make_strategy(spec: StrategyKind, store: ParameterStore) -> Strategy:
    return _CLASSES[spec.kind](spec, store)


def total_loss(strategy: Strategy, task_loss: Node, task_index: int = 0) -> Node:
    """Task loss plus the strategy's penalty, on the task loss's tape.

    Returns ``task_loss`` itself when the penalty is identically zero
    (strategy ``none``, zero strength, or nothing consolidated yet).
    """
    if strategy.kind != "none" and task_index > 0 and len(strategy.consolidated) < task_index:
        raise StrategyStateError(
            f"strategy {strategy.kind!r} has {len(strategy.consolidated)} consolidated task(s) at task index {task_index}"
        )
    if not strategy.active:
        return task_loss
    return T.add(task_loss, strategy.penalty(task_loss.tape, strategy.store))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, store: ParameterStore, strategy: Strategy, meta: Mapping | None = None) -> None:
    """Write parameters and strategy state as an uncompressed ``.npz``.

    Arrays are little-endian float64 named ``param/<name>`` and
    ``<strategy section>/<field>/<name>``; ``__header__`` holds a JSON
    document with format name, version, strategy settings, consolidated
    task ids, parameter shapes and ``meta``.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "strategy": asdict(strategy.spec),
        "consolidated": list(strategy.consolidated),
        "shapes": {n: list(s) for n, s in store.shapes().items()},
        "meta": dict(meta or {}),
    }
    arrays = {f"param/{n}": v.astype("<f8") for n, v in store.items()}
    arrays.update({k: np.asarray(v).astype("<f8") for k, v in strategy.state_arrays().items()})
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Return (parameters, strategy spec, consolidated ids, state arrays, meta)."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        state = {k: data[k] for k in data.files if not k.startswith("param/") and k != "__header__"}
    spec = StrategyKind(**header["strategy"])
    return params, spec, header["consolidated"], state, header["meta"]


def restore_strategy(path: str | Path, store: ParameterStore) -> Strategy:
    """Load parameters into ``store`` and rebuild the strategy from a checkpoint."""
    params, spec, consolidated, state, _ = load_checkpoint(path)
    store.load(params)
    strategy = make_strategy(spec, store)
    strategy.load_state_arrays(state, consolidated)
    return strategy

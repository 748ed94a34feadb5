"""Training protocols: sequential SoH classification and RUL regression.

Seeds: run ``r`` uses ``run_seed = seed + r``. Every random stream of a run
is an independent generator seeded with ``[run_seed, offset, ...]``:

=========  ======  =================================================
stream     offset  extra key
=========  ======  =================================================
init       0       -
split      1       task position
shuffle    2       -
dropout    3       -
fisher     4       task position
=========  ======  =================================================
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from . import tensor as T
from .data import DataError, GroupData, TaskDataset, make_battery_split_task, make_task
from .metrics import (
    MetricsCube,
    RegressionCase,
    RegressionReport,
    accuracy,
    config_fingerprint,
    rmse_percent,
)
from .network import CLASSIFICATION, REGRESSION, LstmNetwork, NetworkConfig, build_network
from .regularizers import Strategy, StrategyKind, make_strategy, save_checkpoint, total_loss
from .tensor import NonFiniteError, ParameterStore, Tape

log = logging.getLogger(__name__)

SEED_OFFSETS = {"init": 0, "split": 1, "shuffle": 2, "dropout": 3, "fisher": 4}


def stream_seed(run_seed: int, stream: str, *extra: int) -> list[int]:
    return [int(run_seed), SEED_OFFSETS[stream], *map(int, extra)]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    epochs: int = 100
    lr: float = 1e-3
    runs: int = 5
    seed: int = 0
    window: int = 10
    strategy: StrategyKind = field(default_factory=StrategyKind)
    network: NetworkConfig = CLASSIFICATION
    task_order: tuple[str, ...] | None = None
    fisher_samples: int | None = None
    split_seed: int | None = None  # fixed train/test split; None derives it from each run's seed

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["task_order"] = list(self.task_order) if self.task_order else None
        return d


class Adam:
    """Adam over a store's flat buffers (bias-corrected, no weight decay)."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(store.size)
        self.v = np.zeros(store.size)
        self.t = 0
        self._delta = np.empty(store.size)

    def step(self) -> np.ndarray:
        """Apply one update from ``store.flat_grad``; returns the applied flat delta.

        The returned buffer is reused by the next call; copy it to keep it.
        """
        g = self.store.flat_grad
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient; optimizer step refused")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        _kernels.adam_update(
            self.store.flat, g, self.m, self.v, self._delta,
            self.lr / (1.0 - b1 ** self.t), b1, b2, 1.0 / np.sqrt(1.0 - b2 ** self.t), self.eps,
        )
        return self._delta


def optimizer_step(optimizer: Adam) -> dict[str, np.ndarray]:
    """One Adam step; the applied change per parameter name (post minus pre)."""
    return optimizer.store.split(optimizer.step())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(net: LstmNetwork, task: TaskDataset) -> float:
    logits = net.predict(task.x_test)
    return accuracy(np.argmax(logits, axis=1), task.y_test)


# --------------------------------------------------------------------------
# continual classification


def _ordered(groups: Sequence[GroupData], order: Sequence[str] | None) -> list[GroupData]:
    if not order:
        return list(groups)
    by_name = {g.name: g for g in groups}
    missing = [name for name in order if name not in by_name]
    if missing:
        raise DataError(f"task order names unknown group(s): {missing}")
    return [by_name[name] for name in order]


@dataclass
class RunResult:
    accuracy: np.ndarray  # (epochs_total, tasks)
    train_loss: np.ndarray  # (epochs_total,)
    valid: bool
    wall_time_s: float
    message: str = ""


def build_tasks(groups: Sequence[GroupData], config: TrainConfig, run_seed: int) -> list[TaskDataset]:
    base = run_seed if config.split_seed is None else config.split_seed
    return [
        make_task(g.batteries, config.window, stream_seed(base, "split", k), task_id=g.name)
        for k, g in enumerate(groups)
    ]


def run_continual(
    groups: Sequence[GroupData],
    config: TrainConfig,
    run_index: int = 0,
    checkpoint_dir: str | Path | None = None,
    tasks: Sequence[TaskDataset] | None = None,
) -> RunResult:
    """One seeded run of sequential training over the ordered groups."""
    if config.network.head != "classification":
        raise ValueError("continual training needs a classification network")
    groups = _ordered(groups, config.task_order)
    run_seed = config.seed + run_index
    if tasks is None:
        tasks = build_tasks(groups, config, run_seed)
    net = build_network(config.network, stream_seed(run_seed, "init"))
    store = net.store
    strategy: Strategy = make_strategy(config.strategy, store)
    shuffle_rng = np.random.default_rng(stream_seed(run_seed, "shuffle"))
    dropout_rng = np.random.default_rng(stream_seed(run_seed, "dropout"))

    n_tasks, E = len(tasks), config.epochs
    acc = np.full((n_tasks * E, n_tasks), np.nan)
    losses = np.full(n_tasks * E, np.nan)
    start = time.perf_counter()
    try:
        for k, task in enumerate(tasks):
            strategy.begin_task(store, task.task_id)
            optimizer = Adam(store, lr=config.lr)
            for epoch in range(E):
                g_epoch = k * E + epoch
                total, count = 0.0, 0
                for idx in _batches(len(task.y_train), config.batch_size, shuffle_rng):
                    value = _train_step(net, strategy, optimizer, task.x_train[idx], task.y_train[idx], k,
                                        dropout_rng)
                    total += value * len(idx)
                    count += len(idx)
                losses[g_epoch] = total / count
                for j, other in enumerate(tasks):
                    acc[g_epoch, j] = evaluate(net, other)
            strategy.end_task(net, task.x_train, task.task_id, stream_seed(run_seed, "fisher", k))
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"run{run_index}_task{k + 1}_{task.task_id}.npz"
                save_checkpoint(path, store, strategy, {"run": run_index, "task": task.task_id, "run_seed": run_seed})
    except NonFiniteError as exc:
        msg = f"run {run_index} aborted: {exc}"
        log.warning(msg)
        return RunResult(acc, losses, False, time.perf_counter() - start, msg)
    return RunResult(acc, losses, True, time.perf_counter() - start)


def _train_step(net, strategy: Strategy, optimizer: Adam, xb, yb, task_index: int, dropout_rng) -> float:
    store = net.store
    tape = Tape()
    logits = net.forward(tape, xb, train=True, rng=dropout_rng)
    task_loss = T.softmax_cross_entropy(logits, yb)
    store.zero_grad()
    if strategy.needs_unregularized_grads:
        # the path integral needs d(task loss) alone; the penalty is added after
        tape.backward(task_loss, store)
        unreg = store.split(store.flat_grad.copy())
        if strategy.active:
            pen_tape = Tape()
            pen_tape.backward(strategy.penalty(pen_tape, store), store)
        delta = optimizer_step(optimizer)
        strategy.observe_step(unreg, delta)
    else:
        loss = total_loss(strategy, task_loss, task_index)
        if not np.isfinite(loss.value):
            raise NonFiniteError("non-finite training loss")
        tape.backward(loss, store)
        optimizer_step(optimizer)
    return float(task_loss.value)


def _run_job(args):
    groups, config, run_index, checkpoint_dir = args
    return run_continual(groups, config, run_index, checkpoint_dir)


def train_continual(
    groups: Sequence[GroupData],
    config: TrainConfig,
    jobs: int = 1,
    checkpoint_dir: str | Path | None = None,
    data_description: dict | None = None,
) -> MetricsCube:
    """Run ``config.runs`` seeded repetitions and collect the metrics cube."""
    ordered = _ordered(groups, config.task_order)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    jobs_args = [(ordered, replace(config, task_order=None), r, checkpoint_dir) for r in range(config.runs)]
    if jobs > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, jobs_args))
    else:
        results = [_run_job(a) for a in jobs_args]
    described = {"train": config.as_dict(), "data": data_description or {}}
    return MetricsCube(
        strategy=config.strategy.kind,
        task_names=[g.name for g in ordered],
        epochs_per_task=config.epochs,
        accuracy=np.stack([r.accuracy for r in results]),
        train_loss=np.stack([r.train_loss for r in results]),
        valid=np.array([r.valid for r in results]),
        fingerprint=config_fingerprint(described),
        config=described,
        wall_time_s=np.array([r.wall_time_s for r in results]),
        messages=[r.message for r in results if r.message],
    )


# --------------------------------------------------------------------------
# RUL regression


def _fit_regression(net: LstmNetwork, task: TaskDataset, config: TrainConfig, seed: int) -> tuple[float, float]:
    store = net.store
    optimizer = Adam(store, lr=config.lr)
    shuffle_rng = np.random.default_rng([seed, SEED_OFFSETS["shuffle"]])
    dropout_rng = np.random.default_rng([seed, SEED_OFFSETS["dropout"]])
    target = task.target_train

    def full_loss() -> float:
        pred = net.predict(task.x_train)
        return float(np.mean((pred - target) ** 2))

    initial = full_loss()
    for _ in range(config.epochs):
        for idx in _batches(len(target), config.batch_size, shuffle_rng):
            tape = Tape()
            pred = net.forward(tape, task.x_train[idx], train=True, rng=dropout_rng)
            loss = T.mean_squared_error(pred, target[idx])
            store.zero_grad()
            tape.backward(loss, store)
            optimizer.step()
    return initial, full_loss()


def regression_case(name: str, task: TaskDataset, config: TrainConfig, seed: int) -> RegressionCase:
    net = build_network(config.network, [seed, SEED_OFFSETS["init"]])
    initial, final = _fit_regression(net, task, config, seed)
    pred = net.predict(task.x_test)
    life = task.life_test
    return RegressionCase(
        name=name,
        rmse_percent=rmse_percent(pred, task.target_test),
        mean_abs_deviation_cycles=float(np.mean(np.abs(pred - task.target_test) * life)),
        cycles=task.cycle_test,
        battery=task.battery_test,
        predicted_rul=pred * life,
        true_rul=task.rul_test,
        initial_train_loss=initial,
        final_train_loss=final,
    )


def train_regression(
    group: GroupData,
    config: TrainConfig | None = None,
    cases: Sequence[str] = ("case1", "case2"),
    data_description: dict | None = None,
) -> RegressionReport:
    """Case 1: train on the first two batteries, test on the third.
    Case 2: pool the same three batteries' windows, random 80/20 split."""
    if config is None:
        config = TrainConfig(epochs=50, network=REGRESSION, runs=1)
    if config.network.head != "regression":
        raise ValueError("RUL regression needs a regression network")
    ids = sorted(b.battery_id for b in group.batteries)
    if len(ids) < 3:
        raise DataError(f"group {group.name} has {len(ids)} batteries; the regression protocol needs 3")
    train_ids, test_ids = ids[:2], ids[2:3]
    chosen = [b for b in group.batteries if b.battery_id in ids[:3]]
    out = {}
    for name in cases:
        if name == "case1":
            task = make_battery_split_task(chosen, train_ids, test_ids, config.window, task_id=f"{group.name}-case1")
        elif name == "case2":
            base = config.seed if config.split_seed is None else config.split_seed
            task = make_task(chosen, config.window, stream_seed(base, "split", 0), task_id=f"{group.name}-case2")
        else:
            raise ValueError(f"unknown regression case {name!r}")
        out[name] = regression_case(name, task, config, config.seed)
    described = {"train": config.as_dict(), "data": data_description or {"group": group.name},
                 "case1_split": {"train": train_ids, "test": test_ids}}
    return RegressionReport(out, described, config_fingerprint(described))

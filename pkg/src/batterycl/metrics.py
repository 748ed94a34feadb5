"""Accuracy/RMSE statistics, the metrics cube and its results-file format."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, TextIO

import numpy as np

RESULTS_FORMAT = "batterycl-results"
RESULTS_VERSION = 1

# best task / mean / worst task accuracy over the final 20 epochs, published reference
REFERENCE_LAST20 = {
    "none": (0.72, 0.54, 0.38),
    "ewc": (0.70, 0.63, 0.51),
    "online_ewc": (0.82, 0.70, 0.60),
    "si": (0.70, 0.52, 0.41),
}
# RUL RMSE in percent of lifetime for the two regression protocols
REFERENCE_RMSE_PERCENT = {"case1": 4.81, "case2": 2.15}


class ResultsFormatError(ValueError):
    """A results file does not follow the expected schema."""


def rmse_percent(predictions, truths) -> float:
    """100 * RMSE between lifetime-normalized RUL predictions and truths."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("rmse_percent needs at least one sample")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    return 100.0 * math.sqrt(float(np.mean((p - t) ** 2)))


def accuracy(predicted, true) -> float:
    p = np.asarray(predicted).ravel()
    t = np.asarray(true).ravel()
    if p.size == 0:
        raise ValueError("accuracy needs at least one sample")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    return float(np.count_nonzero(p == t)) / p.size


def config_fingerprint(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class MetricsCube:
    """accuracy[run, global_epoch, task] on each task's test split.

    Runs aborted on a non-finite loss are flagged in ``valid`` and keep NaN
    accuracies from the abort onwards.
    """

    strategy: str
    task_names: list[str]
    epochs_per_task: int
    accuracy: np.ndarray
    train_loss: np.ndarray
    valid: np.ndarray
    fingerprint: str = ""
    config: dict = field(default_factory=dict)
    wall_time_s: np.ndarray | None = None
    messages: list[str] = field(default_factory=list)

    @property
    def runs(self) -> int:
        return self.accuracy.shape[0]

    @property
    def epochs(self) -> int:
        return self.accuracy.shape[1]

    @property
    def tasks(self) -> int:
        return self.accuracy.shape[2]


@dataclass
class ContinualSummary:
    strategy: str
    per_task: list[float]
    best: float
    mean: float
    worst: float
    best_task: str
    worst_task: str

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "per_task": self.per_task,
            "best": self.best,
            "mean": self.mean,
            "worst": self.worst,
            "best_task": self.best_task,
            "worst_task": self.worst_task,
        }


def epoch_mean_and_spread(cube: MetricsCube, run: int, global_epoch: int) -> tuple[float, float]:
    """Mean and max-min of the task accuracies at one epoch of one run."""
    if not 0 <= global_epoch < cube.epochs:
        raise IndexError(f"epoch {global_epoch} outside [0, {cube.epochs})")
    acc = cube.accuracy[run, global_epoch]
    return float(acc.mean()), float(acc.max() - acc.min())


def mean_curves(cube: MetricsCube) -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch mean-over-tasks and spread, each averaged over valid runs."""
    acc = cube.accuracy[cube.valid]
    return acc.mean(axis=2).mean(axis=0), (acc.max(axis=2) - acc.min(axis=2)).mean(axis=0)


def last_n_task_accuracy(cube: MetricsCube, last: int = 20) -> np.ndarray:
    """Per-task accuracy averaged over the final ``last`` epochs and the valid runs."""
    if cube.epochs_per_task < last or cube.epochs < last:
        raise ValueError(f"the final task was trained for {cube.epochs_per_task} epochs, fewer than {last}")
    if not cube.valid.any():
        raise ValueError("no valid runs in the cube")
    return cube.accuracy[cube.valid, -last:, :].mean(axis=1).mean(axis=0)


def last20_summary(cube: MetricsCube, last: int = 20) -> ContinualSummary:
    """Best/mean/worst task accuracy over the final epochs (runs averaged first)."""
    per_task = last_n_task_accuracy(cube, last)
    best, worst = int(np.argmax(per_task)), int(np.argmin(per_task))
    return ContinualSummary(
        strategy=cube.strategy,
        per_task=[float(x) for x in per_task],
        best=float(per_task[best]),
        mean=float(per_task.mean()),
        worst=float(per_task[worst]),
        best_task=cube.task_names[best],
        worst_task=cube.task_names[worst],
    )


def forgetting_drop(cube: MetricsCube, task: int = 0, within: int = 20) -> np.ndarray:
    """Per run: accuracy on ``task`` at the end of its training minus the
    minimum reached within ``within`` epochs of training the next task."""
    end = (task + 1) * cube.epochs_per_task - 1
    window = cube.accuracy[:, end + 1:end + 1 + within, task]
    return cube.accuracy[:, end, task] - window.min(axis=1)


# --------------------------------------------------------------------------
# regression


@dataclass
class RegressionCase:
    name: str
    rmse_percent: float
    mean_abs_deviation_cycles: float
    cycles: np.ndarray
    battery: np.ndarray
    predicted_rul: np.ndarray
    true_rul: np.ndarray
    initial_train_loss: float
    final_train_loss: float


@dataclass
class RegressionReport:
    cases: dict[str, RegressionCase]
    config: dict = field(default_factory=dict)
    fingerprint: str = ""

    def as_dict(self) -> dict:
        return {
            "format": RESULTS_FORMAT,
            "version": RESULTS_VERSION,
            "experiment": "regression",
            "fingerprint": self.fingerprint,
            "config": self.config,
            "cases": {
                name: {
                    "rmse_percent": c.rmse_percent,
                    "mean_abs_deviation_cycles": c.mean_abs_deviation_cycles,
                    "initial_train_loss": c.initial_train_loss,
                    "final_train_loss": c.final_train_loss,
                    "reference_rmse_percent": REFERENCE_RMSE_PERCENT.get(name),
                }
                for name, c in self.cases.items()
            },
        }


def write_regression_results(report: RegressionReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_rul_csv(case: RegressionCase, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["cycle", "predicted_rul", "true_rul"])
    order = np.lexsort((case.cycles, case.battery.astype(str)))
    for k in order:
        writer.writerow([int(case.cycles[k]), repr(float(case.predicted_rul[k])), int(case.true_rul[k])])


# --------------------------------------------------------------------------
# results files


def cube_to_dict(cube: MetricsCube) -> dict:
    summary = last20_summary(cube) if cube.valid.any() and cube.epochs_per_task >= 20 else None
    mean_curve, spread_curve = mean_curves(cube) if cube.valid.any() else (np.array([]), np.array([]))
    return {
        "format": RESULTS_FORMAT,
        "version": RESULTS_VERSION,
        "experiment": "continual",
        "fingerprint": cube.fingerprint,
        "config": cube.config,
        "strategy": cube.strategy,
        "task_names": list(cube.task_names),
        "epochs_per_task": cube.epochs_per_task,
        "runs": cube.runs,
        "valid": [bool(v) for v in cube.valid],
        "accuracy": _nested(cube.accuracy),
        "train_loss": _nested(cube.train_loss),
        "mean_accuracy_curve": _nested(mean_curve),
        "spread_curve": _nested(spread_curve),
        "summary": summary.as_dict() if summary else None,
        "reference_last20": list(REFERENCE_LAST20.get(cube.strategy, ())) or None,
        "messages": list(cube.messages),
    }


def _nested(arr: np.ndarray):
    # NaN is not JSON; aborted-run entries become null
    return [None if isinstance(x, float) and math.isnan(x) else x for x in arr.tolist()] if arr.ndim == 1 else [
        _nested(a) for a in arr
    ]


def _denest(values) -> np.ndarray:
    def conv(v):
        if isinstance(v, list):
            return [conv(x) for x in v]
        return float("nan") if v is None else float(v)

    return np.array(conv(values), dtype=np.float64)


def write_results(cube: MetricsCube, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cube_to_dict(cube), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_results(path: str | Path) -> MetricsCube:
    """Load a continual-learning results file, validating its schema."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ResultsFormatError(f"{path}: not JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != RESULTS_FORMAT:
        raise ResultsFormatError(f"{path}: missing format tag {RESULTS_FORMAT!r}")
    if doc.get("version") != RESULTS_VERSION:
        raise ResultsFormatError(f"{path}: unsupported version {doc.get('version')!r}")
    if doc.get("experiment") != "continual":
        raise ResultsFormatError(f"{path}: not a continual-learning results file")
    for key in ("strategy", "task_names", "epochs_per_task", "accuracy", "valid", "train_loss"):
        if key not in doc:
            raise ResultsFormatError(f"{path}: missing key {key!r}")
    acc = _denest(doc["accuracy"])
    if acc.ndim != 3 or acc.shape[2] != len(doc["task_names"]) or acc.shape[0] != len(doc["valid"]):
        raise ResultsFormatError(f"{path}: accuracy must be [run][epoch][task] matching task_names and valid")
    finite = acc[np.isfinite(acc)]
    if ((finite < 0) | (finite > 1)).any():
        raise ResultsFormatError(f"{path}: accuracy values outside [0, 1]")
    return MetricsCube(
        strategy=doc["strategy"],
        task_names=list(doc["task_names"]),
        epochs_per_task=int(doc["epochs_per_task"]),
        accuracy=acc,
        train_loss=_denest(doc["train_loss"]),
        valid=np.array(doc["valid"], dtype=bool),
        fingerprint=doc.get("fingerprint", ""),
        config=doc.get("config", {}),
        messages=list(doc.get("messages", [])),
    )


def write_accuracy_csv(cube: MetricsCube, stream: TextIO) -> None:
    """``epoch,task,accuracy`` rows (1-based global epoch, valid-run mean)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["epoch", "task", "accuracy"])
    acc = cube.accuracy[cube.valid].mean(axis=0)
    for e in range(acc.shape[0]):
        for k, name in enumerate(cube.task_names):
            writer.writerow([e + 1, name, repr(float(acc[e, k]))])


def comparison_rows(summaries: Sequence[ContinualSummary]) -> list[ContinualSummary]:
    return sorted(summaries, key=lambda s: s.mean, reverse=True)


def ordering_violations(summaries: Sequence[ContinualSummary]) -> list[str]:
    """Directional findings that did not hold (online EWC should beat the rest on mean)."""
    by = {s.strategy: s for s in summaries}
    out = []
    if "online_ewc" in by:
        for other in ("none", "ewc", "si"):
            if other in by and by["online_ewc"].mean <= by[other].mean:
                out.append(f"online_ewc mean {by['online_ewc'].mean:.3f} does not beat {other} {by[other].mean:.3f}")
    if "none" in by:
        for other in ("ewc", "online_ewc"):
            if other in by and by[other].mean <= by["none"].mean:
                out.append(f"{other} mean {by[other].mean:.3f} does not beat none {by['none'].mean:.3f}")
    return out


def format_table(summaries: Sequence[ContinualSummary]) -> str:
    rows = comparison_rows(summaries)
    width = max([len("Approach")] + [len(s.strategy) for s in rows])
    lines = [f"{'Approach':<{width}}  Best task  Mean   Worst task"]
    for s in rows:
        lines.append(f"{s.strategy:<{width}}  {s.best:9.3f}  {s.mean:5.3f}  {s.worst:10.3f}")
    return "\n".join(lines)

"""Command-line entry point: ``synth``, ``extract``, ``train`` and ``report``.

Experiments are described by an INI file with ``[data]``, ``[model]``,
``[training]`` and ``[output]`` sections; data utilities take flags only.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .data import (
    DataError,
    GroupData,
    IngestError,
    extract_features,
    group_params_to_dict,
    ingest_cycles,
    label_batteries,
    load_presets,
    read_features_csv,
    synthesize_group,
    synthetic_groups,
    write_cycles_csv,
    write_features_csv,
)
from .metrics import (
    ResultsFormatError,
    comparison_rows,
    format_table,
    last20_summary,
    ordering_violations,
    read_results,
    write_accuracy_csv,
    write_regression_results,
    write_results,
    write_rul_csv,
)
from .network import PRESETS, NetworkConfig
from .regularizers import DEFAULT_C, DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_XI, STRATEGIES, StrategyKind
from .tensor import NonFiniteError
from .trainer import TrainConfig, train_continual, train_regression

log = logging.getLogger("batterycl")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
OUTPUT_DIR_ENV = "BATTERYCL_OUTPUT_DIR"
DEFAULT_PRESET = "four-groups"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


class ConfigError(UsageError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# --------------------------------------------------------------------------
# experiment configuration file


def _text(value: str) -> str:
    return value.strip()


def _flag(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"expected yes/no, got {value!r}")


def _names(value: str) -> list[str]:
    return [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]


# section -> key -> parser; anything else in the file is rejected
CONFIG_SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "data": {
        "source": _text,
        "preset": _text,
        "presets_file": _text,
        "features": _names,
        "group": _text,
        "window": int,
        "split_seed": int,
        "seed": int,
    },
    "model": {"preset": _text, "layers": int, "hidden": int, "dropout": float},
    "training": {
        "strategy": _names,
        "lambda": float,
        "gamma": float,
        "c": float,
        "xi": float,
        "lr": float,
        "epochs": int,
        "runs": int,
        "batch_size": int,
        "seed": int,
        "task_order": _names,
        "fisher_samples": int,
        "cases": _names,
    },
    "output": {"directory": _text, "checkpoints": _flag},
}


@dataclass
class Experiment:
    """A fully resolved experiment configuration (defaults filled in)."""

    source: str = "synthetic"
    preset: str = DEFAULT_PRESET
    presets_file: str | None = None
    features: list[str] = field(default_factory=list)
    group: str | None = None
    data_seed: int = 0
    model: NetworkConfig = PRESETS["classification"]
    strategies: list[str] = field(default_factory=lambda: ["none"])
    train: TrainConfig = field(default_factory=TrainConfig)
    cases: list[str] = field(default_factory=lambda: ["case1", "case2"])
    output_dir: str = "results"
    checkpoints: bool = False

    @property
    def kind(self) -> str:
        return "regression" if self.model.head == "regression" else "continual"

    def strategy_config(self, name: str) -> TrainConfig:
        s = self.train.strategy
        return replace(self.train, strategy=StrategyKind(name, lam=s.lam, gamma=s.gamma, c=s.c, xi=s.xi))

    def to_ini(self) -> str:
        """The effective configuration, every default spelled out."""
        t = self.train
        s = t.strategy
        cp = configparser.ConfigParser(interpolation=None)
        cp["data"] = {
            "source": self.source,
            "window": str(t.window),
            "seed": str(self.data_seed),
        }
        if self.source == "synthetic":
            cp["data"]["preset"] = self.preset
            if self.presets_file:
                cp["data"]["presets_file"] = self.presets_file
        else:
            cp["data"]["features"] = ", ".join(self.features)
        if t.split_seed is not None:
            cp["data"]["split_seed"] = str(t.split_seed)
        if self.group:
            cp["data"]["group"] = self.group
        cp["model"] = {
            "preset": self.model.head,
            "layers": str(self.model.layers),
            "hidden": str(self.model.hidden),
            "dropout": repr(self.model.dropout),
        }
        cp["training"] = {
            "strategy": ", ".join(self.strategies),
            "lambda": repr(s.lam),
            "gamma": repr(s.gamma),
            "c": repr(s.c),
            "xi": repr(s.xi),
            "lr": repr(t.lr),
            "epochs": str(t.epochs),
            "runs": str(t.runs),
            "batch_size": str(t.batch_size),
            "seed": str(t.seed),
        }
        if t.task_order:
            cp["training"]["task_order"] = ", ".join(t.task_order)
        if t.fisher_samples is not None:
            cp["training"]["fisher_samples"] = str(t.fisher_samples)
        if self.kind == "regression":
            cp["training"]["cases"] = ", ".join(self.cases)
        cp["output"] = {"directory": self.output_dir, "checkpoints": "yes" if self.checkpoints else "no"}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_config(text: str, base_dir: str | Path = ".", seed: int | None = None) -> Experiment:
    """Validate an experiment file; every problem is reported at once.

    Relative data paths resolve against ``base_dir``; ``seed`` (the global
    ``--seed`` flag) overrides both the data and the training seed.
    """
    cp = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    cp.optionxform = str  # keys are case-sensitive, so typos are not folded away
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unreadable config: {exc}"]) from None

    problems: list[str] = []
    values: dict[str, dict[str, object]] = {s: {} for s in CONFIG_SCHEMA}
    for section in cp.sections():
        if section not in CONFIG_SCHEMA:
            problems.append(f"[{section}]: unknown section (expected one of {', '.join(CONFIG_SCHEMA)})")
            continue
        for key, raw in cp.items(section):
            parser = CONFIG_SCHEMA[section].get(key)
            if parser is None:
                problems.append(f"[{section}] {key}: unknown key")
                continue
            try:
                values[section][key] = parser(raw)
            except ValueError as exc:
                problems.append(f"[{section}] {key}: {exc}")
    data, model, train, output = (values[s] for s in ("data", "model", "training", "output"))
    base = Path(base_dir)

    exp = Experiment()
    exp.source = data.get("source", "synthetic")
    if exp.source not in ("synthetic", "features"):
        problems.append(f"[data] source: must be synthetic or features, got {exp.source!r}")
    exp.preset = data.get("preset", DEFAULT_PRESET)
    if "presets_file" in data:
        exp.presets_file = str(base / data["presets_file"])
    exp.features = [str(base / f) for f in data.get("features", [])]
    if exp.source == "features" and not exp.features:
        problems.append("[data] features: required when source = features")
    if exp.source == "synthetic" and exp.features:
        problems.append("[data] features: only used when source = features")
    exp.group = data.get("group")
    exp.data_seed = data.get("seed", 0) if seed is None else seed

    head = model.get("preset", "classification")
    if head not in PRESETS:
        problems.append(f"[model] preset: must be one of {', '.join(PRESETS)}, got {head!r}")
        head = "classification"
    try:
        exp.model = replace(PRESETS[head], **{k: model[k] for k in ("layers", "hidden", "dropout") if k in model})
    except ValueError as exc:
        problems.append(f"[model]: {exc}")

    regression = exp.model.head == "regression"
    exp.strategies = train.get("strategy", ["none"])
    unknown = [s for s in exp.strategies if s not in STRATEGIES]
    if unknown:
        problems.append(f"[training] strategy: unknown {unknown}; choose from {', '.join(STRATEGIES)}")
    if not exp.strategies:
        problems.append("[training] strategy: empty")
    if len(set(exp.strategies)) != len(exp.strategies):
        problems.append("[training] strategy: listed more than once")
    if regression and exp.strategies != ["none"]:
        problems.append("[training] strategy: RUL regression is a single-task experiment; use none")
    if "si" in exp.strategies and "c" not in train:
        log.info("training.c not set; synaptic intelligence uses the default c = %g", DEFAULT_C)
    exp.cases = train.get("cases", ["case1", "case2"])
    bad_cases = [c for c in exp.cases if c not in ("case1", "case2")]
    if bad_cases:
        problems.append(f"[training] cases: unknown {bad_cases}; choose from case1, case2")
    if not regression and "cases" in train:
        problems.append("[training] cases: only used with the regression model preset")

    try:
        strategy = StrategyKind(
            exp.strategies[0] if exp.strategies and not unknown else "none",
            lam=train.get("lambda", DEFAULT_LAMBDA),
            gamma=train.get("gamma", DEFAULT_GAMMA),
            c=train.get("c", DEFAULT_C),
            xi=train.get("xi", DEFAULT_XI),
        )
    except ValueError as exc:
        problems.append(f"[training]: {exc}")
        strategy = StrategyKind()
    try:
        exp.train = TrainConfig(
            batch_size=train.get("batch_size", 5),
            epochs=train.get("epochs", 50 if regression else 100),
            lr=train.get("lr", 1e-3),
            runs=1 if regression else train.get("runs", 5),
            seed=train.get("seed", 0) if seed is None else seed,
            window=data.get("window", 10),
            strategy=strategy,
            network=exp.model,
            task_order=tuple(train["task_order"]) if "task_order" in train else None,
            fisher_samples=train.get("fisher_samples"),
            split_seed=data.get("split_seed"),
        )
    except ValueError as exc:
        problems.append(f"[training]: {exc}")
    if regression and "runs" in train:
        log.info("training.runs is ignored for RUL regression (one model per case)")

    # data paths follow the config file; output lands relative to where the command runs
    exp.output_dir = output.get("directory", "results")
    exp.checkpoints = bool(output.get("checkpoints", False))
    if problems:
        raise ConfigError(problems)
    return exp


def load_experiment(path: str | Path, seed: int | None = None) -> Experiment:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent, seed)


# --------------------------------------------------------------------------
# commands


def _load_groups(exp: Experiment) -> list[GroupData]:
    if exp.source == "synthetic":
        presets = _presets(exp.presets_file)
        if exp.preset not in presets:
            raise UsageError(f"unknown preset {exp.preset!r}; available: {', '.join(sorted(presets))}")
        return synthetic_groups(exp.preset, exp.data_seed, exp.presets_file)
    groups = []
    for path in exp.features:
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                batteries = read_features_csv(fh)
        except OSError as exc:
            raise UsageError(f"cannot read feature file {path}: {exc.strerror}") from None
        except (IngestError, DataError) as exc:
            raise DataError(f"{path}: {exc}") from None
        if not batteries:
            raise DataError(f"{path}: no labelled rows")
        groups.append(GroupData(Path(path).stem, batteries))
    return groups


def _presets(path: str | None):
    try:
        return load_presets(path)
    except OSError as exc:
        raise UsageError(f"cannot read presets file {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid presets file {path}: {exc}") from None


def _output_dir(configured: str) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or configured)


def _plan(exp: Experiment, out: Path) -> str:
    t = exp.train
    if exp.kind == "regression":
        what = f"RUL regression, cases {', '.join(exp.cases)}, {t.epochs} epochs"
    else:
        what = (f"continual classification, strategies {', '.join(exp.strategies)}, "
                f"{t.runs} run(s) x {t.epochs} epochs per task")
    data = f"synthetic preset {exp.preset} (seed {exp.data_seed})" if exp.source == "synthetic" else \
        f"feature files {', '.join(exp.features)}"
    return f"plan: {what}\ndata: {data}\noutput: {out}\n"


def cmd_train(args) -> int:
    exp = load_experiment(args.config, args.seed)
    out = _output_dir(exp.output_dir)
    sys.stdout.write(_plan(exp, out))
    if args.dry_run:
        sys.stdout.write("\neffective configuration:\n" + exp.to_ini())
        return EXIT_OK
    groups = _load_groups(exp)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(exp.to_ini(), encoding="utf-8")
    described = {"source": exp.source, "preset": exp.preset if exp.source == "synthetic" else None,
                 "features": exp.features or None, "seed": exp.data_seed}

    if exp.kind == "regression":
        name = exp.group or groups[0].name
        chosen = [g for g in groups if g.name == name]
        if not chosen:
            raise UsageError(f"[data] group: {name!r} not among {', '.join(g.name for g in groups)}")
        report = train_regression(chosen[0], exp.train, exp.cases, {**described, "group": name})
        write_regression_results(report, out / "results_regression.json")
        for case_name, case in report.cases.items():
            with open(out / f"rul_{case_name}.csv", "w", encoding="utf-8", newline="") as fh:
                write_rul_csv(case, fh)
            print(f"{case_name}: RMSE {case.rmse_percent:.2f}% "
                  f"(mean deviation {case.mean_abs_deviation_cycles:.1f} cycles)")
        return EXIT_OK

    summaries, timing, failed = [], {}, False
    for name in exp.strategies:
        ckpt = out / "checkpoints" / name if exp.checkpoints else None
        cube = train_continual(groups, exp.strategy_config(name), jobs=args.jobs, checkpoint_dir=ckpt,
                               data_description=described)
        write_results(cube, out / f"results_{name}.json")
        with open(out / f"accuracy_{name}.csv", "w", encoding="utf-8", newline="") as fh:
            write_accuracy_csv(cube, fh)
        timing[name] = [float(t) for t in cube.wall_time_s]
        for msg in cube.messages:
            log.warning("%s: %s", name, msg)
        if not cube.valid.any():
            log.error("%s: every run aborted", name)
            failed = True
            continue
        summary = last20_summary(cube) if cube.epochs_per_task >= 20 else None
        if summary:
            summaries.append(summary)
            print(f"{name}: last-20 mean accuracy {summary.mean:.3f} "
                  f"(best {summary.best:.3f} {summary.best_task}, worst {summary.worst:.3f} {summary.worst_task})")
    # wall time is kept out of the results files so they stay byte-stable
    (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if summaries:
        table = format_table(summaries)
        (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_synth(args) -> int:
    presets = _presets(args.params)
    name = args.preset
    if name is None:
        name = DEFAULT_PRESET if args.params is None or DEFAULT_PRESET in presets else next(iter(presets))
    if name not in presets:
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(sorted(presets))}")
    out = Path(args.out) if args.out else _output_dir("synthetic")
    groups = presets[name]
    if args.dry_run:
        print(f"would write {len(groups)} group CSVs and manifest.json to {out}")
        return EXIT_OK
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create %s: %s", out, exc.strerror)
        return EXIT_FAILURE
    manifest = {"preset": name, "seed": args.seed, "groups": {}}
    for k, (label, params) in enumerate(groups.items()):
        cells = synthesize_group(label, params, args.seed + k)
        path = out / f"{label}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            rows = write_cycles_csv([c.history for c in cells], fh)
        manifest["groups"][label] = {
            "file": path.name,
            "seed": args.seed + k,
            "params": group_params_to_dict(params),
            "batteries": {
                c.history.battery_id: {"eol_cycle": c.eol_cycle, "nominal_capacity_ah": c.nominal_capacity_ah}
                for c in cells
            },
        }
        print(f"{path}: {len(cells)} batteries, {rows} rows, end of life at "
              f"{', '.join(str(c.eol_cycle) for c in cells)}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _manifest_labels(path: str) -> tuple[dict[str, int], dict[str, float]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        eol, nominal = {}, {}
        for group in doc["groups"].values():
            for battery_id, info in group["batteries"].items():
                eol[battery_id] = int(info["eol_cycle"])
                nominal[battery_id] = float(info["nominal_capacity_ah"])
    except OSError as exc:
        raise UsageError(f"cannot read manifest {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise UsageError(f"manifest {path} is malformed: {exc!r}") from None
    return eol, nominal


def cmd_extract(args) -> int:
    eol, nominal = _manifest_labels(args.manifest) if args.manifest else ({}, {})
    try:
        with open(args.input, encoding="utf-8", newline="") as fh:
            result = ingest_cycles(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc.strerror}") from None
    except IngestError as exc:
        raise IngestError(f"{args.input}: {exc}") from None
    for line, reason in result.rejected:
        log.warning("%s:%d: row rejected (%s)", args.input, line, reason)
    features = [extract_features(h) for h in result.batteries.values()]
    if not any(len(f) for f in features):
        raise DataError(f"{args.input}: no complete cycles (every cycle needs charge and discharge samples)")
    report = label_batteries(features, eol=eol, fraction=args.eol_fraction, reference=nominal)
    for battery_id, reason in sorted(report.excluded.items()):
        log.warning("%s: battery %s excluded: %s", args.input, battery_id, reason)
    if not report.labelled:
        raise DataError(f"{args.input}: no battery has a determinable end of life")
    if args.dry_run:
        print(f"would write {sum(len(b) for b in report.labelled)} feature rows to {args.output}")
        return EXIT_OK
    with open(args.output, "w", encoding="utf-8", newline="") as fh:
        rows = write_features_csv(report.labelled, fh)
    print(f"{args.output}: {rows} rows from {len(report.labelled)} batteries "
          f"({len(report.excluded)} excluded, {len(result.rejected)} rows rejected)")
    return EXIT_OK


def cmd_report(args) -> int:
    cubes = []
    for path in args.results:
        try:
            cubes.append(read_results(path))
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
        except ResultsFormatError as exc:
            raise UsageError(f"malformed results file: {exc}") from None
    tasks = {len(c.task_names) for c in cubes}
    if len(tasks) > 1:
        raise UsageError(f"results files disagree on the number of tasks: {sorted(tasks)}")
    summaries = []
    for path, cube in zip(args.results, cubes):
        if not cube.valid.any():
            raise UsageError(f"{path}: no valid runs to summarize")
        try:
            summaries.append(last20_summary(cube))
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
    print(format_table(summaries))
    for problem in ordering_violations(summaries):
        print(f"warning: {problem}")
    if args.csv and not args.dry_run:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["strategy", "best", "mean", "worst", "best_task", "worst_task"])
            for s in comparison_rows(summaries):
                writer.writerow([s.strategy, repr(s.best), repr(s.mean), repr(s.worst), s.best_task, s.worst_task])
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random stream (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan; write nothing")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="batterycl",
        description="Battery RUL/SoH pipeline and continual-learning benchmark.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic cycling CSVs, one per group")
    p.add_argument("--preset", default=None, help=f"preset name (default {DEFAULT_PRESET})")
    p.add_argument("--params", default=None, help="JSON presets file instead of the bundled one")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_DIR_ENV} or ./synthetic)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common], help="cycling CSV -> labelled feature CSV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--manifest", default=None, help="synth manifest giving end-of-life cycles")
    p.add_argument("--eol-fraction", type=float, default=0.8,
                   help="capacity fraction defining end of life when detecting it (default 0.8)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="run the experiment described by a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", parents=[common], help="compare results files in a best/mean/worst table")
    p.add_argument("results", nargs="+")
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    if args.jobs < 1:
        log.error("--jobs must be >= 1")
        return EXIT_USAGE
    if args.command != "train":
        args.seed = 0 if args.seed is None else args.seed
    if args.command == "extract" and not 0.0 < args.eol_fraction < 1.0:
        log.error("--eol-fraction must be in (0, 1)")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (IngestError, DataError, NonFiniteError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

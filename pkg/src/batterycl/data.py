"""Battery telemetry: CSV ingestion, synthetic cycling, features, labels, tasks.

Raw data is one row per measurement sample::

    battery_id,cycle_index,phase,time_s,voltage_v,current_a,temperature_c

Current is signed (+ charging, - discharging). Each charge/discharge phase
is reduced to a fixed set of 21 engineered features (10 charge, 11
discharge, order given by ``FEATURE_NAMES``), every cycle is labelled with
its remaining useful life in cycles and the derived state-of-health class,
and consecutive cycles are cut into sliding windows for the LSTM.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

CSV_HEADER = ["battery_id", "cycle_index", "phase", "time_s", "voltage_v", "current_a", "temperature_c"]
PHASES = ("charge", "discharge")

FEATURE_NAMES = (
    # charge
    "charge_cc_duration_s",
    "charge_cv_duration_s",
    "charge_duration_s",
    "charge_capacity_ah",
    "charge_energy_wh",
    "charge_mean_voltage_v",
    "charge_cc_voltage_slope_v_per_s",
    "charge_max_temperature_c",
    "charge_mean_temperature_c",
    "charge_temperature_rise_c",
    # discharge
    "discharge_duration_s",
    "discharge_capacity_ah",
    "discharge_energy_wh",
    "discharge_mean_voltage_v",
    "discharge_min_voltage_v",
    "discharge_mid_voltage_v",
    "discharge_onset_voltage_drop_v",
    "discharge_max_temperature_c",
    "discharge_temperature_rise_c",
    "discharge_mean_current_a",
    "discharge_resistance_ohm",
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_COLUMNS = [f"f{k:02d}" for k in range(1, N_FEATURES + 1)]
FEATURE_CSV_HEADER = ["battery_id", "cycle_index", *FEATURE_COLUMNS, "rul_cycles", "soh_class"]

SOH_LABELS = ("safe", "okay", "at_risk")
SAFE, OKAY, AT_RISK = range(3)

VOLTAGE_RANGE = (0.0, 6.0)
TEMPERATURE_RANGE = (-40.0, 120.0)


class IngestError(ValueError):
    """A CSV row could not be parsed at all."""


class DataError(ValueError):
    """Data cannot be turned into the requested structure."""


# --------------------------------------------------------------------------
# raw telemetry


@dataclass
class PhaseTrace:
    time_s: np.ndarray
    voltage_v: np.ndarray
    current_a: np.ndarray
    temperature_c: np.ndarray

    def __len__(self) -> int:
        return len(self.time_s)


@dataclass
class BatteryHistory:
    battery_id: str
    cycles: dict[int, dict[str, PhaseTrace]] = field(default_factory=dict)

    def cycle_indices(self) -> list[int]:
        return sorted(self.cycles)


@dataclass
class IngestResult:
    batteries: dict[str, BatteryHistory]
    rejected: list[tuple[int, str]]

    @property
    def rejected_count(self) -> int:
        return len(self.rejected)


def ingest_cycles(stream: TextIO | str) -> IngestResult:
    """Parse ingest-schema CSV text into per-battery histories.

    Rows with out-of-range voltage/temperature, or whose time does not
    increase within their (battery, cycle, phase), are rejected and listed
    with their line number; anything unparsable raises ``IngestError``.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("line 1: missing header") from None
    if [h.strip() for h in header] != CSV_HEADER:
        raise IngestError(f"line 1: header must be {','.join(CSV_HEADER)}, got {','.join(header)}")

    raw: dict[str, dict[int, dict[str, list[tuple[float, float, float, float]]]]] = {}
    rejected: list[tuple[int, str]] = []
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise IngestError(f"line {line}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        battery_id, cycle_s, phase = row[0].strip(), row[1].strip(), row[2].strip()
        if not battery_id:
            raise IngestError(f"line {line}: empty battery_id")
        if phase not in PHASES:
            raise IngestError(f"line {line}: phase must be charge or discharge, got {phase!r}")
        try:
            cycle = int(cycle_s)
            t, v, i, temp = (float(x) for x in row[3:])
        except ValueError as exc:
            raise IngestError(f"line {line}: {exc}") from None
        if cycle < 1:
            raise IngestError(f"line {line}: cycle_index must be >= 1, got {cycle}")
        if not all(np.isfinite((t, v, i, temp))):
            rejected.append((line, "non-finite value"))
            continue
        if not VOLTAGE_RANGE[0] < v < VOLTAGE_RANGE[1]:
            rejected.append((line, f"voltage {v} V out of range"))
            continue
        if not TEMPERATURE_RANGE[0] < temp < TEMPERATURE_RANGE[1]:
            rejected.append((line, f"temperature {temp} C out of range"))
            continue
        samples = raw.setdefault(battery_id, {}).setdefault(cycle, {}).setdefault(phase, [])
        if samples and t <= samples[-1][0]:
            rejected.append((line, f"time {t} s not increasing"))
            continue
        samples.append((t, v, i, temp))

    batteries = {}
    for battery_id in sorted(raw):
        history = BatteryHistory(battery_id)
        for cycle in sorted(raw[battery_id]):
            phases = {}
            for phase, samples in raw[battery_id][cycle].items():
                arr = np.array(samples, dtype=np.float64)
                phases[phase] = PhaseTrace(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
            history.cycles[cycle] = phases
        batteries[battery_id] = history
    return IngestResult(batteries, rejected)


def write_cycles_csv(histories: Iterable[BatteryHistory], stream: TextIO) -> int:
    """Write histories in the ingest schema; returns the number of rows."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    rows = 0
    for history in histories:
        for cycle in history.cycle_indices():
            for phase in PHASES:
                trace = history.cycles[cycle].get(phase)
                if trace is None:
                    continue
                for t, v, i, temp in zip(trace.time_s, trace.voltage_v, trace.current_a, trace.temperature_c):
                    writer.writerow([history.battery_id, cycle, phase, repr(float(t)), repr(float(v)),
                                     repr(float(i)), repr(float(temp))])
                    rows += 1
    return rows


# --------------------------------------------------------------------------
# features


def _trapz(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.trapezoid(y, x)) if hasattr(np, "trapezoid") else float(np.trapz(y, x))


def _time_mean(y: np.ndarray, t: np.ndarray) -> float:
    duration = t[-1] - t[0]
    return _trapz(y, t) / duration if duration > 0 else float(y.mean())


def charge_features(trace: PhaseTrace) -> list[float]:
    t, v, i, temp = trace.time_s, trace.voltage_v, trace.current_a, trace.temperature_c
    # constant-current segment: samples before the current first falls below 95% of its peak
    below = np.nonzero(i < 0.95 * i.max())[0]
    cc_end = int(below[0]) - 1 if below.size else len(t) - 1
    cc_end = max(cc_end, 0)
    cc_duration = t[cc_end] - t[0]
    if cc_end >= 1:
        slope = float(np.polyfit(t[:cc_end + 1], v[:cc_end + 1], 1)[0])
    else:
        slope = 0.0
    return [
        cc_duration,
        t[-1] - t[cc_end],
        t[-1] - t[0],
        _trapz(i, t) / 3600.0,
        _trapz(v * i, t) / 3600.0,
        _time_mean(v, t),
        slope,
        float(temp.max()),
        _time_mean(temp, t),
        float(temp.max() - temp[0]),
    ]


def discharge_features(trace: PhaseTrace) -> list[float]:
    t, v, temp = trace.time_s, trace.voltage_v, trace.temperature_c
    i = np.abs(trace.current_a)
    duration = t[-1] - t[0]
    onset_drop = float(v[0] - v[1])
    delta_i = i[1] - i[0]
    resistance = onset_drop / delta_i if delta_i > 0 else 0.0
    return [
        duration,
        _trapz(i, t) / 3600.0,
        _trapz(v * i, t) / 3600.0,
        _time_mean(v, t),
        float(v.min()),
        float(np.interp(t[0] + 0.5 * duration, t, v)),
        onset_drop,
        float(temp.max()),
        float(temp.max() - temp[0]),
        _time_mean(i, t),
        resistance,
    ]


@dataclass
class BatteryFeatures:
    """Per-cycle feature matrix of one battery, optionally labelled."""

    battery_id: str
    cycles: np.ndarray  # (n,) int
    features: np.ndarray  # (n, 21)
    rul: np.ndarray | None = None  # (n,) int cycles
    lifetime: int | None = None  # end-of-life cycle used for labelling
    skipped_cycles: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cycles)

    @property
    def soh(self) -> np.ndarray:
        if self.rul is None:
            raise DataError(f"battery {self.battery_id} is not labelled")
        return rul_to_soh(self.rul)

    @property
    def discharge_capacity(self) -> np.ndarray:
        return self.features[:, FEATURE_NAMES.index("discharge_capacity_ah")]


def extract_features(history: BatteryHistory) -> BatteryFeatures:
    """Reduce every complete cycle (both phases, >= 3 samples each) to 21 features.

    Incomplete cycles are skipped and listed in ``skipped_cycles``.
    """
    cycles, rows, skipped = [], [], []
    for cycle in history.cycle_indices():
        phases = history.cycles[cycle]
        charge, discharge = phases.get("charge"), phases.get("discharge")
        if charge is None or discharge is None or len(charge) < 3 or len(discharge) < 3:
            skipped.append(cycle)
            continue
        cycles.append(cycle)
        rows.append(charge_features(charge) + discharge_features(discharge))
    features = np.array(rows, dtype=np.float64).reshape(-1, N_FEATURES)
    if not np.isfinite(features).all():
        raise DataError(f"battery {history.battery_id}: non-finite feature values")
    return BatteryFeatures(history.battery_id, np.array(cycles, dtype=np.int64), features, skipped_cycles=skipped)


# --------------------------------------------------------------------------
# labels


def rul_to_soh(rul):
    """Map remaining useful life (cycles) to 0=safe (>60), 1=okay (31..60), 2=at_risk (<=30)."""
    rul_arr = np.asarray(rul)
    if (rul_arr < 0).any():
        raise ValueError("remaining useful life must be non-negative")
    classes = np.where(rul_arr > 60, SAFE, np.where(rul_arr > 30, OKAY, AT_RISK))
    return int(classes) if classes.ndim == 0 else classes.astype(np.int64)


def soh_label(rul: int) -> str:
    return SOH_LABELS[rul_to_soh(rul)]


def detect_eol(
    cycles: np.ndarray,
    capacity: np.ndarray,
    fraction: float = 0.8,
    reference: float | None = None,
    sustain: int = 3,
) -> int | None:
    """First cycle of a run of ``sustain`` cycles at or below ``fraction * reference``.

    ``reference`` defaults to the first observed capacity. Returns ``None``
    when the threshold is never crossed for long enough.
    """
    capacity = np.asarray(capacity, dtype=np.float64)
    if capacity.size == 0:
        return None
    ref = float(capacity[0]) if reference is None else float(reference)
    # relative slack absorbs rounding when the crossing is exact
    below = capacity <= fraction * ref * (1.0 + 1e-12)
    run = 0
    for k, flag in enumerate(below):
        run = run + 1 if flag else 0
        if run == sustain:
            return int(cycles[k - sustain + 1])
    return None


def label_rul(battery: BatteryFeatures, eol_cycle: int) -> BatteryFeatures:
    """RUL = eol - cycle; rows after the end-of-life cycle are dropped."""
    keep = battery.cycles <= eol_cycle
    return BatteryFeatures(
        battery.battery_id,
        battery.cycles[keep],
        battery.features[keep],
        rul=(eol_cycle - battery.cycles[keep]).astype(np.int64),
        lifetime=int(eol_cycle),
        skipped_cycles=list(battery.skipped_cycles),
    )


@dataclass
class LabelReport:
    labelled: list[BatteryFeatures]
    excluded: dict[str, str]


def label_batteries(
    batteries: Sequence[BatteryFeatures],
    eol: Mapping[str, int] | None = None,
    fraction: float = 0.8,
    reference: Mapping[str, float] | None = None,
) -> LabelReport:
    """Label each battery from a known end-of-life cycle or by detection.

    Batteries whose end of life is neither given nor detectable are
    excluded and reported.
    """
    eol = eol or {}
    reference = reference or {}
    labelled, excluded = [], {}
    for battery in batteries:
        cycle = eol.get(battery.battery_id)
        if cycle is None:
            if len(battery) == 0:
                excluded[battery.battery_id] = "no complete cycles"
                continue
            cycle = detect_eol(battery.cycles, battery.discharge_capacity, fraction,
                               reference.get(battery.battery_id))
        if cycle is None:
            excluded[battery.battery_id] = "end of life not reached"
            continue
        labelled.append(label_rul(battery, cycle))
    return LabelReport(labelled, excluded)


def write_features_csv(batteries: Iterable[BatteryFeatures], stream: TextIO) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(FEATURE_CSV_HEADER)
    rows = 0
    for b in batteries:
        if b.rul is None:
            raise DataError(f"battery {b.battery_id} is not labelled")
        soh = b.soh
        for k in range(len(b)):
            writer.writerow([b.battery_id, int(b.cycles[k]), *(repr(float(x)) for x in b.features[k]),
                             int(b.rul[k]), SOH_LABELS[soh[k]]])
            rows += 1
    return rows


def read_features_csv(stream: TextIO | str) -> list[BatteryFeatures]:
    """Inverse of ``write_features_csv``; lifetime is recovered as cycle + RUL."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    header = next(reader, None)
    if header != FEATURE_CSV_HEADER:
        raise IngestError("line 1: not a feature CSV header")
    grouped: dict[str, list[list[str]]] = {}
    for row in reader:
        if not row:
            continue
        if len(row) != len(FEATURE_CSV_HEADER):
            raise IngestError(f"line {reader.line_num}: expected {len(FEATURE_CSV_HEADER)} fields, got {len(row)}")
        grouped.setdefault(row[0], []).append(row)
    out = []
    for battery_id in sorted(grouped):
        rows = grouped[battery_id]
        try:
            cycles = np.array([int(r[1]) for r in rows], dtype=np.int64)
            feats = np.array([[float(x) for x in r[2:2 + N_FEATURES]] for r in rows])
            rul = np.array([int(r[-2]) for r in rows], dtype=np.int64)
        except ValueError as exc:
            raise IngestError(f"battery {battery_id}: {exc}") from None
        order = np.argsort(cycles, kind="stable")
        cycles, feats, rul = cycles[order], feats[order], rul[order]
        lifetimes = set((cycles + rul).tolist())
        if len(lifetimes) != 1:
            raise DataError(f"battery {battery_id}: inconsistent RUL labels")
        out.append(BatteryFeatures(battery_id, cycles, feats, rul=rul, lifetime=lifetimes.pop()))
    return out


# --------------------------------------------------------------------------
# synthetic cycling


@dataclass(frozen=True)
class GroupParams:
    """Operating conditions and ageing law of one experimental group."""

    ambient_c: float = 24.0
    discharge_current_a: float = 2.0
    initial_capacity_ah: float = 2.0
    fade_linear: float = 0.001
    fade_sqrt: float = 0.005
    noise_std: float = 0.003
    eol_fraction: float = 0.8
    batteries: int = 3
    charge_current_a: float = 1.5
    resistance_ohm: float = 0.08
    resistance_growth: float = 2.5
    heating_c_per_w: float = 8.0
    jitter: float = 0.05  # cell-to-cell spread of the fade coefficients
    capacity_jitter: float = 0.005  # spread of nominal capacity and resistance
    max_cycles: int = 1000

    def __post_init__(self):
        if not 1 <= self.batteries <= 16:
            raise ValueError("batteries per group must be between 1 and 16")
        if self.initial_capacity_ah <= 0 or self.discharge_current_a <= 0 or self.charge_current_a <= 0:
            raise ValueError("capacity and currents must be positive")
        if not 0.0 < self.eol_fraction < 1.0:
            raise ValueError("eol_fraction must be in (0, 1)")
        if self.noise_std < 0 or self.fade_linear < 0 or self.fade_sqrt < 0:
            raise ValueError("noise and fade coefficients must be non-negative")
        if not (0.0 <= self.jitter < 1.0 and 0.0 <= self.capacity_jitter < 1.0):
            raise ValueError("jitter and capacity_jitter must be in [0, 1)")
        if 1.0 - self.fade_linear - self.fade_sqrt <= 0:
            raise ValueError("parameters give non-positive capacity at cycle 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "GroupParams":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown group parameter(s): {sorted(unknown)}")
        cast = {k: (int(v) if k in ("batteries", "max_cycles") else float(v)) for k, v in values.items()}
        return cls(**cast)


def ocv(soc: np.ndarray) -> np.ndarray:
    """Open-circuit voltage of the synthetic cell as a function of state of charge."""
    soc = np.asarray(soc, dtype=np.float64)
    return 3.15 + 0.7 * soc + 0.25 * soc ** 2 - 0.35 * np.exp(-10.0 * soc)


_SOC_GRID = np.linspace(0.0, 1.0, 2001)
_OCV_GRID = ocv(_SOC_GRID)

CHARGE_VOLTAGE = 4.2
CV_CUTOFF_RATIO = 0.05


@dataclass
class SyntheticBattery:
    history: BatteryHistory
    eol_cycle: int
    nominal_capacity_ah: float
    capacity_ah: np.ndarray  # true capacity per generated cycle


def _cycle_traces(C: float, R: float, p: GroupParams, ambient: float, rng: np.random.Generator, noisy: bool):
    """One charge (CC then CV) and one discharge (rest sample, then CC) trace."""
    ic, idis = p.charge_current_a, p.discharge_current_a
    # CC charge from empty until terminal voltage hits the charge limit
    target = CHARGE_VOLTAGE - ic * R
    soc_cc = float(np.interp(target, _OCV_GRID, _SOC_GRID)) if target < _OCV_GRID[-1] else 1.0
    soc_cc = min(max(soc_cc, 0.05), 0.98)
    cc_time = soc_cc * 3600.0 * C / ic
    tau = 3600.0 * (1.0 - soc_cc) * C / ((1.0 - CV_CUTOFF_RATIO) * ic)
    cv_time = tau * np.log(1.0 / CV_CUTOFF_RATIO)
    t_cc = np.linspace(0.0, cc_time, 12)
    t_cv = cc_time + np.linspace(cv_time / 8, cv_time, 8)
    v_cc = ocv(t_cc * ic / (3600.0 * C)) + ic * R
    i_cv = ic * np.exp(-(t_cv - cc_time) / tau)
    charge_t = np.concatenate([t_cc, t_cv])
    charge_i = np.concatenate([np.full_like(t_cc, ic), i_cv])
    charge_v = np.concatenate([v_cc, np.full_like(t_cv, CHARGE_VOLTAGE)])
    heat_c = p.heating_c_per_w * charge_i ** 2 * R
    charge_temp = ambient + heat_c * (1.0 - np.exp(-charge_t / 900.0))

    # CC discharge to empty; duration proportional to capacity
    dis_time = 3600.0 * C / idis
    t_load = 1.0 + np.linspace(0.0, dis_time, 20)
    dis_t = np.concatenate([[0.0], t_load])
    soc = 1.0 - (t_load - 1.0) * idis / (3600.0 * C)
    dis_v = np.concatenate([ocv([1.0]), ocv(soc) - idis * R])
    dis_i = np.concatenate([[0.0], np.full_like(t_load, -idis)])
    heat_d = p.heating_c_per_w * idis ** 2 * R
    dis_temp = ambient + 0.3 * heat_c[-1] + heat_d * (1.0 - np.exp(-dis_t / 900.0))

    if noisy:
        charge_v = charge_v + rng.normal(0.0, 1e-3, charge_v.shape)
        dis_v = dis_v + rng.normal(0.0, 1e-3, dis_v.shape)
        charge_temp = charge_temp + rng.normal(0.0, 0.05, charge_temp.shape)
        dis_temp = dis_temp + rng.normal(0.0, 0.05, dis_temp.shape)
    return (
        PhaseTrace(charge_t, charge_v, charge_i, charge_temp),
        PhaseTrace(dis_t, dis_v, dis_i, dis_temp),
    )


def synthesize_battery(battery_id: str, params: GroupParams, rng: np.random.Generator) -> SyntheticBattery:
    """Cycle one synthetic cell until its end of life is confirmed.

    Capacity follows C(n) = C0 * (1 - a*n - b*sqrt(n)) * (1 + eps). End of
    life is the first cycle of a three-cycle run at or below
    ``eol_fraction * C0``; the cell keeps cycling for another tenth of its
    life (at least 10 cycles) so that threshold detection on the recorded
    data has something to find.
    """
    p = params
    if p.jitter > 0 or p.capacity_jitter > 0:
        spread = np.array([p.capacity_jitter, p.jitter, p.jitter, p.capacity_jitter])
        j = 1.0 + spread * rng.uniform(-1.0, 1.0, size=4)
    else:
        j = np.ones(4)
    c0 = p.initial_capacity_ah * j[0]
    a, b = p.fade_linear * j[1], p.fade_sqrt * j[2]
    r0 = p.resistance_ohm * j[3]
    ambient = p.ambient_c
    noisy = p.noise_std > 0
    history = BatteryHistory(battery_id)
    capacities: list[float] = []
    threshold = p.eol_fraction * c0 * (1.0 + 1e-12)
    run = 0
    eol = stop = None
    for n in range(1, p.max_cycles + 1):
        fade = 1.0 - a * n - b * np.sqrt(n)
        eps = rng.normal(0.0, p.noise_std) if noisy else 0.0
        C = c0 * fade * (1.0 + eps)
        if C <= 0:
            raise ValueError(f"{battery_id}: capacity became non-positive at cycle {n}")
        R = r0 * (1.0 + p.resistance_growth * (1.0 - C / c0))
        charge, discharge = _cycle_traces(C, R, p, ambient, rng, noisy)
        history.cycles[n] = {"charge": charge, "discharge": discharge}
        capacities.append(C)
        if eol is None:
            run = run + 1 if C <= threshold else 0
            if run == 3:
                eol = n - 2
                stop = n + max(10, eol // 10)
        if eol is not None and n >= stop:
            break
    if eol is None:
        raise ValueError(f"{battery_id}: end of life not reached within {p.max_cycles} cycles")
    return SyntheticBattery(history, eol, c0, np.array(capacities))


def synthesize_group(group: str, params: GroupParams, seed: int) -> list[SyntheticBattery]:
    """Synthesize every battery of one experimental group (ids ``{group}-b{k}``).

    Battery ``k`` draws from its own stream ``[seed, k]``, so cells do not
    depend on how many random numbers their siblings consumed.
    """
    return [
        synthesize_battery(f"{group}-b{k + 1}", params, np.random.default_rng([seed, k]))
        for k in range(params.batteries)
    ]


def load_presets(path: str | Path | None = None) -> dict[str, dict[str, GroupParams]]:
    """Preset name -> ordered {group label: GroupParams}, from JSON."""
    if path is None:
        path = Path(__file__).with_name("presets") / "groups.json"
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {
        name: {label: GroupParams.from_mapping(values) for label, values in groups.items()}
        for name, groups in raw.items()
    }


def group_params_to_dict(params: GroupParams) -> dict:
    return asdict(params)


# --------------------------------------------------------------------------
# windowed task datasets


@dataclass
class TaskDataset:
    """Normalized windows of one experimental group, split into train/test.

    ``y_*`` hold SoH classes, ``rul_*`` RUL in cycles and ``life_*`` the
    lifetime of the battery each window came from, so the same dataset
    serves classification and (RUL / lifetime) regression.
    """

    task_id: str
    window: int
    x_train: np.ndarray
    y_train: np.ndarray
    rul_train: np.ndarray
    life_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    rul_test: np.ndarray
    life_test: np.ndarray
    battery_train: np.ndarray
    battery_test: np.ndarray
    cycle_train: np.ndarray
    cycle_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def target_train(self) -> np.ndarray:
        return self.rul_train / self.life_train

    @property
    def target_test(self) -> np.ndarray:
        return self.rul_test / self.life_test

    def __len__(self) -> int:
        return len(self.y_train) + len(self.y_test)


def sliding_windows(battery: BatteryFeatures, window: int):
    """Stride-1 windows of one battery, labelled by their last cycle."""
    n = len(battery)
    if n < window:
        raise DataError(f"battery {battery.battery_id} has {n} cycles, fewer than window {window}")
    if battery.rul is None:
        raise DataError(f"battery {battery.battery_id} is not labelled")
    idx = np.arange(window)[None, :] + np.arange(n - window + 1)[:, None]
    x = battery.features[idx]
    last = idx[:, -1]
    rul = battery.rul[last]
    return x, rul, battery.cycles[last]


def _stack(batteries: Sequence[BatteryFeatures], window: int):
    xs, ruls, lives, ids, cycles = [], [], [], [], []
    for b in sorted(batteries, key=lambda b: b.battery_id):
        x, rul, cyc = sliding_windows(b, window)
        xs.append(x)
        ruls.append(rul)
        lives.append(np.full(len(rul), b.lifetime, dtype=np.float64))
        ids.append(np.full(len(rul), b.battery_id, dtype=object))
        cycles.append(cyc)
    if not xs:
        raise DataError("no batteries to build windows from")
    return (np.concatenate(xs), np.concatenate(ruls), np.concatenate(lives),
            np.concatenate(ids), np.concatenate(cycles))


def _assemble(task_id, window, x, rul, life, ids, cycles, train, test) -> TaskDataset:
    if len(train) == 0 or len(test) == 0:
        raise DataError(f"task {task_id}: empty train or test split")
    flat = x[train].reshape(-1, x.shape[2])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std == 0] = 1.0
    norm = (x - mean) / std
    soh = rul_to_soh(rul)
    return TaskDataset(
        task_id=task_id, window=window,
        x_train=norm[train], y_train=soh[train], rul_train=rul[train], life_train=life[train],
        x_test=norm[test], y_test=soh[test], rul_test=rul[test], life_test=life[test],
        battery_train=ids[train], battery_test=ids[test],
        cycle_train=cycles[train], cycle_test=cycles[test],
        mean=mean, std=std,
    )


def make_task(
    batteries: Sequence[BatteryFeatures],
    window: int = 10,
    split_seed: int = 0,
    task_id: str = "task",
    train_fraction: float = 0.8,
) -> TaskDataset:
    """Random 80/20 split of all windows of the given batteries."""
    x, rul, life, ids, cycles = _stack(batteries, window)
    n = len(rul)
    perm = np.random.default_rng(split_seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return _assemble(task_id, window, x, rul, life, ids, cycles, np.sort(perm[:n_train]), np.sort(perm[n_train:]))


def make_battery_split_task(
    batteries: Sequence[BatteryFeatures],
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    window: int = 10,
    task_id: str = "task",
) -> TaskDataset:
    """Train on whole batteries, test on others (no window shared)."""
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise DataError(f"batteries in both splits: {sorted(overlap)}")
    chosen = [b for b in batteries if b.battery_id in set(train_ids) | set(test_ids)]
    x, rul, life, ids, cycles = _stack(chosen, window)
    train = np.nonzero(np.isin(ids, list(train_ids)))[0]
    test = np.nonzero(np.isin(ids, list(test_ids)))[0]
    return _assemble(task_id, window, x, rul, life, ids, cycles, train, test)


@dataclass
class GroupData:
    """Labelled feature tables of one experimental group (one task)."""

    name: str
    batteries: list[BatteryFeatures]
    params: GroupParams | None = None


def synthetic_groups(preset: str = "four-groups", seed: int = 0, presets_file: str | Path | None = None) -> list[GroupData]:
    """Synthesize, extract and label every group of a preset, in preset order.

    Group ``k`` uses seed ``seed + k``; labels use the generator's
    end-of-life cycles.
    """
    presets = load_presets(presets_file)
    if preset not in presets:
        raise KeyError(f"unknown preset {preset!r}; available: {', '.join(sorted(presets))}")
    out = []
    for k, (label, params) in enumerate(presets[preset].items()):
        cells = synthesize_group(label, params, seed + k)
        feats = [extract_features(c.history) for c in cells]
        report = label_batteries(feats, eol={c.history.battery_id: c.eol_cycle for c in cells})
        out.append(GroupData(label, report.labelled, params))
    return out

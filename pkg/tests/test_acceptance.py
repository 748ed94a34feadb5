"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see conftest.py). Criteria 6 and 9 train the full benchmark and dominate
the runtime of the suite.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

import batterycl
from batterycl import cli
from batterycl import tensor as T
from batterycl.data import rul_to_soh, soh_label, synthetic_groups
from batterycl.metrics import forgetting_drop, last20_summary, read_results
from batterycl.network import NetworkConfig, build_network
from batterycl.regularizers import (OnlineAnchor, SiState, StrategyKind, TaskAnchor, consolidate_ewc,
                                    consolidate_online_ewc, ewc_penalty, fisher_diagonal, online_ewc_penalty,
                                    si_consolidate, si_penalty, si_step)
from batterycl.tensor import ParameterStore, Tape
from batterycl.trainer import TrainConfig, train_continual, train_regression

from helpers import (ToySoftmax, batched_central_difference, batched_classifier_loss, fisher_enumeration,
                     gradient_errors, sgd_quadratic_path)

TABLE4 = Path(batterycl.__file__).parent / "configs" / "table4.cfg"
STRATEGIES = ("none", "ewc", "online_ewc", "si")
# criterion 9 repeats the strategy whose run touches every random stream
# (init, split, shuffle, dropout and Fisher label sampling)
RERUN = ("online_ewc",)
# one worker per run, as many as the host allows
JOBS = str(min(5, os.cpu_count() or 1))


@pytest.fixture
def check(request):
    lines = request.config.acceptance_lines

    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def _train_table4(root, strategies, monkeypatch):
    text = TABLE4.read_text()
    if strategies != STRATEGIES:
        text = text.replace("strategy = none, ewc, online_ewc, si", f"strategy = {', '.join(strategies)}")
    cfg = root / "table4.cfg"
    cfg.write_text(text)
    out = root / "out"
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(out))
    start = time.perf_counter()
    code = cli.main(["train", "--jobs", JOBS, str(cfg)])
    return code, out, time.perf_counter() - start


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    try:
        code, out, elapsed = _train_table4(tmp_path_factory.mktemp("table4"), STRATEGIES, mp)
    finally:
        mp.undo()
    return code, out, elapsed


def test_criterion_1_gradient_correctness(check):
    config = NetworkConfig(layers=2, hidden=16, dropout=0.1, head="classification")
    start = time.perf_counter()
    worst_rel, worst_abs = 0.0, 0.0
    for seed in range(20):
        net = build_network(config, seed)
        data = np.random.default_rng([seed, 1])
        x = data.normal(size=(3, 4, 21))
        y = data.integers(0, 3, size=3)
        net.store.zero_grad()
        tape = Tape()
        tape.backward(T.softmax_cross_entropy(net.forward(tape, x), y), net.store)
        numeric = batched_central_difference(net.store, lambda p: batched_classifier_loss(p, x, y, 2))
        rel, absolute = gradient_errors(net.store.flat_grad, numeric)
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, absolute)
    elapsed = time.perf_counter() - start
    ok = worst_rel < 1e-4 and worst_abs < 1e-8 and elapsed < 60
    check(1, ok, f"20 seeds, 2x16 network: max relative error {worst_rel:.2e} (< 1e-4), "
                 f"max absolute error on |g| < 1e-8 entries {worst_abs:.1e}, {elapsed:.1f} s (< 60 s)")


def _random_store(rng):
    return ParameterStore({"a": rng.normal(size=(4, 3)), "b": rng.normal(size=5)})


def _like(store, rng, positive=False):
    return {k: np.abs(rng.normal(size=v.shape)) if positive else rng.normal(size=v.shape)
            for k, v in store.items()}


def _grads(fn, store):
    store.zero_grad()
    tape = Tape()
    tape.backward(fn(tape), store)
    return store.grad_snapshot()


def test_criterion_2_penalty_analytics(check, rng):
    lam, c = 5e5, 200.0
    store = _random_store(rng)
    ewc = [TaskAnchor("A", _like(store, rng), _like(store, rng, True)),
           TaskAnchor("B", _like(store, rng), _like(store, rng, True))]
    online = OnlineAnchor(_like(store, rng), _like(store, rng, True))
    si = SiState.start(store)
    si.omega, si.theta_star, si.consolidations = _like(store, rng, True), _like(store, rng), 1
    penalties = {
        "ewc": lambda s, tape=None: ewc_penalty(s, ewc, lam, tape),
        "online_ewc": lambda s, tape=None: online_ewc_penalty(s, online, lam, tape),
        "si": lambda s, tape=None: si_penalty(s, si, c, tape),
    }
    expected = {
        "ewc": lambda n: sum(2 * lam * a.fisher_diag[n] * (store[n] - a.theta_star[n]) for a in ewc),
        "online_ewc": lambda n: 2 * lam * online.running_fisher[n] * (store[n] - online.theta_star[n]),
        "si": lambda n: 2 * c * si.omega[n] * (store[n] - si.theta_star[n]),
    }

    # zero at the anchor
    at_anchor = {}
    anchor_store = ParameterStore(ewc[0].theta_star)
    single = [TaskAnchor("A", anchor_store.snapshot(), ewc[0].fisher_diag)]
    at_anchor["ewc"] = ewc_penalty(anchor_store, single, lam).value
    at_anchor["online_ewc"] = online_ewc_penalty(ParameterStore(online.theta_star), online, lam).value
    at_anchor["si"] = si_penalty(ParameterStore(si.theta_star), si, c).value

    lowest = np.inf
    worst_rel = 0.0
    for _ in range(1000):
        store.flat[...] = rng.normal(scale=3.0, size=store.size)
        for name, fn in penalties.items():
            lowest = min(lowest, float(fn(store).value))
    for _ in range(10):
        store.flat[...] = rng.normal(size=store.size)
        for name, fn in penalties.items():
            grads = _grads(lambda tape: fn(store, tape), store)
            for n in store:
                want = expected[name](n)
                worst_rel = max(worst_rel, float(np.max(np.abs(grads[n] - want) / np.abs(want))))
    ok = all(v == 0.0 for v in at_anchor.values()) and lowest >= 0.0 and worst_rel < 1e-8
    check(2, ok, f"anchor values {sorted(set(float(v) for v in at_anchor.values()))} (exactly 0), "
                 f"min over 3x1000 probes {lowest:.3g} (>= 0), gradient max relative error {worst_rel:.1e} (< 1e-8)")


def test_criterion_3_reductions(check, rng):
    store = _random_store(rng)
    fisher = _like(store, rng, True)
    anchors = []
    consolidate_ewc(anchors, store, fisher, "A")
    online = consolidate_online_ewc(OnlineAnchor.empty(store, 2.0), store, fisher, "A")
    identical = 0
    for _ in range(100):
        store.flat[...] = rng.normal(size=store.size)
        identical += online_ewc_penalty(store, online, 5e5).value.tobytes() == \
            ewc_penalty(store, anchors, 5e5).value.tobytes()

    groups = synthetic_groups()
    tiny = NetworkConfig(layers=1, hidden=6, dropout=0.1, head="classification")

    def cube(kind, **kw):
        return train_continual(groups, TrainConfig(epochs=2, runs=1, batch_size=20, network=tiny,
                                                   strategy=StrategyKind(kind, **kw)))

    base = cube("none")
    same = {}
    for kind, kw in (("ewc", {"lam": 0.0}), ("online_ewc", {"lam": 0.0}), ("si", {"c": 0.0})):
        other = cube(kind, **kw)
        same[kind] = (other.accuracy.tobytes() == base.accuracy.tobytes()
                      and other.train_loss.tobytes() == base.train_loss.tobytes())
    ok = identical == 100 and all(same.values())
    check(3, ok, f"(a) online EWC after one task == EWC on {identical}/100 probes bitwise; "
                 f"(b) zero-strength trajectories identical to none: {same}")


def test_criterion_4_fisher_oracle(check):
    points = np.array([0.5, -1.0, 2.0, 1.5])
    worst = 0.0
    for w, seed in (([0.8, -0.3], 0), ([0.8, -0.3], 1), ([-1.2, 0.4], 7), ([0.0, 0.0], 11)):
        fisher = fisher_diagonal(ToySoftmax(w), points, seed=seed)["w"]
        worst = max(worst, float(np.max(np.abs(fisher - fisher_enumeration(w, points, seed)))))
    check(4, worst < 1e-12, f"max |library - enumeration| {worst:.1e} (< 1e-12) over 4 seeds")


def test_criterion_5_si_path_integral(check):
    eta, steps = 1e-3, 6000
    store = ParameterStore({"w": np.array([0.0])})
    si = SiState.start(store)
    path, final = sgd_quadratic_path(0.0, 2.0, eta, steps)
    for g, d in path:
        si_step(si, {"w": np.array([g])}, {"w": np.array([d])})
    decrease = 4.0 - (final - 2.0) ** 2
    rel = abs(si.path_w["w"][0] - decrease) / decrease

    # an uphill move gives a negative path contribution that must not become negative importance
    clamp = SiState.start(ParameterStore({"w": np.array([0.0])}))
    si_step(clamp, {"w": np.array([1.0])}, {"w": np.array([0.5])})
    moved = ParameterStore({"w": np.array([0.5])})
    negative_path = float(clamp.path_w["w"][0])
    si_consolidate(clamp, moved)
    omega = float(clamp.omega["w"][0])
    ok = rel < 0.05 and negative_path < 0 and omega == 0.0
    check(5, ok, f"path sum {si.path_w['w'][0]:.4f} vs loss decrease {decrease:.4f}: {100 * rel:.2f}% (< 5%); "
                 f"negative path {negative_path} clamps to omega {omega}")


def test_criterion_6_catastrophic_forgetting(check, benchmark):
    code, out, elapsed = benchmark
    assert code == 0, f"training exited with {code}"
    cubes = {k: read_results(out / f"results_{k}.json") for k in STRATEGIES}
    summaries = {k: last20_summary(c) for k, c in cubes.items()}
    mean = {k: s.mean for k, s in summaries.items()}
    drops = forgetting_drop(cubes["none"])
    a = drops.mean() >= 0.2
    b1 = mean["online_ewc"] >= mean["none"] + 0.05
    b2 = mean["online_ewc"] >= (mean["ewc"] + mean["si"]) / 2 - 0.02
    table = ", ".join(f"{k} {v:.3f}" for k, v in mean.items())
    check(6, a and b1 and b2,
          f"(a) none task-1 drop {drops.mean():.3f} (runs {np.round(drops, 3).tolist()}, >= 0.2); "
          f"(b) last-20 means {table}: online_ewc - none = {mean['online_ewc'] - mean['none']:+.3f} (>= 0.05), "
          f"online_ewc - mean(ewc, si) = {mean['online_ewc'] - (mean['ewc'] + mean['si']) / 2:+.3f} (>= -0.02); "
          f"runtime {elapsed / 60:.1f} min with {JOBS} worker(s)")


def test_criterion_6_runtime_target(check, benchmark):
    # the 15 min target assumes a desktop CPU; see the README for this host's numbers
    _, _, elapsed = benchmark
    check("6 runtime", elapsed < 15 * 60,
          f"4 strategies x 5 runs x 400 epochs in {elapsed / 60:.1f} min on {JOBS} worker(s) (< 15 min)")


def test_criterion_7_regression(check):
    start = time.perf_counter()
    group1 = next(g for g in synthetic_groups() if g.name == "group1")
    report = train_regression(group1)
    elapsed = time.perf_counter() - start
    case1, case2 = report.cases["case1"], report.cases["case2"]
    ok = case1.rmse_percent <= 10.0 and case2.rmse_percent <= case1.rmse_percent and elapsed < 180
    check(7, ok, f"case 1 RMSE {case1.rmse_percent:.2f}% (<= 10%), case 2 RMSE {case2.rmse_percent:.2f}% "
                 f"(<= case 1), {elapsed:.0f} s (< 180 s)")


def test_criterion_8_soh_mapping(check):
    got = [soh_label(r) for r in (0, 30, 31, 60, 61)]
    want = ["at_risk", "at_risk", "okay", "okay", "safe"]
    vector = rul_to_soh(np.array([0, 30, 31, 60, 61])).tolist()
    check(8, got == want and vector == [2, 2, 1, 1, 0], f"RUL 0/30/31/60/61 -> {got}")


def test_criterion_9_determinism(check, benchmark, tmp_path, monkeypatch):
    _, first, _ = benchmark
    code, second, _ = _train_table4(tmp_path, RERUN, monkeypatch)
    assert code == 0
    same = {k: (first / f"results_{k}.json").read_bytes() == (second / f"results_{k}.json").read_bytes()
            for k in RERUN}
    check(9, all(same.values()), f"rerun of the benchmark with the same seeds, results file bit-identical: {same}")

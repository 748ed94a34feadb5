import io
import itertools

import numpy as np
import pytest

from batterycl import data as D
from batterycl.data import (BatteryFeatures, DataError, GroupParams, IngestError, PhaseTrace, detect_eol,
                            extract_features, ingest_cycles, label_batteries, label_rul, make_battery_split_task,
                            make_task, rul_to_soh, soh_label, synthesize_battery, synthesize_group)

HEADER = ",".join(D.CSV_HEADER) + "\n"


def rows(battery, cycle, phase, times, volts=3.7, amps=1.0, temp=25.0):
    return "".join(f"{battery},{cycle},{phase},{t},{volts},{amps},{temp}\n" for t in times)


def labelled_battery(battery_id, n, lifetime=None, offset=0.0):
    cycles = np.arange(1, n + 1)
    features = np.arange(n * 21, dtype=float).reshape(n, 21) + offset
    lifetime = n if lifetime is None else lifetime
    return BatteryFeatures(battery_id, cycles, features, rul=lifetime - cycles, lifetime=lifetime)


@pytest.fixture(scope="module")
def preset_groups():
    return D.synthetic_groups()


class TestIngest:
    def test_empty_file(self):
        result = ingest_cycles(HEADER)
        assert result.batteries == {} and result.rejected_count == 0

    def test_single_charge_phase(self):
        result = ingest_cycles(HEADER + rows("b1", 1, "charge", range(5)))
        assert list(result.batteries) == ["b1"]
        history = result.batteries["b1"]
        assert history.cycle_indices() == [1]
        assert len(history.cycles[1]["charge"]) == 5

    def test_out_of_range_voltage_rejected_and_parse_continues(self):
        text = HEADER + rows("b1", 1, "charge", [0, 1]) + "b1,1,charge,2,9.9,1.0,25\n" + rows("b1", 1, "charge", [3])
        result = ingest_cycles(text)
        assert result.rejected_count == 1
        assert result.rejected[0][0] == 4
        assert len(result.batteries["b1"].cycles[1]["charge"]) == 3

    def test_out_of_range_temperature_rejected(self):
        result = ingest_cycles(HEADER + rows("b1", 1, "charge", [0], temp=150.0))
        assert result.rejected_count == 1

    def test_non_monotone_time_rejected(self):
        result = ingest_cycles(HEADER + rows("b1", 1, "charge", [0, 2, 1, 3]))
        assert result.rejected_count == 1
        np.testing.assert_array_equal(result.batteries["b1"].cycles[1]["charge"].time_s, [0, 2, 3])

    def test_phases_time_independently(self):
        text = HEADER + rows("b1", 1, "charge", [0, 5]) + rows("b1", 1, "discharge", [0, 5])
        assert ingest_cycles(text).rejected_count == 0

    @pytest.mark.parametrize("line", ["b1,1,charge,0,3.7\n", "b1,x,charge,0,3.7,1,25\n", "b1,1,rest,0,3.7,1,25\n",
                                      "b1,0,charge,0,3.7,1,25\n"])
    def test_malformed_row_names_line(self, line):
        with pytest.raises(IngestError, match="line 3"):
            ingest_cycles(HEADER + rows("b1", 1, "charge", [0]) + line)

    def test_header_must_match(self):
        with pytest.raises(IngestError, match="line 1"):
            ingest_cycles("battery,cycle\n")

    def test_csv_round_trip(self):
        cell = synthesize_battery("b1", GroupParams(max_cycles=400), np.random.default_rng(0))
        buf = io.StringIO()
        D.write_cycles_csv([cell.history], buf)
        back = ingest_cycles(buf.getvalue()).batteries["b1"]
        assert back.cycle_indices() == cell.history.cycle_indices()
        trace, orig = back.cycles[7]["discharge"], cell.history.cycles[7]["discharge"]
        np.testing.assert_array_equal(trace.voltage_v, orig.voltage_v)


def rectangle_cycle(temp=25.0):
    t = np.linspace(0.0, 3600.0, 7)
    charge = PhaseTrace(t, np.linspace(3.5, 4.1, 7), np.full(7, 1.0), np.full(7, temp))
    discharge = PhaseTrace(np.concatenate([[0.0], 1.0 + t]), np.concatenate([[4.0], np.linspace(3.9, 3.2, 7)]),
                           np.concatenate([[0.0], np.full(7, -2.0)]), np.full(8, temp))
    return {"charge": charge, "discharge": discharge}


class TestFeatures:
    def test_twenty_one_named_features(self):
        assert len(D.FEATURE_NAMES) == 21 == len(set(D.FEATURE_NAMES))
        assert sum(name.startswith("charge_") for name in D.FEATURE_NAMES) == 10

    def test_rectangle_charge_capacity(self):
        feats = D.charge_features(rectangle_cycle()["charge"])
        assert feats[D.FEATURE_NAMES.index("charge_capacity_ah")] == pytest.approx(1.0, abs=1e-12)
        assert feats[D.FEATURE_NAMES.index("charge_cc_duration_s")] == 3600.0
        assert feats[D.FEATURE_NAMES.index("charge_cv_duration_s")] == 0.0

    def test_constant_temperature(self):
        history = D.BatteryHistory("b1", {1: rectangle_cycle(25.0)})
        row = extract_features(history).features[0]
        for name in ("charge_max_temperature_c", "charge_mean_temperature_c", "discharge_max_temperature_c"):
            assert row[D.FEATURE_NAMES.index(name)] == pytest.approx(25.0, abs=1e-12)
        for name in ("charge_temperature_rise_c", "discharge_temperature_rise_c"):
            assert row[D.FEATURE_NAMES.index(name)] == 0.0

    def test_discharge_load_onset_features(self):
        row = D.discharge_features(rectangle_cycle()["discharge"])
        assert row[D.FEATURE_NAMES.index("discharge_onset_voltage_drop_v") - 10] == pytest.approx(0.1)
        assert row[D.FEATURE_NAMES.index("discharge_resistance_ohm") - 10] == pytest.approx(0.05)
        # one hour at 2 A plus the trapezoid over the 1 s load ramp
        assert row[D.FEATURE_NAMES.index("discharge_capacity_ah") - 10] == pytest.approx(2.0 + 1.0 / 3600, rel=1e-12)

    def test_aged_cell_has_less_discharge_capacity(self):
        cell = synthesize_battery("b1", GroupParams(), np.random.default_rng(1))
        feats = extract_features(cell.history)
        cap = feats.discharge_capacity
        assert cap[-1] < cap[0]
        fresh, aged = cap[:10].mean(), cap[-10:].mean()
        assert aged < 0.85 * fresh

    def test_incomplete_cycle_skipped(self):
        cycles = {1: rectangle_cycle(), 2: {"charge": rectangle_cycle()["charge"]}, 3: rectangle_cycle()}
        feats = extract_features(D.BatteryHistory("b1", cycles))
        assert feats.cycles.tolist() == [1, 3]
        assert feats.skipped_cycles == [2]

    def test_deterministic_and_order_independent(self):
        cells = synthesize_group("g", GroupParams(), 4)
        forward = [extract_features(c.history) for c in cells]
        backward = [extract_features(c.history) for c in reversed(cells)][::-1]
        for a, b in zip(forward, backward):
            assert a.features.tobytes() == b.features.tobytes()


class TestLabels:
    def test_rul_examples(self):
        battery = labelled_battery("b1", 120)
        labelled = label_rul(battery, 100)
        assert labelled.rul[labelled.cycles == 40][0] == 60
        assert labelled.rul[labelled.cycles == 100][0] == 0
        assert labelled.cycles.max() == 100
        assert np.all(np.diff(labelled.rul) == -1)

    @pytest.mark.parametrize("rul,label", [(0, "at_risk"), (30, "at_risk"), (31, "okay"), (60, "okay"),
                                           (61, "safe"), (500, "safe")])
    def test_table_boundaries(self, rul, label):
        assert soh_label(rul) == label

    def test_mapping_is_total(self):
        classes = rul_to_soh(np.arange(0, 200))
        assert set(classes.tolist()) == {0, 1, 2}
        assert np.all(np.diff(classes) <= 0)

    def test_negative_rul_rejected(self):
        with pytest.raises(ValueError):
            rul_to_soh(-1)

    def test_detect_eol_needs_sustained_crossing(self):
        cycles = np.arange(1, 11)
        cap = np.array([1.0, 0.9, 0.79, 0.85, 0.79, 0.78, 0.77, 0.76, 0.75, 0.74])
        assert detect_eol(cycles, cap, 0.8) == 5
        assert detect_eol(cycles[:6], cap[:6], 0.8) is None

    def test_never_crossing_battery_excluded(self):
        healthy = BatteryFeatures("b2", np.arange(1, 20), np.ones((19, 21)))
        dead = labelled_battery("b1", 30)
        report = label_batteries([dead, healthy], eol={"b1": 25})
        assert [b.battery_id for b in report.labelled] == ["b1"]
        assert report.excluded == {"b2": "end of life not reached"}


class TestSynthesis:
    def test_linear_fade_reaches_eol_at_cycle_100(self):
        params = GroupParams(noise_std=0.0, fade_sqrt=0.0, fade_linear=0.002, eol_fraction=0.8,
                             initial_capacity_ah=2.0, jitter=0.0, capacity_jitter=0.0)
        cell = synthesize_battery("b1", params, np.random.default_rng(0))
        assert cell.eol_cycle == 100
        assert np.all(np.diff(cell.capacity_ah) < 0)

    def test_same_seed_same_bytes(self):
        outputs = []
        for _ in range(2):
            buf = io.StringIO()
            D.write_cycles_csv([c.history for c in synthesize_group("g1", GroupParams(), 11)], buf)
            outputs.append(buf.getvalue().encode())
        assert outputs[0] == outputs[1]

    def test_batteries_within_group_differ(self):
        cells = synthesize_group("g1", GroupParams(), 11)
        assert len({c.eol_cycle for c in cells} | {round(c.nominal_capacity_ah, 6) for c in cells}) > 1
        assert [c.history.battery_id for c in cells] == ["g1-b1", "g1-b2", "g1-b3"]

    def test_battery_streams_are_independent(self):
        three = synthesize_group("g", GroupParams(batteries=3), 5)
        two = synthesize_group("g", GroupParams(batteries=2), 5)
        assert [c.eol_cycle for c in three[:2]] == [c.eol_cycle for c in two]

    def test_recording_continues_past_eol(self):
        cell = synthesize_battery("b1", GroupParams(), np.random.default_rng(2))
        assert max(cell.history.cycles) >= cell.eol_cycle + 10

    @pytest.mark.parametrize("kwargs", [{"fade_linear": 0.6, "fade_sqrt": 0.5}, {"eol_fraction": 1.0},
                                        {"batteries": 0}, {"noise_std": -1.0}, {"jitter": 1.0}])
    def test_invalid_params_rejected(self, kwargs):
        with pytest.raises(ValueError):
            GroupParams(**kwargs)

    def test_eol_not_reached(self):
        with pytest.raises(ValueError, match="not reached"):
            synthesize_battery("b1", GroupParams(max_cycles=20), np.random.default_rng(0))

    def test_unknown_preset_key(self):
        with pytest.raises(KeyError):
            GroupParams.from_mapping({"ambient": 3})


class TestPresets:
    # pinned from the generator: number of raw features whose mean shift
    # exceeds two pooled standard deviations, per pair of groups
    PINNED_SHIFTS = {("group1", "group7"): 10, ("group1", "group4"): 10, ("group1", "group9"): 8,
                     ("group7", "group4"): 3, ("group7", "group9"): 10, ("group4", "group9"): 10}

    def test_four_groups_in_order(self, preset_groups):
        assert [g.name for g in preset_groups] == ["group1", "group7", "group4", "group9"]
        assert all(len(g.batteries) == 3 for g in preset_groups)

    def test_lifetimes_in_range(self, preset_groups):
        for g in preset_groups:
            for b in g.batteries:
                assert 120 <= b.lifetime <= 400, (b.battery_id, b.lifetime)

    def test_pairwise_feature_shift(self, preset_groups):
        raw = {g.name: np.concatenate([b.features for b in g.batteries]) for g in preset_groups}
        for a, b in itertools.combinations(raw, 2):
            xa, xb = raw[a], raw[b]
            pooled = np.sqrt(((len(xa) - 1) * xa.var(0, ddof=1) + (len(xb) - 1) * xb.var(0, ddof=1))
                             / (len(xa) + len(xb) - 2))
            count = int((np.abs(xa.mean(0) - xb.mean(0)) / pooled > 2).sum())
            assert count >= 3
            assert count == self.PINNED_SHIFTS[(a, b)]

    def test_unknown_preset(self):
        with pytest.raises(KeyError, match="unknown preset"):
            D.synthetic_groups("nine-groups")


class TestWindows:
    def test_window_count(self):
        x, rul, cycles = D.sliding_windows(labelled_battery("b1", 100), 10)
        assert x.shape == (91, 10, 21)
        assert cycles[0] == 10 and rul[0] == 90

    def test_too_short_battery(self):
        with pytest.raises(DataError):
            D.sliding_windows(labelled_battery("b1", 5), 10)

    def test_split_fractions_and_disjoint(self):
        task = make_task([labelled_battery("a", 100), labelled_battery("b", 80, offset=0.5)], 10, split_seed=3)
        n = len(task)
        assert n == 91 + 71
        assert abs(len(task.y_train) - 0.8 * n) <= 1
        train = set(zip(task.battery_train, task.cycle_train))
        test = set(zip(task.battery_test, task.cycle_test))
        assert not train & test and len(train | test) == n

    def test_no_window_crosses_batteries(self):
        a, b = labelled_battery("a", 30), labelled_battery("b", 30, offset=1e4)
        task = make_task([a, b], 10, split_seed=0)
        for x, battery in zip(task.x_train * task.std + task.mean, task.battery_train):
            raw = a.features if battery == "a" else b.features
            start = np.nonzero(np.isclose(raw[:, 0], x[0, 0]))[0]
            assert start.size == 1
            np.testing.assert_allclose(x, raw[start[0]:start[0] + 10])

    def test_stats_are_train_split_statistics(self):
        batteries = [labelled_battery("a", 60), labelled_battery("b", 50, offset=3.0)]
        first = make_task(batteries, 10, split_seed=1)
        raw_train = first.x_train * first.std + first.mean
        flat = raw_train.reshape(-1, 21)
        np.testing.assert_allclose(first.mean, flat.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(first.std, flat.std(axis=0), rtol=1e-12)
        second = make_task(batteries, 10, split_seed=2)
        assert not np.array_equal(first.mean, second.mean)

    def test_labels_follow_last_cycle(self):
        task = make_task([labelled_battery("a", 100)], 10, split_seed=0)
        np.testing.assert_array_equal(task.rul_train, 100 - task.cycle_train)
        np.testing.assert_array_equal(task.y_train, rul_to_soh(task.rul_train))
        np.testing.assert_allclose(task.target_train, task.rul_train / 100.0)

    def test_battery_split(self):
        batteries = [labelled_battery(k, 40) for k in ("a", "b", "c")]
        task = make_battery_split_task(batteries, ["a", "b"], ["c"], 10)
        assert set(task.battery_train) == {"a", "b"} and set(task.battery_test) == {"c"}
        with pytest.raises(DataError):
            make_battery_split_task(batteries, ["a"], ["a"], 10)

    def test_empty_inputs_rejected(self):
        with pytest.raises(DataError):
            make_task([], 10)


class TestFeatureCsv:
    def test_round_trip(self, preset_groups):
        batteries = preset_groups[0].batteries
        buf = io.StringIO()
        n = D.write_features_csv(batteries, buf)
        assert n == sum(len(b) for b in batteries)
        header = buf.getvalue().splitlines()[0]
        assert header == "battery_id,cycle_index," + ",".join(f"f{k:02d}" for k in range(1, 22)) + ",rul_cycles,soh_class"
        back = D.read_features_csv(buf.getvalue())
        for a, b in zip(batteries, back):
            assert a.battery_id == b.battery_id and a.lifetime == b.lifetime
            assert a.features.tobytes() == b.features.tobytes()
            np.testing.assert_array_equal(a.rul, b.rul)

    def test_unlabelled_rejected(self):
        with pytest.raises(DataError):
            D.write_features_csv([BatteryFeatures("b", np.arange(1, 3), np.ones((2, 21)))], io.StringIO())

    def test_inconsistent_labels_rejected(self):
        buf = io.StringIO()
        D.write_features_csv([labelled_battery("b", 3)], buf)
        lines = buf.getvalue().splitlines()
        lines[1] = lines[1].rsplit(",", 2)[0] + ",7,safe"
        with pytest.raises(DataError, match="inconsistent"):
            D.read_features_csv("\n".join(lines) + "\n")

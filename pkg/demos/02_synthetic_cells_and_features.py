"""Synthetic cycling data, feature extraction and state-of-health labels.

Generates one experimental group, turns every charge/discharge cycle into
21 features, labels each cycle with its remaining useful life and maps it
to the three state-of-health classes.
"""

import io

import numpy as np

from batterycl.data import (FEATURE_NAMES, SOH_LABELS, extract_features, ingest_cycles, label_rul, load_presets,
                            rul_to_soh, synthesize_group, write_cycles_csv)

params = load_presets()["four-groups"]["group1"]
cells = synthesize_group("group1", params, seed=0)
for cell in cells:
    print(f"{cell.history.battery_id}: {len(cell.history.cycles)} cycles, end of life at cycle {cell.eol_cycle}")

# round trip through the ingest CSV schema, as the CLI does
buf = io.StringIO()
rows = write_cycles_csv([c.history for c in cells], buf)
histories = ingest_cycles(buf.getvalue()).batteries
print(f"{rows} samples written and read back for {len(histories)} batteries")

cell = cells[0]
features = extract_features(histories[cell.history.battery_id])
labelled = label_rul(features, cell.eol_cycle)
print(f"feature matrix {labelled.features.shape} (cycles x features)")
for k in (0, len(labelled) // 2, len(labelled) - 1):
    print(f"  cycle {labelled.cycles[k]:>3}: capacity {labelled.discharge_capacity[k]:.3f} Ah, "
          f"RUL {labelled.rul[k]:>3}, {SOH_LABELS[rul_to_soh(labelled.rul[k])]}")

# how the labels are distributed over one battery's life
counts = np.bincount(rul_to_soh(labelled.rul), minlength=3)
print("class counts", dict(zip(SOH_LABELS, counts.tolist())))
print("first features:", ", ".join(FEATURE_NAMES[:4]), "...")

"""Remaining-useful-life regression on one synthetic group.

Case 1 trains on two batteries and tests on the third; case 2 pools the
windows of all three and holds out a random 20%.
"""

import argparse

from batterycl.data import synthetic_groups
from batterycl.network import REGRESSION
from batterycl.trainer import TrainConfig, train_regression

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--epochs", type=int, default=10, help="training epochs (the full protocol uses 50)")
parser.add_argument("--group", default="group1")
args = parser.parse_args()

group = next(g for g in synthetic_groups() if g.name == args.group)
config = TrainConfig(epochs=args.epochs, runs=1, network=REGRESSION)
report = train_regression(group, config)

for name, case in report.cases.items():
    print(f"{name}: RMSE {case.rmse_percent:.2f}% of life, mean deviation "
          f"{case.mean_abs_deviation_cycles:.1f} cycles, train loss {case.initial_train_loss:.4f} -> "
          f"{case.final_train_loss:.5f}")

# a few predictions from the held-out battery of case 1
case = report.cases["case1"]
for k in range(0, len(case.cycles), max(1, len(case.cycles) // 6)):
    print(f"  cycle {case.cycles[k]:>3}: predicted RUL {case.predicted_rul[k]:6.1f}, true {case.true_rul[k]:>3}")

"""Sequential training on four battery groups, with and without protection.

A scaled-down version of the bundled benchmark: a smaller network and
fewer epochs so it finishes in a few minutes. Prints the last-20-epoch
best/mean/worst table and how much task 1 is forgotten once task 2 starts.
Use ``batterycl train`` with the bundled table4.cfg for the full protocol.
"""

import argparse

import numpy as np

from batterycl.data import synthetic_groups
from batterycl.metrics import forgetting_drop, format_table, last20_summary, mean_curves
from batterycl.network import NetworkConfig
from batterycl.regularizers import STRATEGIES, StrategyKind
from batterycl.trainer import TrainConfig, train_continual

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--epochs", type=int, default=25, help="epochs per task (at least 20)")
parser.add_argument("--runs", type=int, default=2)
parser.add_argument("--hidden", type=int, default=32)
parser.add_argument("--jobs", type=int, default=1)
args = parser.parse_args()

groups = synthetic_groups()
network = NetworkConfig(layers=2, hidden=args.hidden, dropout=0.1, head="classification")
summaries = []
for kind in STRATEGIES:
    config = TrainConfig(epochs=args.epochs, runs=args.runs, network=network, strategy=StrategyKind(kind))
    cube = train_continual(groups, config, jobs=args.jobs)
    summaries.append(last20_summary(cube))
    drop = forgetting_drop(cube)
    mean, spread = mean_curves(cube)
    print(f"{kind:<11} task-1 drop after switching {np.mean(drop):.3f}, final mean accuracy {mean[-1]:.3f}, "
          f"final spread {spread[-1]:.3f}")

print()
print(format_table(summaries))

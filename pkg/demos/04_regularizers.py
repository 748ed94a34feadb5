"""Parameter-importance penalties on a toy problem.

Shows the three penalties at their anchors and away from them, the online
Fisher recursion, and synaptic intelligence accumulating importance along
a descent path.
"""

import numpy as np

from batterycl.regularizers import (OnlineAnchor, SiState, TaskAnchor, consolidate_online_ewc, ewc_penalty,
                                    online_ewc_penalty, si_consolidate, si_penalty, si_step)
from batterycl.tensor import ParameterStore

store = ParameterStore({"w": np.array([1e-3])})
anchor = TaskAnchor("group1", {"w": np.array([0.0])}, {"w": np.array([1e-2])})
print("EWC, lambda 5e5, F 1e-2, offset 1e-3:", ewc_penalty(store, [anchor], 5e5).value)

# online EWC keeps one running Fisher: F <- gamma F + F_new
online = OnlineAnchor.empty(store, gamma=2.0)
for task, f in (("group1", 1.0), ("group7", 0.5), ("group4", 0.25)):
    online = consolidate_online_ewc(online, store, {"w": np.array([f])}, task)
    print(f"after {task}: running Fisher {online.running_fisher['w'][0]}")
store["w"] = [0.01]
print("online EWC penalty at w = 0.01, anchored at 0.001:", online_ewc_penalty(store, online, 5e5).value)

# synaptic intelligence on (w - 2)^2, plain gradient descent from 0
w = ParameterStore({"w": np.array([0.0])})
si = SiState.start(w, xi=0.01)
eta = 1e-3
for _ in range(6000):
    g = 2.0 * (w["w"][0] - 2.0)
    delta = -eta * g
    si_step(si, {"w": np.array([g])}, {"w": np.array([delta])})
    w["w"] = w["w"] + delta
print(f"path integral {si.path_w['w'][0]:.4f}, loss decrease {4.0 - (w['w'][0] - 2.0) ** 2:.4f}")
si_consolidate(si, w)
print(f"importance omega {si.omega['w'][0]:.4f} = path / (moved^2 + xi)")
w["w"] = w["w"] + 0.1
print("SI penalty 0.1 from the anchor, c = 200:", si_penalty(w, si, 200.0).value)

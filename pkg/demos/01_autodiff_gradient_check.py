"""Reverse-mode autodiff on a tape, checked against finite differences.

Builds a small LSTM classifier, runs one backward pass and compares every
parameter gradient with a fourth-order central difference.
"""

import numpy as np

from batterycl import tensor as T
from batterycl.network import NetworkConfig, build_network
from batterycl.tensor import Tape

# a scalar warm-up: d/dx (x * x + 3x) at x = 2 is 7
store = T.ParameterStore({"x": np.array([2.0])})
tape = Tape()
x = tape.parameter(store, "x")
y = T.sum(T.add(T.mul(x, x), T.scale(x, 3.0)))
tape.backward(y, store)
print("value", y.value, "gradient", store.grad("x"))

# a two-layer LSTM classifier on random windows of 21 features
net = build_network(NetworkConfig(layers=2, hidden=8, dropout=0.1, head="classification"), seed=0)
rng = np.random.default_rng(0)
windows = rng.normal(size=(3, 4, 21))
labels = rng.integers(0, 3, size=3)


def loss(_store):
    return T.softmax_cross_entropy(net.forward(Tape(), windows), labels).value


net.store.zero_grad()
tape = Tape()
tape.backward(T.softmax_cross_entropy(net.forward(tape, windows), labels), net.store)
analytic = net.store.grad_snapshot()
numeric = T.finite_difference_gradient(loss, net.store, step=1e-3, order=4)

print(f"{'parameter':<22}{'size':>6}  max relative error")
for name in net.store.names():
    a, n = analytic[name], numeric[name]
    big = np.abs(a) >= 1e-8
    rel = np.max(np.abs(a - n)[big] / np.abs(a[big])) if big.any() else 0.0
    print(f"{name:<22}{a.size:>6}  {rel:.2e}")

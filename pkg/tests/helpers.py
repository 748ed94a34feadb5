"""Shared oracles for the test modules."""

import numpy as np

from batterycl import tensor as T
from batterycl.tensor import ParameterStore


def gradient_errors(analytic, numeric, floor: float = 1e-8) -> tuple[float, float]:
    """(max relative error over entries with |analytic| >= floor,
    max absolute error over the smaller entries)."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(analytic - numeric)
    small = np.abs(analytic) < floor
    rel = diff[~small] / np.abs(analytic[~small])
    return float(rel.max(initial=0.0)), float(diff[small].max(initial=0.0))


def assert_gradients_match(analytic: dict, numeric: dict, rtol: float, floor: float = 1e-8) -> float:
    worst = 0.0
    for name in numeric:
        rel, absolute = gradient_errors(analytic[name], numeric[name], floor)
        assert rel < rtol, f"{name}: relative error {rel:.3g}"
        assert absolute < floor, f"{name}: absolute error {absolute:.3g} on a near-zero entry"
        worst = max(worst, rel)
    return worst


def sgd_quadratic_path(theta0: float, target: float, eta: float, steps: int):
    """Plain gradient descent on (theta - target)^2: per-step (grad, delta) pairs."""
    theta, out = theta0, []
    for _ in range(steps):
        g = 2.0 * (theta - target)
        delta = -eta * g
        out.append((g, delta))
        theta += delta
    return out, theta


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def batched_classifier_loss(params: dict, x: np.ndarray, y: np.ndarray, layers: int) -> np.ndarray:
    """Mean cross-entropy of a stacked-LSTM classifier, written directly in numpy.

    Every entry of ``params`` carries a leading axis P, one parameter set
    per row, so P perturbed networks are evaluated at once. Independent of
    the tape implementation; returns (P,) losses.
    """
    P = params["head.bias"].shape[0]
    B, steps, _ = x.shape
    seq = np.broadcast_to(x, (P, *x.shape))
    for k in range(layers):
        w_in, w_rec, bias = (params[f"lstm{k}.{role}"] for role in ("w_in", "w_rec", "bias"))
        H = w_rec.shape[1]
        xw = np.matmul(seq.reshape(P, B * steps, -1), w_in).reshape(P, B, steps, 4 * H) + bias[:, None, None, :]
        h = np.zeros((P, B, H))
        c = np.zeros((P, B, H))
        outputs = []
        for t in range(steps):
            z = xw[:, :, t] + np.matmul(h, w_rec)
            i, f, g, o = z[..., :H], z[..., H:2 * H], z[..., 2 * H:3 * H], z[..., 3 * H:]
            c = _sigmoid(f) * c + _sigmoid(i) * np.tanh(g)
            h = _sigmoid(o) * np.tanh(c)
            outputs.append(h)
        seq = np.stack(outputs, axis=2)
    logits = np.matmul(seq[:, :, -1], params["head.weight"]) + params["head.bias"][:, None, :]
    top = logits.max(axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(logits - top).sum(axis=-1))
    picked = np.take_along_axis(logits, y[None, :, None].repeat(P, axis=0), axis=-1)[..., 0]
    return (lse - picked).mean(axis=1)


def batched_central_difference(store, loss_fn, step: float = 1e-3, chunk: int = 512) -> np.ndarray:
    """Five-point central-difference gradient over the store's flat layout.

    ``loss_fn`` maps a dict of (P, *shape) parameter stacks to (P,) losses.
    Returns a flat gradient aligned with ``store.flat``.
    """
    base = store.flat.copy()
    n = base.size
    offsets = np.array([step, -step, 2.0 * step, -2.0 * step])
    index = np.repeat(np.arange(n), 4)
    shift = np.tile(offsets, n)
    values = np.empty(index.size)
    shapes = store.shapes()
    for lo in range(0, index.size, chunk):
        hi = min(lo + chunk, index.size)
        rows = np.repeat(base[None, :], hi - lo, axis=0)
        rows[np.arange(hi - lo), index[lo:hi]] += shift[lo:hi]
        params, start = {}, 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            params[name] = rows[:, start:start + size].reshape(hi - lo, *shape)
            start += size
        values[lo:hi] = loss_fn(params)
    f = values.reshape(n, 4)
    return (8.0 * (f[:, 0] - f[:, 1]) - (f[:, 2] - f[:, 3])) / (12.0 * step)


class ToySoftmax:
    """logits = [w0 * x, w1 * x]: two parameters, two classes."""

    head = "classification"

    def __init__(self, w):
        self.store = ParameterStore({"w": np.array(w, dtype=float)})

    def forward(self, tape, windows, train=False, rng=None):
        x = np.asarray(windows, dtype=float).reshape(-1, 1)
        return T.matmul(tape.constant(x), T.slice(tape.parameter(self.store, "w"), (None, np.s_[:])))


def fisher_enumeration(w, points, seed, sample_count=None):
    """Sampled-label squared scores of ToySoftmax, enumerated point by point
    with the same random draws as the library estimator."""
    rng = np.random.default_rng(seed)
    n = len(points)
    chosen = range(n) if sample_count is None else np.sort(rng.choice(n, size=sample_count, replace=False))
    squares = []
    for k in chosen:
        x = points[k]
        z = np.array([w[0] * x, w[1] * x])
        p = np.exp(z - z.max())
        p /= p.sum()
        u = rng.random()
        label = 0 if u < p[0] else 1
        score = np.array([x * ((label == j) - p[j]) for j in range(2)])
        squares.append(score ** 2)
    return np.mean(squares, axis=0)

"""Stacked-LSTM models with a regression or a 3-class classification head."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Node, ParameterStore, ShapeError, Tape

N_FEATURES = 21
N_CLASSES = 3


@dataclass(frozen=True)
class NetworkConfig:
    layers: int
    hidden: int
    dropout: float
    head: str  # "regression" | "classification"
    input_width: int = N_FEATURES
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.head not in ("regression", "classification"):
            raise ValueError(f"head must be 'regression' or 'classification', got {self.head!r}")
        if self.layers < 1:
            raise ValueError("network needs at least one LSTM layer")
        if self.hidden < 1:
            raise ValueError("network needs at least one hidden node per layer")
        if self.input_width < 1:
            raise ValueError("input width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def outputs(self) -> int:
        return 1 if self.head == "regression" else self.n_classes

    def with_overrides(self, **kwargs) -> "NetworkConfig":
        return replace(self, **kwargs)


REGRESSION = NetworkConfig(layers=1, hidden=150, dropout=0.0, head="regression")
CLASSIFICATION = NetworkConfig(layers=2, hidden=100, dropout=0.1, head="classification")
PRESETS = {"regression": REGRESSION, "classification": CLASSIFICATION}


def parameter_count(config: NetworkConfig) -> int:
    total = 0
    width = config.input_width
    for _ in range(config.layers):
        total += 4 * (config.hidden * (width + config.hidden) + config.hidden)
        width = config.hidden
    return total + config.outputs * (config.hidden + 1)


class LstmNetwork:
    """Parameters plus the forward pass of one stacked-LSTM model.

    Parameter names are ``lstm{k}.w_in``, ``lstm{k}.w_rec``, ``lstm{k}.bias``
    for layer ``k`` and ``head.weight``, ``head.bias``. Gate blocks inside
    the LSTM matrices are ordered input, forget, candidate, output.
    """

    def __init__(self, config: NetworkConfig, store: ParameterStore):
        self.config = config
        self.store = store

    @property
    def head(self) -> str:
        return self.config.head

    def forward(self, tape: Tape, windows, train: bool = False, rng: np.random.Generator | None = None) -> Node:
        """Predict from a batch of windows shaped (batch, time, features).

        A single (time, features) window is treated as a batch of one.
        Regression returns (batch,) outputs, classification (batch, classes)
        logits. Every call starts from a zero state.
        """
        cfg = self.config
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] < 1:
            raise ShapeError(f"windows must be (batch, time>=1, features), got {x.shape}")
        if x.shape[2] != cfg.input_width:
            raise ShapeError(f"feature width: expected {cfg.input_width}, got {x.shape[2]}")
        h = tape.constant(x)
        for k in range(cfg.layers):
            h = T.lstm(
                h,
                tape.parameter(self.store, f"lstm{k}.w_in"),
                tape.parameter(self.store, f"lstm{k}.w_rec"),
                tape.parameter(self.store, f"lstm{k}.bias"),
            )
            if k < cfg.layers - 1:
                h = T.dropout(h, cfg.dropout, train, rng)
        last = T.slice(h, (np.s_[:], -1))
        last = T.dropout(last, cfg.dropout, train, rng)
        out = T.add(
            T.matmul(last, tape.parameter(self.store, "head.weight")),
            tape.parameter(self.store, "head.bias"),
        )
        if cfg.head == "regression":
            out = T.slice(out, (np.s_[:], 0))
        return out

    def predict(self, windows) -> np.ndarray:
        """Eval-mode forward without keeping the tape."""
        return self.forward(Tape(), windows, train=False).value

    def probabilities(self, windows) -> np.ndarray:
        if self.head != "classification":
            raise ValueError("probabilities need a classification head")
        return T.softmax(self.predict(windows))


def build_network(config: NetworkConfig, seed: int) -> LstmNetwork:
    """Initialise a network: uniform(+-1/sqrt(hidden)) weights, forget bias 1."""
    rng = np.random.default_rng(seed)
    H = config.hidden
    bound = 1.0 / np.sqrt(H)
    store = ParameterStore()
    width = config.input_width
    for k in range(config.layers):
        store.add(f"lstm{k}.w_in", rng.uniform(-bound, bound, size=(width, 4 * H)))
        store.add(f"lstm{k}.w_rec", rng.uniform(-bound, bound, size=(H, 4 * H)))
        bias = rng.uniform(-bound, bound, size=4 * H)
        bias[H:2 * H] = 1.0
        store.add(f"lstm{k}.bias", bias)
        width = H
    store.add("head.weight", rng.uniform(-bound, bound, size=(H, config.outputs)))
    store.add("head.bias", rng.uniform(-bound, bound, size=config.outputs))
    return LstmNetwork(config, store)


def lstm_reference(tape: Tape, x: Node, w_in: Node, w_rec: Node, bias: Node) -> Node:
    """The LSTM layer spelled out in elementary tape ops, one step at a time.

    Used to cross-check the fused ``tensor.lstm`` primitive.
    """
    B, steps, _ = x.shape
    H = w_rec.shape[0]
    h = tape.constant(np.zeros((B, H)))
    c = tape.constant(np.zeros((B, H)))
    outputs = []
    for t in range(steps):
        xt = T.slice(x, (np.s_[:], t))
        z = T.add(T.add(T.matmul(xt, w_in), T.matmul(h, w_rec)), bias)
        i = T.sigmoid(T.slice(z, (np.s_[:], np.s_[:H])))
        f = T.sigmoid(T.slice(z, (np.s_[:], np.s_[H:2 * H])))
        g = T.tanh(T.slice(z, (np.s_[:], np.s_[2 * H:3 * H])))
        o = T.sigmoid(T.slice(z, (np.s_[:], np.s_[3 * H:])))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        outputs.append(h)
    stacked = T.concat([T.slice(h_t, (np.s_[:], None, np.s_[:])) for h_t in outputs], axis=1)
    return stacked

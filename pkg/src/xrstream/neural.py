"""Small numpy neural-network engine for the bitrate Q-networks.

Two value networks are provided:

* ``QNetwork``: two stacked LSTM layers over an observation window,
  followed by a ReLU dense layer and a linear output layer.
* ``MLPQNetwork``: dense-only network over a flat state vector.

Both expose the same surface: ``forward`` on a batch, ``loss_and_grads``
for the squared TD error on selected actions, a named parameter dict for
the optimizer, and JSON (de)serialization. Networks default to float64;
``dtype="float32"`` roughly halves training cost.

LSTM gate layout inside the stacked ``(4H, ...)`` weight blocks is
input, forget, cell-candidate, output.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np

CHECKPOINT_FORMAT = "xrstream-qnet"
CHECKPOINT_VERSION = 1


class ArchitectureMismatch(ValueError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.W = _uniform(rng, (n_out, n_in), n_in)
        self.b = np.zeros(n_out)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def forward(self, x: np.ndarray):
        z = x @ self.W.T + self.b
        y = np.maximum(z, 0.0) if self.activation == "relu" else z
        return y, (x, z)

    def backward(self, dy: np.ndarray, cache):
        x, z = cache
        dz = dy * (z > 0) if self.activation == "relu" else dy
        return dz @ self.W, {"W": dz.T @ x, "b": dz.sum(axis=0)}


class LstmLayer:
    def __init__(self, n_in: int, hidden: int = 64, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden
        self.hidden = H
        self.W = _uniform(rng, (4 * H, n_in), n_in)
        self.U = _uniform(rng, (4 * H, H), H)
        self.b = np.zeros(4 * H)
        self.b[H:2 * H] = forget_bias

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    def step(self, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
        """One time step on a batch; returns ``(h, c)``."""
        z = x @ self.W.T + h_prev @ self.U.T + self.b
        h, c, _ = self._cell(z, c_prev)
        return h, c

    def _cell(self, z: np.ndarray, c_prev: np.ndarray):
        H = self.hidden
        a = sigmoid(z)
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        c = f * c_prev
        c += i * g
        tc = np.tanh(c)
        return o * tc, c, (a, tc)

    def forward(self, X: np.ndarray):
        """Run over ``X`` of shape (B, T, n_in) from zero state.

        Returns hidden states time-major, shape (T, B, H), plus the cache.
        """
        return self._forward(np.ascontiguousarray(X.transpose(1, 0, 2)))

    def _forward(self, Xt: np.ndarray):
        T, B, D = Xt.shape
        H = self.hidden
        # Input projections for all steps in one product.
        Zx = (Xt.reshape(T * B, D) @ self.W.T).reshape(T, B, 4 * H)
        Zx += self.b
        UT = self.U.T
        c = np.zeros((B, H), dtype=Zx.dtype)
        out = np.empty((T, B, H), dtype=Zx.dtype)
        cells = []
        for t in range(T):
            z = Zx[t]
            if t:
                z += out[t - 1] @ UT
            h, c_new, cache = self._cell(z, c)
            cells.append((c,) + cache)
            c = c_new
            out[t] = h
        return out, (Xt, out, cells)

    def backward(self, dOut: np.ndarray, caches, need_input_grad: bool = True):
        """Backprop through time. ``dOut`` is dL/dh_t, time-major (T, B, H).

        Returns the time-major input gradient (or None) and parameter grads.
        """
        Xt, out, cells = caches
        T, B, H = dOut.shape
        D = Xt.shape[2]
        dZ = np.empty((T, B, 4 * H), dtype=dOut.dtype)
        dU = np.zeros_like(self.U)
        dh_next = None
        dc_next = None
        for t in reversed(range(T)):
            c_prev, a, tc = cells[t]
            i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            dh = dOut[t] if dh_next is None else dOut[t] + dh_next
            dc = dh * o * (1.0 - tc * tc)
            if dc_next is not None:
                dc += dc_next
            dz = dZ[t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            if t:
                dU += dz.T @ out[t - 1]
                dh_next = dz @ self.U
                dc_next = dc * f
        dZf = dZ.reshape(T * B, 4 * H)
        grads = {"W": dZf.T @ Xt.reshape(T * B, D), "U": dU, "b": dZf.sum(axis=0)}
        dX = (dZf @ self.W).reshape(T, B, D) if need_input_grad else None
        return dX, grads


class _Network:
    kind = "base"

    def named_layers(self) -> Iterator[tuple[str, object]]:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        """Parameters in canonical order: layers in forward order, then W, U, b."""
        out = {}
        for lname, layer in self.named_layers():
            for pname in ("W", "U", "b"):
                if hasattr(layer, pname):
                    out[f"{lname}.{pname}"] = getattr(layer, pname)
        return out

    def arch(self) -> dict:
        raise NotImplementedError

    def _cast(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for lname, layer in self.named_layers():
            for pname in ("W", "U", "b"):
                if hasattr(layer, pname):
                    setattr(layer, pname, getattr(layer, pname).astype(self.dtype))

    @property
    def n_actions(self) -> int:
        return self.arch()["n_actions"]

    def copy(self):
        other = self.__class__(**self.arch())
        sync_target(self, other)
        return other

    def q_values(self, state: np.ndarray) -> np.ndarray:
        return self.forward(state[None, ...])[0][0]

    def loss_and_grads(self, X: np.ndarray, actions: np.ndarray, targets: np.ndarray):
        """Mean squared TD error ``mean_i (y_i - Q(s_i, a_i))^2`` and its gradients.

        ``actions`` are 0-based column indices into the output.
        """
        Qv, cache = self.forward(X)
        B = Qv.shape[0]
        rows = np.arange(B)
        err = targets.astype(Qv.dtype, copy=False) - Qv[rows, actions]
        loss = float(np.mean(err * err))
        dQ = np.zeros_like(Qv)
        dQ[rows, actions] = -2.0 * err / B
        return loss, self._backward(dQ, cache)

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "arch": self.arch(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params().items()},
        }


class QNetwork(_Network):
    """LSTM(in->H) -> LSTM(H->H) -> Dense(H->fc, relu) -> Dense(fc->M)."""

    kind = "lstm"

    def __init__(self, window: int, n_actions: int, hidden: int = 64, fc: int = 512,
                 n_features: int = 2, seed: int | None = 0,
                 rng: np.random.Generator | None = None, dtype: str = "float64"):
        if window < 1:
            raise ValueError("window must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.window = window
        self.n_features = n_features
        self.lstm1 = LstmLayer(n_features, hidden, rng)
        self.lstm2 = LstmLayer(hidden, hidden, rng)
        self.fc1 = DenseLayer(hidden, fc, "relu", rng)
        self.fc2 = DenseLayer(fc, n_actions, "identity", rng)
        self._cast(dtype)

    def named_layers(self):
        yield "lstm1", self.lstm1
        yield "lstm2", self.lstm2
        yield "fc1", self.fc1
        yield "fc2", self.fc2

    def arch(self) -> dict:
        return {"window": self.window, "n_actions": self.fc2.W.shape[0],
                "hidden": self.lstm1.hidden, "fc": self.fc1.W.shape[0],
                "n_features": self.n_features, "dtype": self.dtype.name}

    def _check(self, X: np.ndarray):
        if X.ndim != 3 or X.shape[1] != self.window or X.shape[2] != self.n_features:
            raise ValueError(f"expected windows of shape (B, {self.window}, {self.n_features}),"
                             f" got {X.shape}")

    def forward(self, X: np.ndarray):
        self._check(X)
        X = X.astype(self.dtype, copy=False)
        H1, c1 = self.lstm1.forward(X)
        H2, c2 = self.lstm2._forward(H1)
        y1, f1 = self.fc1.forward(H2[-1])
        out, f2 = self.fc2.forward(y1)
        return out, (H2.shape, c1, c2, f1, f2)

    def _backward(self, dQ, cache):
        h2_shape, c1, c2, f1, f2 = cache
        dy1, g_fc2 = self.fc2.backward(dQ, f2)
        dh_last, g_fc1 = self.fc1.backward(dy1, f1)
        dH2 = np.zeros(h2_shape, dtype=dh_last.dtype)
        dH2[-1] = dh_last
        dH1, g_l2 = self.lstm2.backward(dH2, c2)
        _, g_l1 = self.lstm1.backward(dH1, c1, need_input_grad=False)
        grads = {}
        for lname, g in (("lstm1", g_l1), ("lstm2", g_l2), ("fc1", g_fc1), ("fc2", g_fc2)):
            for pname in ("W", "U", "b"):
                if pname in g:
                    grads[f"{lname}.{pname}"] = g[pname]
        return grads


class MLPQNetwork(_Network):
    """Dense-only value network: in -> widths... (relu) -> M (linear)."""

    kind = "mlp"

    def __init__(self, n_inputs: int, n_actions: int, widths: tuple[int, ...] | list[int] = (64, 512),
                 seed: int | None = 0, rng: np.random.Generator | None = None,
                 dtype: str = "float64"):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.n_inputs = n_inputs
        self.widths = tuple(int(w) for w in widths)
        dims = (n_inputs,) + self.widths
        self.layers = [DenseLayer(a, b, "relu", rng) for a, b in zip(dims, dims[1:])]
        self.layers.append(DenseLayer(dims[-1], n_actions, "identity", rng))
        self._cast(dtype)

    def named_layers(self):
        for k, layer in enumerate(self.layers):
            yield f"fc{k + 1}", layer

    def arch(self) -> dict:
        return {"n_inputs": self.n_inputs, "n_actions": self.layers[-1].W.shape[0],
                "widths": list(self.widths), "dtype": self.dtype.name}

    def forward(self, X: np.ndarray):
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ValueError(f"expected states of shape (B, {self.n_inputs}), got {X.shape}")
        caches = []
        y = X.astype(self.dtype, copy=False)
        for layer in self.layers:
            y, c = layer.forward(y)
            caches.append(c)
        return y, caches

    def _backward(self, dQ, caches):
        grads = {}
        d = dQ
        for k in reversed(range(len(self.layers))):
            d, g = self.layers[k].backward(d, caches[k])
            grads[f"fc{k + 1}.W"] = g["W"]
            grads[f"fc{k + 1}.b"] = g["b"]
        return {k: grads[k] for k in self.params()}


# Functional surface -------------------------------------------------------

def lstm_step(layer: LstmLayer, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """Single-sample LSTM step; returns ``(h, c)``."""
    x = np.asarray(x, float)
    h_prev = np.asarray(h_prev, float)
    c_prev = np.asarray(c_prev, float)
    if x.shape != (layer.n_in,) or h_prev.shape != (layer.hidden,) or c_prev.shape != (layer.hidden,):
        raise ValueError("lstm_step shape mismatch")
    h, c = layer.step(x[None, :], h_prev[None, :], c_prev[None, :])
    return h[0], c[0]


def qnet_forward(net: _Network, state: np.ndarray) -> np.ndarray:
    """Action values for one state (an ``(o, 2)`` window or a flat vector)."""
    return net.q_values(np.asarray(state, float))


def backward(net: _Network, state: np.ndarray, action_index: int, target: float) -> dict[str, np.ndarray]:
    """Gradient of ``(target - Q(state, action))^2``; ``action_index`` is 1-based."""
    M = net.n_actions
    if not 1 <= action_index <= M:
        raise IndexError(f"action index {action_index} outside [1, {M}]")
    _, grads = net.loss_and_grads(np.asarray(state, float)[None, ...],
                                  np.array([action_index - 1]), np.array([float(target)]))
    return grads


class AdamState:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied in place to ``params``."""
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {g.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def sync_target(net: _Network, target: _Network) -> None:
    if type(net) is not type(target) or net.arch() != target.arch():
        raise ArchitectureMismatch("target network architecture differs")
    src, dst = net.params(), target.params()
    for k, v in src.items():
        np.copyto(dst[k], v)


def network_from_dict(doc: dict) -> _Network:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a Q-network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    kind = doc.get("kind")
    arch = doc["arch"]
    if kind == "lstm":
        net = QNetwork(**arch)
    elif kind == "mlp":
        net = MLPQNetwork(**arch)
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    params = net.params()
    stored = doc["params"]
    if list(stored) != list(params):
        raise ArchitectureMismatch("parameter names differ from architecture")
    for k, p in params.items():
        entry = stored[k]
        if tuple(entry["shape"]) != p.shape or len(entry["data"]) != p.size:
            raise ArchitectureMismatch(f"shape mismatch for {k}")
        p[...] = np.asarray(entry["data"], dtype=p.dtype).reshape(p.shape)
    return net


def save_network(net: _Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()), encoding="utf-8")


def load_network(path: str | Path) -> _Network:
    return network_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

"""Q-value function approximators with hand-rolled backprop and Adam.

Both heads expose the same small surface used by the trainers:
    params()                       list of parameter arrays (mutated in place)
    forward(x)                     [B, n_actions] values
    forward_cached(x)              (values, cache) for a following backward
    backward(cache, dout)          gradients, aligned with params()
    clone()                        frozen deep copy (target networks)

MlpQ consumes feature/observation matrices; LinearQ consumes integer state
ids and carries its own per-(s,a) feature tensor.

Checkpoints are a single JSON header line (shapes, dtype, metadata)
followed by the concatenated little-endian float64 parameter buffers.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["MlpQ", "LinearQ", "Adam", "save_checkpoint", "load_checkpoint",
           "mlp_widths_for", "HIDDEN_TABULAR", "HIDDEN_CONTINUOUS"]

HIDDEN_TABULAR = (20, 40, 20)
HIDDEN_CONTINUOUS = (64, 128, 64)


def mlp_widths_for(tabular: bool) -> tuple:
    return HIDDEN_TABULAR if tabular else HIDDEN_CONTINUOUS


class MlpQ:
    """Dense network: in_dim -> hidden... -> n_actions (linear output).

    Hidden activation is a rectifier by default, switchable to tanh.
    Weights and biases init uniform in +-sqrt(1/fan_in).
    """

    def __init__(self, in_dim: int, hidden, n_actions: int, seed: int = 0,
                 activation: str = "relu", _params: list | None = None):
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_actions = int(n_actions)
        self.activation = activation
        sizes = [self.in_dim, *self.hidden, self.n_actions]
        if _params is not None:
            self._params = _params
        else:
            rng = np.random.default_rng(seed)
            self._params = []
            for fan_in, fan_out in zip(sizes, sizes[1:]):
                bound = np.sqrt(1.0 / fan_in)
                self._params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
                self._params.append(rng.uniform(-bound, bound, fan_out))

    def params(self) -> list:
        return self._params

    @property
    def n_layers(self) -> int:
        return len(self._params) // 2

    def _act(self, h: np.ndarray) -> np.ndarray:
        return np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        for i in range(self.n_layers):
            h = h @ self._params[2 * i] + self._params[2 * i + 1]
            if i < self.n_layers - 1:
                h = self._act(h)
        return h

    def forward_cached(self, x: np.ndarray):
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        acts = [h]  # layer inputs (post-activation)
        for i in range(self.n_layers):
            h = h @ self._params[2 * i] + self._params[2 * i + 1]
            if i < self.n_layers - 1:
                h = self._act(h)
            acts.append(h)
        return h, acts

    def backward(self, cache: list, dout: np.ndarray) -> list:
        """Gradients of sum(dout * output) w.r.t. params."""
        grads = [None] * len(self._params)
        delta = np.asarray(dout, dtype=np.float64)
        for i in range(self.n_layers - 1, -1, -1):
            h_in = cache[i]
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                if self.activation == "tanh":
                    dact = 1.0 - cache[i] ** 2
                else:
                    dact = cache[i] > 0.0
                delta = (delta @ self._params[2 * i].T) * dact
        return grads

    def clone(self) -> "MlpQ":
        copies = []
        for p in self._params:
            c = p.copy()
            c.flags.writeable = False
            copies.append(c)
        return MlpQ(self.in_dim, self.hidden, self.n_actions,
                    activation=self.activation, _params=copies)

    def save(self, path) -> None:
        meta = {"kind": "mlp", "in_dim": self.in_dim,
                "hidden": list(self.hidden), "n_actions": self.n_actions,
                "activation": self.activation}
        save_checkpoint(path, self._params, meta)

    @classmethod
    def load(cls, path) -> "MlpQ":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "mlp":
            raise ValueError(f"not an mlp checkpoint: {path}")
        return cls(meta["in_dim"], meta["hidden"], meta["n_actions"],
                   activation=meta.get("activation", "relu"), _params=arrays)


class LinearQ:
    """Linear head over a fixed per-(s,a) feature tensor [S, A, d]."""

    def __init__(self, features_sa: np.ndarray, w0: np.ndarray | None = None):
        phi = np.asarray(features_sa, dtype=np.float64)
        if phi.ndim != 3:
            raise ValueError("features_sa must be [S, A, d]")
        self.phi = phi
        d = phi.shape[2]
        self.n_actions = phi.shape[1]
        w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
        if w.shape != (d,):
            raise ValueError(f"w0 must have shape ({d},)")
        self._params = [w]

    def params(self) -> list:
        return self._params

    def forward(self, states: np.ndarray) -> np.ndarray:
        s = np.atleast_1d(np.asarray(states, dtype=np.int64))
        return self.phi[s] @ self._params[0]

    def forward_cached(self, states: np.ndarray):
        s = np.atleast_1d(np.asarray(states, dtype=np.int64))
        return self.phi[s] @ self._params[0], s

    def backward(self, cache: np.ndarray, dout: np.ndarray) -> list:
        return [np.einsum("bad,ba->d", self.phi[cache], dout)]

    def clone(self) -> "LinearQ":
        w = self._params[0].copy()
        w.flags.writeable = False
        out = LinearQ(self.phi, self._params[0].copy())
        out._params = [w]
        return out

    def save(self, path) -> None:
        meta = {"kind": "linear", "phi_shape": list(self.phi.shape)}
        save_checkpoint(path, [self._params[0], self.phi.reshape(-1)], meta)

    @classmethod
    def load(cls, path) -> "LinearQ":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "linear":
            raise ValueError(f"not a linear checkpoint: {path}")
        phi = arrays[1].reshape(meta["phi_shape"])
        return cls(phi, arrays[0])


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list, grads: list) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def save_checkpoint(path, arrays: list, meta: dict | None = None) -> None:
    header = {
        "dtype": "<f8",
        "shapes": [list(a.shape) for a in arrays],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[list, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header["dtype"] != "<f8":
        raise ValueError("unsupported checkpoint dtype")
    arrays = []
    offset = nl + 1
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        arrays.append(a.astype(np.float64))
        offset += n * 8
    if offset != len(raw):
        raise ValueError("checkpoint has trailing bytes")
    return arrays, header.get("meta", {})

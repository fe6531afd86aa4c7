"""Fully connected front-end producing reference controls and positive penalties.

Layout: ``d -> h1 -> h2 -> (q + n_pen)`` with tanh hidden layers. The first
``q`` outputs are the reference control (identity head); the remaining
``n_pen = |S| * m`` raw outputs ``a`` become penalties ``c_max * expit(a)``.
Inputs are standardized with statistics stored alongside the weights.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.special import expit

CHECKPOINT_VERSION = 1
# keeps penalties strictly inside (0, c_max) when expit saturates in float64
_SAT = 1e-15


@dataclass
class MlpCache:
    zn: np.ndarray
    acts: list  # post-activation of each hidden layer
    sig: np.ndarray


@dataclass
class Mlp:
    widths: List[int]  # [d, h1, ..., out]
    q: int
    n_constraints: int = 0
    rel_degree: int = 0
    c_max: float = 10.0
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    z_mean: Optional[np.ndarray] = None
    z_std: Optional[np.ndarray] = None
    activation: str = "tanh"

    @classmethod
    def create(cls, d, q, n_constraints=0, rel_degree=0, hidden=(128, 128), c_max=10.0, seed=7):
        out = q + n_constraints * rel_degree
        widths = [int(d), *[int(h) for h in hidden], int(out)]
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            bs.append(rng.uniform(-lim, lim, size=fan_out))
        return cls(widths, q, n_constraints, rel_degree, c_max, Ws, bs, np.zeros(d), np.ones(d))

    @property
    def n_pen(self):
        return self.n_constraints * self.rel_degree

    @property
    def params(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_normalization(self, Z):
        Z = np.asarray(Z, dtype=float)
        self.z_mean = Z.mean(axis=0)
        std = Z.std(axis=0)
        self.z_std = np.where(std > 1e-12, std, 1.0)

    def forward(self, z):
        """Returns ``(f_ref (N,q), penalties (N,|S|,m), cache)``; ``z`` has shape ``(N,d)`` or ``(d,)``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.widths[0]:
            raise ValueError(f"expected observations of dimension {self.widths[0]}, got {z.shape[1]}")
        a = (z - self.z_mean) / self.z_std
        zn = a
        acts = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ W.T + b)
            acts.append(a)
        out = a @ self.weights[-1].T + self.biases[-1]
        f_ref = out[:, : self.q]
        sig = np.clip(expit(out[:, self.q:]), _SAT, 1.0 - _SAT)
        pen = (self.c_max * sig).reshape(len(z), self.n_constraints, self.rel_degree)
        return f_ref, pen, MlpCache(zn, acts, sig)

    def backward(self, cache: MlpCache, dL_df, dL_dp=None):
        """Gradients (summed over the batch) in the order of :attr:`params`."""
        dL_df = np.atleast_2d(np.asarray(dL_df, dtype=float))
        N = dL_df.shape[0]
        d_out = np.zeros((N, self.widths[-1]))
        d_out[:, : self.q] = dL_df
        if self.n_pen:
            dp = np.zeros((N, self.n_pen)) if dL_dp is None else np.asarray(dL_dp, dtype=float).reshape(N, self.n_pen)
            s = cache.sig
            d_out[:, self.q:] = dp * self.c_max * s * (1.0 - s)
        grads = [None] * (2 * len(self.weights))
        delta = d_out
        inputs = [cache.zn] + cache.acts
        for layer in range(len(self.weights) - 1, -1, -1):
            x_in = inputs[layer]
            grads[2 * layer] = delta.T @ x_in
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer:
                delta = (delta @ self.weights[layer]) * (1.0 - cache.acts[layer - 1] ** 2)
        return grads

    # Checkpoints ---------------------------------------------------------------

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "widths": list(self.widths),
            "q": self.q,
            "n_constraints": self.n_constraints,
            "rel_degree": self.rel_degree,
            "c_max": self.c_max,
            "activation": self.activation,
            "z_mean": self.z_mean.tolist(),
            "z_std": self.z_std.tolist(),
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        widths = data["widths"]
        Ws = [np.array(w, dtype=float).reshape(o, i) for w, i, o in zip(data["weights"], widths[:-1], widths[1:])]
        bs = [np.array(b, dtype=float) for b in data["biases"]]
        return cls(widths, data["q"], data["n_constraints"], data["rel_degree"], data["c_max"], Ws, bs,
                   np.array(data["z_mean"], dtype=float), np.array(data["z_std"], dtype=float),
                   data.get("activation", "tanh"))

    def copy(self):
        return Mlp.from_dict(self.to_dict())


def save_checkpoint(path, model: Mlp, **extra):
    """JSON checkpoint; Python's float repr makes the round-trip bit-exact."""
    doc = {"model": model.to_dict()}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    doc = json.loads(Path(path).read_text())
    model = Mlp.from_dict(doc.pop("model"))
    return model, doc


class Adam:
    """Adaptive-moment optimizer over a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"kind": "adam", "t": self.t, "m": [a.ravel().tolist() for a in self.m],
                "v": [a.ravel().tolist() for a in self.v]}

    def load_state(self, state):
        self.t = state["t"]
        self.m = [np.array(a, dtype=float).reshape(ref.shape) for a, ref in zip(state["m"], self.m)]
        self.v = [np.array(a, dtype=float).reshape(ref.shape) for a, ref in zip(state["v"], self.v)]


class Sgd:
    def __init__(self, params, lr=1e-3):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g

    def state(self):
        return {"kind": "sgd"}

    def load_state(self, state):
        pass

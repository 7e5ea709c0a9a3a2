"""Minimal dense feed-forward network machinery with analytic gradients.

Everything is float64 and deterministic: the same parameters and inputs
always produce bitwise-identical outputs. Networks are plain stacks of
affine layers with a per-layer activation tag ("linear" or "lrelu").
Gradients are computed by hand-rolled backprop; no autodiff framework.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LRELU_SLOPE = 0.01
ACTIVATIONS = ("linear", "lrelu")

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an input or gradient does not match the network layout."""


def lrelu(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, z, LRELU_SLOPE * z)


def lrelu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, 1.0, LRELU_SLOPE)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (max-shift before exponentiation)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Layer:
    w: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.w.shape[0] != self.b.shape[0]:
            raise ShapeError(f"bad layer shapes w={self.w.shape} b={self.b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class GradientTape:
    """Per-parameter gradients aligned with a DenseNet's layer layout."""

    layers: list  # list of (dw, db) pairs
    input_grad: np.ndarray

    def arrays(self):
        out = []
        for dw, db in self.layers:
            out.append(dw)
            out.append(db)
        return out


class DenseNet:
    """A stack of affine layers with fixed activation tags."""

    def __init__(self, layers):
        if not layers:
            raise ShapeError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.w.shape[0] != b.w.shape[1]:
                raise ShapeError(
                    f"incompatible consecutive layers: {a.w.shape} -> {b.w.shape}")
        self.layers = list(layers)

    @classmethod
    def create(cls, dims, rng, hidden_activation="lrelu", output_activation="linear"):
        """Build a net with uniform fan-in initialization (+-1/sqrt(fan_in))."""
        if len(dims) < 2:
            raise ShapeError("need at least input and output dims")
        layers = []
        for k in range(len(dims) - 1):
            fan_in = dims[k]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(dims[k + 1], fan_in))
            b = rng.uniform(-bound, bound, size=dims[k + 1])
            act = output_activation if k == len(dims) - 2 else hidden_activation
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].w.shape[0]

    def num_params(self):
        return sum(l.w.size + l.b.size for l in self.layers)

    def param_arrays(self):
        out = []
        for l in self.layers:
            out.append(l.w)
            out.append(l.b)
        return out

    def copy(self):
        return DenseNet([Layer(l.w.copy(), l.b.copy(), l.activation)
                         for l in self.layers])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"input dim {x.shape[-1]} != network input dim {self.in_dim}")
        return x

    def forward(self, x):
        """Evaluate the net. Accepts a vector or a (batch, in_dim) matrix."""
        x = self._check_input(x)
        h = np.atleast_2d(x)
        for l in self.layers:
            z = h @ l.w.T + l.b
            h = lrelu(z) if l.activation == "lrelu" else z
        return h[0] if x.ndim == 1 else h

    def forward_cached(self, x):
        """Batched forward that keeps per-layer inputs/pre-activations."""
        x = self._check_input(np.atleast_2d(x))
        cache = []
        h = x
        for l in self.layers:
            z = h @ l.w.T + l.b
            cache.append((h, z))
            h = lrelu(z) if l.activation == "lrelu" else z
        return h, cache

    def backward_cached(self, cache, output_grad):
        """Backprop from cached forward state; grads are summed over the batch."""
        g = np.asarray(output_grad, dtype=np.float64)
        g = np.atleast_2d(g)
        if g.shape[-1] != self.out_dim:
            raise ShapeError(
                f"output grad dim {g.shape[-1]} != network output dim {self.out_dim}")
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            l = self.layers[k]
            h_in, z = cache[k]
            gz = g * lrelu_grad(z) if l.activation == "lrelu" else g
            dw = gz.T @ h_in
            db = gz.sum(axis=0)
            grads[k] = (dw, db)
            g = gz @ l.w
        return GradientTape(layers=grads, input_grad=g)

    def backward(self, x, output_grad):
        """Gradient of sum(output * output_grad) w.r.t. parameters and input."""
        single = np.asarray(x).ndim == 1
        _, cache = self.forward_cached(x)
        tape = self.backward_cached(cache, output_grad)
        if single:
            tape.input_grad = tape.input_grad[0]
        return tape

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "layers": [
                {
                    "rows": l.w.shape[0],
                    "cols": l.w.shape[1],
                    "activation": l.activation,
                    "w": l.w.reshape(-1).tolist(),  # row-major
                    "b": l.b.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported network checkpoint version {d.get('version')}")
        layers = []
        for ld in d["layers"]:
            w = np.array(ld["w"], dtype=np.float64).reshape(ld["rows"], ld["cols"])
            b = np.array(ld["b"], dtype=np.float64)
            layers.append(Layer(w, b, ld["activation"]))
        return cls(layers)


class Adam:
    """Adam over an explicit list of parameter arrays (updated in place)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeError(
                f"{len(grads)} gradients for {len(self.params)} parameters")
        for g, p in zip(grads, self.params):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; step rejected")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": [a.reshape(-1).tolist() for a in self.m],
            "v": [a.reshape(-1).tolist() for a in self.v],
        }

    def load_state_dict(self, d):
        self.lr = float(d["lr"])
        self.beta1 = d["beta1"]
        self.beta2 = d["beta2"]
        self.eps = d["eps"]
        self.step_count = d["step_count"]
        if len(d["m"]) != len(self.params):
            raise ShapeError("optimizer state does not match parameter list")
        self.m = [np.array(a, dtype=np.float64).reshape(p.shape)
                  for a, p in zip(d["m"], self.params)]
        self.v = [np.array(a, dtype=np.float64).reshape(p.shape)
                  for a, p in zip(d["v"], self.params)]


def finite_difference_grads(loss_fn, arrays, h=1e-5):
    """Central finite differences of loss_fn w.r.t. every entry of arrays.

    loss_fn takes no arguments and reads the (mutated) arrays; used as the
    independent oracle against analytic gradients in tests.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            dn = loss_fn()
            flat[i] = orig
            gflat[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    """Worst relative disagreement between two matching gradient lists."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst

"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive operations in construction order; backward walks
the list in exact reverse order and accumulates adjoints.  One tape spans
one training step (possibly many samples), so gradients for a parameter
used in several places sum up naturally via its registration key.

Also provides the multilayer perceptron, the Adam optimizer, and the
mean-squared-error loss that the training code builds on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(Exception):
    pass


class Var:
    """A value recorded on a tape.  Create only through Tape/op functions."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp


class Tape:
    """Append-only record of operations; single-threaded per training step."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._params: dict = {}

    def _record(self, value, parents=(), vjp=None) -> Var:
        v = Var(value, parents, vjp)
        self.nodes.append(v)
        return v

    def leaf(self, value, param=None) -> Var:
        """Enter a constant or parameter.  `param` keys gradient collection."""
        v = self._record(value)
        if param is not None:
            self._params.setdefault(param, []).append(v)
        return v

    def custom(self, value, parents, vjp) -> Var:
        """Record an opaque operation (e.g. a QP layer) with its own vjp."""
        return self._record(value, tuple(parents), vjp)

    def grad_for(self, param, like=None):
        """Summed gradient for a registered parameter key (zeros if unreached)."""
        nodes = self._params.get(param, [])
        total = None
        for node in nodes:
            if node.grad is None:
                continue
            total = node.grad.copy() if total is None else total + node.grad
        if total is None:
            if like is not None:
                return np.zeros_like(np.asarray(like, dtype=np.float64))
            if nodes:
                return np.zeros_like(nodes[0].value)
            raise KeyError(f"unknown parameter key {param!r}")
        return total

    def backward(self, loss: Var):
        """Seed the loss adjoint with 1 and sweep the tape in reverse."""
        if loss.value.shape not in ((), (1,)):
            raise ShapeMismatch("loss must be scalar")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._vjp is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad = parent.grad + g


def add(tape: Tape, a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"add {a.value.shape} vs {b.value.shape}")
    return tape.custom(a.value + b.value, (a, b), lambda g: (g, g))


def sub(tape: Tape, a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"sub {a.value.shape} vs {b.value.shape}")
    return tape.custom(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(tape: Tape, a: Var, b: Var) -> Var:
    """Elementwise product (same shape, or either side scalar)."""
    av, bv = a.value, b.value
    if av.shape != bv.shape and av.shape != () and bv.shape != ():
        raise ShapeMismatch(f"mul {av.shape} vs {bv.shape}")

    def vjp(g):
        ga = g * bv
        gb = g * av
        if av.shape == () and g.shape != ():
            ga = np.sum(ga)
        if bv.shape == () and g.shape != ():
            gb = np.sum(gb)
        return ga, gb

    return tape.custom(av * bv, (a, b), vjp)


def scale(tape: Tape, k: float, a: Var) -> Var:
    return tape.custom(k * a.value, (a,), lambda g: (k * g,))


def add_const(tape: Tape, a: Var, k) -> Var:
    return tape.custom(a.value + k, (a,), lambda g: (g,))


def matmul(tape: Tape, W: Var, x: Var) -> Var:
    """Matrix (m,n) times vector (n,)."""
    Wv, xv = W.value, x.value
    if Wv.ndim != 2 or xv.ndim != 1 or Wv.shape[1] != xv.shape[0]:
        raise ShapeMismatch(f"matmul {Wv.shape} @ {xv.shape}")
    return tape.custom(Wv @ xv, (W, x), lambda g: (np.outer(g, xv), Wv.T @ g))


def relu(tape: Tape, a: Var) -> Var:
    mask = a.value > 0
    return tape.custom(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus(tape: Tape, a: Var) -> Var:
    out = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return tape.custom(out, (a,), lambda g: (g * sig,))


def exp(tape: Tape, a: Var) -> Var:
    out = np.exp(a.value)
    return tape.custom(out, (a,), lambda g: (g * out,))


def concat(tape: Tape, parts: list[Var]) -> Var:
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return tape.custom(np.concatenate([p.value for p in parts]), tuple(parts), vjp)


def vslice(tape: Tape, a: Var, start: int, stop: int) -> Var:
    n = a.value.shape[0]

    def vjp(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return tape.custom(a.value[start:stop], (a,), vjp)


def _to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Collapse a broadcasted adjoint back to the parent's (size-1) shape."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    return np.array(np.sum(g)).reshape(shape)


def vsum(tape: Tape, a: Var) -> Var:
    """Sum of all entries, producing a scalar."""
    return tape.custom(np.sum(a.value), (a,),
                       lambda g: (np.full_like(a.value, np.sum(g)),))


def smul(tape: Tape, s: Var, vec: Var) -> Var:
    """Scalar (shape () or (1,)) times vector."""
    if s.value.size != 1:
        raise ShapeMismatch(f"smul scalar has shape {s.value.shape}")
    sv = float(s.value.reshape(()))

    def vjp(g):
        return _to_shape(g * vec.value, s.value.shape), sv * g

    return tape.custom(sv * vec.value, (s, vec), vjp)


def dot(tape: Tape, a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"dot {a.value.shape} vs {b.value.shape}")
    return tape.custom(np.dot(a.value, b.value), (a, b),
                       lambda g: (g * b.value, g * a.value))


def div(tape: Tape, a: Var, b: Var) -> Var:
    """Division by a scalar-or-matching denominator."""
    av, bv = a.value, b.value
    if av.shape != bv.shape and bv.size != 1:
        raise ShapeMismatch(f"div {av.shape} vs {bv.shape}")
    out = av / bv

    def vjp(g):
        return _to_shape(g / bv, av.shape), _to_shape(-g * av / (bv * bv), bv.shape)

    return tape.custom(out, (a, b), vjp)


def mse(tape: Tape, pred: Var, label: np.ndarray) -> Var:
    """Mean squared componentwise error against a constant label."""
    label = np.asarray(label, dtype=np.float64)
    if pred.value.shape != label.shape:
        raise ShapeMismatch(f"mse {pred.value.shape} vs {label.shape}")
    diff = pred.value - label
    n = max(diff.size, 1)
    return tape.custom(np.mean(diff * diff), (pred,), lambda g: (g * 2.0 * diff / n,))


def mse_loss(pred, label) -> float:
    """Plain numpy MSE, shared convention with the tape op."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ShapeMismatch(f"mse_loss {pred.shape} vs {label.shape}")
    d = pred - label
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# multilayer perceptron


@dataclass
class Mlp:
    """Fully connected net, ReLU on hidden layers, identity output."""

    layer_dims: list
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @classmethod
    def init(cls, layer_dims, rng) -> "Mlp":
        """Uniform +-1/sqrt(fan_in) initialization."""
        weights, biases = [], []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
            biases.append(rng.uniform(-bound, bound, size=d_out))
        return cls(list(layer_dims), weights, biases)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, tape: Tape, x: Var, prefix: str = "mlp") -> Var:
        """Tape-recorded forward pass; parameters registered under `prefix`."""
        if x.value.shape[0] != self.layer_dims[0]:
            raise ShapeMismatch(f"input {x.value.shape} vs dims {self.layer_dims}")
        out = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            Wv = tape.leaf(W, param=f"{prefix}/W{i}")
            bv = tape.leaf(b, param=f"{prefix}/b{i}")
            out = add(tape, matmul(tape, Wv, out), bv)
            if i != last:
                out = relu(tape, out)
        return out

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        """Inference-only forward pass, no tape."""
        out = np.asarray(x, dtype=np.float64)
        if out.shape[0] != self.layer_dims[0]:
            raise ShapeMismatch(f"input {out.shape} vs dims {self.layer_dims}")
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out = W @ out + b
            if i != last:
                out = np.maximum(out, 0.0)
        return out

    def param_dict(self, prefix: str) -> dict:
        d = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            d[f"{prefix}/W{i}"] = W
            d[f"{prefix}/b{i}"] = b
        return d

    def set_params(self, prefix: str, params: dict):
        for i in range(len(self.weights)):
            self.weights[i] = params[f"{prefix}/W{i}"]
            self.biases[i] = params[f"{prefix}/b{i}"]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam update with bias correction; returns the new parameter dict."""
    state.step += 1
    t = state.step
    out = {}
    for key, p in params.items():
        g = np.asarray(grads.get(key, np.zeros_like(p)), dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeMismatch(f"gradient shape {g.shape} vs param {np.shape(p)} for {key!r}")
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[key] = m
        state.v[key] = v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        out[key] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out

"""Small dense autodiff substrate used by every learned component.

Values are float64 numpy arrays. Operations are recorded on the active
:class:`Tape` (if any) and differentiated in reverse order by
:meth:`Tape.gradient`. Without an active tape the same functions are plain
forward computations, which is what evaluation uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class EmptyContextError(NumericError):
    """Attention was asked to attend over a fully masked key set."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class Tape:
    """Records primitive operations for one reverse-mode sweep.

    Use as a context manager; only operations executed while the tape is
    active, with at least one input that requires a gradient, are recorded.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.value.size != 1:
            raise ConfigurationError("gradient() needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, parents, backward in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        result = []
        for t in wrt:
            g = grads.get(id(t))
            result.append(np.zeros_like(t.value) if g is None else g)
        return result


def _record(value: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    tape = Tape.active()
    needs = tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.nodes.append((out, tuple(as_tensor(p) for p in parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    return _record(av + bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    return _record(av - bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(a) -> Tensor:
    av = value_of(a)
    return _record(av * av, (a,), lambda g: (2.0 * av * g,))


def relu(a) -> Tensor:
    av = value_of(a)
    on = av > 0
    return _record(np.maximum(av, 0.0), (a,), lambda g: (g * on,))  # NaN propagates


def tanh(a) -> Tensor:
    y = np.tanh(value_of(a))
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sqrt(a) -> Tensor:
    y = np.sqrt(value_of(a))
    return _record(y, (a,), lambda g: (g * 0.5 / y,))


def activate(x, name: str) -> Tensor:
    if name == "identity":
        return as_tensor(x)
    if name == "relu":
        return relu(x)
    if name == "tanh":
        return tanh(x)
    raise ConfigurationError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


# --- structural ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ConfigurationError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ConfigurationError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(av @ bv, (a, b), backward)


def reshape(a, shape) -> Tensor:
    av = value_of(a)
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    av = value_of(a)
    return _record(np.swapaxes(av, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    values = [value_of(p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate(values, axis=axis), tuple(parts),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    av = value_of(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record(np.sum(av, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# --- softmax family --------------------------------------------------------

def _masked(av: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return av
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise EmptyContextError("softmax over an empty context: every key is masked")
    return np.where(mask, av, -np.inf)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    av = _masked(value_of(a), mask)
    shifted = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    return _record(s, (a,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    av = value_of(a)
    shifted = av - np.max(av, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)
    return _record(y, (a,), lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),))


# --- building blocks -------------------------------------------------------

Layer = tuple  # (weight [in, out], bias [out], activation name)


def mlp_forward(x, layers: Sequence[Layer]) -> Tensor:
    """Apply ``act(x @ W + b)`` layer by layer over the last axis of ``x``.

    ``x`` may be a single vector or carry any number of leading batch axes.
    """
    h = as_tensor(x)
    vector_input = h.ndim == 1
    if vector_input:
        h = reshape(h, (1, -1))
    for idx, (w, b, act) in enumerate(layers):
        wv, bv = value_of(w), value_of(b)
        if wv.ndim != 2 or bv.shape != (wv.shape[1],):
            raise ConfigurationError(f"layer {idx}: weight {wv.shape} / bias {bv.shape} inconsistent")
        if h.shape[-1] != wv.shape[0]:
            raise ConfigurationError(
                f"layer {idx}: expects input width {wv.shape[0]}, got {h.shape[-1]}")
        if act not in ACTIVATIONS:
            raise ConfigurationError(f"layer {idx}: unknown activation {act!r}")
        h = activate(add(matmul(h, w), b), act)
    if vector_input:
        h = reshape(h, (h.shape[-1],))
    return h


def scaled_dot_attention(queries, keys, values, key_mask=None) -> Tensor:
    """Softmax(Q K^T / sqrt(d)) V over the last two axes.

    ``key_mask`` (broadcastable to ``[..., m]``) marks usable keys; masked
    keys get a score of -inf before the softmax.
    """
    qv, kv, vv = value_of(queries), value_of(keys), value_of(values)
    d = qv.shape[-1]
    if d <= 0 or kv.shape[-1] != d:
        raise ConfigurationError(f"query/key widths differ or are empty: {qv.shape} vs {kv.shape}")
    if kv.shape[-2] != vv.shape[-2]:
        raise ConfigurationError("keys and values must have the same count")
    scores = mul(matmul(queries, swapaxes(keys, -1, -2)), 1.0 / math.sqrt(d))
    mask = None
    if key_mask is not None:
        mask = np.broadcast_to(np.asarray(key_mask, dtype=bool)[..., None, :], scores.shape)
    weights = softmax(scores, axis=-1, mask=mask)
    return matmul(weights, values)


def multi_head_attention(q_in, kv_in, wq, wk, wv, heads: int = 1, key_mask=None) -> Tensor:
    """Project inputs, split ``d_model`` into heads, attend, and re-join."""
    q, k, v = matmul(q_in, wq), matmul(kv_in, wk), matmul(kv_in, wv)
    if heads == 1:
        return scaled_dot_attention(q, k, v, key_mask)
    d_model = q.shape[-1]
    if d_model % heads:
        raise ConfigurationError(f"d_model {d_model} not divisible by {heads} heads")

    def split(t):
        lead = t.shape[:-1]
        t = reshape(t, lead + (heads, d_model // heads))
        return swapaxes(t, -2, -3)

    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
    out = scaled_dot_attention(split(q), split(k), split(v), mask)
    out = swapaxes(out, -2, -3)
    return reshape(out, out.shape[:-2] + (d_model,))


def sinusoidal_positional_encoding(length: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise ConfigurationError(f"positional encoding width must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


# --- initialisation and optimisation --------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update; returns fresh params and state."""
    if set(params) != set(grads):
        raise ConfigurationError("params and grads name different arrays")
    t = state.step + 1
    m, v, new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigurationError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m_prev = state.m.get(name, np.zeros_like(p))
        v_prev = state.v.get(name, np.zeros_like(p))
        m[name] = state.beta1 * m_prev + (1 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1 - state.beta2) * g * g
        m_hat = m[name] / (1 - state.beta1 ** t)
        v_hat = v[name] / (1 - state.beta2 ** t)
        new[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    nstate = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return new, nstate


# --- gradient verification -------------------------------------------------

def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               step: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between tape and central-difference gradients.

    ``loss_fn`` receives a dict of parameter tensors and must return a scalar.
    ``max_entries`` caps how many coordinates per array are probed (sampled
    with ``rng``); ``None`` probes every coordinate.
    """
    if step <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(base)
    tensors = {k: Tensor(base[k], requires_grad=True, name=k) for k in names}
    with Tape() as tape:
        loss = loss_fn(tensors)
    if not np.all(np.isfinite(loss.value)):
        raise NumericError("loss is not finite")
    analytic = dict(zip(names, tape.gradient(loss, [tensors[k] for k in names])))

    def evaluate(k, idx, delta):
        probe = {n: Tensor(base[n]) for n in names}
        arr = base[k].copy()
        arr[idx] += delta
        probe[k] = Tensor(arr)
        val = float(value_of(loss_fn(probe)))
        if not math.isfinite(val):
            raise NumericError(f"loss not finite while probing {k}{idx}")
        return val

    worst = 0.0
    for k in names:
        indices: Iterable = list(np.ndindex(base[k].shape))
        if max_entries is not None and len(indices) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(pick)]
        for idx in indices:
            numeric = (evaluate(k, idx, step) - evaluate(k, idx, -step)) / (2 * step)
            a = float(analytic[k][idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst

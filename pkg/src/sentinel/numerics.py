"""Small reverse-mode autodiff over numpy arrays, plus Adam.

Only the primitives the capsule network needs are provided. Every op
records itself on the active :class:`GradTape`; ``tape.gradient`` replays
the records backwards and returns d(loss)/d(t) for any requested tensors,
including network inputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SQUASH_GUARD = 1e-9
CE_CLAMP = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in tensor")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    # maps upstream gradient to one gradient per input
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Records primitive applications in execution (topological) order.

    Use as a context manager; nested tapes are allowed and the innermost
    one receives the records.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """d(loss)/d(source) for each source; zeros for disconnected ones."""
        if loss.data.size != 1:
            raise ShapeError("gradient needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = np.zeros_like(s.data)
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient")
            out.append(g)
        return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    stack = getattr(_local, "stack", None)
    if stack:
        stack[-1].records.append(_Record(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable einsum; output subscripts must be explicit."""
    ins, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError("operand count does not match subscripts")
    ops = [as_tensor(t) for t in operands]
    out = Tensor(np.einsum(subscripts, *(t.data for t in ops), optimize=True))

    def vjp(g):
        grads = []
        for k, (sub, t) in enumerate(zip(in_subs, ops)):
            others = [s for i, s in enumerate(in_subs) if i != k]
            other_data = [o.data for i, o in enumerate(ops) if i != k]
            spec = ",".join([out_sub, *others]) + "->" + sub
            # indices summed out in the forward pass are broadcast back
            missing = set(sub) - set(out_sub) - set("".join(others))
            if missing:
                raise ShapeError(f"index {missing} appears in one operand only")
            grads.append(np.einsum(spec, g, *other_data, optimize=True))
        return grads

    return _record(out, tuple(ops), vjp)


def capsule_transform(u: Tensor, weights: Tensor) -> Tensor:
    """Per-capsule linear maps: out[b, i, j, e] = sum_d weights[i, j, e, d] * u[b, i, d].

    Same result as ``einsum("bid,ijed->bije")`` but routed through batched
    matmul, which is an order of magnitude faster here.
    """
    b, i, d = u.shape
    wi, j, e, wd = weights.shape
    if (wi, wd) != (i, d):
        raise ShapeError(f"capsule weights {weights.shape} do not match activities {u.shape}")
    w_flat = weights.data.reshape(i, j * e, d)
    u_t = u.data.transpose(1, 2, 0)  # (i, d, b)
    out = Tensor(np.ascontiguousarray(np.matmul(w_flat, u_t).reshape(i, j, e, b).transpose(3, 0, 1, 2)))

    def vjp(g):
        g_t = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(i, j * e, b)
        d_w = np.matmul(g_t, u.data.transpose(1, 0, 2)).reshape(weights.shape)
        d_u = np.matmul(w_flat.transpose(0, 2, 1), g_t).transpose(2, 0, 1)
        return d_u, d_w

    return _record(out, (u, weights), vjp)


def weighted_vote(c: Tensor, u_hat: Tensor) -> Tensor:
    """s[b, j, e] = sum_i c[b, i, j] * u_hat[b, i, j, e]."""
    out = Tensor(np.sum(c.data[..., None] * u_hat.data, axis=1))

    def vjp(g):
        g_i = g[:, None]
        return np.sum(g_i * u_hat.data, axis=-1), c.data[..., None] * g_i

    return _record(out, (c, u_hat), vjp)


def agreement(u_hat: Tensor, v: Tensor) -> Tensor:
    """a[b, i, j] = u_hat[b, i, j, :] . v[b, j, :]."""
    v_i = v.data[:, None]
    out = Tensor(np.sum(u_hat.data * v_i, axis=-1))

    def vjp(g):
        g_e = g[..., None]
        return g_e * v_i, np.sum(g_e * u_hat.data, axis=1)

    return _record(out, (u_hat, v), vjp)


def conv1d(x: Tensor, filters: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation of a batch of rows.

    ``x`` is (B, W), ``filters`` is (K, k); result is (B, W - k + 1, K) with
    ``out[b, q, f] = sum_j x[b, q + j] * filters[f, j]``.
    """
    if x.data.ndim != 2 or filters.data.ndim != 2:
        raise ShapeError("conv1d expects x (B, W) and filters (K, k)")
    width, k = x.shape[1], filters.shape[1]
    if k > width:
        raise ShapeError(f"kernel width {k} exceeds input width {width}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)
    out = Tensor(np.einsum("bqj,fj->bqf", windows, filters.data, optimize=True))

    def vjp(g):
        d_filters = np.einsum("bqj,bqf->fj", windows, g, optimize=True)
        d_x = np.zeros_like(x.data)
        contrib = np.einsum("bqf,fj->bqj", g, filters.data, optimize=True)
        n_out = width - k + 1
        for j in range(k):
            d_x[:, j : j + n_out] += contrib[:, :, j]
        return d_x, d_filters

    return _record(out, (x, filters), vjp)


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Capsule nonlinearity ||s||^2 / (1 + ||s||^2) * s / ||s||.

    The norm in the denominator carries a small guard so that s = 0 maps
    to 0 with a finite gradient.
    """
    n = np.sqrt(np.sum(s.data * s.data, axis=axis, keepdims=True))
    # factor f(n) = n^2 / ((1 + n^2)(n + guard)) = n^2 * h(n)
    h = 1.0 / ((1.0 + n * n) * (n + SQUASH_GUARD))
    f = n * n * h
    out = Tensor(s.data * f)

    def vjp(g):
        # f'(n) / n, written so it stays finite at n = 0
        fprime_over_n = h * (2.0 - 2.0 * n * n / (1.0 + n * n) - n / (n + SQUASH_GUARD))
        sg = np.sum(s.data * g, axis=axis, keepdims=True)
        return (f * g + fprime_over_n * sg * s.data,)

    return _record(out, (s,), vjp)


def vector_norm(v: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt(np.sum(v.data * v.data, axis=axis))
    out = Tensor(n)

    def vjp(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, v.data / safe, 0.0) * np.expand_dims(g, axis),)

    return _record(out, (v,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def sparse_ce(probs: Tensor, labels) -> Tensor:
    """Per-row -ln(max(p[label], 1e-12)) for probs (B, n), labels (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.data.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError("sparse_ce expects probs (B, n) and labels (B,)")
    n = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range for {n} classes")
    rows = np.arange(len(labels))
    picked = probs.data[rows, labels]
    clipped = picked <= CE_CLAMP
    out = Tensor(-np.log(np.maximum(picked, CE_CLAMP)))

    def vjp(g):
        d = np.zeros_like(probs.data)
        d[rows, labels] = np.where(clipped, 0.0, -g / np.where(clipped, 1.0, picked))
        return (d,)

    return _record(out, (probs,), vjp)


# ------------------------------------------------------------ scalar helpers


def sparse_ce_loss(probs, label: int) -> float:
    """Cross-entropy of a single probability vector against a class index."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    if not 0 <= label < p.size:
        raise IndexError(f"label {label} out of range for {p.size} classes")
    return float(-np.log(max(p[label], CE_CLAMP)))


# ---------------------------------------------------------------------- Adam


class Adam:
    """Adam with bias correction, operating in place on a dict of arrays."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter {k} shape {params[k].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of a scalar function by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad

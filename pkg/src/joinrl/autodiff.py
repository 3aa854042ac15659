"""Tape-based reverse-mode differentiation over dense 2-D float64 matrices.

Every encoder and the Q-network are written against :class:`Tape`.  A tape
built with ``record=False`` evaluates the same operations without keeping
the backward graph, which is what greedy inference uses.
"""
from __future__ import annotations

import base64
import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "") -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name!r}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted fast path for op outputs (already checked)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = ""
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data)


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_ok(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Records executed operations in order; :meth:`backward` replays them in reverse.

    Inputs that neither require gradients nor descend from such a tensor are
    treated as constants and never receive a gradient.
    """

    def __init__(self, record: bool = True) -> None:
        self.record = record
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def _needs(self, inputs: tuple[Tensor, ...]) -> bool:
        if not self.record:
            return False
        tracked = self._tracked
        return any(t.requires_grad or id(t) in tracked for t in inputs)

    def _emit(self, arr: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
        out = Tensor._wrap(_check(arr, op))
        if self._needs(inputs):
            self.nodes.append(_Node(out, inputs, backward))
            self._tracked.add(id(out))
        return out

    # -- linear algebra -------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul {a.shape} x {b.shape}")
        ad, bd = a.data, b.data
        return self._emit(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"add {a.shape} + {b.shape}")
        sa, sb = a.shape, b.shape
        return self._emit(a.data + b.data, "add", (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"sub {a.shape} - {b.shape}")
        sa, sb = a.shape, b.shape
        return self._emit(a.data - b.data, "sub", (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"mul {a.shape} * {b.shape}")
        ad, bd = a.data, b.data
        return self._emit(ad * bd, "mul", (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))

    def scale(self, a: Tensor, s: float) -> Tensor:
        s = float(s)
        return self._emit(a.data * s, "scale", (a,), lambda g: (g * s,))

    def concat(self, ts: Iterable[Tensor], axis: int = 1) -> Tensor:
        ts = tuple(ts)
        if not ts:
            raise ShapeError("concat of nothing")
        other = 1 - axis
        if len({t.shape[other] for t in ts}) != 1:
            raise ShapeError(f"concat axis={axis} of {[t.shape for t in ts]}")
        bounds = np.cumsum([0] + [t.shape[axis] for t in ts])
        out = np.concatenate([t.data for t in ts], axis=axis)

        def back(g):
            if axis == 1:
                return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(ts)))
            return tuple(g[bounds[k]:bounds[k + 1], :] for k in range(len(ts)))

        return self._emit(out, "concat", ts, back)

    def slice(self, a: Tensor, rows: slice | None = None, cols: slice | None = None) -> Tensor:
        rows = rows if rows is not None else slice(None)
        cols = cols if cols is not None else slice(None)
        shape = a.shape
        out = a.data[rows, cols]
        if out.size == 0:
            raise ShapeError(f"empty slice of {shape}")

        def back(g):
            full = np.zeros(shape)
            full[rows, cols] = g
            return (full,)

        return self._emit(out.copy(), "slice", (a,), back)

    # -- reductions -----------------------------------------------------
    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        shape = a.shape
        if axis is None:
            out = np.array([[a.data.sum()]])
        else:
            out = a.data.sum(axis=axis, keepdims=True)
        return self._emit(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        shape = a.shape
        n = a.data.size if axis is None else shape[axis]
        if axis is None:
            out = np.array([[a.data.mean()]])
        else:
            out = a.data.mean(axis=axis, keepdims=True)
        return self._emit(out, "mean", (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))

    def mean_pool(self, a: Tensor) -> Tensor:
        """Column-wise mean over rows: (r, c) -> (1, c)."""
        return self.mean(a, axis=0)

    def max_pool(self, a: Tensor) -> Tensor:
        """Column-wise max over rows: (r, c) -> (1, c); ties route to the first row."""
        shape = a.shape
        idx = a.data.argmax(axis=0)
        cols = np.arange(shape[1])
        out = a.data[idx, cols][None, :]

        def back(g):
            full = np.zeros(shape)
            full[idx, cols] = g[0]
            return (full,)

        return self._emit(out, "max_pool", (a,), back)

    # -- elementwise nonlinearities -------------------------------------
    def sigmoid(self, a: Tensor) -> Tensor:
        s = _sigmoid(a.data)
        return self._emit(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, a: Tensor) -> Tensor:
        t = np.tanh(a.data)
        return self._emit(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))

    def relu(self, a: Tensor) -> Tensor:
        pos = a.data > 0
        return self._emit(a.data * pos, "relu", (a,), lambda g: (g * pos,))

    def softmax(self, a: Tensor) -> Tensor:
        """Row-wise softmax."""
        z = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

        return self._emit(s, "softmax", (a,), back)

    def square(self, a: Tensor) -> Tensor:
        ad = a.data
        return self._emit(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))

    def transpose(self, a: Tensor) -> Tensor:
        return self._emit(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))

    # -- backward -------------------------------------------------------
    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with requires_grad.

        Leaves off the loss path keep a zero gradient.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                key = id(inp)
                if inp.requires_grad:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                elif key in self._tracked:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.nodes.clear()
        self._tracked.clear()


def gradients(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and collect gradients by name; disconnected parameters get zeros."""
    for p in params.values():
        p.grad = None
    tape.backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}


# -- parameters ---------------------------------------------------------------

def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())]))


def init_param(seed: int, name: str, rows: int, cols: int, fan_in: int | None = None) -> Tensor:
    fan_in = rows if fan_in is None else fan_in
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    data = named_rng(seed, name).uniform(-bound, bound, size=(rows, cols))
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """In-place Adam update with bias correction. Parameters absent from ``grads`` are skipped."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"grad for {name}: {g.shape} vs {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return state


# -- checkpoint format ---------------------------------------------------------

def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(obj: Mapping) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def params_to_json(params: Mapping[str, Tensor]) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "params": {name: encode_array(params[name].data) for name in sorted(params)},
    }


def params_from_json(doc: Mapping) -> dict[str, np.ndarray]:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    return {name: decode_array(obj) for name, obj in doc["params"].items()}


def dumps_params(params: Mapping[str, Tensor]) -> str:
    return json.dumps(params_to_json(params), sort_keys=True, separators=(",", ":"))


def finite_difference_check(
    loss_fn: Callable[[Tape], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    Per parameter tensor the error is ``max|g_ad - g_fd| / max(|g_ad|_inf, |g_fd|_inf, 1e-8)``, where
    ``|g_ad|_inf`` covers the whole tensor.  With ``max_entries`` only a random subset of entries per
    tensor is perturbed.
    """
    tape = Tape()
    loss = loss_fn(tape)
    analytic = gradients(tape, loss, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        num = np.zeros(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(Tape(record=False)).item()
            flat[i] = orig - h
            down = loss_fn(Tape(record=False)).item()
            flat[i] = orig
            num[k] = (up - down) / (2 * h)
        ana = analytic[name].reshape(-1)[idx]
        scale = max(np.abs(analytic[name]).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / scale))
    return worst

"""A small eager reverse-mode autodiff over float64 numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
that pushes gradients back to them. Calling :meth:`Tensor.backward` on a
scalar (or with an explicit upstream gradient) walks that graph in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class GraphError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (), backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[np.ndarray], None] | None = backward
        self.op = op

    # -- construction helpers ------------------------------------------------
    @staticmethod
    def lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward, op)
        return Tensor(data, op=op)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = Tensor.lift(other)

        def bw(g):
            self._accum(g)
            other._accum(g)

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: self._accum(-g), "neg")

    def __sub__(self, other) -> "Tensor":
        other = Tensor.lift(other)

        def bw(g):
            self._accum(g)
            other._accum(-g)

        return Tensor._make(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other) -> "Tensor":
        return Tensor.lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor.lift(other)

        def bw(g):
            self._accum(g * other.data)
            other._accum(g * self.data)

        return Tensor._make(self.data * other.data, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor.lift(other)

        def bw(g):
            self._accum(g / other.data)
            other._accum(-g * self.data / other.data**2)

        return Tensor._make(self.data / other.data, (self, other), bw, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor.lift(other) / self

    def __pow__(self, k: float) -> "Tensor":
        if isinstance(k, Tensor):
            raise TypeError("only constant exponents are supported")

        def bw(g):
            self._accum(g * k * self.data ** (k - 1))

        return Tensor._make(self.data**k, (self,), bw, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        if self.ndim < 2 or other.ndim < 2:
            raise GraphError(f"matmul: operands must be at least 2-D, got {self.shape} @ {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise GraphError(f"matmul: shape mismatch {self.shape} @ {other.shape}")

        def bw(g):
            self._accum(g @ np.swapaxes(other.data, -1, -2))
            other._accum(np.swapaxes(self.data, -1, -2) @ g)

        return Tensor._make(self.data @ other.data, (self, other), bw, "matmul")

    # -- shape ops -----------------------------------------------------------
    def __getitem__(self, idx) -> "Tensor":
        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros_like(self.data)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            self._accum(full)

        return Tensor._make(self.data[idx], (self,), bw, "getitem")

    def reshape(self, *shape) -> "Tensor":
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: self._accum(g.reshape(self.shape)), "reshape")

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: self._accum(g.transpose(inv)), "transpose")

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) / float(n)

    # -- backward ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise GraphError("tensor has no recorded graph to differentiate")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward on a non-scalar of shape {self.shape} needs an upstream gradient")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise GraphError(f"upstream gradient shape {grad.shape} does not match {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior nodes start clean; leaves keep accumulating
        for node in order:
            if node._parents:
                node.grad = None
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- elementwise functions ---------------------------------------------------


def exp(x: Tensor) -> Tensor:
    x = Tensor.lift(x)
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: x._accum(g * out), "exp")


def log(x: Tensor) -> Tensor:
    x = Tensor.lift(x)
    return Tensor._make(np.log(x.data), (x,), lambda g: x._accum(g / x.data), "log")


def sqrt(x: Tensor) -> Tensor:
    x = Tensor.lift(x)
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: x._accum(g * 0.5 / out), "sqrt")


def tanh(x: Tensor) -> Tensor:
    x = Tensor.lift(x)
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: x._accum(g * (1.0 - out**2)), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    x = Tensor.lift(x)
    out = expit(x.data)
    return Tensor._make(out, (x,), lambda g: x._accum(g * out * (1.0 - out)), "sigmoid")


def relu(x: Tensor) -> Tensor:
    x = Tensor.lift(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: x._accum(g * mask), "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = Tensor.lift(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = Tensor.lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        x._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), bw, "log_softmax")


def std(x: Tensor, axis=None) -> Tensor:
    """Population standard deviation; the gradient is taken as 0 where it vanishes."""
    x = Tensor.lift(x)
    n = x.data.size if axis is None else x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    dev = x.data - mu
    sd = np.sqrt((dev**2).mean(axis=axis, keepdims=True))

    def bw(g):
        gk = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(sd > 0, sd, 1.0)
        x._accum(np.where(sd > 0, gk * dev / (n * safe), 0.0))

    out = sd.reshape(()) if axis is None else np.squeeze(sd, axis=axis)
    return Tensor._make(out, (x,), bw, "std")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [Tensor.lift(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            x._accum(part)

    return Tensor._make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [Tensor.lift(x) for x in xs]

    def bw(g):
        for k, x in enumerate(xs):
            x._accum(np.take(g, k, axis=axis))

    return Tensor._make(np.stack([x.data for x in xs], axis=axis), xs, bw, "stack")


def mse(pred: Tensor, target) -> Tensor:
    return ((pred - target) ** 2).mean()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    return -lp[rows, np.asarray(labels, dtype=np.int64)].mean()


# -- parameters and optimisation ---------------------------------------------


class ParameterStore:
    """Named trainable tensors plus optimiser moments."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op="param")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise GraphError(f"parameter {k!r}: checkpoint shape {v.shape} vs {t.shape}")
            t.data = v.copy()

    def clone(self) -> "ParameterStore":
        """Independent copy of the values; gradients and moments start fresh."""
        return ParameterStore(self.state_dict())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.state_dict(), path)

    def load(self, path: str | Path) -> None:
        self.load_state_dict(load_checkpoint(path))


@dataclass(frozen=True)
class OptimizerConfig:
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimiser mode {self.mode!r}")


def optimizer_step(params: ParameterStore, lr: float, hyper: OptimizerConfig = OptimizerConfig()) -> None:
    """One adaptive-moment (or plain gradient) update; all gradients must be populated."""
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise GraphError(f"gradients not populated for {missing}")
    grads = {k: t.grad for k, t in params.items()}
    if hyper.clip_norm is not None:
        norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        if norm > hyper.clip_norm:
            grads = {k: g * (hyper.clip_norm / norm) for k, g in grads.items()}
    if hyper.mode == "sgd":
        for k, t in params.items():
            t.data = t.data - lr * grads[k]
        return
    params.step_count += 1
    n = params.step_count
    for k, t in params.items():
        m, v = params.moments.get(k, (np.zeros_like(t.data), np.zeros_like(t.data)))
        g = grads[k]
        m = hyper.beta1 * m + (1 - hyper.beta1) * g
        v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
        params.moments[k] = (m, v)
        m_hat = m / (1 - hyper.beta1**n)
        v_hat = v / (1 - hyper.beta2**n)
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


def grad_check(
    fn: Callable[[], Tensor],
    params: ParameterStore | Mapping[str, Tensor],
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central finite differences.

    ``max_entries`` limits how many coordinates per parameter are probed
    (chosen with ``rng``); ``None`` probes all of them.
    """
    tensors = dict(params.items())
    for t in tensors.values():
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise GraphError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + epsilon
            up = float(fn().data)
            flat[k] = orig - epsilon
            down = float(fn().data)
            flat[k] = orig
            fd = (up - down) / (2 * epsilon)
            ga = float(analytic.reshape(-1)[k])
            worst = max(worst, abs(ga - fd) / max(abs(ga), abs(fd), 1e-8))
    return worst


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(state: Mapping[str, np.ndarray], path: str | Path) -> None:
    """``.npz`` archive: one float64 array per parameter name, shapes stored by numpy."""
    with open(path, "wb") as fh:
        np.savez(fh, **{k: np.asarray(v, dtype=np.float64) for k, v in state.items()})


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k].copy() for k in z.files}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def params_of(tensors: Iterable[Tensor]) -> dict[str, Tensor]:
    return {f"t{i}": t for i, t in enumerate(tensors)}

"""Dense float64 numerics with a small reverse-mode tape.

Every value that takes part in training is a :class:`Tensor` wrapping a
numpy array.  Operations record a closure on the result; ``backprop`` walks
the graph in reverse topological order and accumulates ``.grad`` on the
leaves.  Parameters live in a :class:`ParamStore` so optimizers and the
checkpoint writer can address them by name.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CKPT_MAGIC = "ZSSEG-CKPT v1"


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StateError(RuntimeError):
    """An object is used out of order (e.g. backprop without a forward graph)."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._needs = requires_grad or any(p._needs for p in parents)

    # -- construction helpers -------------------------------------------
    def _child(self, data, parents, backward):
        out = Tensor(data, parents=tuple(parents))
        if out._needs:
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r})"

    def _accumulate(self, g: np.ndarray):
        if not self._needs:
            return
        if self._grad_buf is None:
            self._grad_buf = g
        else:
            self._grad_buf = self._grad_buf + g

    _grad_buf = None

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return self._child(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return self._child(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(-g, other.shape))

        return self._child(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return self._child(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = self.data / other.data

        def backward(g):
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(_unbroadcast(-g * out / other.data, other.shape))

        return self._child(out, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        exponent = float(exponent)
        out = self.data ** exponent

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return self._child(out, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul shapes {self.shape} and {other.shape}")

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        return self._child(self.data @ other.data, (self, other), backward)

    @property
    def T(self):
        return self._child(self.data.T, (self,), lambda g: self._accumulate(g.T))

    def reshape(self, *shape):
        old = self.shape
        return self._child(self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(old)))

    def __getitem__(self, index):
        basic = isinstance(index, (slice, int)) or (
            isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index)
        )

        def backward(g):
            full = np.zeros_like(self.data)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            self._accumulate(full)

        return self._child(self.data[index], (self,), backward)

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))

        return self._child(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise ----------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return self._child(out, (self,), lambda g: self._accumulate(g * out))

    def log(self):
        return self._child(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data))

    def sqrt(self):
        out = np.sqrt(self.data)
        return self._child(out, (self,), lambda g: self._accumulate(g * 0.5 / out))

    def relu(self):
        mask = self.data > 0
        return self._child(self.data * mask, (self,), lambda g: self._accumulate(g * mask))

    def leaky_relu(self, slope: float = 0.01):
        scale = np.where(self.data > 0, 1.0, slope)
        return self._child(self.data * scale, (self,), lambda g: self._accumulate(g * scale))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    if out._needs:
        out._backward = backward
    return out


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along ``axis`` (keeps the reduced dim)."""
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    return (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift


def backprop(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if not isinstance(loss, Tensor):
        raise StateError("backprop needs a Tensor produced by a forward pass")
    if loss.data.size != 1:
        raise DimensionError(f"backprop expects a scalar loss, got shape {loss.shape}")
    if not loss._needs:
        raise StateError("loss does not depend on any parameter; run a forward pass first")
    if getattr(loss, "_consumed", False):
        raise StateError("graph already consumed by an earlier backprop; run the forward pass again")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node._needs:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss._grad_buf = np.ones_like(loss.data)
    for node in reversed(order):
        g = node._grad_buf
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g)
        if node.requires_grad:
            node.grad += g
        node._grad_buf = None
        node._backward = None
    loss._consumed = True


# ---------------------------------------------------------------------------
# parameters and MLPs


class ParamStore:
    """Ordered, uniquely named parameter matrices with gradient accumulators."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefix: str) -> "ParamStore":
        """A view sharing the same Tensor objects for names starting with ``prefix``."""
        sub = ParamStore()
        for name, t in self._params.items():
            if name.startswith(prefix):
                sub._params[name] = t
        return sub

    def merge(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore()
        for store in (self, other):
            for name, t in store:
                if name in out._params:
                    raise KeyError(f"duplicate parameter name {name!r}")
                out._params[name] = t
        return out

    def zero_grad(self):
        for t in self._params.values():
            t.grad[...] = 0.0

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state: dict):
        for name, t in self._params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != {t.shape}")
            t.data = value.copy()


ACTIVATIONS = ("relu", "leaky_relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive: {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    """Glorot-uniform weights, zero biases."""
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}.b{i}", np.zeros((1, fan_out)))


def mlp_forward(store: ParamStore, prefix: str, spec: MlpSpec, x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise DimensionError(f"{prefix}: input shape {x.shape}, expected (*, {spec.widths[0]})")
    h = x
    for i in range(spec.num_layers):
        h = h @ store[f"{prefix}.W{i}"] + store[f"{prefix}.b{i}"]
        if i < spec.num_layers - 1:
            if spec.activation == "relu":
                h = h.relu()
            elif spec.activation == "leaky_relu":
                h = h.leaky_relu(spec.slope)
    return h


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, store: ParamStore, lr: float | None = None) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in store:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0


def poly_lr(iteration: int, total: int, base: float, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total must be positive")
    if iteration < 0 or iteration > total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return base * (1.0 - iteration / total) ** power


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max element-wise relative error between backprop and central differences.

    ``fn`` maps a Tensor to a scalar Tensor.  The relative error of one entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    if out._needs:
        backprop(out)
        analytic = x.grad.copy()
    else:
        analytic = np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = float(fn(Tensor(xp.reshape(x0.shape))).data)
        fm = float(fn(Tensor(xm.reshape(x0.shape))).data)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near entry {i}")
        flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if denom.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def value_and_grad(fn: Callable[..., Tensor], *arrays) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves and return (value, gradients per argument)."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out._needs:
        backprop(out)
    return float(out.data), [leaf.grad for leaf in leaves]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, matrices: "dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]") -> None:
    items = matrices.items() if isinstance(matrices, dict) else matrices
    lines = [CKPT_MAGIC]
    for name, value in items:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise DimensionError(f"{name}: only matrices can be checkpointed")
        if any(c.isspace() for c in name) or not name:
            raise ValueError(f"invalid matrix name {name!r}")
        if not np.isfinite(value).all():
            raise NumericError(f"{name}: refusing to write non-finite values")
        rows, cols = value.shape
        lines.append(f"{name} {rows} {cols}")
        for row in value:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_MAGIC} file")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        parts = lines[i].split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{i + 1}: expected 'name rows cols'")
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        data = np.zeros((rows, cols))
        for r in range(rows):
            i += 1
            vals = lines[i].split() if i < len(lines) else []
            if len(vals) != cols:
                raise ValueError(f"{path}:{i + 1}: expected {cols} values")
            data[r] = [float(v) for v in vals]
        out[name] = data
        i += 1
    return out

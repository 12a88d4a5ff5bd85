"""Minimal reverse-mode differentiation over float64 numpy arrays.

Values are ``Tensor`` objects wrapping ``np.ndarray`` data.  Operations are only
recorded while a :class:`Tape` is active, so plain evaluation (rollouts,
finite differences) runs without bookkeeping overhead::

    with Tape() as tape:
        loss = program()
    tape.backward(loss)

Every primitive has a hand-written adjoint.  The set is deliberately small;
anything else (subtraction, squares, log-softmax, ...) is composed from it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DiffcoreError(Exception):
    pass


class ShapeError(DiffcoreError, ValueError):
    """Operands cannot be combined (raised while building the operation)."""


class DomainError(DiffcoreError, ArithmeticError):
    """A primitive was evaluated outside its domain."""

    def __init__(self, primitive: str, message: str):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


class ContractError(DiffcoreError, ValueError):
    pass


class StaleRecordError(DiffcoreError, RuntimeError):
    """A parameter was mutated between forward and backward."""


class Tensor:
    """Dense float64 array, optionally tracked by the active tape."""

    __array_priority__ = 100

    def __init__(self, data, tracked: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tracked = tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return gather(self, index)


class Parameter(Tensor):
    """A named leaf whose gradient accumulates across backward passes.

    Assigning ``.data`` bumps ``version`` so that tapes recorded against the old
    value refuse to run backward.
    """

    def __init__(self, name: str, value):
        self.name = name
        self.version = 0
        super().__init__(value, tracked=True)
        self.grad = np.zeros_like(self.data)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        value = np.asarray(value, dtype=DTYPE)
        if hasattr(self, "_data") and value.shape != self._data.shape:
            raise ShapeError(f"parameter {self.name}: cannot assign shape {value.shape} to {self._data.shape}")
        self._data = value
        self.version += 1

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self._data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "parents", "vjp", "name")

    def __init__(self, name, out, parents, vjp):
        self.name = name
        self.out = out
        self.parents = parents
        self.vjp = vjp


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives (the computation record)."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._versions: dict[int, tuple[Parameter, int]] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def watch(self, param: Parameter) -> None:
        self._versions.setdefault(id(param), (param, param.version))

    def _record(self, name, out, parents, vjp) -> None:
        for p in parents:
            if isinstance(p, Parameter):
                self.watch(p)
        self.nodes.append(_Node(name, out, parents, vjp))

    def parameters(self) -> list[Parameter]:
        return [p for p, _ in self._versions.values()]

    def backward(self, output: Tensor, cotangent=None) -> None:
        """Accumulate d<cotangent, output>/d(param) into every reachable ``Parameter.grad``."""
        for param, version in self._versions.values():
            if param.version != version:
                raise StaleRecordError(f"parameter {param.name} changed after the forward pass")
        if cotangent is None:
            cotangent = np.ones(output.shape)
        cotangent = np.asarray(cotangent, dtype=DTYPE)
        if cotangent.shape != output.shape:
            raise ShapeError(f"cotangent shape {cotangent.shape} != output shape {output.shape}")
        if not output.tracked:
            return

        grads: dict[int, np.ndarray] = {id(output): cotangent}
        leaves: dict[int, Parameter] = {}
        if isinstance(output, Parameter):
            leaves[id(output)] = output
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.tracked:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if isinstance(parent, Parameter):
                    leaves[key] = parent
        for key, param in leaves.items():
            param.grad += grads[key]


@contextmanager
def no_record():
    """Suspend recording (evaluation inside a training step, detaching, ...)."""
    prev = getattr(_state, "stack", [])
    _state.stack = []
    try:
        yield
    finally:
        _state.stack = prev


def as_tensor(x) -> Tensor:
    """Wrap constants by value: the record must not alias arrays the caller may mutate."""
    return x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=DTYPE))


def detach(x) -> Tensor:
    """Same values, cut from the record (a stop-gradient)."""
    return Tensor(as_tensor(x).data)


def _emit(name: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.tracked for p in parents):
        return Tensor(data)
    out = Tensor(data, tracked=True)
    tape._record(name, out, tuple(parents), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(name: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{name}: shapes {' and '.join(map(str, shapes))} do not broadcast") from None


def _check_finite(name: str, data: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise DomainError(name, "produced a non-finite value")
    return data


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def mask_mul(x, mask) -> Tensor:
    """Elementwise product with a constant (non-differentiable) mask."""
    x = as_tensor(x)
    m = np.array(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    _broadcast_shape("mask_mul", x.shape, m.shape)
    shape = x.shape
    return _emit("mask_mul", x.data * m, (x,), lambda g: (_unbroadcast(g * m, shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), vjp)


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)
    xd, wd = x.data, weight.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        grads = [g @ wd, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("affine", out, parents, vjp)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    _check_finite("exp", y)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0) or np.any(np.isnan(xd)):
        raise DomainError("log", "argument must be strictly positive")
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit("softplus", np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid(xd),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ContractError("mean: empty reduction")
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), vjp)


def stable_logsumexp(x, axis=-1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``; exact for single-element slices."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise ContractError("logsumexp: scalar input has no axis")
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ContractError("logsumexp: empty axis")
    xd = x.data
    m = np.max(xd, axis=ax, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DomainError("logsumexp", "every reduced slice needs a finite maximum")
    w = np.exp(xd - m)
    s = w.sum(axis=ax, keepdims=True)
    out = m + np.log(s)
    soft = w / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * soft,)

    return _emit("logsumexp", out if keepdims else np.squeeze(out, axis=ax), (x,), vjp)


logsumexp = stable_logsumexp


def concatenate(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concatenate: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concatenate: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=ax)

    return _emit("concatenate", out, ts, vjp)


def gather(x, index) -> Tensor:
    """Basic slicing or integer-array gathering, ``x[index]``."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"gather: {exc}") from None
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("gather", np.array(out, dtype=DTYPE), (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    old = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "affine": affine,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "sum": sum,
    "mean": mean,
    "logsumexp": stable_logsumexp,
    "mask_mul": mask_mul,
    "concatenate": concatenate,
    "gather": gather,
    "reshape": reshape,
}


# --------------------------------------------------------------------------
# program-level entry points


def forward(program: Callable[..., Tensor], inputs: Sequence = (), params: Iterable[Parameter] = ()):
    """Run ``program(*inputs)`` under a fresh tape; returns ``(output, tape)``."""
    with Tape() as tape:
        for p in params:
            tape.watch(p)
        out = program(*inputs)
    return out, tape


def backward(record: Tape, output: Tensor, cotangent=None) -> None:
    record.backward(output, cotangent)


def finite_difference_gradient(
    program: Callable[..., Tensor],
    inputs: Sequence,
    params: Sequence[Parameter],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar program, one array per parameter name."""
    if not 1e-7 <= step <= 1e-3:
        raise ContractError(f"step {step} outside [1e-7, 1e-3]")

    def evaluate() -> float:
        with no_record():
            out = as_tensor(program(*inputs))
        if out.size != 1:
            raise ContractError(f"finite differences need a scalar output, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    grads = {}
    for p in params:
        base = p.data.copy()
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += step
            p.data = bumped.reshape(base.shape)
            up = evaluate()
            bumped[i] -= 2 * step
            p.data = bumped.reshape(base.shape)
            down = evaluate()
            g.reshape(-1)[i] = (up - down) / (2 * step)
        p.data = base
        grads[p.name] = g
    return grads


def relative_error(a, b, floor: float = 1e-7) -> np.ndarray:
    """|a - b| / max(|a|, |b|), reported as 0 where |a - b| is under the absolute floor."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff <= floor, 0.0, diff / scale)
    return rel


def analytic_gradient(program: Callable[..., Tensor], inputs: Sequence, params: Sequence[Parameter]) -> dict[str, np.ndarray]:
    """Zero grads, run forward+backward once, return a copy of each gradient."""
    for p in params:
        p.zero_grad()
    out, tape = forward(program, inputs, params)
    if out.size != 1:
        raise ContractError(f"gradient of non-scalar output {out.shape}")
    tape.backward(out)
    return {p.name: p.grad.copy() for p in params}

"""Parameter containers, dense stacks and the gated recurrent cell."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor


class Module:
    """Collects Parameters from attributes, in assignment order."""

    def parameters(self) -> list[Parameter]:
        return list(self._walk())

    def _walk(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            yield from _walk_value(value)

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _walk_value(value) -> Iterator[Parameter]:
    if isinstance(value, Parameter):
        yield value
    elif isinstance(value, Module):
        yield from value._walk()
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk_value(v)


class Affine(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str, gain: float = 1.0):
        std = gain * np.sqrt(1.0 / in_dim)
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, size=(out_dim, in_dim)))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        return dc.affine(x, self.weight, self.bias)


class MLP(Module):
    """Affine layers with tanh between them; the last layer is linear."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        name: str,
        final_gain: float = 1.0,
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        n = len(sizes) - 1
        self.layers = [
            Affine(sizes[i], sizes[i + 1], rng, f"{name}.{i}", gain=final_gain if i == n - 1 else 1.0)
            for i in range(n)
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers[:-1]:
            x = dc.tanh(layer(x))
        return self.layers[-1](x)


class GRUCell(Module):
    """Gated recurrent cell.

    z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
    n = tanh(Wn x + bn + r * (Un h + bhn)), h' = (1 - z) * n + z * h.
    """

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator, name: str):
        self.hidden_dim = hidden_dim
        std_x = np.sqrt(1.0 / in_dim)
        std_h = np.sqrt(1.0 / hidden_dim)
        self.w_x = Parameter(f"{name}.w_x", rng.normal(0.0, std_x, size=(3 * hidden_dim, in_dim)))
        self.w_h = Parameter(f"{name}.w_h", rng.normal(0.0, std_h, size=(3 * hidden_dim, hidden_dim)))
        self.b_x = Parameter(f"{name}.b_x", np.zeros(3 * hidden_dim))
        self.b_h = Parameter(f"{name}.b_h", np.zeros(3 * hidden_dim))

    def __call__(self, x, h) -> Tensor:
        k = self.hidden_dim
        gx = dc.affine(x, self.w_x, self.b_x)
        gh = dc.affine(h, self.w_h, self.b_h)
        z = dc.sigmoid(gx[..., :k] + gh[..., :k])
        r = dc.sigmoid(gx[..., k : 2 * k] + gh[..., k : 2 * k])
        n = dc.tanh(gx[..., 2 * k :] + r * gh[..., 2 * k :])
        return n + z * (h - n)


class Adam:
    """Adam with optional global-norm gradient clipping."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in self.params])))

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the pre-clip norm."""
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

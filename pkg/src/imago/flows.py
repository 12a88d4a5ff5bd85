"""Conditional block neural autoregressive flows with exact log-determinants.

A flow of latent dimension ``d`` is a stack of block-masked affine layers.  Layer
weights are viewed as a ``d x d`` grid of blocks; block ``(i, j)`` connects the
hidden units owned by input coordinate ``j`` to those owned by coordinate ``i``.
Diagonal blocks are ``exp(free)`` (strictly positive), strictly-lower blocks are
free, upper blocks are zero.  With tanh between layers the map is triangular and
monotone in each coordinate.

The Jacobian diagonal is tracked per coordinate in log space: ``log_jac`` has
shape ``(batch, d, width)`` and holds ``log d h[i, p] / d z[i]`` for hidden unit
``p`` of block ``i``.  Every factor is positive, so chaining a layer is a
log-domain matrix product computed with logsumexp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DomainError, Parameter, ShapeError, Tensor
from .layers import Module

LOG2 = math.log(2.0)


class FlowEvaluationError(DomainError):
    pass


@dataclass(frozen=True)
class BnafConfig:
    """``num_layers`` counts affine blocks; tanh sits between consecutive blocks,
    so there are ``num_layers - 1`` hidden layers of width ``hidden_multiplier * latent_dim``."""

    latent_dim: int
    hidden_multiplier: int = 8
    num_layers: int = 3
    conditioning_dim: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_multiplier < 1 or self.num_layers < 1:
            raise ValueError(f"invalid flow config {self}")
        if self.conditioning_dim < 0:
            raise ValueError("conditioning_dim must be >= 0")

    def block_widths(self) -> list[tuple[int, int]]:
        """(a_in, a_out) per layer, in units per latent coordinate."""
        widths = [1] + [self.hidden_multiplier] * (self.num_layers - 1) + [1]
        return list(zip(widths[:-1], widths[1:]))


def _block_masks(d: int, a_in: int, a_out: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(d), a_out)[:, None]
    cols = np.repeat(np.arange(d), a_in)[None, :]
    return (rows == cols).astype(float), (rows > cols).astype(float)


class BlockMaskedAffine(Module):
    def __init__(self, d: int, a_in: int, a_out: int, c: int, name: str):
        self.d, self.a_in, self.a_out, self.c = d, a_in, a_out, c
        out_dim, in_dim = d * a_out, d * a_in
        self.free_weights = Parameter(f"{name}.free_weights", np.zeros((out_dim, in_dim)))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))
        self.conditioning_map = Parameter(f"{name}.conditioning_map", np.zeros((out_dim, c))) if c > 0 else None
        self.diag_mask, self.lower_mask = _block_masks(d, a_in, a_out)
        blocks = np.arange(d)
        self._diag_index = (
            blocks[:, None, None] * a_out + np.arange(a_out)[None, :, None],
            blocks[:, None, None] * a_in + np.arange(a_in)[None, None, :],
        )

    @property
    def in_dim(self) -> int:
        return self.d * self.a_in

    @property
    def out_dim(self) -> int:
        return self.d * self.a_out

    def effective_weight(self) -> Tensor:
        fw = self.free_weights
        return dc.mask_mul(dc.exp(fw), self.diag_mask) + dc.mask_mul(fw, self.lower_mask)

    def log_diag_blocks(self) -> Tensor:
        """Logs of the diagonal-block entries, shape (d, a_out, a_in)."""
        return dc.gather(self.free_weights, self._diag_index)

    def initialize(self, rng: np.random.Generator | None, gain: float = 1.0, noise: float = 0.0) -> None:
        """Diagonal blocks average to ``gain`` per unit; off-diagonal/conditioning ~ N(0, noise^2/fan_in)."""
        fw = np.zeros((self.out_dim, self.in_dim))
        fw += self.diag_mask * math.log(gain / self.a_in)
        if noise > 0:
            fw += self.diag_mask * rng.normal(0.0, 0.1 * noise, size=fw.shape)
            fw += self.lower_mask * rng.normal(0.0, noise / math.sqrt(self.in_dim), size=fw.shape)
        self.free_weights.data = fw
        self.bias.data = np.zeros(self.out_dim)
        if self.conditioning_map is not None:
            scale = noise / math.sqrt(self.c) if noise > 0 else 0.0
            self.conditioning_map.data = (
                rng.normal(0.0, scale, size=(self.out_dim, self.c)) if scale > 0 else np.zeros((self.out_dim, self.c))
            )


def block_affine_apply(layer: BlockMaskedAffine, x, conditioning=None) -> tuple[Tensor, Tensor]:
    """Pre-activation ``W_eff x + C h + b`` and the layer's diagonal-block logs."""
    x = dc.as_tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"block affine: input width {x.shape[-1]} != {layer.in_dim}")
    pre = dc.affine(x, layer.effective_weight(), layer.bias)
    if layer.c > 0:
        if conditioning is None:
            raise ShapeError("block affine: conditioning required")
        conditioning = dc.as_tensor(conditioning)
        if conditioning.shape[-1] != layer.c:
            raise ShapeError(f"block affine: conditioning width {conditioning.shape[-1]} != {layer.c}")
        pre = pre + dc.affine(conditioning, layer.conditioning_map)
    return pre, layer.log_diag_blocks()


def log_tanh_derivative(u) -> Tensor:
    """log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))."""
    u = dc.as_tensor(u)
    return 2.0 * LOG2 - 2.0 * u - 2.0 * dc.softplus(-2.0 * u)


@dataclass
class FlowOutput:
    output: Tensor  # (batch, d)
    log_det: Tensor  # (batch,)


class ConditionalBnaf(Module):
    def __init__(self, config: BnafConfig, name: str, rng: np.random.Generator | None = None, **init):
        self.config = config
        d, c = config.latent_dim, config.conditioning_dim
        self.layers = [
            BlockMaskedAffine(d, a_in, a_out, c, f"{name}.{i}") for i, (a_in, a_out) in enumerate(config.block_widths())
        ]
        self.initialize(rng, **init)

    def initialize(
        self,
        rng: np.random.Generator | None = None,
        first_gain: float = 0.5,
        final_gain: float = 2.0,
        noise: float = 0.1,
    ) -> None:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            if n == 1:
                gain = first_gain * final_gain
            else:
                gain = first_gain if i == 0 else final_gain if i == n - 1 else 1.0
            layer.initialize(rng, gain=gain, noise=noise if rng is not None else 0.0)

    def near_identity(self, eps: float = 1e-2) -> None:
        """tanh(eps z)/eps ~ z with every off-diagonal and conditioning weight zero."""
        self.initialize(None, first_gain=eps, final_gain=1.0 / eps, noise=0.0)

    def __call__(self, z, conditioning=None) -> FlowOutput:
        return bnaf_transform(self, z, conditioning)


def bnaf_transform(flow: ConditionalBnaf, z_in, conditioning=None) -> FlowOutput:
    z_in = dc.as_tensor(z_in)
    d = flow.config.latent_dim
    if z_in.shape[-1] != d:
        raise ShapeError(f"flow expects latent dim {d}, got {z_in.shape[-1]}")
    squeeze = z_in.ndim == 1
    if squeeze:
        z_in = dc.reshape(z_in, (1, d))
        if conditioning is not None:
            conditioning = dc.reshape(dc.as_tensor(conditioning), (1, -1))
    batch = z_in.shape[0]

    x = z_in
    log_jac = None  # (batch, d, width)
    n = len(flow.layers)
    for i, layer in enumerate(flow.layers):
        pre, log_w = block_affine_apply(layer, x, conditioning)
        if log_jac is None:
            # first layer: input width per block is 1
            log_jac = dc.reshape(log_w, (1, d, layer.a_out)) + np.zeros((batch, 1, 1))
        else:
            prev = dc.reshape(log_jac, (batch, d, 1, layer.a_in))
            log_jac = dc.stable_logsumexp(prev + log_w, axis=-1)
        if i < n - 1:
            log_jac = log_jac + dc.reshape(log_tanh_derivative(pre), (batch, d, layer.a_out))
            x = dc.tanh(pre)
        else:
            x = pre
        if not np.all(np.isfinite(x.data)) or not np.all(np.isfinite(log_jac.data)):
            raise FlowEvaluationError("bnaf", f"non-finite intermediate at layer {i}")

    log_det = dc.sum(dc.reshape(log_jac, (batch, d)), axis=-1)
    if squeeze:
        x = dc.reshape(x, (d,))
        log_det = dc.reshape(log_det, ())
    return FlowOutput(x, log_det)


def numeric_jacobian_oracle(flow: ConditionalBnaf, z_in, conditioning=None, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian d output / d z_in for a single point (d <= 8)."""
    z = np.asarray(z_in, dtype=float).reshape(-1)
    d = z.size
    if d > 8:
        raise ValueError("numeric Jacobian oracle is for test-scale flows (d <= 8)")
    cond = None if conditioning is None else np.asarray(conditioning, dtype=float).reshape(1, -1)
    bumps = np.concatenate([z + step * np.eye(d), z - step * np.eye(d)])
    if cond is not None:
        cond = np.repeat(cond, 2 * d, axis=0)
    with dc.no_record():
        out = bnaf_transform(flow, bumps, cond).output.data
    return ((out[:d] - out[d:]) / (2 * step)).T


def invert_bnaf(flow: ConditionalBnaf, target, conditioning=None, bracket: float = 60.0, iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise bisection inverse of a monotone triangular flow.

    Returns ``(z, inside)``; ``inside`` is False where the target lies outside
    the flow's image over the bracket (the density there is zero).
    """
    y = np.atleast_2d(np.asarray(target, dtype=float))
    n, d = y.shape
    cond = None if conditioning is None else np.broadcast_to(np.asarray(conditioning, dtype=float), (n, flow.config.conditioning_dim))
    z = np.zeros((n, d))
    inside = np.ones(n, dtype=bool)
    with dc.no_record():
        for i in range(d):
            lo = np.full(n, -bracket)
            hi = np.full(n, bracket)
            probe = z.copy()
            probe[:, i] = lo
            f_lo = bnaf_transform(flow, probe, cond).output.data[:, i]
            probe[:, i] = hi
            f_hi = bnaf_transform(flow, probe, cond).output.data[:, i]
            inside &= (y[:, i] > f_lo) & (y[:, i] < f_hi)
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                probe[:, i] = mid
                f_mid = bnaf_transform(flow, probe, cond).output.data[:, i]
                below = f_mid < y[:, i]
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
            z[:, i] = 0.5 * (lo + hi)
    return z, inside


def flow_log_density(base_logpdf, flow_output: FlowOutput, direction: str = "forward-density"):
    """Change of variables.

    ``forward-density``: log q(f(z)) = log q(z) - log|det J|.
    ``pullback``: log p(z) = log p(f(z)) + log|det J|.
    """
    if direction == "forward-density":
        return base_logpdf - flow_output.log_det
    if direction == "pullback":
        return base_logpdf + flow_output.log_det
    raise ValueError(f"unknown direction {direction!r}")

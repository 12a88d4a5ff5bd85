"""Unconditional encoder/decoder with a warp and an unwarp flow, and the per-timestep objective.

Shapes are batched throughout: scenes ``(B, P)`` flattened, latents ``(B, d)``,
features ``(B, F)``, masks ``(B, P)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .flows import BnafConfig, ConditionalBnaf
from .layers import MLP, Module

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VaeConfig:
    pixels: int
    latent_dim: int = 16
    feature_dim: int = 128
    encoder_hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (128, 256)
    flow_multiplier: int = 8
    flow_layers: int = 3


class GaussianDiag(NamedTuple):
    mean: Tensor
    log_variance: Tensor


class SceneVae(Module):
    def __init__(self, config: VaeConfig, rng: np.random.Generator):
        self.config = config
        d, p = config.latent_dim, config.pixels
        self.encoder = MLP([p, *config.encoder_hidden, 2 * d], rng, "encoder", final_gain=0.1)
        self.decoder = MLP([d, *config.decoder_hidden, p], rng, "decoder", final_gain=0.1)
        flow_cfg = BnafConfig(d, config.flow_multiplier, config.flow_layers, config.feature_dim)
        self.warp_flow = ConditionalBnaf(flow_cfg, "warp", rng)
        self.unwarp_flow = ConditionalBnaf(flow_cfg, "unwarp", rng)

    def encode(self, scene) -> GaussianDiag:
        scene = dc.as_tensor(scene)
        if scene.shape[-1] != self.config.pixels:
            raise ContractError(f"scene has {scene.shape[-1]} pixels, model expects {self.config.pixels}")
        out = self.encoder(scene)
        d = self.config.latent_dim
        return GaussianDiag(out[..., :d], out[..., d:])

    def decode(self, z) -> Tensor:
        """Per-pixel Bernoulli logits."""
        return self.decoder(z)


def reparameterize(q: GaussianDiag, noise) -> Tensor:
    return q.mean + dc.exp(0.5 * q.log_variance) * dc.as_tensor(noise)


def gaussian_logpdf(point, q: GaussianDiag) -> Tensor:
    """Diagonal Gaussian log-density, summed over the last axis."""
    diff = dc.as_tensor(point) - q.mean
    quad = diff * diff * dc.exp(-1.0 * q.log_variance)
    d = diff.shape[-1]
    return dc.sum(-0.5 * q.log_variance - 0.5 * quad, axis=-1) + (-HALF_LOG_2PI * d)


def standard_normal_logpdf(point) -> Tensor:
    point = dc.as_tensor(point)
    return dc.sum(-0.5 * (point * point), axis=-1) + (-HALF_LOG_2PI * point.shape[-1])


def bernoulli_loglik(scene, logits, mask=None) -> Tensor:
    """sum mask * [x log sigmoid(l) + (1-x) log(1 - sigmoid(l))], in softplus form."""
    x = np.asarray(scene.data if isinstance(scene, Tensor) else scene, dtype=float)
    logits = dc.as_tensor(logits)
    per_pixel = -1.0 * (dc.mask_mul(dc.softplus(-1.0 * logits), x) + dc.mask_mul(dc.softplus(logits), 1.0 - x))
    if mask is not None:
        per_pixel = dc.mask_mul(per_pixel, np.asarray(mask, dtype=float))
    return dc.sum(per_pixel, axis=-1)


def eta(mask) -> np.ndarray:
    """total pixels / observed pixels, per row."""
    mask = np.atleast_2d(np.asarray(mask, dtype=float))
    observed = mask.sum(axis=-1)
    if np.any(observed <= 0):
        raise ContractError("mask has no observed pixels; eta undefined")
    return mask.shape[-1] / observed


TERM_NAMES = ("t1", "t2", "t3", "t4", "t5")


@dataclass
class ObjectiveTerms:
    t1_recon_full: Tensor
    t2_kl_unconditional: Tensor
    t3_kl_conditional_posterior: Tensor
    t4_masked_recon: Tensor
    t5_kl_conditional_prior: Tensor
    total: Tensor = field(init=False)

    def __post_init__(self):
        self.total = (
            self.t1_recon_full
            - self.t2_kl_unconditional
            - self.t3_kl_conditional_posterior
            + self.t4_masked_recon
            - self.t5_kl_conditional_prior
        )

    def terms(self) -> dict[str, Tensor]:
        return dict(
            zip(
                TERM_NAMES,
                (
                    self.t1_recon_full,
                    self.t2_kl_unconditional,
                    self.t3_kl_conditional_posterior,
                    self.t4_masked_recon,
                    self.t5_kl_conditional_prior,
                ),
            )
        )


def timestep_objective(
    model: SceneVae,
    scene,
    h_t,
    mask_t,
    noise_posterior,
    noise_prior,
    posterior: GaussianDiag | None = None,
    route_gradients: bool = True,
) -> ObjectiveTerms:
    """Single-sample estimates of the five terms of L_t, one value per batch row.

    With ``route_gradients`` the features reach t1/t2 detached, so the recurrent
    extractor learns only from t3 (via the warp flow) and t4/t5 (via the unwarp
    flow).  The encoder never sees t4/t5 and the decoder never sees t3 by
    construction.  ``posterior`` lets callers reuse one encoding across timesteps.
    """
    x = np.atleast_2d(np.asarray(scene.data if isinstance(scene, Tensor) else scene, dtype=float))
    h_t = dc.as_tensor(h_t)
    scale = eta(mask_t)
    q = posterior if posterior is not None else model.encode(x)

    z0 = reparameterize(q, noise_posterior)
    log_q0 = gaussian_logpdf(z0, q)

    h_uncond = dc.detach(h_t) if route_gradients else h_t
    warp_u = model.warp_flow(z0, h_uncond)
    unwarp_u = model.unwarp_flow(warp_u.output, h_uncond)
    t1 = bernoulli_loglik(x, model.decode(unwarp_u.output))
    t2 = log_q0 - warp_u.log_det - unwarp_u.log_det - standard_normal_logpdf(unwarp_u.output)

    if route_gradients:
        warp_c = model.warp_flow(z0, h_t)
    else:
        warp_c = warp_u
    t3 = log_q0 - warp_c.log_det - standard_normal_logpdf(warp_c.output)

    z_k_prior = dc.as_tensor(noise_prior)
    unwarp_p = model.unwarp_flow(z_k_prior, h_t)
    t4 = dc.mask_mul(bernoulli_loglik(x, model.decode(unwarp_p.output), mask_t), scale)
    t5 = standard_normal_logpdf(z_k_prior) - unwarp_p.log_det - standard_normal_logpdf(unwarp_p.output)

    return ObjectiveTerms(t1, t2, t3, t4, t5)


def total_objective(
    model: SceneVae,
    scene,
    features: Sequence,
    masks: Sequence,
    noises_posterior: Sequence,
    noises_prior: Sequence,
    route_gradients: bool = True,
) -> Tensor:
    """sum_t L_t per batch row, sharing one encoding of the scene across timesteps."""
    q = model.encode(np.atleast_2d(np.asarray(scene, dtype=float)))
    total = None
    for h_t, m_t, e_post, e_prior in zip(features, masks, noises_posterior, noises_prior):
        terms = timestep_objective(model, scene, h_t, m_t, e_post, e_prior, posterior=q, route_gradients=route_gradients)
        total = terms.total if total is None else total + terms.total
    if total is None:
        raise ContractError("episode has no timesteps")
    return total

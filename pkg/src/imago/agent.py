"""Sensing loop: glimpses, masks, recurrent features, imagination and fixation policies.

Window convention: a glimpse of size ``w`` centred at row ``r`` covers rows
``r - w//2 .. r - w//2 + w - 1`` (for even ``w`` that is ``r - w/2 .. r + w/2 - 1``).
Centres are clamped so the window always lies inside the scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .layers import Affine, GRUCell, Module
from .vae import SceneVae, VaeConfig


@dataclass
class Scene:
    pixels: np.ndarray  # (H, W) in [0, 1]
    label: int | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GlimpsePercept:
    patch: np.ndarray
    location: tuple[int, int]


@dataclass
class ObservationState:
    h: np.ndarray
    mask: np.ndarray
    history: list[GlimpsePercept] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.history)


@dataclass
class HypothesisSet:
    samples: np.ndarray  # (N, H, W) Bernoulli means
    latents: np.ndarray  # (N, d)
    mean_scene: np.ndarray
    variance_map: np.ndarray

    @classmethod
    def from_samples(cls, samples: np.ndarray, latents: np.ndarray) -> "HypothesisSet":
        mean = samples.mean(axis=0)
        var = ((samples - mean) ** 2).mean(axis=0)
        return cls(samples, latents, mean, var)


# ---------------------------------------------------------------------------
# geometry


def center_range(w: int, extent: int) -> tuple[int, int]:
    """Inclusive range of valid (clamped) centres along one axis."""
    if w > extent:
        raise ContractError(f"glimpse size {w} exceeds scene extent {extent}")
    lo = w // 2
    return lo, extent - w + lo


def clamp_center(location, w: int, height: int, width: int) -> tuple[int, int]:
    r0, r1 = center_range(w, height)
    c0, c1 = center_range(w, width)
    return int(np.clip(location[0], r0, r1)), int(np.clip(location[1], c0, c1))


def window_slices(location, w: int) -> tuple[slice, slice]:
    r, c = location
    return slice(r - w // 2, r - w // 2 + w), slice(c - w // 2, c - w // 2 + w)


def sense(scene, location, w: int) -> GlimpsePercept:
    pixels = scene.pixels if isinstance(scene, Scene) else np.asarray(scene)
    height, width = pixels.shape
    loc = clamp_center(location, w, height, width)
    rows, cols = window_slices(loc, w)
    return GlimpsePercept(pixels[rows, cols].copy(), loc)


def update_mask(mask: np.ndarray, percept: GlimpsePercept) -> np.ndarray:
    w = percept.patch.shape[0]
    out = mask.copy()
    rows, cols = window_slices(percept.location, w)
    out[rows, cols] = 1.0
    return out


def normalized_location(location, height: int, width: int) -> np.ndarray:
    r, c = location
    return np.array([2.0 * r / (height - 1) - 1.0, 2.0 * c / (width - 1) - 1.0])


# ---------------------------------------------------------------------------
# model


class FeatureExtractor(Module):
    """Glimpse embedding (affine + tanh) feeding a gated recurrent cell."""

    def __init__(self, glimpse: int, feature_dim: int, rng: np.random.Generator, embed_dim: int = 128):
        self.glimpse = glimpse
        self.feature_dim = feature_dim
        self.embed = Affine(glimpse * glimpse + 2, embed_dim, rng, "extractor.embed")
        self.cell = GRUCell(embed_dim, feature_dim, rng, "extractor.cell")

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.feature_dim))

    def __call__(self, h, patches, locations) -> Tensor:
        """patches: (B, w*w); locations: (B, 2) normalized."""
        inp = np.concatenate([patches, locations], axis=-1)
        return self.cell(dc.tanh(self.embed(inp)), h)


class ImaginativeAgent(Module):
    """Scene VAE plus the recurrent extractor that conditions both flows."""

    def __init__(
        self,
        height: int,
        width: int,
        glimpse: int,
        vae_config: VaeConfig,
        rng: np.random.Generator,
        embed_dim: int = 128,
    ):
        if vae_config.pixels != height * width:
            raise ValueError("VAE pixel count does not match scene size")
        self.height, self.width, self.glimpse = height, width, glimpse
        self.vae = SceneVae(vae_config, rng)
        self.extractor = FeatureExtractor(glimpse, vae_config.feature_dim, rng, embed_dim)

    @property
    def latent_dim(self) -> int:
        return self.vae.config.latent_dim


def update_features(agent: ImaginativeAgent, state: ObservationState, percept: GlimpsePercept) -> ObservationState:
    loc = normalized_location(percept.location, agent.height, agent.width)
    with dc.no_record():
        h = agent.extractor(state.h[None], percept.patch.reshape(1, -1), loc[None]).data[0]
    return ObservationState(h, update_mask(state.mask, percept), [*state.history, percept])


def decode_prior(agent: ImaginativeAgent, h: np.ndarray, z_k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unwarp standard-normal codes under features ``h`` (rows aligned) and decode.

    Returns ``(logits, z_K)``.
    """
    with dc.no_record():
        z_big_k = agent.vae.unwarp_flow(z_k, h).output
        logits = agent.vae.decode(z_big_k).data
    return logits, z_big_k.data


def imagine(agent: ImaginativeAgent, h_t: np.ndarray, n: int, seed) -> HypothesisSet:
    """N hypotheses from the prior path. The scene is not an input."""
    if n < 1:
        raise ContractError("need at least one hypothesis")
    rng = np.random.default_rng(seed)
    z_k = rng.standard_normal((n, agent.latent_dim))
    logits, z_big_k = decode_prior(agent, np.repeat(np.atleast_2d(h_t), n, axis=0), z_k)
    probs = dc.sigmoid(logits).data
    return HypothesisSet.from_samples(probs.reshape(n, agent.height, agent.width), z_big_k)


# ---------------------------------------------------------------------------
# policies


def window_scores(variance: np.ndarray, w: int) -> np.ndarray:
    """Sum of ``variance`` over every valid w x w window; entry (i, j) is the
    window starting at row i, col j."""
    view = np.lib.stride_tricks.sliding_window_view(variance, (w, w), axis=(-2, -1))
    return view.sum(axis=(-2, -1))


def fixation_uncertainty(variance: np.ndarray, w: int, height: int | None = None, width: int | None = None) -> tuple[int, int]:
    """Centre whose window holds the most variance; ties go to the smallest row-major index."""
    variance = np.asarray(variance, dtype=float)
    height = height or variance.shape[0]
    width = width or variance.shape[1]
    scores = window_scores(variance, w)
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return int(i) + w // 2, int(j) + w // 2


def fixation_random(rng: np.random.Generator, w: int, height: int, width: int) -> tuple[int, int]:
    r0, r1 = center_range(w, height)
    c0, c1 = center_range(w, width)
    return int(rng.integers(r0, r1 + 1)), int(rng.integers(c0, c1 + 1))


POLICIES = ("uncertainty", "random")


def episode_rollout(
    agent: ImaginativeAgent,
    scene,
    timesteps: int,
    policy: str = "uncertainty",
    n: int = 100,
    seed: int = 0,
) -> list[tuple[ObservationState, HypothesisSet]]:
    """Sense -> mask -> features -> imagine, for ``timesteps`` fixations.

    The first fixation is random under either policy.
    """
    if timesteps < 1:
        raise ContractError("timesteps must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    pixels = scene.pixels if isinstance(scene, Scene) else np.asarray(scene, dtype=float)
    seeds = np.random.SeedSequence(seed).spawn(2)
    fix_rng = np.random.default_rng(seeds[0])
    imag_seeds = seeds[1].spawn(timesteps)
    w, height, width = agent.glimpse, agent.height, agent.width

    state = ObservationState(agent.extractor.initial_state(1)[0], np.zeros((height, width)))
    trajectory = []
    hyp = None
    for t in range(timesteps):
        if t == 0 or policy == "random":
            loc = fixation_random(fix_rng, w, height, width)
        else:
            loc = fixation_uncertainty(hyp.variance_map, w, height, width)
        percept = sense(pixels, loc, w)
        state = update_features(agent, state, percept)
        hyp = imagine(agent, state.h, n, imag_seeds[t])
        trajectory.append((state, hyp))
    return trajectory


@dataclass
class BatchStep:
    """One timestep of a batched rollout (B scenes, N hypotheses each)."""

    locations: np.ndarray  # (B, 2)
    masks: np.ndarray  # (B, H, W)
    features: np.ndarray  # (B, F)
    samples: np.ndarray  # (B, N, H, W)
    latents: np.ndarray  # (B, N, d)
    logits: np.ndarray  # (B, N, H, W)

    @property
    def mean_scene(self) -> np.ndarray:
        return self.samples.mean(axis=1)

    @property
    def variance_map(self) -> np.ndarray:
        return self.samples.var(axis=1)


def iter_batch_rollout(agent: ImaginativeAgent, scenes: np.ndarray, timesteps: int, policy: str, n: int, seed):
    """Vectorised ``episode_rollout`` over a stack of scenes ``(B, H, W)``; yields a BatchStep per t."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    scenes = np.asarray(scenes, dtype=float)
    b = scenes.shape[0]
    w, height, width = agent.glimpse, agent.height, agent.width
    fix_seq, imag_seq = np.random.SeedSequence(seed).spawn(2)
    fix_rng = np.random.default_rng(fix_seq)
    imag_rngs = [np.random.default_rng(s) for s in imag_seq.spawn(timesteps)]

    h = agent.extractor.initial_state(b)
    masks = np.zeros((b, height, width))
    variance = None
    for t in range(timesteps):
        if t == 0 or policy == "random":
            locs = np.array([fixation_random(fix_rng, w, height, width) for _ in range(b)])
        else:
            locs = np.array([fixation_uncertainty(v, w, height, width) for v in variance])
        patches = np.empty((b, w * w))
        norm = np.empty((b, 2))
        for i, loc in enumerate(locs):
            rows, cols = window_slices(loc, w)
            patches[i] = scenes[i, rows, cols].reshape(-1)
            masks[i, rows, cols] = 1.0
            norm[i] = normalized_location(loc, height, width)
        with dc.no_record():
            h = agent.extractor(h, patches, norm).data
        z_k = imag_rngs[t].standard_normal((b * n, agent.latent_dim))
        logits, z_big_k = decode_prior(agent, np.repeat(h, n, axis=0), z_k)
        logits = logits.reshape(b, n, height, width)
        samples = dc.sigmoid(logits).data
        variance = samples.var(axis=1)
        yield BatchStep(locs, masks.copy(), h.copy(), samples, z_big_k.reshape(b, n, -1), logits)


def batch_rollout(agent: ImaginativeAgent, scenes: np.ndarray, timesteps: int, policy: str, n: int, seed) -> list[BatchStep]:
    return list(iter_batch_rollout(agent, scenes, timesteps, policy, n, seed))

"""Training loop for the agent and the latent-space probe classifier."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..agent import ImaginativeAgent, fixation_random, normalized_location, window_slices
from ..datasets import generate_glyphs, load_idx, load_mnist_reduced
from ..layers import MLP, Adam, Module
from ..vae import TERM_NAMES, VaeConfig, timestep_objective
from .config import TrainConfig
from .serialization import Checkpoint

log = logging.getLogger(__name__)

NUM_CLASSES = 10


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, epoch: int, step: int):
        super().__init__(f"non-finite {term} at epoch {epoch}, step {step}")
        self.term = term


# ---------------------------------------------------------------------------
# data


def _find(directory: Path, *names: str) -> Path:
    for name in names:
        for candidate in (directory / name, directory / f"{name}.gz"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {names} in {directory}")


def load_split(config: TrainConfig, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Scenes ``(n, H, W)`` and labels for ``split`` in {"train", "test"}."""
    count = config.train_count if split == "train" else config.test_count
    if config.dataset == "glyphs":
        seed = config.data_seed if split == "train" else config.data_seed + 1
        return generate_glyphs(seed, count, (config.height, config.width))
    root = Path(config.data_path)
    if config.dataset == "mnist":
        prefix = "train" if split == "train" else "t10k"
        images, labels = load_mnist_reduced(
            _find(root, f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"),
            _find(root, f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"),
        )
    else:
        sub = root / split
        images = load_idx(_find(sub, "images-idx3-ubyte"))
        labels = load_idx(_find(sub, "labels-idx1-ubyte"))
    if images.shape[1:] != (config.height, config.width):
        raise ValueError(f"{config.dataset} scenes are {images.shape[1:]}, config says {(config.height, config.width)}")
    return images[:count], labels[:count]


# ---------------------------------------------------------------------------
# model construction / checkpoint glue


def build_agent(config: TrainConfig, seed=None) -> ImaginativeAgent:
    vae_cfg = VaeConfig(
        pixels=config.height * config.width,
        latent_dim=config.latent_dim,
        feature_dim=config.feature_dim,
        encoder_hidden=config.encoder_hidden,
        decoder_hidden=config.decoder_hidden,
        flow_multiplier=config.flow_multiplier,
        flow_layers=config.flow_layers,
    )
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return ImaginativeAgent(config.height, config.width, config.glimpse, vae_cfg, rng, config.embed_dim)


def module_state(module: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in module.named_parameters().items()}


def load_state(module: Module, state: dict[str, np.ndarray]) -> None:
    params = module.named_parameters()
    missing = set(params) ^ set(state)
    if missing:
        raise KeyError(f"parameter mismatch: {sorted(missing)}")
    for name, p in params.items():
        p.data = np.array(state[name], dtype=np.float64)


def agent_from_checkpoint(ckpt: Checkpoint) -> tuple[ImaginativeAgent, TrainConfig]:
    config = TrainConfig.from_dict(ckpt.config)
    agent = build_agent(config)
    load_state(agent, ckpt.params)
    return agent, config


# ---------------------------------------------------------------------------
# objective over an episode


def episode_terms(
    agent: ImaginativeAgent,
    scenes: np.ndarray,
    locations: np.ndarray,
    noise_posterior: np.ndarray,
    noise_prior: np.ndarray,
    route_gradients: bool = True,
) -> tuple[dc.Tensor, dict[str, dc.Tensor]]:
    """sum_t L_t per scene plus per-term sums.

    scenes: (B, H, W); locations: (T, B, 2) clamped centres;
    noises: (T, B, d).
    """
    b = scenes.shape[0]
    height, width, w = agent.height, agent.width, agent.glimpse
    flat = scenes.reshape(b, -1)
    q = agent.vae.encode(flat)
    h = dc.as_tensor(agent.extractor.initial_state(b))
    mask = np.zeros((b, height, width))
    total = None
    sums: dict[str, dc.Tensor] = {}
    for t in range(locations.shape[0]):
        mask = mask.copy()
        patches = np.empty((b, w * w))
        norm = np.empty((b, 2))
        for i, loc in enumerate(locations[t]):
            rows, cols = window_slices(loc, w)
            patches[i] = scenes[i, rows, cols].reshape(-1)
            mask[i, rows, cols] = 1.0
            norm[i] = normalized_location(loc, height, width)
        h = agent.extractor(h, patches, norm)
        terms = timestep_objective(
            agent.vae,
            flat,
            h,
            mask.reshape(b, -1),
            noise_posterior[t],
            noise_prior[t],
            posterior=q,
            route_gradients=route_gradients,
        )
        total = terms.total if total is None else total + terms.total
        for name, value in terms.terms().items():
            sums[name] = value if name not in sums else sums[name] + value
    return total, sums


def random_locations(rng: np.random.Generator, timesteps: int, batch: int, w: int, height: int, width: int) -> np.ndarray:
    return np.array([[fixation_random(rng, w, height, width) for _ in range(batch)] for _ in range(timesteps)])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    agent: ImaginativeAgent
    config: TrainConfig
    loss_log: list[float] = field(default_factory=list)
    term_log: list[dict[str, float]] = field(default_factory=list)
    step: int = 0

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(module_state(self.agent), self.config.to_dict(), self.step)


def train(config: TrainConfig, scenes: np.ndarray | None = None, progress=None) -> TrainResult:
    """Adam on -sum_t L_t (mean over the batch) with random training fixations."""
    if scenes is None:
        scenes, _ = load_split(config, "train")
    init_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    agent = build_agent(config, seed=init_seq)
    rng = np.random.default_rng(data_seq)
    params = agent.parameters()
    opt = Adam(params, lr=config.lr, clip_norm=config.clip_norm)
    result = TrainResult(agent, config)
    n, d = scenes.shape[0], config.latent_dim
    T, w = config.timesteps, config.glimpse

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss, epoch_terms, seen = 0.0, dict.fromkeys(TERM_NAMES, 0.0), 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            b = len(idx)
            locs = random_locations(rng, T, b, w, config.height, config.width)
            e_post = rng.standard_normal((T, b, d))
            e_prior = rng.standard_normal((T, b, d))
            agent.zero_grad()
            with dc.Tape() as tape:
                total, sums = episode_terms(agent, scenes[idx], locs, e_post, e_prior, config.route_gradients)
                loss = -1.0 * dc.mean(total)
            for name, value in sums.items():
                if not np.all(np.isfinite(value.data)):
                    raise NonFiniteLossError(name, epoch, result.step)
            tape.backward(loss)
            opt.step()
            result.step += 1
            epoch_loss += loss.item() * b
            for name, value in sums.items():
                epoch_terms[name] += float(value.data.sum())
            seen += b
        result.loss_log.append(epoch_loss / seen)
        result.term_log.append({k: v / seen for k, v in epoch_terms.items()})
        log.info("epoch %d loss %.4f terms %s", epoch, result.loss_log[-1], result.term_log[-1])
        if progress is not None:
            progress(epoch, result)
    return result


def initial_reconstruction_nats(config: TrainConfig, scenes: np.ndarray, seed: int = 0) -> float:
    """-t1 per pixel at initialisation (uninformative decoder gives ~ln 2)."""
    agent = build_agent(config)
    rng = np.random.default_rng(seed)
    b, d = scenes.shape[0], config.latent_dim
    locs = random_locations(rng, 1, b, config.glimpse, config.height, config.width)
    _, sums = episode_terms(agent, scenes, locs, rng.standard_normal((1, b, d)), rng.standard_normal((1, b, d)))
    return float(-sums["t1"].data.mean() / (config.height * config.width))


# ---------------------------------------------------------------------------
# probe


class Probe(Module):
    """One tanh hidden layer, softmax output over classes."""

    def __init__(self, latent_dim: int, hidden: int, rng: np.random.Generator, classes: int = NUM_CLASSES):
        self.latent_dim, self.hidden, self.classes = latent_dim, hidden, classes
        self.net = MLP([latent_dim, hidden, classes], rng, "probe")

    def logits(self, z) -> dc.Tensor:
        return self.net(z)

    def predict(self, z: np.ndarray) -> np.ndarray:
        with dc.no_record():
            return np.argmax(self.net(z).data, axis=-1)


def cross_entropy(logits: dc.Tensor, labels: np.ndarray) -> dc.Tensor:
    log_norm = dc.stable_logsumexp(logits, axis=-1)
    picked = logits[np.arange(len(labels)), labels]
    return dc.mean(log_norm - picked)


def posterior_latents(agent: ImaginativeAgent, scenes: np.ndarray, timesteps: int, seed: int = 0) -> np.ndarray:
    """Noise-free posterior-path codes z_K of full scenes.

    Both flows are conditioned on the features after a random-fixation episode
    of ``timesteps`` glimpses.
    """
    b = scenes.shape[0]
    rng = np.random.default_rng(seed)
    height, width, w = agent.height, agent.width, agent.glimpse
    with dc.no_record():
        h = agent.extractor.initial_state(b)
        for _ in range(timesteps):
            patches = np.empty((b, w * w))
            norm = np.empty((b, 2))
            for i in range(b):
                loc = fixation_random(rng, w, height, width)
                rows, cols = window_slices(loc, w)
                patches[i] = scenes[i, rows, cols].reshape(-1)
                norm[i] = normalized_location(loc, height, width)
            h = agent.extractor(h, patches, norm).data
        q = agent.vae.encode(scenes.reshape(b, -1))
        z_k = agent.vae.warp_flow(q.mean, h).output
        return agent.vae.unwarp_flow(z_k, h).output.data


def train_probe(
    agent: ImaginativeAgent,
    scenes: np.ndarray,
    labels: np.ndarray,
    timesteps: int,
    seed: int = 0,
    epochs: int = 20,
    hidden: int = 64,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> Probe:
    """Fit a probe on frozen posterior codes; the agent's parameters are only read."""
    z = posterior_latents(agent, scenes, timesteps, seed)
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    probe = Probe(agent.latent_dim, hidden, np.random.default_rng(init_seq))
    rng = np.random.default_rng(data_seq)
    opt = Adam(probe.parameters(), lr=lr)
    labels = np.asarray(labels, dtype=np.int64)
    for _ in range(epochs):
        order = rng.permutation(len(z))
        for start in range(0, len(z), batch_size):
            idx = order[start : start + batch_size]
            probe.zero_grad()
            with dc.Tape() as tape:
                loss = cross_entropy(probe.logits(z[idx]), labels[idx])
            tape.backward(loss)
            opt.step()
    return probe


def probe_checkpoint(probe: Probe) -> Checkpoint:
    cfg = {"latent_dim": probe.latent_dim, "hidden": probe.hidden, "classes": probe.classes}
    return Checkpoint(module_state(probe), cfg, 0, kind="probe")


def probe_from_checkpoint(ckpt: Checkpoint) -> Probe:
    if ckpt.kind != "probe":
        raise ValueError(f"expected a probe checkpoint, got {ckpt.kind!r}")
    c = ckpt.config
    probe = Probe(c["latent_dim"], c["hidden"], np.random.default_rng(0), c["classes"])
    load_state(probe, ckpt.params)
    return probe


def entropy_nats(counts: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of count vectors along the last axis."""
    counts = np.asarray(counts, dtype=float)
    p = counts / counts.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)

"""Shared toy configurations for gradient and rollout tests."""

import numpy as np

from imago import diffcore as dc
from imago.agent import ImaginativeAgent
from imago.harness.training import episode_terms
from imago.vae import VaeConfig

TOY_SIDE = 6
TOY_GLIMPSE = 3
TOY_VAE = VaeConfig(
    pixels=TOY_SIDE * TOY_SIDE,
    latent_dim=4,
    feature_dim=5,
    encoder_hidden=(7,),
    decoder_hidden=(6,),
    flow_multiplier=2,
    flow_layers=3,
)


def toy_agent(seed=0, jitter=0.1):
    """Small agent with every parameter perturbed off its initialisation."""
    rng = np.random.default_rng(seed)
    agent = ImaginativeAgent(TOY_SIDE, TOY_SIDE, TOY_GLIMPSE, TOY_VAE, rng, embed_dim=6)
    for p in agent.parameters():
        p.data = p.data + rng.normal(0.0, jitter, p.shape)
    return agent


def toy_episode(seed=1, batch=1, timesteps=2):
    rng = np.random.default_rng(seed)
    d = TOY_VAE.latent_dim
    scenes = (rng.random((batch, TOY_SIDE, TOY_SIDE)) > 0.5).astype(float)
    locs = np.array([[(1, 1)] * batch, [(4, 3)] * batch][:timesteps])
    return scenes, locs, rng.standard_normal((timesteps, batch, d)), rng.standard_normal((timesteps, batch, d))


def negative_objective(agent, episode, route, terms=None):
    """Program for -sum_t L_t, or for the signed subset ``terms`` of it."""
    signs = {"t1": 1.0, "t2": -1.0, "t3": -1.0, "t4": 1.0, "t5": -1.0}

    def program():
        total, sums = episode_terms(agent, *episode, route_gradients=route)
        if terms is not None:
            total = None
            for name in terms:
                part = signs[name] * sums[name]
                total = part if total is None else total + part
        return -1.0 * dc.sum(total)

    return program

"""Per-timestep metrics for uncertainty-driven and random sensing."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..agent import POLICIES, ImaginativeAgent, iter_batch_rollout
from .serialization import MetricsRow
from .training import NUM_CLASSES, Probe, entropy_nats


def bce(probs: np.ndarray, truth: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-pixel binary cross-entropy of probabilities against targets."""
    p = np.clip(probs, eps, 1.0 - eps)
    return -(truth * np.log(p) + (1.0 - truth) * np.log1p(-p))


def bce_from_logits(logits: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return truth * np.logaddexp(0.0, -logits) + (1.0 - truth) * np.logaddexp(0.0, logits)


def category_entropy(predicted: np.ndarray, classes: int = NUM_CLASSES) -> np.ndarray:
    """Entropy of the predicted-class histogram along the last axis."""
    predicted = np.asarray(predicted)
    counts = np.stack([(predicted == k).sum(axis=-1) for k in range(classes)], axis=-1)
    return entropy_nats(counts)


def evaluate(
    agent: ImaginativeAgent,
    scenes: np.ndarray,
    labels: np.ndarray | None,
    probe: Probe | None = None,
    policies=POLICIES,
    timesteps: int = 5,
    n: int = 100,
    seed: int = 0,
    repeats: int = 10,
    chunk: int = 50,
) -> list[MetricsRow]:
    """Metrics averaged over scenes and ``repeats`` seeds.

    Both policies share the seed of each repeat, so their first (random)
    fixation coincides.
    """
    scenes = np.asarray(scenes, dtype=float)
    use_probe = probe is not None and labels is not None
    acc = {(p, t): defaultdict(float) for p in policies for t in range(1, timesteps + 1)}
    count = 0
    for r in range(repeats):
        for start in range(0, len(scenes), chunk):
            batch = scenes[start : start + chunk]
            for policy in policies:
                steps = iter_batch_rollout(agent, batch, timesteps, policy, n, (seed, r, start))
                for t, step in enumerate(steps, 1):
                    row = acc[(policy, t)]
                    row["bce"] += bce_from_logits(step.logits, batch[:, None]).mean(axis=(1, 2, 3)).sum()
                    row["max_var"] += step.variance_map.reshape(len(batch), -1).max(axis=1).sum()
                    if use_probe:
                        latents = step.latents
                        pred = probe.predict(latents.reshape(-1, latents.shape[-1])).reshape(len(batch), -1)
                        row["cat_entropy"] += category_entropy(pred).sum()
                        mean_pred = probe.predict(latents.mean(axis=1))
                        row["probe_acc"] += (mean_pred == labels[start : start + chunk]).sum()
            count += len(batch)
    rows = []
    for policy in policies:
        for t in range(1, timesteps + 1):
            a = acc[(policy, t)]
            rows.append(
                MetricsRow(
                    policy,
                    t,
                    a["bce"] / count,
                    a["max_var"] / count,
                    a["cat_entropy"] / count if use_probe else None,
                    a["probe_acc"] / count if use_probe else None,
                )
            )
    return rows

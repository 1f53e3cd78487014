"""Non-IID client splits from a per-class Dirichlet draw."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

MAX_RESAMPLES = 100


def _draw(labels: np.ndarray, k: int, alpha: float, rng: np.random.Generator) -> list:
    parts = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(k, alpha))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
        for client, chunk in enumerate(np.split(idx, cuts)):
            parts[client].extend(chunk.tolist())
    return parts


def dirichlet_partition(labels, num_clients: int, alpha: float, rng) -> list:
    """Disjoint, covering index arrays, one per client.

    Draws with an empty client are redrawn up to ``MAX_RESAMPLES`` times;
    after that each empty client takes one sample of the rarest class held
    by the largest client.
    """
    labels = np.asarray(labels)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if num_clients > labels.size:
        raise ValueError(f"cannot give {num_clients} clients at least one of {labels.size} samples")
    rng = np.random.default_rng(rng)
    if num_clients == 1:
        return [np.arange(labels.size)]
    for _ in range(MAX_RESAMPLES):
        parts = _draw(labels, num_clients, alpha, rng)
        if all(parts):
            break
    else:
        logger.warning("dirichlet partition left empty clients after %d draws; spilling samples", MAX_RESAMPLES)
        for p in parts:
            if not p:
                donor = max(parts, key=len)
                donor_labels = labels[donor]
                values, counts = np.unique(donor_labels, return_counts=True)
                rare = values[np.argmin(counts)]
                pos = int(np.flatnonzero(donor_labels == rare)[0])
                p.append(donor.pop(pos))
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]

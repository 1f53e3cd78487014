"""FedAvg and pairwise-masked secure aggregation over a fixed-point ring."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

FRACTIONAL_BITS = 40
_SCALE = float(1 << FRACTIONAL_BITS)
# |x| must stay below 2**(63 - FRACTIONAL_BITS) to fit the signed ring
FIXED_LIMIT = float(1 << (63 - FRACTIONAL_BITS))


class AggregationError(ValueError):
    pass


def fedavg(updates, weights):
    """Weighted elementwise mean of equally shaped parameter vectors."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(updates) != len(weights) or len(updates) == 0:
        raise AggregationError("need one weight per update")
    if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
        raise AggregationError(f"weights must be non-negative and sum to 1, got sum {weights.sum()!r}")
    shape = np.shape(updates[0])
    if any(np.shape(u) != shape for u in updates):
        raise AggregationError("updates differ in shape")
    out = np.zeros(shape)
    for u, w in zip(updates, weights):
        out = out + w * np.asarray(u, dtype=np.float64)
    return out


def sample_weights(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.sum()


def to_fixed(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(np.abs(x) >= FIXED_LIMIT):
        raise AggregationError(f"values must be finite with magnitude below {FIXED_LIMIT}")
    return np.round(x * _SCALE).astype(np.int64).view(np.uint64)


def from_fixed(u) -> np.ndarray:
    return np.asarray(u, dtype=np.uint64).view(np.int64).astype(np.float64) / _SCALE


def pairwise_mask(seed: int, round: int, i: int, j: int, size: int) -> np.ndarray:
    """Mask shared by clients i < j, uniform over the ring (simulated key agreement)."""
    if i >= j:
        raise ValueError("pair must be ordered i < j")
    gen = np.random.default_rng([seed, 0x5A, round, i, j]).bit_generator
    return gen.random_raw(size).astype(np.uint64)


def masked_submission(update, index: int, num_clients: int, seed: int, round: int) -> np.ndarray:
    """u_i + sum_{j>i} m_ij - sum_{j<i} m_ji in the uint64 ring."""
    s = to_fixed(update)
    size = s.size
    for j in range(num_clients):
        if j > index:
            s = s + pairwise_mask(seed, round, index, j, size)
        elif j < index:
            s = s - pairwise_mask(seed, round, j, index, size)
    return s


def ring_sum(submissions) -> np.ndarray:
    out = np.zeros_like(np.asarray(submissions[0], dtype=np.uint64))
    for s in submissions:
        out = out + np.asarray(s, dtype=np.uint64)
    return out


def secure_aggregate(updates, seed: int, round: int = 0, return_submissions: bool = False):
    """Sum of client update vectors without exposing any single one.

    Returns the float aggregate (and the masked submissions the server saw
    when ``return_submissions``).  With fewer than two clients masks cannot
    hide anything; the single update is submitted directly and a warning is
    logged.
    """
    if len(updates) == 0:
        raise AggregationError("no updates")
    k = len(updates)
    shape = np.shape(updates[0])
    if any(np.shape(u) != shape for u in updates):
        raise AggregationError("updates differ in shape")
    with np.errstate(over="ignore"):
        if k < 2:
            logger.warning("secure aggregation with %d client: update submitted without masking", k)
            subs = [to_fixed(np.ravel(u)) for u in updates]
        else:
            subs = [masked_submission(np.ravel(u), i, k, seed, round) for i, u in enumerate(updates)]
        total = ring_sum(subs)
    agg = from_fixed(total).reshape(shape)
    return (agg, subs) if return_submissions else agg

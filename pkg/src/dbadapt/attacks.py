"""Feature-similarity pairing attack on permuted block outputs.

A curious client holds permuted batches V_l = B_l[pi_l] for the blocks it
receives.  If b_l and b_{l+g} of the same sample are closer to each other
than to other samples, an assignment on the L2 distance matrix re-pairs the
rows and undoes the relative permutation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .kernels import KernelConfig
from .privacy import Permutation, apply_permutation, gen_permutations, sbs_mask
from .transformer import APPROXIMATED, TransformerModel, block_outputs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairingResult:
    distance_matrix: np.ndarray
    inferred_mapping: Permutation
    true_mapping: Permutation
    accuracy: float
    first_block: int
    second_block: int

    @property
    def gap(self) -> int:
        return self.second_block - self.first_block


def pairwise_l2(a, b) -> np.ndarray:
    """(i, j) -> ||a_i - b_j||_2 with each sample flattened."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    return cdist(a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1))


def _greedy_assignment(d: np.ndarray) -> np.ndarray:
    n = d.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    order = np.lexsort((np.tile(np.arange(n), n), np.repeat(np.arange(n), n), d.ravel()))
    used_rows, used_cols = set(), set()
    for flat in order:
        i, j = divmod(int(flat), n)
        if i not in used_rows and j not in used_cols:
            out[i] = j
            used_rows.add(i)
            used_cols.add(j)
    return out


def match_permutation(distances, greedy: bool = False) -> Permutation:
    """Row i of the first batch is paired with row mapping[i] of the second.

    Default is the minimum-total-cost assignment; ``greedy`` takes the
    globally closest free pair repeatedly.  Ties break toward lower indices.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {d.shape}")
    if greedy:
        return Permutation(_greedy_assignment(d))
    rows, cols = linear_sum_assignment(d)
    out = np.empty(d.shape[0], dtype=np.int64)
    out[rows] = cols
    return Permutation(out)


def attack_pair(view_a, view_b, pi_a: Permutation, pi_b: Permutation, first: int, second: int, greedy: bool = False) -> PairingResult:
    """Attack one pair of permuted views; the truth is pi_b^-1 pi_a."""
    d = pairwise_l2(view_a, view_b)
    inferred = match_permutation(d, greedy)
    truth = pi_b.inverse() @ pi_a
    acc = float(np.mean(inferred.mapping == truth.mapping))
    return PairingResult(d, inferred, truth, acc, first, second)


def client_views(model: TransformerModel, x, kernels: KernelConfig, rng):
    """Permuted plaintext block outputs b_1..b_L as the client decrypts them, plus the permutations."""
    blocks = block_outputs(model, x, APPROXIMATED, kernels)
    perms = gen_permutations(len(x), len(blocks), rng)
    views = [apply_permutation(b, p) for b, p in zip(blocks, perms.per_block)]
    return views, perms.per_block[: len(blocks)]


def attack_by_gap(views, perms, gap: int, greedy: bool = False) -> list:
    if gap < 1:
        raise ValueError("gap must be >= 1")
    return [
        attack_pair(views[l], views[l + gap], perms[l], perms[l + gap], l + 1, l + gap + 1, greedy)
        for l in range(len(views) - gap)
    ]


def attack_sampled(views, perms, mask, greedy: bool = False) -> list:
    """Attack each pair of consecutive blocks the mask exposes."""
    kept = [l for l in range(len(views)) if mask[l]]
    return [attack_pair(views[a], views[b], perms[a], perms[b], a + 1, b + 1, greedy) for a, b in zip(kept, kept[1:])]


@dataclass
class AttackSummary:
    batch_size: int
    seeds: int
    chance: float
    by_gap: dict  # gap -> mean accuracy over pairs and seeds
    sampled: float  # mean accuracy over pairs exposed by sampling masks
    sampled_pairs: int
    example_pairs: list  # PairingResult from the first seed, for export

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "seeds": self.seeds,
            "chance": self.chance,
            "accuracy_by_gap": {str(g): v for g, v in sorted(self.by_gap.items())},
            "accuracy_sampled": self.sampled,
            "sampled_pairs": self.sampled_pairs,
        }


def attack_experiment(
    model: TransformerModel,
    x,
    kernels: KernelConfig,
    batch_size: int = 8,
    seeds: int = 10,
    constrained: bool = False,
    greedy: bool = False,
    seed: int = 0,
) -> AttackSummary:
    """Mean pairing accuracy per block gap and under sampling masks.

    Each seed draws a batch from ``x``, fresh permutations and one sampling
    mask.  Sampled pairs always have gap >= 2, so with no exposed pair a
    seed contributes nothing to ``sampled``.
    """
    x = np.asarray(x)
    if batch_size > len(x):
        raise ValueError(f"batch_size {batch_size} exceeds the {len(x)} available samples")
    if batch_size == 1:
        logger.warning("batch of one sample: pairing is trivially correct")
    L = model.config.num_blocks
    per_gap = {g: [] for g in range(1, L)}
    sampled = []
    examples = []
    for s in range(seeds):
        rng = np.random.default_rng([seed, s])
        idx = np.sort(rng.choice(len(x), size=batch_size, replace=False))
        views, perms = client_views(model, x[idx], kernels, rng)
        for g in per_gap:
            results = attack_by_gap(views, perms, g, greedy)
            per_gap[g].extend(r.accuracy for r in results)
            if s == 0:
                examples.extend(results)
        mask = sbs_mask(L, constrained, rng)
        sampled.extend(r.accuracy for r in attack_sampled(views, perms, mask, greedy))
    return AttackSummary(
        batch_size=batch_size,
        seeds=seeds,
        chance=1.0 / batch_size,
        by_gap={g: float(np.mean(v)) for g, v in per_gap.items() if v},
        sampled=float(np.mean(sampled)) if sampled else float("nan"),
        sampled_pairs=len(sampled),
        example_pairs=examples,
    )


def write_distance_csvs(results, out_dir) -> list:
    """One CSV per attacked pair: the n x n distance matrix, rows = first block."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in results:
        path = out_dir / f"distances_b{r.first_block}_b{r.second_block}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in r.distance_matrix:
                w.writerow([f"{v:.10g}" for v in row])
        paths.append(path)
    return paths

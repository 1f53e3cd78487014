"""Sample permutations with relative-product disclosure, stochastic block
sampling (SBS) and homomorphic noise masking.

Permutation convention: ``apply_permutation(B, p)`` returns ``B[p.mapping]``
(row i of the output is row ``p.mapping[i]`` of the input), i.e. the right
action B·P.  Composition ``p @ q`` is defined so that
``apply(apply(B, p), q) == apply(B, p @ q)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import he

# exhaustive witness enumeration is n! work
MAX_EXHAUSTIVE_N = 8
DEFAULT_NOISE_MULTIPLIER = 30.0


@dataclass(frozen=True, eq=False)
class Permutation:
    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError("mapping must be a bijection on [0, n)")
        m.setflags(write=False)
        object.__setattr__(self, "mapping", m)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @property
    def n(self) -> int:
        return int(self.mapping.size)

    def inverse(self) -> "Permutation":
        return Permutation(np.argsort(self.mapping))

    def __matmul__(self, other: "Permutation") -> "Permutation":
        if other.n != self.n:
            raise ValueError(f"cannot compose permutations of size {self.n} and {other.n}")
        return Permutation(self.mapping[other.mapping])

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.mapping, other.mapping)

    def __hash__(self):
        return hash(self.mapping.tobytes())

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.mapping, np.arange(self.n)))

    def matrix(self) -> np.ndarray:
        """Matrix P with apply_permutation(B, p) == P @ B for 2-D B."""
        return np.eye(self.n)[self.mapping]

    def __repr__(self):
        return f"Permutation({self.mapping.tolist()})"


def apply_permutation(batch, p: Permutation):
    """Reorder the leading (sample) axis; works on ndarray, Tensor and Ciphertext."""
    if len(batch) != p.n:
        raise ValueError(f"batch has {len(batch)} samples, permutation has {p.n}")
    if isinstance(batch, np.ndarray):
        return batch[p.mapping]
    return batch.take(p.mapping, axis=0)


@dataclass(frozen=True)
class DisclosedRelatives:
    """What a client learns about one round's permutations.

    ``relatives[0]`` is Π_L^{-1}Π_1 and ``relatives[l-1]`` is Π_{l-1}^{-1}Π_l
    for l in [2, L]; ``label_relative`` is Π_L^{-1}Π_{L+1}, which moves the
    final adapter output into the frame the server uses for labels.
    """

    relatives: tuple
    label_relative: Permutation

    @property
    def num_blocks(self) -> int:
        return len(self.relatives)

    @classmethod
    def identity(cls, n: int, num_blocks: int) -> "DisclosedRelatives":
        e = Permutation.identity(n)
        return cls(relatives=tuple(e for _ in range(num_blocks)), label_relative=e)


@dataclass(frozen=True)
class PermutationSet:
    per_block: tuple  # Π_1 .. Π_{L+1}
    disclosed: DisclosedRelatives = field(init=False)

    def __post_init__(self):
        if len(self.per_block) < 2:
            raise ValueError("need at least one block permutation plus the label permutation")
        object.__setattr__(self, "disclosed", relative_products(self.per_block))

    @property
    def num_blocks(self) -> int:
        return len(self.per_block) - 1

    @property
    def n(self) -> int:
        return self.per_block[0].n

    @property
    def relative_products(self) -> tuple:
        return self.disclosed.relatives

    @property
    def label(self) -> Permutation:
        return self.per_block[-1]

    def left_multiplied(self, s: Permutation) -> "PermutationSet":
        """Every Π_l replaced by S Π_l (the non-uniqueness construction)."""
        return PermutationSet(tuple(s @ p for p in self.per_block))

    @classmethod
    def identity(cls, n: int, num_blocks: int) -> "PermutationSet":
        return cls(tuple(Permutation.identity(n) for _ in range(num_blocks + 1)))


def relative_products(per_block: Sequence[Permutation]) -> DisclosedRelatives:
    blocks = list(per_block[:-1])
    L = len(blocks)
    rel = [blocks[L - 1].inverse() @ blocks[0]]
    rel += [blocks[i - 1].inverse() @ blocks[i] for i in range(1, L)]
    return DisclosedRelatives(relatives=tuple(rel), label_relative=blocks[L - 1].inverse() @ per_block[-1])


def cycle_product(relatives: Sequence[Permutation]) -> Permutation:
    """(Π_1^{-1}Π_2)(Π_2^{-1}Π_3)...(Π_L^{-1}Π_1); identity for consistent relatives."""
    out = Permutation.identity(relatives[0].n)
    for p in list(relatives[1:]) + [relatives[0]]:
        out = out @ p
    return out


def gen_permutations(n: int, num_blocks: int, rng) -> PermutationSet:
    """L + 1 independent uniform permutations of n samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    rng = np.random.default_rng(rng)
    return PermutationSet(tuple(Permutation(rng.permutation(n)) for _ in range(num_blocks + 1)))


def proposition1_witnesses(n: int, trials: int = 1, seed: int = 0) -> int:
    """Count triples (A', B', C') of n x n permutations reproducing P, Q, R.

    For each trial, secret (A, B, C) are drawn and P = A^{-1}B, Q = B^{-1}C,
    R = C^{-1}A disclosed.  Every A' is enumerated; P and Q force B' = A'P and
    C' = B'Q, and the triple counts when C'^{-1}A' = R.  Returns the count
    (identical across trials; a mismatch raises).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > MAX_EXHAUSTIVE_N:
        raise ValueError(f"exhaustive mode supports n <= {MAX_EXHAUSTIVE_N}; use search_space(n)")
    rng = np.random.default_rng(seed)
    count = None
    for _ in range(max(1, trials)):
        a, b, c = (Permutation(rng.permutation(n)) for _ in range(3))
        p, q, r = a.inverse() @ b, b.inverse() @ c, c.inverse() @ a
        found = 0
        for perm in itertools.permutations(range(n)):
            a2 = Permutation(np.array(perm))
            b2 = a2 @ p
            c2 = b2 @ q
            if c2.inverse() @ a2 == r:
                found += 1
        if count is not None and found != count:
            raise AssertionError("witness count differs between trials")
        count = found
    return int(count)


def search_space(n: int) -> int:
    """Number of candidate permutation sets a brute-force attacker must test: n!."""
    return math.factorial(n)


def client_align_chain(received, disclosed: DisclosedRelatives, adapter_fn, head_fn, mask=None):
    """Run the adapter chain on permuted block outputs using only relative products.

    ``received[l]`` is B_{l+1}·Π_{l+1} (or None when the block was not
    selected); ``adapter_fn(l, z)`` evaluates g_{l+1}.  Returns logits in the
    Π_{L+1} frame.  No Π_l itself is needed.
    """
    L = len(received)
    if disclosed.num_blocks != L or any(r is None for r in disclosed.relatives) or disclosed.label_relative is None:
        raise ValueError(f"need {L} relative products plus the label relative, got {disclosed.num_blocks}")
    mask = [True] * L if mask is None else list(mask)
    blocks = [b if (m and b is not None) else None for b, m in zip(received, mask)]
    ref = next((b for b in received if b is not None), None)
    if ref is None:
        raise ValueError("no block outputs received")

    def value(b):
        return b if b is not None else ref * 0.0

    # H'_0 = (B_L Π_L)(Π_L^{-1} Π_1)
    h = apply_permutation(value(blocks[L - 1]), disclosed.relatives[0])
    for l in range(L):
        z = h if blocks[l] is None else blocks[l] + h
        h = adapter_fn(l, z) + h  # H_{l+1} in the Π_{l+1} frame
        nxt = disclosed.relatives[l + 1] if l + 1 < L else disclosed.label_relative
        h = apply_permutation(h, nxt)
    return head_fn(h)


# stochastic block sampling


@dataclass(frozen=True, eq=False)
class SamplingMask:
    selected: np.ndarray
    constrained: bool = False

    def __post_init__(self):
        s = np.asarray(self.selected, dtype=bool)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("mask must be a non-empty vector")
        if np.any(s[1:] & s[:-1]):
            raise ValueError("mask selects two consecutive blocks")
        if self.constrained and not (s[0] or s[-1]):
            raise ValueError("constrained mask must select the first or last block")
        s.setflags(write=False)
        object.__setattr__(self, "selected", s)

    def __len__(self):
        return int(self.selected.size)

    def __getitem__(self, i):
        return bool(self.selected[i])

    def __iter__(self):
        return iter(bool(v) for v in self.selected)

    def __eq__(self, other):
        return isinstance(other, SamplingMask) and np.array_equal(self.selected, other.selected)

    def count(self) -> int:
        return int(self.selected.sum())

    def tolist(self) -> list:
        return [bool(v) for v in self.selected]


def _chain(u: np.ndarray) -> np.ndarray:
    """Run the SBS chain on uniforms u of shape (draws, L)."""
    out = np.zeros(u.shape, dtype=bool)
    prev = np.zeros(u.shape[0], dtype=bool)
    for l in range(u.shape[1]):
        cur = ~prev & (u[:, l] < 0.5)
        out[:, l] = cur
        prev = cur
    return out


def sbs_masks(L: int, draws: int, rng, constrained: bool = False) -> np.ndarray:
    """``draws`` independent SBS masks as a boolean (draws, L) array.

    Constrained masks are rejection sampled until the first or last block is
    selected.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    rng = np.random.default_rng(rng)
    out = _chain(rng.random((draws, L)))
    if constrained:
        bad = ~(out[:, 0] | out[:, -1])
        while bad.any():
            out[bad] = _chain(rng.random((int(bad.sum()), L)))
            bad = ~(out[:, 0] | out[:, -1])
    return out


def sbs_mask(L: int, constrained: bool = False, rng=None) -> SamplingMask:
    return SamplingMask(sbs_masks(L, 1, rng, constrained)[0], constrained)


def sbs_probabilities(L: int) -> np.ndarray:
    """p_1 = 0.5, p_l = 0.5 (1 - p_{l-1})."""
    if L < 1:
        raise ValueError("L must be >= 1")
    p = np.empty(L)
    p[0] = 0.5
    for l in range(1, L):
        p[l] = 0.5 * (1.0 - p[l - 1])
    return p


def sbs_expected_count(L: int, T: int = 1) -> float:
    if T < 1:
        raise ValueError("T must be >= 1")
    return float(T * sbs_probabilities(L).sum())


# noise masking of non-selected blocks


class NoiseLedgerError(KeyError):
    pass


@dataclass(frozen=True)
class NoiseEntry:
    key: tuple
    noise: np.ndarray


def noise_mask(c: he.Ciphertext, rng, scale: float, multiplier: float = DEFAULT_NOISE_MULTIPLIER, key=None):
    """Add uniform noise in [-multiplier*scale, multiplier*scale] homomorphically."""
    if not scale > 0:
        raise ValueError("noise scale must be positive")
    rng = np.random.default_rng(rng)
    bound = multiplier * scale
    noise = rng.uniform(-bound, bound, size=c.shape)
    return c + noise, NoiseEntry(key=key, noise=noise)


def noise_unmask(c: he.Ciphertext, entry: NoiseEntry) -> he.Ciphertext:
    if entry is None:
        raise NoiseLedgerError("no noise entry to remove")
    return c - entry.noise


class NoiseMaskLedger:
    """Server-side store of the noise added to each (client, round, block) send."""

    def __init__(self):
        self._entries: dict = {}

    def __len__(self):
        return len(self._entries)

    def mask(self, c: he.Ciphertext, key: tuple, rng, scale: float, multiplier: float = DEFAULT_NOISE_MULTIPLIER):
        if key in self._entries:
            raise NoiseLedgerError(f"block {key} is already masked")
        masked, entry = noise_mask(c, rng, scale, multiplier, key=key)
        self._entries[key] = entry
        return masked

    def unmask(self, c: he.Ciphertext, key: tuple) -> he.Ciphertext:
        entry = self._entries.pop(key, None)
        if entry is None:
            raise NoiseLedgerError(f"no noise recorded for {key}")
        return noise_unmask(c, entry)

    def pending(self) -> list:
        return list(self._entries)

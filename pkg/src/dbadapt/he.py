"""Leveled homomorphic arithmetic simulator.

Ciphertexts carry their plaintext privately and only expose additions,
multiplications (elementwise and matrix) and data-movement operations.
Every ciphertext-by-ciphertext multiply consumes one level of the
multiplicative depth budget of the key's :class:`EncryptionParams`; going
past the budget raises :class:`DepthBudgetExceeded`.  Sizes follow a fixed
expansion ratio so the protocol can account bytes on the wire.

The class implements enough of the ndarray surface (``@``, ``sum``,
``reshape``, ``swapaxes``, ``take`` ...) that the polynomial kernels run on
it unchanged.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import audit

DEFAULT_MAX_DEPTH = 64
DEFAULT_EXPANSION = 2.79
DEFAULT_NOISE = 1e-6


class HEError(Exception):
    pass


class KeyMismatchError(HEError):
    """Ciphertext used with a key (or another ciphertext) it does not belong to."""


class DepthBudgetExceeded(HEError):
    def __init__(self, depth: int, max_depth: int, op: str):
        super().__init__(f"{op} would reach multiplicative depth {depth}, budget is {max_depth}")
        self.depth = depth
        self.max_depth = max_depth


class ShapeMismatchError(HEError, ValueError):
    pass


class NonFiniteInputError(HEError, ValueError):
    pass


@dataclass(frozen=True)
class EncryptionParams:
    max_depth: int = DEFAULT_MAX_DEPTH
    expansion_ratio: float = DEFAULT_EXPANSION
    noise_tolerance: float = DEFAULT_NOISE
    # levels charged for a ciphertext-by-plaintext multiply
    plain_mul_depth: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if not self.expansion_ratio >= 1:
            raise ValueError(f"expansion_ratio must be >= 1, got {self.expansion_ratio}")
        if not self.noise_tolerance >= 0:
            raise ValueError(f"noise_tolerance must be >= 0, got {self.noise_tolerance}")
        if self.plain_mul_depth not in (0, 1):
            raise ValueError("plain_mul_depth must be 0 or 1")


@dataclass(frozen=True)
class KeyHandle:
    party_id: str
    key_id: str
    params: EncryptionParams


class _KeyRegistry:
    def __init__(self):
        self._lock = threading.Lock()
        self._ids = itertools.count()
        self._entries: dict[str, tuple[str, EncryptionParams, np.random.Generator]] = {}

    def register(self, party_id: str, params: EncryptionParams, seed) -> str:
        with self._lock:
            n = next(self._ids)
            key_id = f"k{n:06d}"
            rng = np.random.default_rng(seed if seed is not None else [0x5EED, n])
            self._entries[key_id] = (party_id, params, rng)
        return key_id

    def owner(self, key_id: str) -> str:
        return self._entries[key_id][0]

    def params(self, key_id: str) -> EncryptionParams:
        return self._entries[key_id][1]

    def rng(self, key_id: str) -> np.random.Generator:
        return self._entries[key_id][2]


_registry = _KeyRegistry()
_op_counter: contextvars.ContextVar[Optional[Counter]] = contextvars.ContextVar("dbadapt_he_ops", default=None)


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count homomorphic operations executed inside the block, by name."""
    counts: Counter = Counter()
    token = _op_counter.set(counts)
    try:
        yield counts
    finally:
        _op_counter.reset(token)


def _tick(op: str) -> None:
    counts = _op_counter.get()
    if counts is not None:
        counts[op] += 1


def keygen(party_id: str, params: Optional[EncryptionParams] = None, seed=None) -> KeyHandle:
    params = params if params is not None else EncryptionParams()
    key_id = _registry.register(party_id, params, seed)
    return KeyHandle(party_id=party_id, key_id=key_id, params=params)


def key_owner(key_id: str) -> str:
    return _registry.owner(key_id)


class Ciphertext:
    """Encrypted tensor.  The plaintext is reachable only through :func:`decrypt`."""

    __slots__ = ("__values", "key_id", "depth_used", "element_bytes", "params")
    __array_ufunc__ = None  # keep numpy from broadcasting element by element

    def __init__(self, values: np.ndarray, key_id: str, depth_used: int, element_bytes: int, params: EncryptionParams):
        self.__values = values
        self.key_id = key_id
        self.depth_used = depth_used
        self.element_bytes = element_bytes
        self.params = params

    def _derive(self, values, depth):
        return Ciphertext(values, self.key_id, depth, self.element_bytes, self.params)

    @property
    def shape(self) -> tuple:
        return self.__values.shape

    @property
    def ndim(self) -> int:
        return self.__values.ndim

    @property
    def size(self) -> int:
        return int(self.__values.size)

    @property
    def plain_bytes(self) -> int:
        return self.size * self.element_bytes

    @property
    def nbytes(self) -> int:
        return ciphertext_bytes(self)

    def __repr__(self):
        return f"Ciphertext(shape={self.shape}, key={self.key_id}, depth={self.depth_used}/{self.params.max_depth})"

    # arithmetic
    def __add__(self, other):
        return he_add(self, other) if isinstance(other, Ciphertext) else he_add_plain(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return he_sub(self, other) if isinstance(other, Ciphertext) else he_add_plain(self, -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return he_add_plain(-self, other)

    def __neg__(self):
        _tick("negate")
        return self._derive(-self.__values, self.depth_used)

    def __mul__(self, other):
        return he_mul(self, other) if isinstance(other, Ciphertext) else he_mul_plain(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return he_matmul(self, other) if isinstance(other, Ciphertext) else he_matmul_plain(self, other)

    def __rmatmul__(self, other):
        return he_matmul_plain(self, other, plain_on_left=True)

    def __truediv__(self, other):
        if isinstance(other, Ciphertext):
            raise TypeError("division of ciphertexts is not a homomorphic operation")
        return he_mul_plain(self, 1.0 / np.asarray(other, dtype=np.float64))

    # data movement and reductions (level-free)
    def sum(self, axis=None, keepdims=False):
        _tick("sum")
        return self._derive(self.__values.sum(axis=axis, keepdims=keepdims), self.depth_used)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        _tick("reshape")
        return self._derive(self.__values.reshape(*shape), self.depth_used)

    def transpose(self, *axes):
        _tick("transpose")
        return self._derive(self.__values.transpose(*axes), self.depth_used)

    def swapaxes(self, a, b):
        _tick("transpose")
        return self._derive(self.__values.swapaxes(a, b), self.depth_used)

    def take(self, indices, axis=0):
        _tick("take")
        return self._derive(np.take(self.__values, np.asarray(indices), axis=axis), self.depth_used)

    def __len__(self):
        return self.shape[0]


def _hidden(c: Ciphertext) -> np.ndarray:
    return c._Ciphertext__values


def _check_same_key(a: Ciphertext, b: Ciphertext) -> None:
    if a.key_id != b.key_id:
        raise KeyMismatchError(f"ciphertexts under different keys ({a.key_id} vs {b.key_id})")


def _check_depth(depth: int, params: EncryptionParams, op: str) -> int:
    if depth > params.max_depth:
        raise DepthBudgetExceeded(depth, params.max_depth, op)
    return depth


def _apply(fn, a, b):
    try:
        return fn(a, b)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from None


def _plain(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64)


def encrypt(key: KeyHandle, x) -> Ciphertext:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("cannot encrypt non-finite values")
    element_bytes = x.dtype.itemsize if x.dtype.kind == "f" else 8
    values = x.astype(np.float64, copy=True)
    eps = key.params.noise_tolerance
    if eps > 0:
        values += _registry.rng(key.key_id).uniform(-eps, eps, size=values.shape)
    _tick("encrypt")
    return Ciphertext(values, key.key_id, 0, element_bytes, key.params)


def decrypt(key: KeyHandle, c: Ciphertext) -> np.ndarray:
    log = audit.current_log()
    if log is not None:
        log.note_decrypt(audit.current_actor(), key_owner(c.key_id))
    if key.key_id != c.key_id:
        raise KeyMismatchError(f"key {key.key_id} cannot decrypt a ciphertext under {c.key_id}")
    _tick("decrypt")
    return _hidden(c).copy()


def he_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_same_key(a, b)
    _tick("add")
    return a._derive(_apply(np.add, _hidden(a), _hidden(b)), max(a.depth_used, b.depth_used))


def he_sub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_same_key(a, b)
    _tick("add")
    return a._derive(_apply(np.subtract, _hidden(a), _hidden(b)), max(a.depth_used, b.depth_used))


def he_add_plain(a: Ciphertext, p) -> Ciphertext:
    _tick("add_plain")
    return a._derive(_apply(np.add, _hidden(a), _plain(p)), a.depth_used)


def he_mul(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_same_key(a, b)
    depth = _check_depth(max(a.depth_used, b.depth_used) + 1, a.params, "he_mul")
    _tick("mul")
    return a._derive(_apply(np.multiply, _hidden(a), _hidden(b)), depth)


def he_mul_plain(a: Ciphertext, p) -> Ciphertext:
    depth = _check_depth(a.depth_used + a.params.plain_mul_depth, a.params, "he_mul_plain")
    _tick("mul_plain")
    return a._derive(_apply(np.multiply, _hidden(a), _plain(p)), depth)


def he_matmul(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_same_key(a, b)
    depth = _check_depth(max(a.depth_used, b.depth_used) + 1, a.params, "he_matmul")
    _tick("matmul")
    return a._derive(_apply(np.matmul, _hidden(a), _hidden(b)), depth)


def he_matmul_plain(a: Ciphertext, p, plain_on_left: bool = False) -> Ciphertext:
    depth = _check_depth(a.depth_used + a.params.plain_mul_depth, a.params, "he_matmul_plain")
    _tick("matmul_plain")
    if plain_on_left:
        values = _apply(np.matmul, _plain(p), _hidden(a))
    else:
        values = _apply(np.matmul, _hidden(a), _plain(p))
    return a._derive(values, depth)


def expanded_bytes(plain_bytes: int, expansion_ratio: float) -> int:
    # round before ceil so 100 * 2.0 style products are not bumped by float fuzz
    return int(math.ceil(round(expansion_ratio * plain_bytes, 6)))


def ciphertext_bytes(c: Ciphertext) -> int:
    return expanded_bytes(c.plain_bytes, c.params.expansion_ratio)

"""In-process message channel with byte accounting."""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .. import he
from ..privacy import DisclosedRelatives, Permutation, SamplingMask

SERVER = "server"

CIPHERTEXT = "ciphertext"
RELATIVES = "relative-products"
MASK_META = "mask-metadata"
AGGREGATE = "aggregate"
KINDS = (CIPHERTEXT, RELATIVES, MASK_META, AGGREGATE)

UP = "up"  # client -> server
DOWN = "down"  # server -> client

# permutation indices travel as 32-bit integers
INDEX_BYTES = 4


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    round: int
    tag: str
    kind: str
    nbytes: int
    block: Optional[int] = None

    @property
    def client(self) -> str:
        return self.receiver if self.sender == SERVER else self.sender

    @property
    def direction(self) -> str:
        return DOWN if self.sender == SERVER else UP

    def to_dict(self) -> dict:
        return asdict(self)


def payload_bytes(kind: str, payload) -> int:
    if kind == CIPHERTEXT:
        if not isinstance(payload, he.Ciphertext):
            raise TypeError("ciphertext messages must carry a Ciphertext")
        return he.ciphertext_bytes(payload)
    if kind == RELATIVES:
        if isinstance(payload, DisclosedRelatives):
            return INDEX_BYTES * sum(p.n for p in payload.relatives + (payload.label_relative,))
        return INDEX_BYTES * sum(p.n for p in payload)
    if kind == MASK_META:
        if isinstance(payload, SamplingMask):
            return len(payload)
        return int(np.asarray(payload).size)
    if kind == AGGREGATE:
        return int(np.asarray(payload).nbytes)
    raise ValueError(f"unknown payload kind {kind!r}")


class CommLedger:
    """Append-only message log with per-round, per-client, per-direction totals."""

    def __init__(self):
        self._lock = threading.Lock()
        self._messages: list[Message] = []

    def record(self, msg: Message) -> None:
        with self._lock:
            self._messages.append(msg)

    def extend(self, msgs) -> None:
        with self._lock:
            self._messages.extend(msgs)

    @property
    def messages(self) -> list:
        with self._lock:
            return list(self._messages)

    def __len__(self):
        return len(self._messages)

    def total(self, round=None, client=None, direction=None, kinds=None, exclude_kinds=()) -> int:
        out = 0
        for m in self.messages:
            if round is not None and m.round != round:
                continue
            if client is not None and m.client != client:
                continue
            if direction is not None and m.direction != direction:
                continue
            if kinds is not None and m.kind not in kinds:
                continue
            if m.kind in exclude_kinds:
                continue
            out += m.nbytes
        return out

    def count(self, **filters) -> int:
        kinds = filters.pop("kinds", None)
        return sum(
            1
            for m in self.messages
            if all(getattr(m, k) == v for k, v in filters.items()) and (kinds is None or m.kind in kinds)
        )

    def breakdown(self) -> dict:
        """{round: {client: {direction: bytes}}}."""
        out: dict = defaultdict(lambda: defaultdict(lambda: defaultdict(int)))
        for m in self.messages:
            out[m.round][m.client][m.direction] += m.nbytes
        return {r: {c: dict(d) for c, d in cs.items()} for r, cs in out.items()}


class Channel:
    """Delivers payloads unchanged and charges their size to a ledger."""

    def __init__(self, ledger: Optional[CommLedger] = None):
        self.ledger = ledger if ledger is not None else CommLedger()

    def send(self, sender: str, receiver: str, round: int, tag: str, kind: str, payload, block=None):
        self.ledger.record(
            Message(
                sender=sender,
                receiver=receiver,
                round=round,
                tag=tag,
                kind=kind,
                nbytes=payload_bytes(kind, payload),
                block=block,
            )
        )
        return payload

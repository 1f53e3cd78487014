"""Party attribution and double-blind audit counters.

Protocol code runs inside ``acting_as(party)`` so that sensitive actions
(decryptions, reads of frozen block parameters) can be attributed to the
party performing them.  An :class:`AuditLog` installed with ``recording()``
collects those events; anything that breaks the double-blind contract is
recorded as a violation rather than silently allowed.
"""

from __future__ import annotations

import contextlib
import contextvars
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional

SERVER = "server"

_actor: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar("dbadapt_actor", default=None)
_log: contextvars.ContextVar[Optional["AuditLog"]] = contextvars.ContextVar("dbadapt_audit", default=None)


class DoubleBlindViolation(RuntimeError):
    """Raised by :meth:`AuditLog.assert_clean` when a violation was recorded."""


@dataclass
class AuditLog:
    decrypts: dict = field(default_factory=dict)  # (actor, key_owner) -> count
    block_reads: dict = field(default_factory=dict)  # actor -> count
    violations: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def note_decrypt(self, actor: Optional[str], key_owner: str) -> None:
        with self._lock:
            k = (actor, key_owner)
            self.decrypts[k] = self.decrypts.get(k, 0) + 1
            if actor is not None and actor != key_owner:
                self.violations.append(f"{actor} decrypted a ciphertext under {key_owner}'s key")

    def note_block_read(self, actor: Optional[str]) -> None:
        with self._lock:
            self.block_reads[actor] = self.block_reads.get(actor, 0) + 1
            if actor is not None and actor != SERVER:
                self.violations.append(f"{actor} read frozen block parameters")

    def server_decrypts_of_client_keys(self) -> int:
        return sum(n for (actor, owner), n in self.decrypts.items() if actor == SERVER and owner != SERVER)

    def client_block_reads(self) -> int:
        return sum(n for actor, n in self.block_reads.items() if actor not in (None, SERVER))

    def assert_clean(self) -> None:
        if self.violations:
            raise DoubleBlindViolation("; ".join(self.violations))


def current_actor() -> Optional[str]:
    return _actor.get()


def current_log() -> Optional[AuditLog]:
    return _log.get()


@contextlib.contextmanager
def acting_as(party: str) -> Iterator[None]:
    token = _actor.set(party)
    try:
        yield
    finally:
        _actor.reset(token)


@contextlib.contextmanager
def recording(log: Optional[AuditLog] = None) -> Iterator[AuditLog]:
    log = log if log is not None else AuditLog()
    token = _log.set(log)
    try:
        yield log
    finally:
        _log.reset(token)

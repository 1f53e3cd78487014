import threading

import numpy as np
import pytest

from dbadapt import audit, he


def test_owner_decrypt_is_clean(key):
    c = he.encrypt(key, np.ones(2))
    with audit.recording() as log:
        with audit.acting_as("alice"):
            he.decrypt(key, c)
    assert log.decrypts == {("alice", "alice"): 1}
    log.assert_clean()


def test_foreign_decrypt_is_a_violation(key):
    c = he.encrypt(key, np.ones(2))
    with audit.recording() as log:
        with audit.acting_as(audit.SERVER):
            he.decrypt(key, c)
    assert log.server_decrypts_of_client_keys() == 1
    with pytest.raises(audit.DoubleBlindViolation, match="server decrypted"):
        log.assert_clean()


def test_block_reads_by_clients_only_count():
    log = audit.AuditLog()
    log.note_block_read(audit.SERVER)
    log.note_block_read(None)
    assert log.client_block_reads() == 0 and not log.violations
    log.note_block_read("client3")
    assert log.client_block_reads() == 1 and log.violations


def test_actor_is_scoped_per_thread():
    seen = {}

    def worker():
        seen["inner"] = audit.current_actor()

    with audit.acting_as("client0"):
        th = threading.Thread(target=worker)
        th.start()
        th.join()
        assert audit.current_actor() == "client0"
    assert seen["inner"] is None
    assert audit.current_actor() is None


def test_nothing_recorded_without_log(key):
    assert audit.current_log() is None
    he.decrypt(key, he.encrypt(key, np.zeros(1)))

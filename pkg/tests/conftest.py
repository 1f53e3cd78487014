import dataclasses as dc

import numpy as np
import pytest

from dbadapt import he
from dbadapt.config import ExperimentConfig
from dbadapt.pipeline import build_backbone, task_data
from dbadapt.transformer import DistillConfig


def quick_config(**federation) -> ExperimentConfig:
    """Default model with a short distillation and few rounds, for unit tests."""
    base = ExperimentConfig()
    distill = DistillConfig(stage1_epochs=3, stage2_epochs=2, teacher_epochs=6)
    fed = dc.replace(base.federation, rounds=3, local_steps=2, **federation)
    return dc.replace(base, distill=distill, federation=fed)


@pytest.fixture(scope="session")
def quick_cfg():
    return quick_config()


@pytest.fixture(scope="session")
def quick_backbone(quick_cfg):
    return build_backbone(quick_cfg)


@pytest.fixture(scope="session")
def quick_data(quick_cfg):
    return task_data(quick_cfg)


@pytest.fixture
def key():
    return he.keygen("alice", he.EncryptionParams(noise_tolerance=0.0), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criterion():
    """record(n, ok, detail): one PASS/FAIL line per acceptance criterion; sub-checks AND together."""

    def record(n: int, ok: bool, detail: str) -> None:
        prev_ok, prev_detail = _CRITERIA.get(n, (True, ""))
        part = detail if ok else f"{detail} [sub-check FAIL]"
        _CRITERIA[n] = (prev_ok and bool(ok), f"{prev_detail}; {part}" if prev_detail else part)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

import math

import numpy as np
import pytest

from dbadapt import bench, he
from dbadapt.config import BenchConfig, ExperimentConfig


def test_ir_sizes_follow_shape_dtype_and_ratio():
    rows = bench.ir_size_rows(BenchConfig(), he.EncryptionParams())
    plain, cipher = rows
    assert plain.bytes == 577 * 768 * 4
    assert cipher.bytes == math.ceil(round(2.79 * plain.bytes, 6))
    assert plain.relative_error == pytest.approx(abs(plain.mb - 6.21) / 6.21)


def test_size_row_tolerance():
    assert bench.SizeRow("x", 1_005_000, 1.0).within_tolerance
    assert not bench.SizeRow("x", 1_020_000, 1.0).within_tolerance
    assert bench.SizeRow("x", 5, None).within_tolerance is None


def test_block_costs_fit_the_depth_budget():
    out = bench.run_bench(ExperimentConfig())
    assert len(out["blocks"]) == 3
    for row in out["blocks"]:
        assert 0 < row["depth_used"] <= row["depth_budget"] == he.DEFAULT_MAX_DEPTH
        assert row["ops"]["mul"] > 0
        assert row["output_bytes"] == row["input_bytes"]
    assert [r["name"] for r in out["ir_sizes"]] == ["ir_plaintext", "ir_ciphertext"]
    np.testing.assert_equal(out["ir_shape"], [577, 768])

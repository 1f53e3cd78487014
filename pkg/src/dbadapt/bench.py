"""Encrypted-inference cost table: per-block operation counts, depth and bytes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import he
from .config import BenchConfig, ExperimentConfig
from .data import auxiliary_dataset
from .transformer import APPROXIMATED, TransformerModel, block_forward, calibrate, embed, init_model

MB = 1_000_000
TOLERANCE = 0.01


@dataclass(frozen=True)
class SizeRow:
    name: str
    bytes: int
    reference_mb: Optional[float]

    @property
    def mb(self) -> float:
        return self.bytes / MB

    @property
    def relative_error(self) -> Optional[float]:
        if self.reference_mb is None:
            return None
        return abs(self.mb - self.reference_mb) / self.reference_mb

    @property
    def within_tolerance(self) -> Optional[bool]:
        err = self.relative_error
        return None if err is None else err <= TOLERANCE

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bytes": self.bytes,
            "mb": self.mb,
            "reference_mb": self.reference_mb,
            "relative_error": self.relative_error,
            "within_tolerance": self.within_tolerance,
        }


def ir_size_rows(bench: BenchConfig, params: he.EncryptionParams) -> list:
    """Plaintext and ciphertext size of one intermediate representation."""
    element = np.dtype(bench.dtype).itemsize
    plain = int(np.prod(bench.ir_shape)) * element
    cipher = he.expanded_bytes(plain, params.expansion_ratio)
    return [
        SizeRow("ir_plaintext", plain, bench.reference_plain_mb),
        SizeRow("ir_ciphertext", cipher, bench.reference_cipher_mb),
    ]


def block_costs(model: TransformerModel, kernels, params: he.EncryptionParams, x) -> list:
    """Encrypted pass over every block, one fresh ciphertext per block as in the protocol."""
    key = he.keygen("bench", params, seed=0)
    h = he.encrypt(key, np.asarray(embed(x, model.embed)))
    rows = []
    for l, (p, s) in enumerate(zip(model.blocks, model.scales)):
        with he.count_ops() as ops:
            out = block_forward(h, p, APPROXIMATED, kernels, model.config.num_heads, s)
        rows.append(
            {
                "block": l + 1,
                "ops": dict(sorted(ops.items())),
                "depth_used": out.depth_used,
                "depth_budget": params.max_depth,
                "input_bytes": h.nbytes,
                "output_bytes": out.nbytes,
            }
        )
        h = he.encrypt(key, he.decrypt(key, out))
    return rows


def run_bench(cfg: ExperimentConfig, model: Optional[TransformerModel] = None, batch: int = 1) -> dict:
    """Cost table for ``model`` (a calibrated random model of ``cfg.model`` if None)."""
    mc = cfg.model
    x = auxiliary_dataset(cfg.data, mc.num_classes, mc.seq_len, mc.patch_dim, cfg.seed).x
    if model is None:
        model = init_model(mc, cfg.seed)
        model.scales = calibrate(model, x, cfg.kernels)
    return {
        "blocks": block_costs(model, cfg.kernels, cfg.he, x[:batch]),
        "ir_sizes": [r.to_dict() for r in ir_size_rows(cfg.bench, cfg.he)],
        "expansion_ratio": cfg.he.expansion_ratio,
        "ir_shape": list(cfg.bench.ir_shape),
        "dtype": cfg.bench.dtype,
    }

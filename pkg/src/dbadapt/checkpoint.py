"""Model and adapter checkpoints as ``.npz`` archives with a JSON header.

Arrays are stored as float64; nothing is pickled, so loading never runs code.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

import numpy as np

from .adapter import AdapterParams
from .transformer import BlockParams, EmbedParams, HeadParams, ModelConfig, SiteScales, TransformerModel

FORMAT_VERSION = 1
KIND_MODEL = "model"
KIND_ADAPTER = "adapter"


class CheckpointError(ValueError):
    pass


def _write(path, kind: str, meta: dict, arrays: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"format": FORMAT_VERSION, "kind": kind, **meta}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(header), **{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
    return path


def _read(path, kind: str):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if "__header__" not in arrays:
        raise CheckpointError(f"{path} has no header")
    header = json.loads(str(arrays.pop("__header__")))
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    if header.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, got {header.get('kind')!r}")
    return header, arrays


def _flatten(prefix: str, obj) -> dict:
    return {f"{prefix}.{f.name}": getattr(obj, f.name) for f in fields(obj)}


def _gather(cls, prefix: str, arrays: dict):
    try:
        return cls(**{f.name: arrays[f"{prefix}.{f.name}"] for f in fields(cls)})
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing array {exc.args[0]}") from None


def save_model(model: TransformerModel, path) -> Path:
    arrays = {**_flatten("embed", model.embed), **_flatten("head", model.head)}
    for i, b in enumerate(model.blocks):
        arrays.update(_flatten(f"block{i}", b))
    arrays["scales"] = np.stack([s.as_array() for s in model.scales])
    return _write(path, KIND_MODEL, {"config": model.config.to_dict()}, arrays)


def load_model(path) -> TransformerModel:
    header, arrays = _read(path, KIND_MODEL)
    config = ModelConfig(**header["config"])
    blocks = [_gather(BlockParams, f"block{i}", arrays) for i in range(config.num_blocks)]
    scales = [SiteScales.from_array(row) for row in arrays["scales"]]
    if len(scales) != config.num_blocks:
        raise CheckpointError("scale table does not match the block count")
    return TransformerModel(
        config=config,
        embed=_gather(EmbedParams, "embed", arrays),
        blocks=blocks,
        head=_gather(HeadParams, "head", arrays),
        scales=scales,
    )


def save_adapter(theta: AdapterParams, eta: HeadParams, path) -> Path:
    return _write(path, KIND_ADAPTER, {}, {**_flatten("theta", theta), **_flatten("eta", eta)})


def load_adapter(path):
    _, arrays = _read(path, KIND_ADAPTER)
    return _gather(AdapterParams, "theta", arrays), _gather(HeadParams, "eta", arrays)

"""Bit-exact binary checkpoints for model parameters and optimizer state.

Layout (all integers little-endian):

    magic  "TCD1"
    u32    format version (currently 1)
    u32    config blob length, then that many bytes of UTF-8 JSON
           {"model": <model config>, "optimizer": <hyperparams or null>, "meta": {...}}
    u32    tensor count
    per tensor:
        u32  name length, then the UTF-8 name
        u8   dtype code (0 = float32, 1 = float64)
        u32  rank, then rank x u32 dims
        raw  little-endian element data

Optimizer moment tensors are stored under the reserved ``optimizer.`` name
prefix.  Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointFormatError
from .model import ModelConfig, TinyCDModel
from .optim import AdamW

MAGIC = b"TCD1"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class CheckpointData:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer_hyper: Optional[dict]
    optimizer_tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(
    model: TinyCDModel,
    optimizer: Optional[AdamW],
    path,
    meta: Optional[dict] = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    blob = json.dumps(
        {
            "model": model.config.to_dict(),
            "optimizer": optimizer.hyperparams() if optimizer is not None else None,
            "meta": meta or {},
        },
        sort_keys=True,
    ).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            code = _DTYPE_CODES.get(np.dtype(arr.dtype))
            if code is None:
                raise CheckpointFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", code))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            blob = json.loads(_read_exact(f, blob_len, "config blob").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt config blob in {path}: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, f"tensor {i} name length"))
            name = _read_exact(f, name_len, f"tensor {i} name").decode("utf-8")
            (code,) = struct.unpack("<B", _read_exact(f, 1, f"{name} dtype"))
            if code not in _CODE_DTYPES:
                raise CheckpointFormatError(f"tensor {name!r} has unknown dtype code {code}")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{name} dims"))
            n_bytes = int(np.prod(dims, dtype=np.int64)) * _CODE_DTYPES[code].itemsize
            raw = _read_exact(f, n_bytes, f"{name} data")
            tensors[name] = np.frombuffer(raw, dtype=_CODE_DTYPES[code]).reshape(dims).copy()
        if f.read(1):
            raise CheckpointFormatError(f"{path} has trailing bytes after the last tensor")

    params = {k: v for k, v in tensors.items() if not k.startswith("optimizer.")}
    opt_tensors = {k: v for k, v in tensors.items() if k.startswith("optimizer.")}
    return CheckpointData(
        model_config=ModelConfig.from_dict(blob["model"]),
        params=params,
        optimizer_hyper=blob.get("optimizer"),
        optimizer_tensors=opt_tensors,
        meta=blob.get("meta", {}),
    )


def restore_model(data: CheckpointData, seed: int = 0) -> TinyCDModel:
    """Instantiate the checkpointed architecture and load its exact weights."""
    dtype = next(iter(data.params.values())).dtype if data.params else np.float32
    model = TinyCDModel(data.model_config, seed=seed, dtype=dtype)
    model.load_state(data.params)
    return model


def restore_optimizer(data: CheckpointData, model: TinyCDModel) -> Optional[AdamW]:
    if data.optimizer_hyper is None:
        return None
    hyper = data.optimizer_hyper
    optimizer = AdamW(
        model.parameters(),
        lr=hyper["lr"],
        weight_decay=hyper["weight_decay"],
        beta1=hyper["beta1"],
        beta2=hyper["beta2"],
        eps=hyper["eps"],
        amsgrad=hyper["amsgrad"],
    )
    optimizer.load_state(hyper, data.optimizer_tensors)
    return optimizer

"""Self-describing, byte-stable checkpoint container.

Layout::

    b"DUALINC\\x00CKPT\\x01"    12-byte magic
    uint64 little-endian   header length
    header                 canonical JSON: {"meta": {...}, "arrays": [...]}
    payload                raw little-endian C-order array bytes

No timestamps are written, so identical state gives identical bytes.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import DataError
from .model import BackboneConfig, Model

MAGIC = b"DUALINC\x00CKPT\x01"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(os.fspath(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(os.fspath(path), "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise DataError(f"{path} is not a checkpoint file")
    start = len(MAGIC) + 8
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : start])
    header = json.loads(raw[start : start + hlen])
    payload = memoryview(raw)[start + hlen :]
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return arrays, header["meta"]


def model_arrays(model: Model) -> dict[str, np.ndarray]:
    arrays = {f"param.{k}": t.data for k, t in model.named_parameters().items()}
    for k, state in model.batchnorm_states().items():
        arrays[f"bn.{k}.running_mean"] = state.running_mean
        arrays[f"bn.{k}.running_var"] = state.running_var
    return arrays


def model_meta(model: Model) -> dict:
    c = model.config
    return {
        "backbone": {
            "input_side": c.input_side,
            "in_channels": c.in_channels,
            "stage_channels": list(c.stage_channels),
            "blocks_per_stage": c.blocks_per_stage,
        },
        "model_seed": model.seed,
        "class_count": model.class_count,
        "orientation_count": model.orientation_count,
    }


def restore_model(arrays: dict[str, np.ndarray], meta: dict) -> Model:
    b = meta["backbone"]
    config = BackboneConfig(b["input_side"], b["in_channels"], tuple(b["stage_channels"]), b["blocks_per_stage"])
    model = Model(config, meta["class_count"], meta["orientation_count"], meta["model_seed"])
    params = model.named_parameters()
    for name, tensor in params.items():
        arr = arrays[f"param.{name}"]
        if arr.shape != tensor.shape:
            raise DataError(f"checkpoint array {name} has shape {arr.shape}, model expects {tensor.shape}")
        tensor.data = arr.copy()
    for name, state in model.batchnorm_states().items():
        state.running_mean = arrays[f"bn.{name}.running_mean"].copy()
        state.running_var = arrays[f"bn.{name}.running_var"].copy()
    return model


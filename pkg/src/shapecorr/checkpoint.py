"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
header, then the tensors back to back as little-endian float32 (float64
when the header's dtype says so). All integers are little-endian.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .errors import CheckpointError
from .nets import ShapeCorrNet

logger = logging.getLogger(__name__)

MAGIC = b"SHPCORR\0"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    model: ShapeCorrNet
    step: int = 0
    stage: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    model: ShapeCorrNet,
    path: str,
    step: int = 0,
    stage: str = "",
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    float64 = model.dtype == torch.float64
    dtype = "<f8" if float64 else "<f4"
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        data = t.detach().cpu().numpy().astype(dtype).tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    header = json.dumps({
        "hparams": model.hparams,
        "dtype": "float64" if float64 else "float32",
        "step": int(step),
        "stage": str(stage),
        "extra": extra or {},
        "tensors": tensors,
    }, sort_keys=True).encode("utf-8")

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(p)
    logger.debug("saved checkpoint %s (step %d, stage %s)", p, step, stage)


def read_header(path: str) -> Dict[str, Any]:
    header, _ = _read(path)
    return header


def _read(path: str):
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    return header, memoryview(raw)[start + header_len:]


def load_checkpoint(path: str) -> Checkpoint:
    header, payload = _read(path)
    try:
        model = ShapeCorrNet(**header["hparams"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad hyperparameters: {exc}") from exc
    float64 = header.get("dtype") == "float64"
    if float64:
        model = model.double()
    dtype = "<f8" if float64 else "<f4"

    state = {}
    for entry in header.get("tensors", []):
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor '{entry['name']}'")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float64 if float64 else np.float32))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match hyperparameters: {exc}") from exc
    model.eval()
    return Checkpoint(
        model=model,
        step=int(header.get("step", 0)),
        stage=str(header.get("stage", "")),
        extra=dict(header.get("extra", {})),
    )

"""Single-file checkpoints: magic, version, JSON header, little-endian float32 payload.

Layout::

    b"TPCKPT\\x00\\x01"  uint32 format version  uint64 header length  header (UTF-8 JSON)  payload

The header lists every tensor as {name, shape, offset, dtype}; ``offset`` counts bytes from
the start of the payload and ``dtype`` is the tensor's in-memory type (the payload is always
float32). Integer buffers are exact in float32 at the sizes stored here.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..encoders import get_backend
from .config import Config

MAGIC = b"TPCKPT\x00\x01"
VERSION = 1
TRAINABLE_PREFIXES = ("adapters.", "bank.", "head.")


class CheckpointError(ValueError):
    pass


def trainable_state(model) -> dict[str, torch.Tensor]:
    """Adapters (weights and norm statistics), prototype bank, CAM head."""
    return {k: v.detach() for k, v in model.state_dict().items() if k.startswith(TRAINABLE_PREFIXES)}


def encode(tensors: dict[str, torch.Tensor], meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False).ravel()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "dtype": str(t.dtype).replace("torch.", "")})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({**meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, n = struct.unpack_from("<IQ", blob, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    meta = json.loads(blob[pos:pos + n].decode("utf-8"))
    payload = memoryview(blob)[pos + n:]
    tensors = {}
    for e in meta.pop("tensors"):
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, e["dtype"]))
    return tensors, meta


def save_checkpoint(model, path: Path | str, step: int = 0) -> Path:
    path = Path(path)
    tensors = dict(trainable_state(model))
    bank = model.memory.state_dict()
    tensors["memory.buffer"] = bank["buffer"]
    meta = {
        "format": "tissueproto", "step": int(step), "backend": model.backend.name,
        "config": model.cfg.to_dict(), "config_hash": model.cfg.digest(), "prompts": model.prompts,
        "memory": {k: int(bank[k]) for k in ("cursor", "count", "pushed")},
    }
    path.write_bytes(encode(tensors, meta))
    return path


def load_checkpoint(path: Path | str, backend=None, strict_backend: bool = False):
    """Rebuild the model a checkpoint was saved from. Returns (model, metadata)."""
    from .model import ProtoSegModel, BACKEND_SEED

    tensors, meta = decode(Path(path).read_bytes())
    cfg = Config.from_dict(meta["config"])
    if cfg.digest() != meta.get("config_hash"):
        raise CheckpointError("config hash mismatch: header was modified")
    if backend is None:
        backend = get_backend(meta["backend"], strict=strict_backend, seed=BACKEND_SEED)
    model = ProtoSegModel(backend, cfg, prompts=meta["prompts"])
    buffer = tensors.pop("memory.buffer")
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if unexpected or any(k.startswith(TRAINABLE_PREFIXES) for k in missing):
        raise CheckpointError(f"checkpoint does not match the model: missing={missing} unexpected={unexpected}")
    model.memory.load_state_dict({"buffer": buffer, **meta["memory"]})
    model.eval()
    return model, meta


def file_digest(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Model checkpoint container.

Layout (all integers little-endian):
  bytes 0..3   magic "MNO1"
  u32          length of the canonical-JSON config block
  ...          config JSON (sorted keys, no whitespace)
  u32          number of parameter tensors
  per tensor:  u32 name length, utf-8 name, u32 rank, u32 dims...,
               payload as little-endian float32
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .operator import ModelConfig, OperatorModel, Precision

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "CheckpointFormatError"]

MAGIC = b"MNO1"


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: OperatorModel, extra: dict | None = None):
    """Write the model's config and named parameters. `extra` is merged into
    the config block under the key "extra" (training bookkeeping)."""
    blob = model.config.to_dict()
    if extra:
        blob = {**blob, "extra": extra}
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        cfg = canonical_json(blob)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            arr = p.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("truncated checkpoint", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[OperatorModel, dict]:
    """Rebuild a model from a checkpoint. Returns (model, extra)."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic", 0)
    cfg_blob = json.loads(rd.take(rd.u32()).decode("utf-8"))
    extra = cfg_blob.pop("extra", {})
    config = ModelConfig.from_dict(cfg_blob)
    model = OperatorModel(config)
    n_tensors = rd.u32()
    state = {}
    for _ in range(n_tensors):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        dims = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        n_el = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(rd.take(4 * n_el), dtype="<f4").reshape(dims)
        t = torch.from_numpy(arr.copy())
        if config.precision is Precision.F64:
            t = t.double()
        state[name] = t
    missing = model.load_state_dict(state, strict=True)
    assert not missing.missing_keys and not missing.unexpected_keys
    return model, extra

"""Self-describing, bit-stable checkpoint container.

Layout: magic line, 8-byte little-endian header length, JSON header, then raw
little-endian parameter blobs in header order. No timestamps or other
run-varying bytes, so identical models serialize to identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from . import tokenizer as tok
from .modeling import VLM, ModelConfig

MAGIC = b"PATCHLM-CKPT v1\n"
FORMAT_VERSION = 1


def save_checkpoint(path, model: VLM, meta: dict | None = None) -> None:
    params = []
    blobs = []
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        params.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "tokenizer": {"vocab_size": tok.VOCAB_SIZE, "specials": tok.SPECIAL_NAMES},
        "meta": meta or {},
        "params": params,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a patchlm checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path) -> tuple[VLM, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a patchlm checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header['format_version']}")
        state = {}
        for spec in header["params"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            arr = np.frombuffer(
                f.read(count * np.dtype(spec["dtype"]).itemsize), dtype=spec["dtype"]
            ).reshape(spec["shape"])
            state[spec["name"]] = torch.from_numpy(arr.copy())
    model = VLM(ModelConfig(**header["config"]))
    model.load_state_dict(state)
    return model, header

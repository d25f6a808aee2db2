"""Binary checkpoint container shared by the QG, QPC and QA models.

Layout (little-endian):
    magic (4 bytes) | version u32 | header length u32 | header JSON (UTF-8, sorted keys)
    tensor count u32 | per tensor: name length u16, name, ndim u8, dims u32*ndim, float32 data
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT_VERSION = 1
MAGIC_QG = b"SQG1"
MAGIC_QPC = b"SQP1"
MAGIC_QA = b"SQA1"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(magic: bytes, header: dict, tensors: Mapping[str, torch.Tensor]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.to(torch.float32).numpy().astype("<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, magic: bytes) -> tuple[dict, dict]:
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return header, tensors


def save_checkpoint(path, magic: bytes, header: dict, tensors) -> str:
    blob = encode_checkpoint(magic, header, tensors)
    Path(path).write_bytes(blob)
    return digest(blob)


def load_checkpoint(path, magic: bytes) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes(), magic)


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def file_digest(path) -> str:
    return digest(Path(path).read_bytes())

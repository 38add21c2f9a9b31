"""Binary tensor container shared by checkpoints and datasets.

Layout (little-endian)::

    b"SHPI" | u32 version | u32 json_len | json (UTF-8) | u64 n_tensors
    per tensor: u32 name_len | name (UTF-8) | u32 rank | rank x u64 dims | f32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .policy import PolicyConfig, PolicyParams
from .tensor import Tensor

MAGIC = b"SHPI"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def encode(header: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic bytes")
    pos = 4
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return header, tensors


def write_file(path, header: dict, tensors: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, tensors))


def read_file(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def save(params: PolicyParams, path) -> None:
    write_file(path, params.config.to_dict(), {k: v.data for k, v in params.items()})


def load(path, requires_grad: bool = False) -> PolicyParams:
    header, arrays = read_file(path)
    config = PolicyConfig.from_dict(header)
    tensors = {k: Tensor(v, requires_grad=requires_grad, dtype=np.float32) for k, v in arrays.items()}
    return PolicyParams(config, tensors)

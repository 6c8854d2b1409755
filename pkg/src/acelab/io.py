"""Policy tensor file format.

Layout (all little-endian)::

    offset  size  field
    0       8     magic b"ACEPOL1\\0"
    8       4     uint32 vocab_size V
    12      4     uint32 max_len L
    16      4     uint32 num_prompt_classes P
    20      4     uint32 reserved (0)
    24      ...   float64 logits, C order, shape (P, L, V + 1, V)

Gradient tensors from the theory module share the logits shape and are written
with the same layout.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from acelab.policy import PolicyParams

MAGIC = b"ACEPOL1\x00"
_HEADER = struct.Struct("<8sIIII")


def dumps_tensor(tensor: np.ndarray) -> bytes:
    p, length, prev, v = tensor.shape
    if prev != v + 1:
        raise ValueError(f"not a policy-shaped tensor: {tensor.shape}")
    header = _HEADER.pack(MAGIC, v, length, p, 0)
    return header + np.ascontiguousarray(tensor, dtype="<f8").tobytes()


def loads_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValueError("truncated policy file header")
    magic, v, length, p, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    count = p * length * (v + 1) * v
    body = data[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"expected {8 * count} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(p, length, v + 1, v).astype(np.float64)


def save_policy(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_bytes(dumps_tensor(params.logits))


def load_policy(path: str | Path) -> PolicyParams:
    return PolicyParams(loads_tensor(Path(path).read_bytes()))


def save_tensor(tensor: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(dumps_tensor(tensor))

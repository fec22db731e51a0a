"""Binary checkpoint format (little-endian).

    magic    4 bytes  b"SFLX"
    version  u16      1
    count    u16      number of units
    unit     u8 kind tag, u8 flags (bit0 relu, bit1 pool),
             u32 in, u32 out, u32 kernel, u32 stride, u32 pad      (x count)
    tensors  for each parametric unit in order: weight, then bias,
             each as u8 rank, u32 dims[rank], f32 data[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .units import KINDS, EngineError, Params, UnitSpec, check_params

MAGIC = b"SFLX"
VERSION = 1
_UNIT = struct.Struct("<BB5I")


class CheckpointError(EngineError):
    pass


def encode_tensor(t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes | memoryview, offset: int) -> tuple[torch.Tensor, int]:
    buf = memoryview(buf)
    if offset + 1 > len(buf):
        raise CheckpointError("truncated tensor header")
    rank = buf[offset]
    offset += 1
    if offset + 4 * rank > len(buf):
        raise CheckpointError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(dims)) if rank else 1
    end = offset + 4 * n
    if end > len(buf):
        raise CheckpointError("truncated tensor data")
    arr = np.frombuffer(buf[offset:end], dtype="<f4").astype(np.float32).reshape(dims)
    return torch.from_numpy(arr.copy()), end


def dumps(units: Sequence[UnitSpec], params: Params) -> bytes:
    check_params(units, params)
    out = [MAGIC, struct.pack("<HH", VERSION, len(units))]
    for u in units:
        flags = (1 if u.relu else 0) | (2 if u.pool else 0)
        out.append(_UNIT.pack(KINDS.index(u.kind), flags, u.in_dim, u.out_dim, u.kernel, u.stride, u.pad))
    for i, u in enumerate(units):
        if u.parametric:
            w, b = params[i]
            out.append(encode_tensor(w))
            out.append(encode_tensor(b))
    return b"".join(out)


def loads(data: bytes) -> tuple[list[UnitSpec], Params]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not an SFLX checkpoint (bad magic)")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 8
    units = []
    for _ in range(count):
        if offset + _UNIT.size > len(data):
            raise CheckpointError("truncated unit list")
        tag, flags, i, o, k, s, p = _UNIT.unpack_from(data, offset)
        offset += _UNIT.size
        if tag >= len(KINDS):
            raise CheckpointError(f"unknown unit tag {tag}")
        units.append(UnitSpec(KINDS[tag], i, o, k, s, p, relu=bool(flags & 1), pool=bool(flags & 2)))
    params: Params = {}
    for idx, u in enumerate(units):
        if u.parametric:
            w, offset = decode_tensor(data, offset)
            b, offset = decode_tensor(data, offset)
            params[idx] = (w, b)
    if offset != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    check_params(units, params)
    return units, params


def save(path: str | Path, units: Sequence[UnitSpec], params: Params) -> None:
    Path(path).write_bytes(dumps(units, params))


def load(path: str | Path) -> tuple[list[UnitSpec], Params]:
    return loads(Path(path).read_bytes())

"""Checkpoint file (``DPCCKPT1``) holding calibration parameters.

Header, little-endian: magic 8s, d, d_m, d_a, M, K (u32 each), alpha f32,
mode u32, training step u64, validation SRCC f32 (NaN when undefined),
attention heads u32. The tensors follow as f32 in ``TENSOR_NAMES`` order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibnet import TENSOR_NAMES, CalibParams, VariantMode, expected_shapes
from .datastore import ContainerHeader
from .errors import FormatError, ShapeError

MAGIC = b"DPCCKPT1"
HEADER = struct.Struct("<8sIIIIIfIQfI")
F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    params: CalibParams
    mode: VariantMode
    k: int
    step: int = 0
    val_srcc: float = float("nan")

    def check_compatible(self, header: ContainerHeader) -> None:
        p = self.params
        mine = (self.k, p.d_m, p.d_a)
        theirs = (header.k, header.d_m, header.d_a)
        if mine != theirs:
            raise ShapeError(
                f"checkpoint expects (K, d_m, d_a) = {mine} but container has {theirs}"
            )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    p.validate()
    parts = [
        HEADER.pack(
            MAGIC, p.d, p.d_m, p.d_a, p.m, ckpt.k, p.alpha, ckpt.mode.code,
            ckpt.step, ckpt.val_srcc, p.heads,
        )
    ]
    for name in TENSOR_NAMES:
        parts.append(np.ascontiguousarray(getattr(p, name), dtype=F32).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < HEADER.size:
        raise FormatError(
            f"truncated checkpoint header: expected {HEADER.size} bytes, file has {len(buf)}", 0
        )
    magic, d, d_m, d_a, m, k, alpha, mode, step, val, heads = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    modes = list(VariantMode)
    if mode >= len(modes):
        raise FormatError(f"unknown variant mode code {mode}", 32)
    shapes = expected_shapes(d, d_m, d_a, m)
    need = HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(buf) != need:
        raise FormatError(f"checkpoint length {len(buf)} != expected {need}", min(len(buf), need))
    pos = HEADER.size
    tensors = {}
    for name in TENSOR_NAMES:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(buf, dtype=F32, count=count, offset=pos).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite value in {name}", pos)
        tensors[name] = arr.reshape(shapes[name])
        pos += 4 * count
    params = CalibParams(**tensors, alpha=float(alpha), heads=heads)
    params.validate()
    return Checkpoint(params, modes[mode], k, step, float(val))


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def same_checkpoint(a: Checkpoint, b: Checkpoint) -> bool:
    def same_float(x, y):
        return (math.isnan(x) and math.isnan(y)) or x == y

    return (
        a.mode is b.mode and a.k == b.k and a.step == b.step
        and same_float(a.val_srcc, b.val_srcc) and a.params.equal(b.params)
    )

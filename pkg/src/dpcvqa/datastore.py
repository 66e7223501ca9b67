"""Binary feature container (``.dpcf``), validation and a planted synthetic generator.

Layout, little-endian throughout::

    header (40 bytes)
        magic         8s   b"DPCVQA01"
        version       u32
        K             u32
        d_m           u32
        d_a           u32
        record_count  u64
        mos_scale_lo  f32
        mos_scale_hi  f32
    record (repeated record_count times)
        id_length     u32
        id            UTF-8 bytes
        N             u32
        N_a           u32
        mos_raw       f32   (NaN = unlabeled)
        z             K f32
        H_vis         N*d_m f32, row-major
        H_aux         N_a*d_a f32, row-major
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, InvalidInputError, RecordError
from .perception import PerceptionRecord, VerbalizerSet, judge

MAGIC = b"DPCVQA01"
VERSION = 1
HEADER = struct.Struct("<8sIIIIQff")
U32 = struct.Struct("<I")
RECORD_DIMS = struct.Struct("<IIf")
F32 = np.dtype("<f4")

assert HEADER.size == 40


@dataclass(frozen=True)
class ContainerHeader:
    k: int
    d_m: int
    d_a: int
    record_count: int = 0
    mos_scale_lo: float = 0.0
    mos_scale_hi: float = 1.0
    version: int = VERSION

    def validate(self) -> None:
        if self.k < 2:
            raise FormatError(f"header K must be >= 2, got {self.k}")
        if self.d_m < 1:
            raise FormatError(f"header d_m must be >= 1, got {self.d_m}")
        if self.d_a < 0:
            raise FormatError(f"header d_a must be >= 0, got {self.d_a}")
        lo, hi = self.mos_scale_lo, self.mos_scale_hi
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise FormatError(f"MOS scale must satisfy lo < hi, got [{lo}, {hi}]")


@dataclass
class Container:
    header: ContainerHeader
    records: list[PerceptionRecord]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index = {r.video_id: r for r in self.records}
        if len(self._index) != len(self.records):
            raise InvalidInputError("duplicate video ids in container")

    def __getitem__(self, video_id: str) -> PerceptionRecord:
        return self._index[video_id]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labeled_ids(self) -> list[str]:
        return [r.video_id for r in self.records if r.labeled]

    def target(self, video_id: str) -> float:
        """Normalised MOS of a labeled record."""
        rec = self._index[video_id]
        if rec.mos_raw is None:
            raise InvalidInputError(f"record {video_id!r} is unlabeled")
        return normalize_mos(rec.mos_raw, self.header)


def normalize_mos(mos_raw: float, header: ContainerHeader) -> float:
    lo, hi = float(header.mos_scale_lo), float(header.mos_scale_hi)
    if not (lo <= mos_raw <= hi):
        raise InvalidInputError(f"MOS {mos_raw} outside declared scale [{lo}, {hi}]")
    return (float(mos_raw) - lo) / (hi - lo)


def validate_record(record: PerceptionRecord, header: ContainerHeader) -> None:
    vid = record.video_id
    if not isinstance(vid, str) or not vid:
        raise RecordError("id", "video id must be a nonempty string", vid)
    z = np.asarray(record.logits)
    hv = np.asarray(record.visual_tokens)
    ha = np.asarray(record.aux_tokens)
    if z.ndim != 1 or z.shape[0] != header.k:
        raise RecordError("logits-length", f"expected {header.k} logits, got shape {z.shape}", vid)
    if hv.ndim != 2 or hv.shape[1] != header.d_m:
        raise RecordError("visual-shape", f"visual tokens must be N x {header.d_m}, got {hv.shape}", vid)
    if hv.shape[0] < 1:
        raise RecordError("visual-empty", "at least one visual token is required", vid)
    if ha.ndim != 2 or (ha.shape[0] > 0 and ha.shape[1] != header.d_a):
        raise RecordError("aux-shape", f"aux tokens must be N_a x {header.d_a}, got {ha.shape}", vid)
    for name, arr in (("logits", z), ("visual", hv), ("aux", ha)):
        if not np.all(np.isfinite(arr)):
            raise RecordError("non-finite", f"{name} contains non-finite values", vid)
    if record.mos_raw is not None:
        m = float(record.mos_raw)
        if not math.isfinite(m):
            raise RecordError("mos-non-finite", "MOS must be finite (use None for unlabeled)", vid)
        if not (header.mos_scale_lo <= m <= header.mos_scale_hi):
            raise RecordError(
                "mos-range",
                f"MOS {m} outside [{header.mos_scale_lo}, {header.mos_scale_hi}]",
                vid,
            )


def _f32_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype=F32).tobytes()


def encode_container(header: ContainerHeader, records: Sequence[PerceptionRecord]) -> bytes:
    header.validate()
    parts = [
        HEADER.pack(
            MAGIC, header.version, header.k, header.d_m, header.d_a,
            len(records), header.mos_scale_lo, header.mos_scale_hi,
        )
    ]
    for rec in records:
        try:
            validate_record(rec, header)
        except RecordError as exc:
            raise FormatError(str(exc)) from exc
        vid = rec.video_id.encode("utf-8")
        hv = np.asarray(rec.visual_tokens)
        ha = np.asarray(rec.aux_tokens)
        mos = float("nan") if rec.mos_raw is None else rec.mos_raw
        parts.append(U32.pack(len(vid)))
        parts.append(vid)
        parts.append(RECORD_DIMS.pack(hv.shape[0], ha.shape[0], mos))
        parts.append(_f32_bytes(rec.logits))
        parts.append(_f32_bytes(hv))
        parts.append(_f32_bytes(ha))
    return b"".join(parts)


def write_container(path, header: ContainerHeader, records: Sequence[PerceptionRecord]) -> None:
    Path(path).write_bytes(encode_container(header, records))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(
                f"truncated while reading {what}: expected {end} bytes, file has {len(self.buf)}",
                self.pos,
            )
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def floats(self, count: int, what: str) -> np.ndarray:
        start = self.pos
        arr = np.frombuffer(self.take(4 * count, what), dtype=F32).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise FormatError(f"non-finite value in {what}", start + 4 * bad)
        return arr


def decode_container(buf: bytes) -> Container:
    r = _Reader(buf)
    raw = r.take(HEADER.size, "header")
    magic, version, k, d_m, d_a, count, lo, hi = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 8)
    header = ContainerHeader(k, d_m, d_a, count, lo, hi, version)
    header.validate()
    records = []
    for _ in range(count):
        start = r.pos
        (n_id,) = U32.unpack(r.take(4, "id length"))
        try:
            vid = r.take(n_id, "video id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("video id is not valid UTF-8", start + 4) from exc
        n, n_a, mos = RECORD_DIMS.unpack(r.take(RECORD_DIMS.size, f"dims of {vid!r}"))
        if n < 1:
            raise FormatError(f"record {vid!r} has N = 0", start)
        z = r.floats(k, f"logits of {vid!r}")
        hv = r.floats(n * d_m, f"visual tokens of {vid!r}").reshape(n, d_m)
        ha = r.floats(n_a * d_a, f"aux tokens of {vid!r}").reshape(n_a, d_a)
        rec = PerceptionRecord(vid, z, hv, ha, None if math.isnan(mos) else mos)
        try:
            validate_record(rec, header)
        except RecordError as exc:
            raise FormatError(str(exc), start) from exc
        records.append(rec)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last record", r.pos)
    return Container(header, records)


def read_container(path) -> Container:
    return decode_container(Path(path).read_bytes())


# -- synthetic data -----------------------------------------------------------


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for a named component."""
    h = hashlib.blake2b(f"{int(seed)}/{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))


@dataclass(frozen=True)
class SyntheticConfig:
    record_count: int = 500
    k: int = 5
    d_m: int = 16
    d_a: int = 8
    n: int = 2
    n_a: int = 2
    noise_sigma: float = 0.01
    seed: int = 0
    # concentration of the Beta(c, c) draw for each video's latent quality
    quality_concentration: float = 10.0

    def validate(self) -> None:
        for name in ("record_count", "k", "d_m", "n"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.k < 2:
            raise InvalidInputError("k must be >= 2")
        if self.d_a < 0 or self.n_a < 0:
            raise InvalidInputError("d_a and n_a must be nonnegative")
        if self.n_a > 0 and self.d_a < 1:
            raise InvalidInputError("aux tokens need d_a >= 1")
        if not self.noise_sigma >= 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if not self.quality_concentration > 0:
            raise InvalidInputError("quality_concentration must be > 0")


def planted_direction(seed: int, d_m: int) -> np.ndarray:
    w = rng_for(seed, "synthetic/direction").standard_normal(d_m)
    return w / np.linalg.norm(w)


def planted_residual(q_b: float, visual_tokens: np.ndarray, direction: np.ndarray) -> float:
    """Ground-truth correction: a base-score trend plus a feature term, |r| <= 0.2."""
    feat = float(np.dot(direction, np.asarray(visual_tokens, dtype=np.float64).mean(axis=0)))
    return 0.15 * (0.5 - q_b) + 0.05 * math.tanh(feat)


def generate_synthetic(cfg: SyntheticConfig) -> Container:
    """Records whose MOS is the base score plus a planted learnable residual.

    Each video gets a latent quality ``mu ~ Beta(c, c)`` and a sharpness; its
    logits are a peaked profile over the anchors centred on ``mu``, so the base
    score covers [0, 1] with varied confidence. MOS is stored on a [1, 5] scale.
    """
    cfg.validate()
    rng = rng_for(cfg.seed, "synthetic/records")
    w_star = planted_direction(cfg.seed, cfg.d_m)
    vset = VerbalizerSet.for_size(cfg.k)
    anchors = np.asarray(vset.anchors)
    header = ContainerHeader(cfg.k, cfg.d_m, cfg.d_a, cfg.record_count, 1.0, 5.0)
    width = max(len(str(cfg.record_count - 1)), 4)
    records = []
    for i in range(cfg.record_count):
        mu = rng.beta(cfg.quality_concentration, cfg.quality_concentration)
        sharp = rng.uniform(4.0, 40.0)
        z = -sharp * (anchors - mu) ** 2 * (cfg.k - 1) + 0.3 * rng.standard_normal(cfg.k)
        z = z.astype(np.float32)
        hv = rng.standard_normal((cfg.n, cfg.d_m)).astype(np.float32)
        ha = rng.standard_normal((cfg.n_a, cfg.d_a)).astype(np.float32)
        eps = rng.normal(0.0, cfg.noise_sigma) if cfg.noise_sigma > 0 else 0.0
        rec = PerceptionRecord(f"syn{i:0{width}d}", z, hv, ha)
        q_b = judge(rec, vset).q_b
        y = min(max(q_b + planted_residual(q_b, hv, w_star) + eps, 0.0), 1.0)
        # stored as f32 on the MOS scale; keep it inside the declared bounds
        mos = float(np.clip(np.float32(1.0 + 4.0 * y), np.float32(1.0), np.float32(5.0)))
        rec.mos_raw = mos
        records.append(rec)
    return Container(header, records)


def iter_labeled(container: Container, ids: Iterable[str]) -> Iterable[tuple[PerceptionRecord, float]]:
    for vid in ids:
        yield container[vid], container.target(vid)

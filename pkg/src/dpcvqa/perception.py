"""Frozen quality prior: verbalizer distribution, base score and confidence.

Nothing here is trainable. Logits come from an upstream extractor that reads
the answer-position scores of the quality words off a frozen multimodal model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

DEFAULT_LABELS = ("bad", "poor", "fair", "good", "excellent")


def equally_spaced_anchors(k: int) -> tuple[float, ...]:
    if k < 2:
        raise InvalidInputError(f"need at least 2 verbalizers, got {k}")
    return tuple((i / (k - 1)) for i in range(k))


@dataclass(frozen=True)
class VerbalizerSet:
    labels: tuple[str, ...] = DEFAULT_LABELS
    anchors: tuple[float, ...] = field(default_factory=lambda: equally_spaced_anchors(5))

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "anchors", tuple(float(c) for c in self.anchors))
        k = len(self.labels)
        if k < 2:
            raise InvalidInputError(f"need at least 2 verbalizers, got {k}")
        if len(self.anchors) != k:
            raise InvalidInputError(
                f"{k} labels but {len(self.anchors)} anchors"
            )
        c = self.anchors
        if not all(math.isfinite(x) for x in c) or c[0] < 0 or c[-1] > 1:
            raise InvalidInputError(f"anchors must lie in [0, 1]: {c}")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise InvalidInputError(f"anchors must be strictly increasing: {c}")

    @property
    def k(self) -> int:
        return len(self.labels)

    @classmethod
    def for_size(cls, k: int) -> "VerbalizerSet":
        """Default set for ``k`` words: the five standard labels when k == 5."""
        labels = DEFAULT_LABELS if k == 5 else tuple(f"v{i + 1}" for i in range(k))
        return cls(labels, equally_spaced_anchors(k))


@dataclass
class PerceptionRecord:
    """Per-video frozen-model evidence as stored in a feature container."""

    video_id: str
    logits: np.ndarray
    visual_tokens: np.ndarray
    aux_tokens: np.ndarray
    mos_raw: Optional[float] = None

    @property
    def labeled(self) -> bool:
        return self.mos_raw is not None


@dataclass(frozen=True)
class BaseJudgment:
    p: np.ndarray
    q_b: float
    u_b: float


def verbalizer_distribution(z: Sequence[float], video_id: str | None = None) -> np.ndarray:
    """Restricted softmax over the verbalizer logits (float64)."""
    z = np.asarray(z, dtype=np.float64)
    where = f" for video {video_id!r}" if video_id is not None else ""
    if z.ndim != 1 or z.size < 2:
        raise InvalidInputError(f"logits must be a vector of length >= 2{where}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError(f"non-finite logits{where}: {z.tolist()}")
    e = np.exp(z - z.max())
    return e / e.sum()


def base_score(p: Sequence[float], anchors: Sequence[float]) -> float:
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(anchors, dtype=np.float64)
    if p.shape != c.shape:
        raise InvalidInputError(
            f"distribution length {p.size} != anchor count {c.size}"
        )
    q = float(np.dot(p, c))
    # float rounding can leave the expectation one ulp outside the anchor range
    return min(max(q, float(c[0])), float(c[-1]))


def confidence(p: Sequence[float]) -> float:
    """One minus normalised entropy, using 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    k = p.size
    if k < 2:
        raise InvalidInputError("confidence needs K >= 2 (log K vanishes at K = 1)")
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    u = 1.0 - h / math.log(k)
    return min(max(u, 0.0), 1.0)


def judge(record: PerceptionRecord, vset: VerbalizerSet) -> BaseJudgment:
    z = np.asarray(record.logits)
    if z.shape != (vset.k,):
        raise InvalidInputError(
            f"video {record.video_id!r}: {z.size} logits for {vset.k} verbalizers"
        )
    p = verbalizer_distribution(z, record.video_id)
    return BaseJudgment(p=p, q_b=base_score(p, vset.anchors), u_b=confidence(p))

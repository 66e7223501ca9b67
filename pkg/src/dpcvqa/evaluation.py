"""Correlation metrics, the 5-fold few-shot protocol and residual diagnostics."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import calibnet
from .calibnet import CalibParams, VariantMode
from .datastore import Container, rng_for
from .errors import DataError, ProtocolError, UndefinedMetricError
from .perception import VerbalizerSet, judge

FOLD_COUNT = 5


# -- metrics ------------------------------------------------------------------


def rank_average(x: Sequence[float]) -> np.ndarray:
    """1-based fractional ranks; tied values share the mean of their positions."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise UndefinedMetricError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size < 3:
        raise UndefinedMetricError(f"correlation needs at least 3 samples, got {p.size}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise UndefinedMetricError("non-finite values")
    return p, t


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedMetricError("correlation is undefined for a constant vector")
    r = float(a @ b) / math.sqrt(saa * sbb)
    return min(max(r, -1.0), 1.0)


def plcc(pred, truth) -> float:
    """Pearson correlation on raw values (no logistic fitting)."""
    return _pearson(*_check_pair(pred, truth))


def srcc(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    return _pearson(rank_average(p), rank_average(t))


# -- split protocol -----------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[FoldSplit, ...]
    seed: int

    @property
    def fold_count(self) -> int:
        return len(self.folds)

    def __getitem__(self, i: int) -> FoldSplit:
        if not 0 <= i < len(self.folds):
            raise ProtocolError(f"fold {i} out of range 0..{len(self.folds) - 1}")
        return self.folds[i]


def val_size(n: int) -> int:
    # round half up on 0.1 * n
    return int(math.floor(0.1 * n + 0.5))


def make_folds(ids: Sequence[str], seed: int) -> SplitPlan:
    """Five disjoint training pools; the rest of each fold split 10% val / remainder test."""
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise ProtocolError(f"the 5-fold protocol needs at least 10 labeled videos, got {n}")
    if len(set(ids)) != n:
        raise ProtocolError("duplicate ids")
    order = rng_for(seed, "split/folds").permutation(n)
    shuffled = [ids[i] for i in order]
    chunks = [list(c) for c in np.array_split(np.array(shuffled, dtype=object), FOLD_COUNT)]
    n_val = val_size(n)
    folds = []
    for i, chunk in enumerate(chunks):
        rest = [vid for j, c in enumerate(chunks) if j != i for vid in c]
        perm = rng_for(seed, f"split/fold{i}").permutation(len(rest))
        rest = [rest[k] for k in perm]
        folds.append(FoldSplit(tuple(chunk), tuple(rest[:n_val]), tuple(rest[n_val:])))
    return SplitPlan(tuple(folds), seed)


# -- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class SampleRow:
    video_id: str
    q_b: float
    delta: float
    y_hat: float
    y: float


@dataclass
class MetricReport:
    srcc: float
    plcc: float
    n: int
    rows: list[SampleRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("video_id,q_b,delta,y_hat,y\n")
        for r in self.rows:
            buf.write(f"{r.video_id},{r.q_b!r},{r.delta!r},{r.y_hat!r},{r.y!r}\n")
        return buf.getvalue()

    @property
    def mse(self) -> float:
        return float(np.mean([(r.y_hat - r.y) ** 2 for r in self.rows]))

    @property
    def mean_abs_delta(self) -> float:
        return float(np.mean([abs(r.delta) for r in self.rows]))


def _predict_rows(params, container: Container, ids, mode, vset) -> list[SampleRow]:
    mode = VariantMode.parse(mode)
    vset = vset or VerbalizerSet.for_size(container.header.k)
    rows = []
    for vid in ids:
        rec = container[vid]
        if not rec.labeled:
            raise DataError(f"record {vid!r} has no MOS label")
        pred = calibnet.predict(rec, judge(rec, vset), params, mode)
        rows.append(SampleRow(vid, pred.q_b, pred.delta, pred.y_hat, container.target(vid)))
    return rows


def evaluate(
    params: Optional[CalibParams],
    container: Container,
    ids: Sequence[str],
    mode: VariantMode = VariantMode.RESIDUAL_CALIBRATION,
    vset: Optional[VerbalizerSet] = None,
) -> MetricReport:
    """SRCC/PLCC of predictions against normalised MOS; ``params`` may be None for base_only."""
    rows = _predict_rows(params, container, ids, mode, vset)
    y_hat = [r.y_hat for r in rows]
    y = [r.y for r in rows]
    return MetricReport(srcc(y_hat, y), plcc(y_hat, y), len(rows), rows)


HIST_BINS = 20
HIST_RANGE = (-1.0, 1.0)


@dataclass
class Diagnostics:
    """Tabular data behind the base-vs-MOS, residual-vs-base and residual-histogram plots."""

    rows: list[SampleRow]
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    decile_centers: np.ndarray
    decile_means: np.ndarray
    decile_counts: np.ndarray

    @property
    def residual_slope(self) -> float:
        """Least-squares slope of mean (y - q_b) against the decile centres."""
        ok = self.decile_counts > 0
        x, y = self.decile_centers[ok], self.decile_means[ok]
        if x.size < 2 or np.ptp(x) == 0:
            return float("nan")
        return float(np.polyfit(x, y, 1)[0])

    def central_mass(self, half_width: float = 0.1) -> float:
        """Fraction of residual errors in the bins covering [-half_width, half_width]."""
        lo, hi = self.hist_edges[:-1], self.hist_edges[1:]
        inside = (lo >= -half_width - 1e-12) & (hi <= half_width + 1e-12)
        return float(self.hist_counts[inside].sum() / max(self.hist_counts.sum(), 1))

    def samples_csv(self) -> str:
        buf = io.StringIO()
        buf.write("video_id,q_b,y,residual_error,delta,y_hat\n")
        for r in self.rows:
            buf.write(f"{r.video_id},{r.q_b!r},{r.y!r},{r.y - r.q_b!r},{r.delta!r},{r.y_hat!r}\n")
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
            buf.write(f"{lo:.2f},{hi:.2f},{int(c)}\n")
        return buf.getvalue()

    def deciles_csv(self) -> str:
        buf = io.StringIO()
        buf.write("decile,q_b_center,mean_residual_error,count\n")
        for i, (c, m, k) in enumerate(zip(self.decile_centers, self.decile_means, self.decile_counts)):
            buf.write(f"{i},{c!r},{m!r},{int(k)}\n")
        return buf.getvalue()


def analyze(
    params: Optional[CalibParams],
    container: Container,
    ids: Sequence[str],
    mode: VariantMode = VariantMode.RESIDUAL_CALIBRATION,
    vset: Optional[VerbalizerSet] = None,
) -> Diagnostics:
    rows = _predict_rows(params, container, ids, mode, vset)
    q = np.array([r.q_b for r in rows])
    err = np.array([r.y - r.q_b for r in rows])
    counts, edges = np.histogram(err, bins=HIST_BINS, range=HIST_RANGE)
    # equal-count groups by base score
    centers = np.full(10, np.nan)
    means = np.full(10, np.nan)
    sizes = np.zeros(10, dtype=int)
    order = np.argsort(q, kind="mergesort")
    for i, idx in enumerate(np.array_split(order, 10)):
        sizes[i] = idx.size
        if idx.size:
            centers[i] = q[idx].mean()
            means[i] = err[idx].mean()
    return Diagnostics(rows, edges, counts, centers, means, sizes)


# -- full protocol ------------------------------------------------------------


@dataclass
class ProtocolResult:
    folds: list[MetricReport]
    mode: VariantMode

    @property
    def mean_srcc(self) -> float:
        return float(np.mean([r.srcc for r in self.folds]))

    @property
    def mean_plcc(self) -> float:
        return float(np.mean([r.plcc for r in self.folds]))

    def to_tsv(self) -> str:
        lines = ["fold\tn\tsrcc\tplcc"]
        for i, r in enumerate(self.folds):
            lines.append(f"{i}\t{r.n}\t{r.srcc:.6f}\t{r.plcc:.6f}")
        lines.append(f"mean\t{sum(r.n for r in self.folds)}\t{self.mean_srcc:.6f}\t{self.mean_plcc:.6f}")
        return "\n".join(lines) + "\n"


def run_protocol(
    container: Container,
    cfg,
    mode: VariantMode = VariantMode.RESIDUAL_CALIBRATION,
    d: int = 64,
    m: int = 8,
    alpha: float = 0.2,
    heads: int = 1,
    vset: Optional[VerbalizerSet] = None,
) -> ProtocolResult:
    """Train (unless base_only) and test every fold; ``cfg`` is a TrainConfig."""
    from .training import train

    mode = VariantMode.parse(mode)
    plan = make_folds(container.labeled_ids, cfg.seed)
    h = container.header
    reports = []
    for i, fold in enumerate(plan.folds):
        if mode is VariantMode.BASE_ONLY:
            params = None
        else:
            init = calibnet.init_params(
                d, h.d_m, h.d_a, m, alpha, heads, rng=rng_for(cfg.seed, f"init/fold{i}")
            )
            params = train(container, fold.train_ids, fold.val_ids, init, cfg, mode, vset).params
        reports.append(evaluate(params, container, fold.test_ids, mode, vset))
    return ProtocolResult(reports, mode)

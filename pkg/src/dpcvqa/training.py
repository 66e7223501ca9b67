"""Objective, exact gradients, AdamW and the few-shot training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from . import calibnet
from .calibnet import (
    TENSOR_NAMES, CalibParams, ForwardTrace, Prediction, VariantMode, _merge_heads, _split_heads,
)
from .datastore import Container, rng_for
from .errors import DataError, InvalidInputError, NumericError
from .perception import BaseJudgment, PerceptionRecord, VerbalizerSet, judge

log = logging.getLogger(__name__)

Gradients = dict  # tensor name -> array shaped like the matching CalibParams field


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    lambda_res: float = 0.05
    seed: int = 0
    smooth_l1_beta: float = 1.0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if not self.lambda_res >= 0:
            raise InvalidInputError("lambda_res must be >= 0")
        if not self.smooth_l1_beta > 0:
            raise InvalidInputError("smooth_l1_beta must be > 0")
        if self.weight_decay < 0 or self.epsilon <= 0:
            raise InvalidInputError("weight_decay must be >= 0 and epsilon > 0")


# -- objective ----------------------------------------------------------------


def smooth_l1(y_hat: float, y: float, beta: float = 1.0) -> float:
    x = abs(y_hat - y)
    return 0.5 * x * x / beta if x < beta else x - 0.5 * beta


def smooth_l1_grad(y_hat: float, y: float, beta: float = 1.0) -> float:
    x = y_hat - y
    return x / beta if abs(x) < beta else math.copysign(1.0, x)


def residual_penalty(deltas: Sequence[float]) -> float:
    if len(deltas) == 0:
        raise InvalidInputError("residual penalty needs a nonempty batch")
    return sum(abs(d) for d in deltas) / len(deltas)


def total_loss(
    predictions: Sequence[Prediction],
    labels: Sequence[float],
    cfg: TrainConfig,
    residual: bool = True,
) -> float:
    """Mean Smooth L1 plus ``lambda_res`` times the mean absolute correction.

    The correction penalty only exists for the residual model; the direct
    variants predict the score outright and have no bounded correction.
    """
    if len(predictions) != len(labels):
        raise InvalidInputError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not predictions:
        raise InvalidInputError("empty batch")
    reg = sum(smooth_l1(p.y_hat, y, cfg.smooth_l1_beta) for p, y in zip(predictions, labels)) / len(labels)
    if not residual:
        return reg
    return reg + cfg.lambda_res * residual_penalty([p.delta for p in predictions])


# -- reverse pass -------------------------------------------------------------


def zero_grads(params: CalibParams) -> Gradients:
    return {name: np.zeros_like(arr) for name, arr in params.tensors().items()}


def _accumulate(trace: ForwardTrace, params: CalibParams, d_out: float, grads: Gradients) -> None:
    """Add one sample's contribution; ``d_out`` is dL/dDelta (residual) or dL/dy_hat."""
    mode = trace.mode
    if mode is VariantMode.BASE_ONLY:
        return
    dt_ = params.dtype.type
    t_mod = trace.t_mod

    if mode is VariantMode.RESIDUAL_CALIBRATION:
        a, prop, g, s = trace.weights, trace.proposals, trace.gate, trace.sign
        alpha = dt_(params.alpha)
        d_delta = dt_(d_out)
        d_weights = d_delta * prop
        d_prop = d_delta * a
        dz_imp = a * (d_weights - np.dot(a, d_weights))
        dz_gate = d_prop * alpha * s * g * (1 - g)
        dz_sign = d_prop * alpha * g * (1 - s * s)
        grads["w_gate"] += t_mod.T @ dz_gate
        grads["b_gate"] += dz_gate.sum()
        grads["w_sign"] += t_mod.T @ dz_sign
        grads["b_sign"] += dz_sign.sum()
        grads["w_imp"] += t_mod.T @ dz_imp
        d_tmod = (
            np.outer(dz_gate, params.w_gate)
            + np.outer(dz_sign, params.w_sign)
            + np.outer(dz_imp, params.w_imp)
        )
    else:
        y = dt_(trace.y_hat)
        dz = dt_(d_out) * y * (1 - y)
        grads["w_gate"] += dz * trace.t_mean
        grads["b_gate"] += dz
        d_tmod = np.broadcast_to(dz * params.w_gate / dt_(t_mod.shape[0]), t_mod.shape)

    t = trace.t
    if mode.uses_film:
        d_gamma = (d_tmod * t).sum(axis=0)
        d_beta = d_tmod.sum(axis=0)
        grads["w_gamma"] += np.outer(d_gamma, trace.c_b)
        grads["b_gamma"] += d_gamma
        grads["w_beta"] += np.outer(d_beta, trace.c_b)
        grads["b_beta"] += d_beta
        d_t = d_tmod * trace.gamma
    else:
        d_t = d_tmod

    cache = trace.attention
    dh = params.d // params.heads
    d_th = _split_heads(np.ascontiguousarray(d_t), params.heads)
    d_attn = d_th @ cache.v.transpose(0, 2, 1)
    d_v = cache.attn.transpose(0, 2, 1) @ d_th
    d_scores = cache.attn * (d_attn - (d_attn * cache.attn).sum(axis=-1, keepdims=True))
    d_scores = d_scores / np.sqrt(dh).astype(params.dtype)
    d_q = _merge_heads(d_scores @ cache.k)
    d_k = _merge_heads(d_scores.transpose(0, 2, 1) @ cache.q)
    d_v = _merge_heads(d_v)

    grads["queries"] += d_q @ params.w_q.T
    grads["w_q"] += params.queries.T @ d_q
    bank = trace.bank
    grads["w_k"] += bank.T @ d_k
    grads["w_v"] += bank.T @ d_v
    d_bank = d_k @ params.w_k.T + d_v @ params.w_v.T

    n = trace.n_vis
    d_vis, d_aux = d_bank[:n], d_bank[n:]
    grads["w_vis"] += d_vis.T @ trace.visual
    grads["b_vis"] += d_vis.sum(axis=0)
    if d_aux.shape[0]:
        grads["w_aux"] += d_aux.T @ trace.aux
        grads["b_aux"] += d_aux.sum(axis=0)


def backward(
    traces: Sequence[ForwardTrace],
    labels: Sequence[float],
    params: CalibParams,
    cfg: TrainConfig,
) -> Gradients:
    """Exact gradient of :func:`total_loss` over one batch of traces.

    Perception outputs and input tokens are constants; accumulation runs in
    sample order so the result is bit-reproducible.
    """
    if len(traces) != len(labels):
        raise InvalidInputError(f"{len(traces)} traces for {len(labels)} labels")
    grads = zero_grads(params)
    b = len(traces)
    for trace, y in zip(traces, labels):
        d_yhat = smooth_l1_grad(trace.y_hat, y, cfg.smooth_l1_beta) / b
        if trace.mode is VariantMode.RESIDUAL_CALIBRATION:
            # subgradient of |Delta| at 0 is taken as 0
            d_out = d_yhat + cfg.lambda_res * float(np.sign(trace.delta)) / b
        else:
            d_out = d_yhat
        _accumulate(trace, params, d_out, grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return grads


# -- finite-difference oracle --------------------------------------------------


@dataclass(frozen=True)
class CoordError:
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FDReport:
    max_rel_error: float
    worst: dict = field(default_factory=dict)  # tensor name -> CoordError

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def fd_check(
    params: CalibParams,
    record: PerceptionRecord,
    label: float,
    cfg: TrainConfig,
    h: float = 1e-5,
    mode: VariantMode = VariantMode.RESIDUAL_CALIBRATION,
    judgment: Optional[BaseJudgment] = None,
    corrupt: bool = False,
) -> FDReport:
    """Compare the float64 reverse pass against central differences.

    The differenced losses are evaluated in extended precision (where the
    platform has it): in float64, rounding in the loss alone contributes about
    1e-12 to each difference quotient at h = 1e-5, which is the size of the
    tolerance on gradients below the 1e-8 floor.

    With ``corrupt`` the analytic gradient's largest coordinate is doubled,
    which the check must flag.
    """
    mode = VariantMode.parse(mode)

    def as_record(dtype) -> PerceptionRecord:
        return PerceptionRecord(
            record.video_id,
            np.asarray(record.logits, dtype=dtype),
            np.asarray(record.visual_tokens, dtype=dtype),
            np.asarray(record.aux_tokens, dtype=dtype),
            record.mos_raw,
        )

    rec64 = as_record(np.float64)
    if judgment is None:
        judgment = judge(rec64, VerbalizerSet.for_size(len(rec64.logits)))
    residual = mode is VariantMode.RESIDUAL_CALIBRATION
    params64 = params.astype(np.float64)
    _, trace = calibnet.forward(rec64, judgment, params64, mode)
    grads = backward([trace], [label], params64, cfg)

    params = params64.astype(np.longdouble)
    rec_ext = as_record(np.longdouble)
    h = np.longdouble(h)

    def loss_at(p: CalibParams):
        pred, _ = calibnet.forward(rec_ext, judgment, p, mode)
        return total_loss([pred], [label], cfg, residual=residual)

    if corrupt:
        name = max(grads, key=lambda k: float(np.max(np.abs(grads[k]), initial=0.0)))
        g = grads[name]
        idx = np.unravel_index(int(np.argmax(np.abs(g))), g.shape) if g.ndim else ()
        g[idx] *= 2.0

    report = FDReport(0.0)
    for name in TENSOR_NAMES:
        arr = getattr(params, name)
        worst = None
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_at(params)
            arr[idx] = orig - h
            down = loss_at(params)
            arr[idx] = orig
            numeric = float((up - down) / (2 * h))
            analytic = float(grads[name][idx])
            err = relative_error(analytic, numeric)
            if worst is None or err > worst.rel_error:
                worst = CoordError(name, idx, analytic, numeric, err)
        if worst is not None:
            report.worst[name] = worst
            report.max_rel_error = max(report.max_rel_error, worst.rel_error)
    return report


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: Gradients
    v: Gradients
    step: int = 0

    @classmethod
    def for_params(cls, params: CalibParams) -> "OptimizerState":
        return cls(zero_grads(params), zero_grads(params), 0)


def adamw_step(
    params: CalibParams, grads: Gradients, state: OptimizerState, cfg: TrainConfig
) -> tuple[CalibParams, OptimizerState]:
    """One AdamW update; weight decay is applied to the weights directly."""
    step = state.step + 1
    lr, wd, b1, b2 = cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    new_tensors, new_m, new_v = {}, {}, {}
    for name, theta in params.tensors().items():
        g = grads[name]
        if g.shape != theta.shape:
            raise InvalidInputError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        updated = theta * (1 - lr * wd)
        updated = updated - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        new_tensors[name] = updated.astype(theta.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(theta.dtype, copy=False), v.astype(theta.dtype, copy=False)
    return params.with_tensors(new_tensors), OptimizerState(new_m, new_v, step)


# -- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    mean_abs_delta: float
    val_srcc: float
    val_plcc: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.mean_abs_delta:.6f}\t{self.val_srcc:.6f}\t{self.val_plcc:.6f}"


EPOCH_TSV_HEADER = "epoch\ttrain_loss\tmean_abs_delta\tval_srcc\tval_plcc"


@dataclass
class TrainResult:
    params: CalibParams
    mode: VariantMode
    best_epoch: int
    best_step: int
    val_srcc: float
    history: list[EpochStats]


def judge_all(container: Container, ids: Sequence[str], vset: VerbalizerSet) -> dict[str, BaseJudgment]:
    return {vid: judge(container[vid], vset) for vid in ids}


def _labels(container: Container, ids: Sequence[str], what: str) -> list[float]:
    out = []
    for vid in ids:
        if not container[vid].labeled:
            raise DataError(f"{what} record {vid!r} has no MOS label")
        out.append(container.target(vid))
    return out


def _val_metrics(preds: list[Prediction], labels: list[float]) -> tuple[float, float]:
    from .evaluation import plcc, srcc
    from .errors import UndefinedMetricError

    y_hat = [p.y_hat for p in preds]
    try:
        s = srcc(y_hat, labels)
    except UndefinedMetricError:
        s = float("nan")
    try:
        r = plcc(y_hat, labels)
    except UndefinedMetricError:
        r = float("nan")
    return s, r


def _better(candidate: float, best: float) -> bool:
    c = -math.inf if math.isnan(candidate) else candidate
    b = -math.inf if math.isnan(best) else best
    return c > b


def train(
    container: Container,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    params: CalibParams,
    cfg: TrainConfig,
    mode: VariantMode = VariantMode.RESIDUAL_CALIBRATION,
    vset: Optional[VerbalizerSet] = None,
    log_stream: Optional[TextIO] = None,
) -> TrainResult:
    """Train on ``train_ids``; keep the epoch with the best validation SRCC.

    Epoch 0 (the initial parameters) is logged for reference and is only
    returned when ``cfg.epochs == 0``.
    """
    cfg.validate()
    mode = VariantMode.parse(mode)
    if not train_ids:
        raise DataError("training pool is empty")
    vset = vset or VerbalizerSet.for_size(container.header.k)
    y_train = _labels(container, train_ids, "training")
    y_val = _labels(container, val_ids, "validation")
    judgments = judge_all(container, list(train_ids) + list(val_ids), vset)
    residual = mode is VariantMode.RESIDUAL_CALIBRATION
    params = params.copy()
    params.validate()

    def run_pool(p: CalibParams, ids, labels) -> tuple[list[Prediction], float]:
        preds = [calibnet.forward(container[v], judgments[v], p, mode)[0] for v in ids]
        return preds, total_loss(preds, labels, cfg, residual=residual) if preds else float("nan")

    def emit(stats: EpochStats) -> None:
        history.append(stats)
        if log_stream is not None:
            print(stats.tsv(), file=log_stream, flush=True)
        log.info("epoch %s", stats.tsv())

    history: list[EpochStats] = []
    if log_stream is not None:
        print(EPOCH_TSV_HEADER, file=log_stream, flush=True)
    init_preds, init_loss = run_pool(params, train_ids, y_train)
    val_preds, _ = run_pool(params, val_ids, y_val)
    init_srcc, init_plcc = _val_metrics(val_preds, y_val)
    emit(EpochStats(0, init_loss, float(np.mean([abs(p.delta) for p in init_preds])), init_srcc, init_plcc))

    if mode is VariantMode.BASE_ONLY or cfg.epochs == 0:
        return TrainResult(params, mode, 0, 0, init_srcc, history)

    shuffle = rng_for(cfg.seed, "train/shuffle")
    state = OptimizerState.for_params(params)
    best = None
    n = len(train_ids)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        loss_sum = 0.0
        abs_delta_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            preds, traces, labels = [], [], []
            for i in batch:
                vid = train_ids[i]
                pred, trace = calibnet.forward(container[vid], judgments[vid], params, mode)
                preds.append(pred)
                traces.append(trace)
                labels.append(y_train[i])
            loss_sum += total_loss(preds, labels, cfg, residual=residual) * len(batch)
            abs_delta_sum += sum(abs(p.delta) for p in preds)
            grads = backward(traces, labels, params, cfg)
            params, state = adamw_step(params, grads, state, cfg)
        val_preds, _ = run_pool(params, val_ids, y_val)
        v_srcc, v_plcc = _val_metrics(val_preds, y_val)
        emit(EpochStats(epoch, loss_sum / n, abs_delta_sum / n, v_srcc, v_plcc))
        if best is None or _better(v_srcc, best[3]):
            best = (params.copy(), epoch, state.step, v_srcc)

    best_params, best_epoch, best_step, best_srcc = best
    return TrainResult(best_params, mode, best_epoch, best_step, best_srcc, history)

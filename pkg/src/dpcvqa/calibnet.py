"""Residual calibration network with an explicit forward trace.

Per sample, with token bank ``H_c`` (visual rows first):

    T   = softmax((Q_c W_Q)(H_c W_K)^T / sqrt(d_h)) (H_c W_V)
    T~  = gamma(c_b) * T + beta(c_b),   c_b = [q_b, u_b]
    d_m = alpha * sigmoid(w_g.T~_m + b_g) * tanh(w_s.T~_m + b_s)
    D   = sum_m softmax_m(w_a.T~_m) d_m,  y_hat = q_b + D

Everything is plain numpy so that :mod:`dpcvqa.training` can run the reverse
pass by hand from a :class:`ForwardTrace`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import InvalidInputError, ShapeError
from .perception import BaseJudgment, PerceptionRecord

# Storage order of trainable tensors; also the checkpoint layout order.
TENSOR_NAMES = (
    "w_vis", "b_vis", "w_aux", "b_aux", "queries",
    "w_q", "w_k", "w_v",
    "w_gamma", "b_gamma", "w_beta", "b_beta",
    "w_gate", "b_gate", "w_sign", "b_sign", "w_imp",
)


class VariantMode(enum.Enum):
    BASE_ONLY = "base_only"
    DIRECT_REGRESSION = "direct_regression"
    SCORE_CONDITIONED = "score_conditioned"
    RESIDUAL_CALIBRATION = "residual_calibration"

    @classmethod
    def parse(cls, name: "str | VariantMode") -> "VariantMode":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        if key in _MODE_ALIASES:
            return _MODE_ALIASES[key]
        raise InvalidInputError(
            f"unknown mode {name!r}; choose one of {sorted(_MODE_ALIASES)}"
        )

    @property
    def code(self) -> int:
        return list(VariantMode).index(self)

    @property
    def uses_film(self) -> bool:
        return self in (VariantMode.SCORE_CONDITIONED, VariantMode.RESIDUAL_CALIBRATION)


_MODE_ALIASES = {m.value: m for m in VariantMode} | {
    "direct": VariantMode.DIRECT_REGRESSION,
    "score_cond": VariantMode.SCORE_CONDITIONED,
    "residual": VariantMode.RESIDUAL_CALIBRATION,
}


@dataclass
class CalibParams:
    """Trainable tensors of the calibration branch plus its fixed hyperparameters.

    Weight shapes follow the affine conventions ``x @ W.T + b`` for the two
    input projections, ``x @ W`` for the attention projections and ``W @ c_b``
    for the FiLM generators.
    """

    w_vis: np.ndarray    # (d, d_m)
    b_vis: np.ndarray    # (d,)
    w_aux: np.ndarray    # (d, d_a)
    b_aux: np.ndarray    # (d,)
    queries: np.ndarray  # (M, d)
    w_q: np.ndarray      # (d, d)
    w_k: np.ndarray      # (d, d)
    w_v: np.ndarray      # (d, d)
    w_gamma: np.ndarray  # (d, 2)
    b_gamma: np.ndarray  # (d,)
    w_beta: np.ndarray   # (d, 2)
    b_beta: np.ndarray   # (d,)
    w_gate: np.ndarray   # (d,)
    b_gate: np.ndarray   # ()
    w_sign: np.ndarray   # (d,)
    b_sign: np.ndarray   # ()
    w_imp: np.ndarray    # (d,)
    alpha: float = 0.2
    heads: int = 1

    @property
    def d(self) -> int:
        return self.w_vis.shape[0]

    @property
    def d_m(self) -> int:
        return self.w_vis.shape[1]

    @property
    def d_a(self) -> int:
        return self.w_aux.shape[1]

    @property
    def m(self) -> int:
        return self.queries.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.w_vis.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "CalibParams":
        return replace(self, **tensors)

    def astype(self, dtype) -> "CalibParams":
        return self.with_tensors({k: np.asarray(v, dtype=dtype).copy() for k, v in self.tensors().items()})

    def copy(self) -> "CalibParams":
        return self.with_tensors({k: v.copy() for k, v in self.tensors().items()})

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.tensors().values())

    def validate(self) -> None:
        d, m = self.d, self.m
        expected = expected_shapes(d, self.d_m, self.d_a, m)
        for name, arr in self.tensors().items():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidInputError(f"alpha must be positive, got {self.alpha}")
        if self.heads < 1 or d % self.heads:
            raise InvalidInputError(f"heads={self.heads} must divide d={d}")

    def equal(self, other: "CalibParams") -> bool:
        """Bitwise equality of every tensor and hyperparameter."""
        if (self.alpha, self.heads) != (other.alpha, other.heads):
            return False
        a, b = self.tensors(), other.tensors()
        return all(
            a[k].shape == b[k].shape and a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes()
            for k in TENSOR_NAMES
        )


def expected_shapes(d: int, d_m: int, d_a: int, m: int) -> dict[str, tuple]:
    return {
        "w_vis": (d, d_m), "b_vis": (d,), "w_aux": (d, d_a), "b_aux": (d,),
        "queries": (m, d), "w_q": (d, d), "w_k": (d, d), "w_v": (d, d),
        "w_gamma": (d, 2), "b_gamma": (d,), "w_beta": (d, 2), "b_beta": (d,),
        "w_gate": (d,), "b_gate": (), "w_sign": (d,), "b_sign": (), "w_imp": (d,),
    }


def param_count(d: int, d_m: int, d_a: int, m: int) -> int:
    return d * d_m + d + d * d_a + d + m * d + 3 * d * d + 2 * (2 * d + d) + 2 * (d + 1) + d


def zero_params(d, d_m, d_a, m, alpha=0.2, heads=1, dtype=np.float32) -> CalibParams:
    shapes = expected_shapes(d, d_m, d_a, m)
    return CalibParams(**{k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}, alpha=alpha, heads=heads)


def init_params(d, d_m, d_a, m, alpha=0.2, heads=1, rng=None, dtype=np.float32) -> CalibParams:
    """Calibrated start: small random trunk, identity FiLM, zero heads.

    The heads being zero makes the residual model return exactly ``q_b``
    before any update.
    """
    rng = np.random.default_rng() if rng is None else rng
    p = zero_params(d, d_m, d_a, m, alpha, heads, dtype=np.float64)
    for name in ("w_vis", "w_aux", "queries", "w_q", "w_k", "w_v"):
        arr = getattr(p, name)
        arr[...] = rng.normal(0.0, 0.02, size=arr.shape)
    p.b_gamma[...] = 1.0
    p = p.astype(dtype)
    p.validate()
    return p


def random_params(d, d_m, d_a, m, alpha=0.2, heads=1, rng=None, scale=0.5, dtype=np.float64) -> CalibParams:
    """Every tensor drawn from N(0, scale^2); used for property and gradient tests."""
    rng = np.random.default_rng() if rng is None else rng
    shapes = expected_shapes(d, d_m, d_a, m)
    tensors = {k: rng.normal(0.0, scale, size=s).astype(dtype) for k, s in shapes.items()}
    return CalibParams(**tensors, alpha=alpha, heads=heads)


# -- building blocks ----------------------------------------------------------


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    one = x.dtype.type(1)
    return np.where(x >= 0, one / (one + e), e / (one + e))


def project_tokens(visual: np.ndarray, aux: np.ndarray, params: CalibParams) -> tuple[np.ndarray, np.ndarray]:
    if visual.ndim != 2 or visual.shape[1] != params.d_m:
        raise ShapeError(f"visual tokens {visual.shape} do not match d_m={params.d_m}")
    proj_vis = visual @ params.w_vis.T + params.b_vis
    if aux.shape[0] == 0:
        return proj_vis, np.zeros((0, params.d), dtype=proj_vis.dtype)
    if aux.ndim != 2 or aux.shape[1] != params.d_a:
        raise ShapeError(f"aux tokens {aux.shape} do not match d_a={params.d_a}")
    return proj_vis, aux @ params.w_aux.T + params.b_aux


def build_token_bank(proj_vis: np.ndarray, proj_aux: np.ndarray) -> np.ndarray:
    if proj_aux.shape[0] and proj_aux.shape[1] != proj_vis.shape[1]:
        raise ShapeError(f"cannot stack tokens of width {proj_vis.shape[1]} and {proj_aux.shape[1]}")
    if proj_aux.shape[0] == 0:
        return proj_vis
    return np.concatenate([proj_vis, proj_aux], axis=0)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    rows, d = x.shape
    return x.reshape(rows, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, rows, dh = x.shape
    return x.transpose(1, 0, 2).reshape(rows, heads * dh)


class AttentionCache(NamedTuple):
    q: np.ndarray  # (h, M, dh)
    k: np.ndarray  # (h, L, dh)
    v: np.ndarray  # (h, L, dh)
    attn: np.ndarray  # (h, M, L)


def cross_attend(queries: np.ndarray, bank: np.ndarray, params: CalibParams, cache: bool = False):
    """Scaled dot-product attention of the calibration queries over the bank.

    Returns ``T`` of shape (M, d), plus the cache when ``cache`` is set.
    """
    if bank.shape[0] == 0:
        raise InvalidInputError("token bank is empty")
    h = params.heads
    dh = params.d // h
    q = _split_heads(queries @ params.w_q, h)
    k = _split_heads(bank @ params.w_k, h)
    v = _split_heads(bank @ params.w_v, h)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh).astype(bank.dtype)
    attn = _softmax(scores, axis=-1)
    t = _merge_heads(attn @ v)
    if cache:
        return t, AttentionCache(q, k, v, attn)
    return t


def film_params(q_b: float, u_b: float, params: CalibParams) -> tuple[np.ndarray, np.ndarray]:
    c_b = np.array([q_b, u_b], dtype=params.dtype)
    return params.w_gamma @ c_b + params.b_gamma, params.w_beta @ c_b + params.b_beta


def film_modulate(t: np.ndarray, q_b: float, u_b: float, params: CalibParams) -> np.ndarray:
    if not (math.isfinite(q_b) and math.isfinite(u_b)):
        raise InvalidInputError("base condition must be finite")
    gamma, beta = film_params(q_b, u_b, params)
    return gamma * t + beta


def _open_bound(alpha: float, dtype):
    # largest representable value strictly below alpha
    return np.nextafter(dtype.type(alpha), dtype.type(0))


def _scalar(x):
    """Python float, except extended-precision values stay extended (used by gradient checks)."""
    x = np.asarray(x)
    return x[()] if x.dtype.itemsize > 8 else float(x)


class Proposals(NamedTuple):
    gate: np.ndarray
    sign: np.ndarray
    delta: np.ndarray


def residual_proposals(t_mod: np.ndarray, params: CalibParams) -> Proposals:
    g = _sigmoid(t_mod @ params.w_gate + params.b_gate)
    s = np.tanh(t_mod @ params.w_sign + params.b_sign)
    lim = _open_bound(params.alpha, t_mod.dtype)
    delta = np.clip(t_mod.dtype.type(params.alpha) * g * s, -lim, lim)
    return Proposals(g, s, delta)


def aggregate_residual(t_mod: np.ndarray, proposals: Proposals, params: CalibParams) -> tuple[np.ndarray, float]:
    if t_mod.shape[0] < 1:
        raise InvalidInputError("need at least one calibration token")
    a = _softmax(t_mod @ params.w_imp, axis=0)
    lim = _open_bound(params.alpha, t_mod.dtype)
    delta = _scalar(np.clip(np.dot(a, proposals.delta), -lim, lim))
    return a, delta


# -- full forward -------------------------------------------------------------


class TokenDiagnostics(NamedTuple):
    weight: float
    gate: float
    sign: float
    delta: float


@dataclass(frozen=True)
class Prediction:
    video_id: str
    q_b: float
    u_b: float
    delta: float
    y_hat: float
    per_token: tuple[TokenDiagnostics, ...] = ()


@dataclass
class ForwardTrace:
    """Activations kept for the reverse pass of a single sample."""

    mode: VariantMode
    visual: np.ndarray
    aux: np.ndarray
    bank: Optional[np.ndarray] = None
    n_vis: int = 0
    attention: Optional[AttentionCache] = None
    t: Optional[np.ndarray] = None
    c_b: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    t_mod: Optional[np.ndarray] = None
    gate: Optional[np.ndarray] = None
    sign: Optional[np.ndarray] = None
    proposals: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    t_mean: Optional[np.ndarray] = None
    y_hat: float = float("nan")
    delta: float = 0.0


def forward(
    record: PerceptionRecord,
    judgment: BaseJudgment,
    params: CalibParams,
    mode: VariantMode = VariantMode.RESIDUAL_CALIBRATION,
) -> tuple[Prediction, ForwardTrace]:
    mode = VariantMode.parse(mode)
    q_b, u_b = float(judgment.q_b), float(judgment.u_b)
    if mode is VariantMode.BASE_ONLY:
        trace = ForwardTrace(mode, record.visual_tokens, record.aux_tokens, y_hat=q_b)
        return Prediction(record.video_id, q_b, u_b, 0.0, q_b), trace

    dt = params.dtype
    visual = np.asarray(record.visual_tokens, dtype=dt)
    aux = np.asarray(record.aux_tokens, dtype=dt)
    if aux.ndim != 2:
        aux = aux.reshape(0, params.d_a)
    proj_vis, proj_aux = project_tokens(visual, aux, params)
    bank = build_token_bank(proj_vis, proj_aux)
    t, cache = cross_attend(params.queries, bank, params, cache=True)
    trace = ForwardTrace(mode, visual, aux, bank=bank, n_vis=visual.shape[0], attention=cache, t=t)

    if mode.uses_film:
        c_b = np.array([q_b, u_b], dtype=dt)
        gamma, beta = film_params(q_b, u_b, params)
        t_mod = gamma * t + beta
        trace.c_b, trace.gamma = c_b, gamma
    else:
        t_mod = t
    trace.t_mod = t_mod

    if mode is VariantMode.RESIDUAL_CALIBRATION:
        props = residual_proposals(t_mod, params)
        a, delta = aggregate_residual(t_mod, props, params)
        y_hat = (dt.type(q_b) if dt.itemsize > 8 else q_b) + delta
        trace.gate, trace.sign, trace.proposals, trace.weights = props.gate, props.sign, props.delta, a
        per_token = tuple(
            TokenDiagnostics(float(a[i]), float(props.gate[i]), float(props.sign[i]), float(props.delta[i]))
            for i in range(a.shape[0])
        )
    else:
        t_mean = t_mod.mean(axis=0)
        y_hat = _scalar(_sigmoid(np.asarray(t_mean @ params.w_gate + params.b_gate)))
        trace.t_mean = t_mean
        # reported for diagnostics only; no bound applies outside residual mode
        delta = y_hat - q_b
        per_token = ()

    trace.y_hat, trace.delta = y_hat, delta
    return Prediction(record.video_id, q_b, u_b, delta, y_hat, per_token), trace


def predict(record, judgment, params, mode=VariantMode.RESIDUAL_CALIBRATION) -> Prediction:
    return forward(record, judgment, params, mode)[0]

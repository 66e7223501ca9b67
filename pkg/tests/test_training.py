import dataclasses
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import small_problem
from dpcvqa.calibnet import TENSOR_NAMES, VariantMode, forward, init_params, predict, zero_params
from dpcvqa.datastore import SyntheticConfig, generate_synthetic, rng_for
from dpcvqa.errors import DataError, InvalidInputError
from dpcvqa.evaluation import evaluate, make_folds
from dpcvqa.perception import PerceptionRecord, VerbalizerSet, judge
from dpcvqa.training import (
    EPOCH_TSV_HEADER, OptimizerState, TrainConfig, adamw_step, backward, fd_check, relative_error,
    residual_penalty, smooth_l1, smooth_l1_grad, total_loss, train, zero_grads,
)
from dpcvqa.calibnet import Prediction

TRAINABLE = [m for m in VariantMode if m is not VariantMode.BASE_ONLY]
# with the default Smooth L1 transition the |Delta| penalty outweighs the regression pull
PLANTED = TrainConfig(smooth_l1_beta=0.01)


def pred(y_hat, delta=0.0, q_b=None):
    return Prediction("x", y_hat - delta if q_b is None else q_b, 0.5, delta, y_hat)


# -- losses -------------------------------------------------------------------

def test_smooth_l1_branches():
    assert smooth_l1(0.3, 0.3) == 0.0
    assert smooth_l1(0.5, 0.2) == pytest.approx(0.045)
    assert smooth_l1(2.0, 0.0) == pytest.approx(1.5)
    assert smooth_l1(0.0, 2.0, beta=0.5) == pytest.approx(1.75)


@given(st.floats(0.01, 5), st.floats(-1, 1))
def test_smooth_l1_is_continuous_and_smooth_at_beta(beta, sign):
    s = 1.0 if sign >= 0 else -1.0
    eps = 1e-9
    assert smooth_l1(s * (beta - eps), 0, beta) == pytest.approx(smooth_l1(s * (beta + eps), 0, beta), abs=1e-8)
    assert smooth_l1_grad(s * (beta - eps), 0, beta) == pytest.approx(smooth_l1_grad(s * (beta + eps), 0, beta), abs=1e-7)


def test_residual_penalty():
    assert residual_penalty([0.0, 0.0]) == 0.0
    assert residual_penalty([0.1, -0.1]) == pytest.approx(0.1)
    assert residual_penalty([0.05, 0.15, -0.1]) == pytest.approx(0.1)
    with pytest.raises(InvalidInputError):
        residual_penalty([])


def test_total_loss():
    cfg = TrainConfig()
    assert total_loss([pred(0.6, 0.1)], [0.5], cfg) == pytest.approx(0.01)
    no_reg = dataclasses.replace(cfg, lambda_res=0.0)
    assert total_loss([pred(0.6, 0.1), pred(0.2, 0.05)], [0.5, 0.4], no_reg) == pytest.approx((0.005 + 0.02) / 2)
    assert total_loss([pred(0.5)], [0.5], cfg) == 0.0
    assert total_loss([pred(0.6, 0.1)], [0.5], cfg, residual=False) == pytest.approx(0.005)
    with pytest.raises(InvalidInputError):
        total_loss([pred(0.5)], [0.5, 0.4], cfg)


# -- gradients ----------------------------------------------------------------

def test_dead_path_has_zero_projection_gradient():
    rng = np.random.default_rng(0)
    p, rec, y = small_problem(rng, 4, 2, 3, 2)
    p = p.with_tensors({"w_gate": np.zeros(4), "w_sign": np.zeros(4), "w_imp": np.zeros(4)})
    _, tr = forward(rec, judge(rec, VerbalizerSet()), p)
    g = backward([tr], [y], p, dataclasses.replace(TrainConfig(), lambda_res=0.0))
    for name in ("w_vis", "b_vis", "w_aux", "b_aux", "queries", "w_q", "w_k", "w_v"):
        assert not np.any(g[name]), name


def test_perfect_predictions_give_zero_gradient():
    rng = np.random.default_rng(1)
    p = init_params(4, 3, 2, 2, rng=rng, dtype=np.float64)
    recs = [PerceptionRecord(f"r{i}", rng.normal(size=5), rng.normal(size=(2, 3)), rng.normal(size=(1, 2)))
            for i in range(3)]
    traces = [forward(r, judge(r, VerbalizerSet()), p)[1] for r in recs]
    g = backward(traces, [t.y_hat for t in traces], p, TrainConfig())
    assert all(not np.any(g[k]) for k in TENSOR_NAMES)


def test_backward_checks_lengths():
    with pytest.raises(InvalidInputError):
        backward([], [0.5], zero_params(2, 3, 2, 1), TrainConfig())


def test_relative_error_floor():
    assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == 0.5


def test_quadratic_toy_loss_is_differenced_exactly():
    # central differences carry only O(h^2) truncation, which vanishes for a quadratic
    def loss(theta):
        return 0.5 * (3.0 * theta - 1.0) ** 2

    theta, h = 0.7, 1e-5
    numeric = (loss(theta + h) - loss(theta - h)) / (2 * h)
    assert relative_error(3.0 * (3.0 * theta - 1.0), numeric) <= 1e-9


def test_fd_check_default_small_config():
    rng = np.random.default_rng(2024)
    p, rec, y = small_problem(rng, 4, 2, 3, 2)
    for mode in TRAINABLE:
        rep = fd_check(p, rec, y, TrainConfig(), mode=mode)
        assert rep.max_rel_error <= 1e-4, (mode, rep.worst)
        assert set(rep.worst) == set(TENSOR_NAMES)


def test_fd_check_multi_head():
    rng = np.random.default_rng(5)
    p, rec, y = small_problem(rng, 8, 2, 2, 1, heads=4)
    assert fd_check(p, rec, y, TrainConfig()).max_rel_error <= 1e-4


def test_fd_check_linear_branch_of_smooth_l1():
    rng = np.random.default_rng(6)
    p, rec, y = small_problem(rng, 4, 2, 2, 1)
    cfg = dataclasses.replace(TrainConfig(), smooth_l1_beta=1e-3)
    for mode in TRAINABLE:
        assert fd_check(p, rec, y, cfg, mode=mode).max_rel_error <= 1e-4


def test_fd_check_detects_corruption():
    rng = np.random.default_rng(2024)
    p, rec, y = small_problem(rng, 4, 2, 3, 2)
    assert fd_check(p, rec, y, TrainConfig(), corrupt=True).max_rel_error > 0.4


def test_fd_check_leaves_params_untouched():
    rng = np.random.default_rng(3)
    p, rec, y = small_problem(rng, 2, 1, 1, 0)
    before = p.copy()
    fd_check(p, rec, y, TrainConfig())
    assert p.equal(before)


# -- optimizer ----------------------------------------------------------------

def test_adamw_zero_gradient_without_decay_is_identity():
    p = init_params(4, 3, 2, 2, rng=np.random.default_rng(0), dtype=np.float64)
    cfg = dataclasses.replace(TrainConfig(), weight_decay=0.0)
    q, state = adamw_step(p, zero_grads(p), OptimizerState.for_params(p), cfg)
    assert q.equal(p) and state.step == 1


def test_adamw_decoupled_decay():
    p = init_params(4, 3, 2, 2, rng=np.random.default_rng(0), dtype=np.float64)
    cfg = dataclasses.replace(TrainConfig(), weight_decay=0.1, learning_rate=0.01)
    q, _ = adamw_step(p, zero_grads(p), OptimizerState.for_params(p), cfg)
    for name in TENSOR_NAMES:
        np.testing.assert_allclose(q.tensors()[name], p.tensors()[name] * (1 - 0.001), rtol=1e-15)


def test_adamw_first_step_moves_by_learning_rate():
    p = zero_params(1, 1, 0, 1, dtype=np.float64)
    grads = zero_grads(p)
    grads["b_gate"] = np.array(1.0)
    cfg = dataclasses.replace(TrainConfig(), learning_rate=0.1, weight_decay=0.0)
    q, state = adamw_step(p, grads, OptimizerState.for_params(p), cfg)
    assert float(q.b_gate) == pytest.approx(-0.1, rel=1e-6)
    assert float(state.m["b_gate"]) == pytest.approx(0.1)
    assert float(state.v["b_gate"]) == pytest.approx(0.001)


def test_adamw_preserves_dtype():
    p = init_params(4, 3, 2, 2, rng=np.random.default_rng(0))
    q, _ = adamw_step(p, zero_grads(p), OptimizerState.for_params(p), TrainConfig())
    assert q.dtype == np.float32


def test_config_validation():
    for bad in (dict(learning_rate=0), dict(beta1=1.0), dict(batch_size=0), dict(lambda_res=-1),
                dict(smooth_l1_beta=0), dict(epochs=-1)):
        with pytest.raises(InvalidInputError):
            dataclasses.replace(TrainConfig(), **bad).validate()


# -- training loop ------------------------------------------------------------

@pytest.fixture(scope="module")
def planted():
    c = generate_synthetic(SyntheticConfig())
    fold = make_folds(c.labeled_ids, 0)[0]
    init = init_params(64, 16, 8, 8, rng=rng_for(0, "init/fold0"))
    return c, fold, init


def test_zero_epochs_returns_initial_params(small_container):
    fold = make_folds(small_container.labeled_ids, 1)[0]
    init = init_params(8, 16, 8, 2, rng=np.random.default_rng(0))
    res = train(small_container, fold.train_ids, fold.val_ids, init, dataclasses.replace(TrainConfig(), epochs=0))
    assert res.params.equal(init) and res.best_epoch == 0
    base = evaluate(None, small_container, fold.val_ids, VariantMode.BASE_ONLY)
    assert res.val_srcc == base.srcc


def test_training_is_deterministic(small_container):
    fold = make_folds(small_container.labeled_ids, 1)[0]
    init = init_params(8, 16, 8, 2, rng=np.random.default_rng(0))
    cfg = dataclasses.replace(PLANTED, epochs=3)
    a = train(small_container, fold.train_ids, fold.val_ids, init, cfg)
    b = train(small_container, fold.train_ids, fold.val_ids, init, cfg)
    assert a.params.equal(b.params) and a.history == b.history
    c = train(small_container, fold.train_ids, fold.val_ids, init, dataclasses.replace(cfg, seed=1))
    assert not c.params.equal(a.params)


def test_training_does_not_touch_base_scores(small_container):
    fold = make_folds(small_container.labeled_ids, 1)[0]
    v = VerbalizerSet()
    before = [judge(small_container[i], v).q_b for i in fold.test_ids]
    init = init_params(8, 16, 8, 2, rng=np.random.default_rng(0))
    res = train(small_container, fold.train_ids, fold.val_ids, init, dataclasses.replace(PLANTED, epochs=2))
    after = [predict(small_container[i], judge(small_container[i], v), res.params).q_b for i in fold.test_ids]
    assert before == after


def test_log_stream_gets_one_line_per_epoch(small_container):
    fold = make_folds(small_container.labeled_ids, 1)[0]
    init = init_params(8, 16, 8, 2, rng=np.random.default_rng(0))
    buf = io.StringIO()
    train(small_container, fold.train_ids, fold.val_ids, init, dataclasses.replace(PLANTED, epochs=3), log_stream=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == EPOCH_TSV_HEADER
    assert [int(l.split("\t")[0]) for l in lines[1:]] == [0, 1, 2, 3]
    assert all(len(l.split("\t")) == 5 for l in lines)


def test_unlabeled_records_are_refused(small_container):
    c = generate_synthetic(SyntheticConfig(record_count=20, seed=1))
    c.records[0].mos_raw = None
    init = init_params(4, 16, 8, 1, rng=np.random.default_rng(0))
    with pytest.raises(DataError):
        train(c, [c.records[0].video_id], [], init, TrainConfig())
    with pytest.raises(DataError):
        train(c, [], [], init, TrainConfig())


def test_selection_keeps_best_validation_epoch(small_container):
    fold = make_folds(small_container.labeled_ids, 2)[0]
    init = init_params(8, 16, 8, 2, rng=np.random.default_rng(0))
    res = train(small_container, fold.train_ids, fold.val_ids, init, dataclasses.replace(PLANTED, epochs=5))
    trained = res.history[1:]
    best = max(s.val_srcc for s in trained)
    assert res.val_srcc == best
    assert res.best_epoch == next(s.epoch for s in trained if s.val_srcc == best)


def test_training_loss_falls_on_planted_problem(planted):
    c, fold, init = planted
    res = train(c, fold.train_ids, fold.val_ids, init, PLANTED)
    assert res.history[-1].epoch == 30
    assert res.history[-1].train_loss < res.history[0].train_loss


def test_default_config_beats_base_on_validation(planted):
    c, fold, init = planted
    res = train(c, fold.train_ids, fold.val_ids, init, TrainConfig())
    base = evaluate(None, c, fold.val_ids, VariantMode.BASE_ONLY)
    assert res.val_srcc > base.srcc


def test_stronger_penalty_shrinks_corrections(planted):
    c, fold, init = planted
    sizes = []
    for lam in (0.0, 1.0):
        res = train(c, fold.train_ids, fold.val_ids, init, dataclasses.replace(PLANTED, lambda_res=lam, epochs=10))
        sizes.append(evaluate(res.params, c, fold.test_ids).mean_abs_delta)
    assert sizes[1] < sizes[0]

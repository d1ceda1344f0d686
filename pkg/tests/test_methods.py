import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgetlab.methods import (
    EwcAnchor,
    MethodConfig,
    ReplayBuffer,
    StableSgdConfig,
    TrainingDivergedError,
    agem_project,
    er_step,
    er_update,
    ewc_fisher_diag,
    ewc_penalty,
    replay_loss_and_grad,
    stable_sgd_lr,
    train_sequence,
    warm_start,
)
from forgetlab.model import Batch, MlpSpec, init_model, loss_and_grad
from forgetlab.numcore import ParamVector, RngStream
from forgetlab.sam import SamConfig
from forgetlab.tasks import gen_split_blobs, gen_warm_start_corpus


def _stream(seed=0, **kw):
    args = dict(num_tasks=3, classes_per_task=2, dim=6, samples_per_class=30, separation=8.0, noise=0.4)
    args.update(kw)
    return gen_split_blobs(seed=seed, **args)


def _model(stream, seed=0, hidden=(8,)):
    spec = MlpSpec(stream.input_dim, hidden, tuple((t.task_id, t.class_count) for t in stream.tasks), "relu")
    return init_model(spec, RngStream(seed, "model-init"))


# ------------------------------------------------------------- lr schedule


def test_stable_sgd_lr_decays_per_task_position():
    assert stable_sgd_lr(0.25, 0.9, 0) == 0.25
    assert stable_sgd_lr(0.25, 0.9, 1) == pytest.approx(0.225)
    assert stable_sgd_lr(0.25, 0.9, 4) == pytest.approx(0.25 * 0.9**4)
    with pytest.raises(ValueError):
        stable_sgd_lr(0.0, 0.9, 1)
    with pytest.raises(ValueError):
        stable_sgd_lr(0.1, 1.5, 1)
    with pytest.raises(ValueError):
        stable_sgd_lr(0.1, 0.9, -1)


def test_method_config_validation_and_label():
    with pytest.raises(ValueError):
        MethodConfig(method="dreaming")
    with pytest.raises(ValueError):
        MethodConfig(lr=0.0)
    with pytest.raises(ValueError):
        MethodConfig(batch_size=0)
    assert MethodConfig(method="er").label == "er"
    assert MethodConfig(method="er", name="er_big").label == "er_big"


# --------------------------------------------------------------------- EWC


def _pv(values):
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, (("w", (values.size,)),))


def test_ewc_penalty_closed_form_single_anchor():
    params = _pv([1.0, 2.0, 3.0])
    anchor = EwcAnchor(params=_pv([0.0, 1.0, 3.0]), fisher=_pv([2.0, 4.0, 8.0]))
    lam = 0.5
    value, grad = ewc_penalty(params, [anchor], lam)
    # (lam/2) * sum F (w - w*)^2 = 0.25 * (2*1 + 4*1 + 8*0)
    assert value == pytest.approx(0.25 * 6.0, abs=1e-15)
    np.testing.assert_allclose(grad.values, lam * np.array([2.0, 4.0, 0.0]), atol=1e-15)


def test_ewc_penalty_accumulates_over_anchors():
    params = _pv([1.0])
    a1 = EwcAnchor(_pv([0.0]), _pv([1.0]))
    a2 = EwcAnchor(_pv([2.0]), _pv([3.0]))
    v, g = ewc_penalty(params, [a1, a2], lam=2.0)
    assert v == pytest.approx(1.0 * 1.0 + 1.0 * 3.0)
    assert g.values[0] == pytest.approx(2.0 * 1.0 * 1.0 + 2.0 * 3.0 * (-1.0))


def test_ewc_penalty_zero_cases():
    params = _pv([1.0, 2.0])
    v, g = ewc_penalty(params, [], 1.0)
    assert v == 0.0
    assert np.all(g.values == 0.0)
    v, g = ewc_penalty(params, [EwcAnchor(_pv([0.0, 0.0]), _pv([1.0, 1.0]))], 0.0)
    assert v == 0.0
    assert np.all(g.values == 0.0)
    with pytest.raises(ValueError):
        ewc_penalty(params, [], -1.0)


def test_ewc_fisher_diag_is_nonnegative_and_deterministic():
    stream = _stream()
    state = _model(stream)
    task = stream.tasks[0]
    f1 = ewc_fisher_diag(state, task, 32, RngStream(0, "f"))
    f2 = ewc_fisher_diag(state, task, 32, RngStream(0, "f"))
    np.testing.assert_array_equal(f1.values, f2.values)
    assert np.all(f1.values >= 0.0)
    assert np.any(f1.values > 0.0)
    assert f1.layout == state.get_flat().layout
    # inactive heads never receive gradient, so their Fisher mass is zero
    offset = 0
    for name, shape in f1.layout:
        n = int(np.prod(shape))
        if name.startswith("head.1.") or name.startswith("head.2."):
            assert np.all(f1.values[offset : offset + n] == 0.0)
        offset += n


def test_ewc_fisher_sample_count_validation():
    stream = _stream()
    state = _model(stream)
    with pytest.raises(ValueError):
        ewc_fisher_diag(state, stream.tasks[0], 0, RngStream(0, "f"))


# ---------------------------------------------------------------- ER buffer


def test_er_update_fills_one_slot_per_class():
    stream = _stream()
    buf = ReplayBuffer(mem_per_class=1)
    er_update(buf, stream.tasks[0], RngStream(0, "s"))
    assert buf.size == 2
    er_update(buf, stream.tasks[1], RngStream(1, "s"))
    assert buf.size == 4
    tasks_seen = {t for t, _, _ in buf.entries()}
    assert tasks_seen == {0, 1}


def test_er_update_respects_mem_per_class():
    stream = _stream()
    buf = ReplayBuffer(mem_per_class=3)
    er_update(buf, stream.tasks[0], RngStream(0, "s"))
    assert buf.size == 6


def test_er_update_never_touches_previous_tasks():
    stream = _stream()
    buf = ReplayBuffer(1)
    er_update(buf, stream.tasks[0], RngStream(0, "s"))
    before = [(t, x.copy(), y) for t, x, y in buf.entries()]
    er_update(buf, stream.tasks[1], RngStream(1, "s"))
    after = [e for e in buf.entries() if e[0] == 0]
    assert len(after) == len(before)
    for (t0, x0, y0), (t1, x1, y1) in zip(before, after):
        assert (t0, y0) == (t1, y1)
        np.testing.assert_array_equal(x0, x1)


def test_er_update_stores_real_training_examples():
    stream = _stream()
    buf = ReplayBuffer(1)
    er_update(buf, stream.tasks[0], RngStream(0, "s"))
    train = stream.tasks[0].train
    for _, x, y in buf.entries():
        matches = np.all(train.inputs == x, axis=1)
        assert np.any(matches)
        assert y in train.labels[matches]


def test_buffer_sample_is_without_replacement():
    stream = _stream()
    buf = ReplayBuffer(3)
    er_update(buf, stream.tasks[0], RngStream(0, "s"))
    sample = buf.sample(6, RngStream(0, "pick"))
    assert len(sample) == 6
    with pytest.raises(ValueError):
        buf.sample(7, RngStream(0, "pick"))


def test_replay_loss_is_task_count_weighted():
    stream = _stream()
    state = _model(stream)
    buf = ReplayBuffer(2)
    er_update(buf, stream.tasks[0], RngStream(0, "s"))
    er_update(buf, stream.tasks[1], RngStream(1, "s"))
    entries = buf.entries()
    m = len(entries)
    loss, grad = replay_loss_and_grad(state, entries)
    expected_loss = 0.0
    expected_grad = np.zeros(state.num_params)
    for task_id in (0, 1):
        sel = [(x, y) for t, x, y in entries if t == task_id]
        xs = np.stack([x for x, _ in sel])
        ys = np.array([y for _, y in sel])
        l, g = loss_and_grad(state, Batch(xs, ys, task_id))
        expected_loss += (len(sel) / m) * l
        expected_grad += (len(sel) / m) * g.values
    assert loss == pytest.approx(expected_loss, abs=1e-12)
    np.testing.assert_allclose(grad.values, expected_grad, atol=1e-12)


def test_replay_rejects_empty_batch():
    stream = _stream()
    state = _model(stream)
    with pytest.raises(ValueError):
        replay_loss_and_grad(state, [])


def test_er_step_with_empty_buffer_is_plain_sgd():
    stream = _stream()
    state_a = _model(stream)
    state_b = _model(stream)
    task = stream.tasks[0]
    batch = Batch(task.train.inputs[:10], task.train.labels[:10], 0)
    er_step(state_a, batch, ReplayBuffer(1), lr=0.1, rng=RngStream(0, "r"))
    _, grad = loss_and_grad(state_b, batch)
    state_b.flat -= 0.1 * grad.values
    np.testing.assert_array_equal(state_a.flat, state_b.flat)


# ------------------------------------------------------------------- A-GEM


def test_agem_projection_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = _pv(rng.normal(size=8))
        ref = _pv(rng.normal(size=8))
        proj = agem_project(g, ref)
        if g.dot(ref) >= 0.0:
            np.testing.assert_array_equal(proj.values, g.values)
        else:
            assert proj.dot(ref) == pytest.approx(0.0, abs=1e-12)
            # only the ref component was removed
            residual = g.values - proj.values
            cross = residual - (residual @ ref.values) / (ref.values @ ref.values) * ref.values
            np.testing.assert_allclose(cross, 0.0, atol=1e-12)


def test_agem_zero_reference_returns_gradient():
    g = _pv([1.0, -2.0])
    proj = agem_project(g, _pv([0.0, 0.0]))
    np.testing.assert_array_equal(proj.values, g.values)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_agem_never_increases_reference_conflict(seed):
    rng = np.random.default_rng(seed)
    scale_g = 10.0 ** float(rng.integers(-3, 4))
    scale_r = 10.0 ** float(rng.integers(-3, 4))
    g = _pv(rng.normal(size=5) * scale_g)
    ref = _pv(rng.normal(size=5) * scale_r)
    proj = agem_project(g, ref)
    # cancellation error scales with the magnitudes involved
    assert proj.dot(ref) >= -1e-12 * max(1.0, g.norm() * ref.norm())


# --------------------------------------------------------------- sequences


def test_train_sequence_shapes_and_snapshots():
    stream = _stream()
    state = _model(stream)
    cfg = MethodConfig(method="finetune", lr=0.05, epochs=2)
    tlog = train_sequence(state, stream, cfg, RngStream(0, "train"))
    assert tlog.task_ids == [0, 1, 2]
    assert [len(r) for r in tlog.scores.rows()] == [1, 2, 3]
    assert len(tlog.snapshots) == 3
    assert len(tlog.loss_curves) == 3
    assert all(len(c) == 2 for c in tlog.loss_curves)
    np.testing.assert_array_equal(tlog.snapshots[-1].values, state.get_flat().values)
    assert tlog.buffer_sizes == [0, 0, 0]


def test_train_sequence_learns_each_task():
    stream = _stream(separation=10.0, noise=0.3)
    state = _model(stream)
    cfg = MethodConfig(method="finetune", lr=0.1, epochs=5)
    tlog = train_sequence(state, stream, cfg, RngStream(0, "train"))
    for t in range(1, 4):
        assert tlog.scores.score(t, t) >= 0.9
    # within-task loss goes down
    for curve in tlog.loss_curves:
        assert curve[-1] < curve[0]


def test_heads_of_finished_tasks_are_frozen():
    stream = _stream()
    state = _model(stream)
    cfg = MethodConfig(method="finetune", lr=0.05, epochs=2)
    tlog = train_sequence(state, stream, cfg, RngStream(0, "train"))
    layout = tlog.snapshots[0].layout
    offset = 0
    blocks = {}
    for name, shape in layout:
        n = int(np.prod(shape))
        blocks[name] = slice(offset, offset + n)
        offset += n
    # head 0 must be bit-identical from its training end through the last task
    for name in ("head.0.W", "head.0.b"):
        sl = blocks[name]
        np.testing.assert_array_equal(tlog.snapshots[0].values[sl], tlog.snapshots[2].values[sl])
    # the trunk is what moves
    moved = tlog.snapshots[2].values[blocks["trunk.0.W"]] - tlog.snapshots[0].values[blocks["trunk.0.W"]]
    assert np.any(moved != 0.0)


def test_train_sequence_is_deterministic():
    stream = _stream()
    cfg = MethodConfig(method="er", lr=0.05, epochs=2)
    a = train_sequence(_model(stream), stream, cfg, RngStream(3, "train"))
    b = train_sequence(_model(stream), stream, cfg, RngStream(3, "train"))
    assert a.scores.rows() == b.scores.rows()
    np.testing.assert_array_equal(a.snapshots[-1].values, b.snapshots[-1].values)
    c = train_sequence(_model(stream), stream, cfg, RngStream(4, "train"))
    assert not np.array_equal(a.snapshots[-1].values, c.snapshots[-1].values)


def test_er_buffer_grows_by_classes_per_task():
    stream = _stream()
    state = _model(stream)
    cfg = MethodConfig(method="er", lr=0.05, epochs=1, er_mem_per_class=1)
    tlog = train_sequence(state, stream, cfg, RngStream(0, "train"))
    assert tlog.buffer_sizes == [2, 4, 6]


def test_agem_buffer_grows_like_er():
    stream = _stream()
    state = _model(stream)
    cfg = MethodConfig(method="agem", lr=0.05, epochs=1)
    tlog = train_sequence(state, stream, cfg, RngStream(0, "train"))
    assert tlog.buffer_sizes == [2, 4, 6]


def test_strong_ewc_pins_parameters_to_the_anchor():
    # lambda must stay small enough that lr * lambda * fisher < 2 (step stability)
    stream = _stream()
    cfg_ft = MethodConfig(method="finetune", lr=0.05, epochs=3)
    cfg_ewc = MethodConfig(method="ewc", lr=0.05, epochs=3, ewc_lambda=50.0, ewc_fisher_samples=64)
    log_ft = train_sequence(_model(stream), stream, cfg_ft, RngStream(0, "train"))
    log_ewc = train_sequence(_model(stream), stream, cfg_ewc, RngStream(0, "train"))
    drift_ft = (log_ft.snapshots[-1] - log_ft.snapshots[0]).norm()
    drift_ewc = (log_ewc.snapshots[-1] - log_ewc.snapshots[0]).norm()
    assert drift_ewc < drift_ft


def test_sam_trains_and_differs_from_plain_sgd():
    stream = _stream()
    cfg_plain = MethodConfig(method="finetune", lr=0.05, epochs=2)
    cfg_sam = MethodConfig(method="finetune", lr=0.05, epochs=2, sam=SamConfig(rho=0.1))
    log_plain = train_sequence(_model(stream), stream, cfg_plain, RngStream(0, "train"))
    log_sam = train_sequence(_model(stream), stream, cfg_sam, RngStream(0, "train"))
    assert not np.array_equal(log_plain.snapshots[-1].values, log_sam.snapshots[-1].values)
    assert log_sam.scores.score(3, 3) >= 0.8


def test_stable_sgd_uses_its_own_schedule():
    stream = _stream()
    cfg = MethodConfig(method="stable_sgd", epochs=2, stable=StableSgdConfig(lr0=0.2, lr_decay_per_task=0.5, batch_size=10))
    tlog = train_sequence(_model(stream), stream, cfg, RngStream(0, "train"))
    assert tlog.scores.num_tasks == 3


def test_divergence_is_reported_with_location():
    stream = _stream()
    state = _model(stream)
    # poisoned parameters overflow the head matmul on the very first batch
    state.flat[:] = 1e300
    cfg = MethodConfig(method="finetune", lr=0.05, epochs=2)
    with pytest.raises(TrainingDivergedError) as exc, np.errstate(over="ignore", invalid="ignore"):
        train_sequence(state, stream, cfg, RngStream(0, "train"))
    assert exc.value.task_pos == 0
    assert exc.value.epoch == 0
    assert exc.value.step == 0


# -------------------------------------------------------------- warm start


def test_warm_start_zero_epochs_returns_identical_copy():
    stream = _stream()
    state = _model(stream)
    corpus = gen_warm_start_corpus(stream, seed=1)
    out = warm_start(state, corpus, epochs=0, lr=0.05, rng=RngStream(0, "w"))
    assert out is not state
    np.testing.assert_array_equal(out.flat, state.flat)
    out.flat[0] += 1.0
    assert out.flat[0] != state.flat[0]


def test_warm_start_moves_trunk_and_freezes_heads():
    stream = _stream()
    state = _model(stream)
    corpus = gen_warm_start_corpus(stream, seed=1)
    before = {name: view.copy() for name, view in state.params.items()}
    out = warm_start(state, corpus, epochs=2, lr=0.05, rng=RngStream(0, "w"))
    # original untouched
    for name, view in state.params.items():
        np.testing.assert_array_equal(view, before[name])
    # trunk trained, heads bit-identical
    assert not np.array_equal(out.params["trunk.0.W"], before["trunk.0.W"])
    for name in before:
        if name.startswith("head."):
            np.testing.assert_array_equal(out.params[name], before[name])
    # no temporary head leaks into the returned model
    assert set(out.params) == set(before)
    assert out.spec == state.spec


def test_warm_start_is_deterministic():
    stream = _stream()
    state = _model(stream)
    corpus = gen_warm_start_corpus(stream, seed=1)
    a = warm_start(state, corpus, 2, 0.05, RngStream(5, "w"))
    b = warm_start(state, corpus, 2, 0.05, RngStream(5, "w"))
    np.testing.assert_array_equal(a.flat, b.flat)


def test_warm_start_validates_epochs():
    stream = _stream()
    state = _model(stream)
    corpus = gen_warm_start_corpus(stream, seed=1)
    with pytest.raises(ValueError):
        warm_start(state, corpus, -1, 0.05, RngStream(0, "w"))

"""Optimizer, schedules, metrics log, and the three training stages.

The resume tests simulate a real interruption: a hook raises once a given
epoch is reached, then the stage function is called again with the same
config and output directory.  Artifacts must match an uninterrupted run
byte for byte.
"""

import types

import numpy as np
import pytest

from poseforge import autodiff as ad
from poseforge import training
from poseforge.checkpoint import load_checkpoint
from poseforge.data import load_dataset
from poseforge.errors import DataError, NumericError, StateError
from poseforge.training import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    Adam,
    EarlyStopper,
    MetricsLog,
    PlateauScheduler,
    build_field,
    build_regressor,
    dataset_pose_loss,
    exponential_lr,
    load_model_blocks,
    load_regressor_checkpoint,
    model_blocks,
    render_label_cache,
    rendered_class_accuracy,
    run_stage1,
    run_stage2,
    run_stage3,
    save_stage1_checkpoint,
    stage2_step,
)

from conftest import small_run_config


# -- Adam ------------------------------------------------------------------


def reference_adam(data, grads, lr, wd, steps):
    """Same float operation order as the implementation, kept independent."""
    p = data.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t in range(1, steps + 1):
        g = grads[t - 1]
        if wd:
            g = g + wd * p
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        bc1 = 1.0 - ADAM_BETA1**t
        bc2 = 1.0 - ADAM_BETA2**t
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return p


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adam_matches_reference(wd):
    rng = np.random.default_rng(0)
    start = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    p = ad.param(start.copy(), name="w")
    opt = Adam({"w": p}, lr=0.05, weight_decay=wd)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    np.testing.assert_allclose(p.data, reference_adam(start, grads, 0.05, wd, 5), rtol=1e-12)


def test_adam_first_step_is_signlike():
    """With bias correction, step one moves by about lr in the gradient
    direction regardless of gradient magnitude."""
    p = ad.param(np.zeros(3), name="w")
    opt = Adam({"w": p}, lr=0.1)
    p.grad = np.array([1e-4, -5.0, 1000.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.1, 0.1, -0.1], rtol=1e-5)


def test_adam_nan_gradient_names_parameter():
    p = ad.param(np.zeros(2), name="former.head_x.w")
    opt = Adam({"former.head_x.w": p}, lr=0.1)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError, match="non-finite gradient in parameter former.head_x.w"):
        opt.step()


def test_adam_missing_gradient_is_noop_without_decay():
    p = ad.param(np.array([1.0, 2.0]), name="w")
    opt = Adam({"w": p}, lr=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_missing_gradient_still_decays():
    p = ad.param(np.array([1.0, 2.0]), name="w")
    opt = Adam({"w": p}, lr=0.1, weight_decay=0.5)
    opt.step()
    assert (p.data < [1.0, 2.0]).all()


def test_adam_zero_grad_clears():
    p = ad.param(np.zeros(2), name="w")
    opt = Adam({"w": p}, lr=0.1)
    p.grad = np.ones(2)
    opt.zero_grad()
    assert p.grad is None


def test_adam_state_round_trip():
    rng = np.random.default_rng(1)
    p = ad.param(rng.normal(size=4), name="w")
    opt = Adam({"w": p}, lr=0.1)
    for _ in range(3):
        p.grad = rng.normal(size=4)
        opt.step()
    state = opt.state()

    q = ad.param(p.data.copy(), name="w")
    opt2 = Adam({"w": q}, lr=0.1)
    opt2.load_state(state)
    assert opt2.step_count == 3
    np.testing.assert_array_equal(opt2.m[0], opt.m[0])
    np.testing.assert_array_equal(opt2.v[0], opt.v[0])

    g = rng.normal(size=4)
    p.grad = g.copy()
    q.grad = g.copy()
    opt.step()
    opt2.step()
    np.testing.assert_array_equal(p.data, q.data)


def test_adam_load_state_validation():
    p = ad.param(np.zeros(3), name="w")
    opt = Adam({"w": p}, lr=0.1)
    with pytest.raises(StateError, match="missing block 'opt.m.w'"):
        opt.load_state({"opt.step": np.asarray(1.0)})
    bad = {"opt.step": np.asarray(1.0), "opt.m.w": np.zeros(2), "opt.v.w": np.zeros(3)}
    with pytest.raises(StateError, match="shape"):
        opt.load_state(bad)


# -- schedules ---------------------------------------------------------------


def test_plateau_scheduler_cuts_after_patience():
    sched = PlateauScheduler(1.0, factor=0.5, patience=3)
    assert sched.observe(10.0) == 1.0  # first value improves on inf
    assert sched.observe(10.0) == 1.0
    assert sched.observe(10.0) == 1.0
    assert sched.observe(10.0) == 0.5  # third stagnant epoch trips the cut
    # The stagnation counter resets after a cut.
    assert sched.observe(10.0) == 0.5
    assert sched.observe(9.0) == 0.5  # improvement keeps lr


def test_plateau_scheduler_improvement_resets_counter():
    sched = PlateauScheduler(1.0, factor=0.5, patience=2)
    sched.observe(5.0)
    sched.observe(5.0)
    sched.observe(4.0)  # resets
    assert sched.observe(4.0) == 1.0
    assert sched.observe(4.0) == 0.5


def test_early_stopper_patience():
    stop = EarlyStopper(patience=3)
    assert not stop.observe(5.0)
    assert not stop.observe(5.0)
    assert not stop.observe(5.0)
    assert stop.observe(5.0)  # third stagnant observation


def test_early_stopper_improvement_resets():
    stop = EarlyStopper(patience=2)
    stop.observe(5.0)
    stop.observe(5.0)
    assert not stop.observe(4.0)
    assert not stop.observe(4.0)
    assert stop.observe(4.0)


def test_early_stopper_disabled_by_nonpositive_patience():
    stop = EarlyStopper(patience=0)
    stop.observe(1.0)
    assert not any(stop.observe(1.0) for _ in range(100))


def test_exponential_lr_endpoints():
    assert exponential_lr(1e-3, 0, 100, 0.1) == 1e-3
    assert exponential_lr(1e-3, 99, 100, 0.1) == pytest.approx(1e-4, rel=1e-12)
    mid = [exponential_lr(1e-3, s, 100, 0.1) for s in range(100)]
    assert all(a > b for a, b in zip(mid, mid[1:]))
    # A single-step schedule stays at lr0 * decay^0.
    assert exponential_lr(1e-3, 0, 1, 0.1) == 1e-3


def test_metrics_log_write_and_resume(tmp_path):
    path = tmp_path / "metrics.csv"
    log = MetricsLog(path)
    log.row(0, "train", 1.5, 1e-3)
    log.row(0, "val", 2.5, 1e-3)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,split,loss,lr"
    assert lines[1] == "0,train,1.5,0.001"

    MetricsLog(path, resume=True).row(1, "train", 1.25, 1e-3)
    assert len(path.read_text().strip().split("\n")) == 4

    MetricsLog(path, resume=False)
    assert path.read_text().strip() == "epoch,split,loss,lr"


# -- factories and checkpoint plumbing ----------------------------------------


def test_build_regressor_is_deterministic():
    cfg = small_run_config()
    a, _ = build_regressor(cfg)
    b, _ = build_regressor(cfg)
    for (name, ta), (_, tb) in zip(a.state().items(), b.state().items()):
        np.testing.assert_array_equal(ta, tb, err_msg=name)
    c, _ = build_regressor(small_run_config(seed=1))
    assert not np.array_equal(a.former.head_x.lin1.w.data, c.former.head_x.lin1.w.data)


def test_build_field_is_deterministic():
    cfg = small_run_config()
    a = build_field(cfg, n_classes=3, near=0.5, far=3.0)
    b = build_field(cfg, n_classes=3, near=0.5, far=3.0)
    for (name, ta), (_, tb) in zip(a.parameters().items(), b.parameters().items()):
        np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)
    assert a.cfg.n_classes == 3


def test_model_blocks_round_trip():
    cfg = small_run_config()
    model, _ = build_regressor(cfg)
    blocks = model_blocks(model, "model")
    assert all(k.startswith("model.") for k in blocks)

    other, _ = build_regressor(small_run_config(seed=9))
    load_model_blocks(other, blocks, "model")
    for (name, ta), (_, tb) in zip(model.state().items(), other.state().items()):
        np.testing.assert_array_equal(ta, tb, err_msg=name)


def test_load_model_blocks_missing_prefix():
    cfg = small_run_config()
    model, _ = build_regressor(cfg)
    with pytest.raises(StateError, match="checkpoint has no 'model' blocks"):
        load_model_blocks(model, {"other.w": np.zeros(1)}, "model")


def test_stage1_checkpoint_round_trip(tmp_path):
    cfg = small_run_config()
    model, loss_state = build_regressor(cfg)
    loss_state.s_x.data[...] = 0.7
    path = tmp_path / "ckpt.pfck"
    save_stage1_checkpoint(path, model, loss_state, epoch=12)

    fresh, fresh_loss = build_regressor(small_run_config(seed=5))
    blocks = load_regressor_checkpoint(path, fresh, fresh_loss)
    assert int(blocks["meta.epoch"]) == 12
    assert float(fresh_loss.s_x.data) == 0.7
    np.testing.assert_array_equal(fresh.former.alpha2.data, model.former.alpha2.data)
    assert fresh.former.alpha2.data.shape == ()  # scalars stay 0-d through disk


# -- stage 1 -------------------------------------------------------------------


@pytest.fixture()
def tiny_train(tiny_dataset_dir):
    train, val = load_dataset(tiny_dataset_dir, split_ratio=0.0)
    return train, val


def stage1_cfg(**extra):
    base = {"stage1_epochs": 4, "stage1_lr": 1e-3, "stage1_batch": 8}
    base.update(extra)
    return small_run_config(**base)


def test_run_stage1_empty_dataset(tiny_train, tmp_path):
    train, val = tiny_train
    empty = type(train)(**{**train.__dict__, "samples": []})
    cfg = stage1_cfg()
    model, loss_state = build_regressor(cfg)
    with pytest.raises(DataError, match="non-empty training set"):
        run_stage1(model, loss_state, empty, val, cfg, tmp_path)


def test_run_stage1_produces_artifacts(tiny_train, tmp_path):
    train, val = tiny_train
    cfg = stage1_cfg()
    model, loss_state = build_regressor(cfg)
    best = run_stage1(model, loss_state, train, val, cfg, tmp_path)
    assert best == tmp_path / "stage1_best.pfck"
    assert best.exists()
    assert (tmp_path / "stage1_last.pfck").exists()
    rows = (tmp_path / "stage1_metrics.csv").read_text().strip().split("\n")
    assert rows[0] == "epoch,split,loss,lr"
    assert len(rows) == 1 + cfg.stage1_epochs  # no val split -> train rows only
    blocks = load_checkpoint(tmp_path / "stage1_last.pfck")
    assert int(blocks["meta.epoch"]) == cfg.stage1_epochs - 1
    assert "opt.step" in blocks  # resumable snapshot carries optimizer state


class _Interrupt(Exception):
    pass


def _interrupting_rng(stage, at):
    """Raise once training reaches (stage, epoch) to simulate being killed."""
    original = training._epoch_rng

    def hook(seed, s, epoch):
        if s == stage and epoch == at:
            raise _Interrupt()
        return original(seed, s, epoch)

    return hook


def test_stage1_resume_bit_identical(tiny_train, tmp_path, monkeypatch):
    train, val = tiny_train
    cfg = stage1_cfg(stage1_epochs=6)

    straight = tmp_path / "straight"
    model, loss_state = build_regressor(cfg)
    run_stage1(model, loss_state, train, val, cfg, straight)

    # Interrupted run: die at epoch 4, after the epoch-3 snapshot.
    resumed = tmp_path / "resumed"
    monkeypatch.setattr(training, "SAVE_EVERY", 2)
    model2, loss2 = build_regressor(cfg)
    monkeypatch.setattr(training, "_epoch_rng", _interrupting_rng(1, 4))
    with pytest.raises(_Interrupt):
        run_stage1(model2, loss2, train, val, cfg, resumed)

    # Fresh process: new model objects, state comes only from disk.
    monkeypatch.undo()
    model3, loss3 = build_regressor(cfg)
    run_stage1(model3, loss3, train, val, cfg, resumed)

    straight_bytes = (straight / "stage1_last.pfck").read_bytes()
    resumed_bytes = (resumed / "stage1_last.pfck").read_bytes()
    assert straight_bytes == resumed_bytes
    assert (straight / "stage1_metrics.csv").read_text() == (resumed / "stage1_metrics.csv").read_text()


# -- stage 2 -------------------------------------------------------------------


class ConstField:
    """sigma = 0 everywhere: renders exactly zero RGB and zero logits."""

    def __init__(self, n_classes, n_samples, near, far):
        self.cfg = types.SimpleNamespace(n_classes=n_classes, n_samples=n_samples, near=near, far=far)

    def query(self, x):
        n = x.shape[0]
        return (
            ad.constant(np.zeros(n)),
            ad.constant(np.zeros((n, self.cfg.n_classes))),
            ad.constant(np.full((n, 3), 0.5)),
        )


def test_stage2_step_empty_field_oracle(tiny_train):
    """With zero density the loss is mean(rgb^2) + ce_weight * ln(C)."""
    train, _ = tiny_train
    cfg = small_run_config()
    sample = train.samples[0]
    camera = train.camera(sample.pose)
    field = ConstField(train.n_classes, cfg.n_samples, train.near, train.far)

    rng = np.random.default_rng(42)
    loss, mse, ce = stage2_step(field, sample, camera, sample.labels, rng, cfg, train.near, train.far)

    mirror = np.random.default_rng(42)
    us = mirror.integers(0, 32, size=cfg.ray_batch)
    vs = mirror.integers(0, 32, size=cfg.ray_batch)
    rgb_gt = sample.image[:, vs, us].T
    expected_mse = float((rgb_gt**2).mean())
    expected_ce = float(np.log(train.n_classes))
    assert mse == pytest.approx(expected_mse, rel=1e-12)
    assert ce == pytest.approx(expected_ce, rel=1e-12)
    assert float(loss.data) == pytest.approx(expected_mse + cfg.stage2_ce_weight * expected_ce, rel=1e-12)


def test_run_stage2_requires_labels(tiny_train, tmp_path):
    train, _ = tiny_train
    cfg = small_run_config(stage2_steps=1)
    stripped = type(train)(**{**train.__dict__, "samples": [
        type(s)(image=s.image, pose=s.pose, labels=None) for s in train.samples
    ]})
    field = build_field(cfg, train.n_classes, train.near, train.far)
    with pytest.raises(DataError, match="semantic labels for every view"):
        run_stage2(field, stripped, cfg, tmp_path)


def test_run_stage2_produces_artifacts(tiny_train, tmp_path):
    train, _ = tiny_train
    cfg = small_run_config(stage2_steps=3)
    field = build_field(cfg, train.n_classes, train.near, train.far)
    path = run_stage2(field, train, cfg, tmp_path)
    assert path == tmp_path / "stage2_field.pfck"
    assert path.exists() and (tmp_path / "stage2_last.pfck").exists()
    blocks = load_checkpoint(path)
    assert int(blocks["meta.epoch"]) == 2
    rows = (tmp_path / "stage2_metrics.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 3


def test_stage2_resume_bit_identical(tiny_train, tmp_path, monkeypatch):
    train, _ = tiny_train
    cfg = small_run_config(stage2_steps=6)

    straight = tmp_path / "straight"
    field = build_field(cfg, train.n_classes, train.near, train.far)
    run_stage2(field, train, cfg, straight)

    resumed = tmp_path / "resumed"
    monkeypatch.setattr(training, "SAVE_EVERY", 2)
    field2 = build_field(cfg, train.n_classes, train.near, train.far)
    monkeypatch.setattr(training, "_epoch_rng", _interrupting_rng(2, 4))
    with pytest.raises(_Interrupt):
        run_stage2(field2, train, cfg, resumed)

    field3 = build_field(cfg, train.n_classes, train.near, train.far)
    monkeypatch.undo()  # restore the real rng hook; SAVE_EVERY no longer matters
    run_stage2(field3, train, cfg, resumed)

    assert (straight / "stage2_field.pfck").read_bytes() == (resumed / "stage2_field.pfck").read_bytes()
    assert (straight / "stage2_metrics.csv").read_text() == (resumed / "stage2_metrics.csv").read_text()


class PeakedField:
    """Constant positive density, logits always favouring one class."""

    def __init__(self, n_classes, favoured, n_samples, near, far):
        self.cfg = types.SimpleNamespace(n_classes=n_classes, n_samples=n_samples, near=near, far=far)
        self.favoured = favoured

    def query(self, x):
        n = x.shape[0]
        logits = np.zeros((n, self.cfg.n_classes))
        logits[:, self.favoured] = 5.0
        return (
            ad.constant(np.ones(n)),
            ad.constant(logits),
            ad.constant(np.full((n, 3), 0.5)),
        )


def test_rendered_class_accuracy_constant_field(tiny_train):
    train, _ = tiny_train
    field = PeakedField(train.n_classes, favoured=1, n_samples=4, near=train.near, far=train.far)
    acc = rendered_class_accuracy(field, train, stride=2)
    labels = np.concatenate([s.labels[::2, ::2].reshape(-1) for s in train.samples])
    assert acc == pytest.approx((labels == 1).mean(), abs=1e-12)


def test_render_label_cache_constant_field(tiny_train):
    train, _ = tiny_train
    field = PeakedField(train.n_classes, favoured=2, n_samples=4, near=train.near, far=train.far)
    cache = render_label_cache(field, train, stride=8)
    assert len(cache) == len(train.samples)
    for lab in cache:
        assert lab.shape == (16,)  # 32/8 * 32/8 rays
        assert (lab == 2).all()


# -- stage 3 -------------------------------------------------------------------


def test_run_stage3_freezes_convs_trains_bn(tiny_train, tmp_path):
    train, _ = tiny_train
    cfg = small_run_config(stage3_steps=2, stage3_lr=1e-3)
    model, _ = build_regressor(cfg)
    field = build_field(cfg, train.n_classes, train.near, train.far)

    conv_before = {
        name: arr.copy()
        for name, arr in model.state().items()
        if name.startswith("param.backbone.") and name.endswith(".w")
    }
    bn_before = model.backbone.stem0.bn.gamma.data.copy()
    field_before = {name: t.data.copy() for name, t in field.parameters().items()}

    path = run_stage3(model, field, train, cfg, tmp_path)
    assert path == tmp_path / "stage3_model.pfck"
    assert path.exists()

    for name, before in conv_before.items():
        np.testing.assert_array_equal(model.state()[name], before, err_msg=name)
    assert not np.array_equal(model.backbone.stem0.bn.gamma.data, bn_before)
    for name, before in field_before.items():
        np.testing.assert_array_equal(field.parameters()[name].data, before, err_msg=name)
    rows = (tmp_path / "stage3_metrics.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 2


def test_run_stage3_empty_dataset(tiny_train, tmp_path):
    train, _ = tiny_train
    cfg = small_run_config(stage3_steps=1)
    model, _ = build_regressor(cfg)
    field = build_field(cfg, train.n_classes, train.near, train.far)
    empty = type(train)(**{**train.__dict__, "samples": []})
    with pytest.raises(DataError, match="non-empty training set"):
        run_stage3(model, field, empty, cfg, tmp_path)


# -- evaluation helper ----------------------------------------------------------


def test_dataset_pose_loss_restores_train_mode(tiny_train):
    train, _ = tiny_train
    cfg = small_run_config()
    model, loss_state = build_regressor(cfg)
    model.train_mode()
    model(ad.constant(train.samples[0].image))  # populate BN running stats
    value = dataset_pose_loss(model, loss_state, train)
    assert np.isfinite(value)
    assert model.backbone.stem0.bn.training  # train mode restored after eval

"""Module registration, state round-trips, and batch-norm statistics."""

import numpy as np
import pytest

from poseforge import autodiff as ad
from poseforge.errors import DimensionError, StateError
from poseforge.nn import BatchNorm2d, Conv1x1, Conv3x3, Linear, Module, he_normal


class Block(Module):
    def __init__(self, rng):
        super().__init__()
        self.lin = Linear(3, 2, rng)
        self.scale = ad.param(np.asarray(1.5))
        self.register_buffer("count", np.asarray(0.0))


def test_parameter_and_child_registration_order():
    rng = np.random.default_rng(0)
    block = Block(rng)
    names = list(block.parameters())
    assert names == ["scale", "lin.w", "lin.b"]
    assert list(block.buffers()) == ["count"]


def test_state_roundtrip():
    rng = np.random.default_rng(1)
    src = Block(rng)
    src.lin.w.data = src.lin.w.data + 1.0
    src.register_buffer("count", np.asarray(7.0))
    dst = Block(np.random.default_rng(2))
    dst.load_state(src.state())
    np.testing.assert_array_equal(dst.lin.w.data, src.lin.w.data)
    np.testing.assert_array_equal(dst.lin.b.data, src.lin.b.data)
    assert float(dst.count) == 7.0


def test_load_state_rejects_unknown_parameter():
    blocks = Block(np.random.default_rng(0)).state()
    blocks["param.mystery"] = np.zeros(2)
    with pytest.raises(StateError):
        Block(np.random.default_rng(1)).load_state(blocks)


def test_load_state_rejects_shape_mismatch():
    blocks = Block(np.random.default_rng(0)).state()
    blocks["param.lin.w"] = np.zeros((4, 4))
    with pytest.raises(DimensionError):
        Block(np.random.default_rng(1)).load_state(blocks)


def test_load_state_reports_missing_parameters():
    blocks = Block(np.random.default_rng(0)).state()
    del blocks["param.lin.b"]
    with pytest.raises(StateError, match="lin.b"):
        Block(np.random.default_rng(1)).load_state(blocks)


def test_mode_switch_propagates_to_children():
    block = Block(np.random.default_rng(0))
    assert block.training and block.lin.training
    block.eval_mode()
    assert not block.training and not block.lin.training
    block.train_mode()
    assert block.training and block.lin.training


def test_set_buffer_unknown_name():
    block = Block(np.random.default_rng(0))
    with pytest.raises(StateError):
        block.set_buffer("nope", np.zeros(1))


def test_he_normal_statistics():
    rng = np.random.default_rng(5)
    w = he_normal(rng, (20000,), fan_in=8)
    assert w.std() == pytest.approx(np.sqrt(2.0 / 8.0), rel=0.05)
    assert w.mean() == pytest.approx(0.0, abs=0.02)


def test_linear_forward():
    rng = np.random.default_rng(7)
    lin = Linear(4, 3, rng)
    x = rng.normal(size=(5, 4))
    out = lin(ad.constant(x))
    np.testing.assert_allclose(out.data, x @ lin.w.data + lin.b.data, rtol=1e-14)


def test_conv_wrappers_register_weights():
    rng = np.random.default_rng(9)
    c3 = Conv3x3(2, 4, stride=2, rng=rng, bias=True)
    assert c3.w.shape == (4, 2, 3, 3) and c3.b.shape == (4,)
    c1 = Conv1x1(2, 4, rng, bias=False)
    assert c1.w.shape == (4, 2) and c1.b is None
    out = c3(ad.constant(rng.normal(size=(2, 8, 8))))
    assert out.shape == (4, 4, 4)


def test_batchnorm_running_statistics_ema():
    """One training pass moves the EMA exactly one momentum step."""
    rng = np.random.default_rng(11)
    bn = BatchNorm2d(3, momentum=0.1)
    x = rng.normal(loc=2.0, scale=1.5, size=(3, 6, 6))
    bn(ad.constant(x))
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(1, 2)), rtol=1e-14)
    np.testing.assert_allclose(bn.running_var, 0.9 * 1.0 + 0.1 * x.var(axis=(1, 2)), rtol=1e-14)
    assert bool(bn.tracked)


def test_batchnorm_eval_before_training_raises():
    bn = BatchNorm2d(2)
    bn.eval_mode()
    with pytest.raises(StateError):
        bn(ad.constant(np.zeros((2, 4, 4))))


def test_batchnorm_eval_zero_input_oracle():
    """After training passes, a zero input in eval mode must map to
    gamma * (0 - running_mean) / sqrt(running_var + eps) + beta."""
    rng = np.random.default_rng(13)
    bn = BatchNorm2d(2, momentum=0.5, eps=1e-5)
    for _ in range(3):
        bn(ad.constant(rng.normal(loc=1.0, size=(2, 5, 5))))
    bn.gamma.data = np.array([2.0, -1.0])
    bn.beta.data = np.array([0.5, 0.25])
    bn.eval_mode()
    out = bn(ad.constant(np.zeros((2, 5, 5)))).data
    expected = bn.gamma.data * (0.0 - bn.running_mean) / np.sqrt(bn.running_var + 1e-5) + bn.beta.data
    np.testing.assert_allclose(out, expected[:, None, None] * np.ones((2, 5, 5)), rtol=1e-12)


def test_batchnorm_eval_is_deterministic_and_frozen():
    rng = np.random.default_rng(17)
    bn = BatchNorm2d(2)
    bn(ad.constant(rng.normal(size=(2, 4, 4))))
    bn.eval_mode()
    rm = bn.running_mean.copy()
    x = rng.normal(size=(2, 4, 4))
    a = bn(ad.constant(x)).data
    b = bn(ad.constant(x)).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(bn.running_mean, rm)  # eval never updates stats


def test_batchnorm_state_roundtrips_buffers():
    rng = np.random.default_rng(19)
    bn = BatchNorm2d(2)
    bn(ad.constant(rng.normal(size=(2, 4, 4))))
    clone = BatchNorm2d(2)
    clone.load_state(bn.state())
    np.testing.assert_array_equal(clone.running_mean, bn.running_mean)
    np.testing.assert_array_equal(clone.running_var, bn.running_var)
    clone.eval_mode()
    x = rng.normal(size=(2, 4, 4))
    bn.eval_mode()
    np.testing.assert_array_equal(clone(ad.constant(x)).data, bn(ad.constant(x)).data)

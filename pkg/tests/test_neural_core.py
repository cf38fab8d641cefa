"""Autograd tape, spatial primitives, losses and Adam."""

import math

import numpy as np
import pytest

from hsemis.errors import BackwardStateError, NumericFault, ShapeError
from hsemis.nn import functional as F
from hsemis.nn.gradcheck import check_gradients
from hsemis.nn.layers import BatchNorm, Dense
from hsemis.nn.optim import Adam, AdamState, adam_step
from hsemis.nn.tensor import Tensor, matmul, no_grad, tanh, tsum

from oracles import loop_conv2d


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_constant_loss_gives_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tsum(x * 0.0) + 5.0
        loss.backward()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_tanh_matvec_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        v = rng.normal(size=3)
        assert check_gradients(lambda: tsum(tanh(matmul(w, Tensor(v.reshape(3, 1))))), [w]) < 1e-4

    def test_gradient_accumulates_over_shared_use(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_second_backward_raises(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = tsum(x * x)
        loss.backward()
        with pytest.raises(BackwardStateError):
            loss.backward()

    def test_leaves_reusable_across_graphs(self):
        x = Tensor(1.5, requires_grad=True)
        for _ in range(2):
            x.grad = None
            (x * 2.0).backward()
            assert x.grad == pytest.approx(2.0)

    def test_non_scalar_backward_needs_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_no_grad_builds_no_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_nan_is_a_numeric_fault(self):
        with pytest.raises(NumericFault):
            Tensor([np.nan])
        x = Tensor(np.array([-1.0]))
        from hsemis.nn.tensor import log
        with pytest.raises(NumericFault):
            log(x)

    def test_ndarray_on_the_left_defers_to_tensor(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = np.full(3, 2.0) * x
        assert isinstance(y, Tensor)


class TestConv2d:
    def test_scalar_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        out = F.conv2d(x, np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_array_equal(out.data[..., 0], [[2, 4], [6, 8]])

    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(3, 3, 1)
        k = np.zeros((3, 3, 1, 1))
        k[1, 1] = 1.0
        np.testing.assert_array_equal(F.conv2d(x, k, padding=1).data, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 5, 2))
        k = rng.normal(size=(3, 3, 2, 1))
        np.testing.assert_allclose(F.conv2d(x, k).data, loop_conv2d(x, k), atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 1), (2, 1, 3), (2, 0, 2), (1, 1, 3), (3, 2, 3)])
    def test_strides_and_padding_match_loop_oracle(self, stride, padding, k):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(7, 6, 3))
        w = rng.normal(size=(k, k, 3, 2))
        np.testing.assert_allclose(F.conv2d(x, w, stride=stride, padding=padding).data,
                                   loop_conv2d(x, w, stride, padding), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            F.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 1, 1)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            F.conv2d(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)))


class TestPoolingAndNorm:
    def test_max_pool(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        np.testing.assert_array_equal(F.max_pool2d(x).data[0, ..., 0], [[5, 7], [13, 15]])

    def test_upsample_then_pool_roundtrip(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 3, 2))
        np.testing.assert_array_equal(F.max_pool2d(F.upsample_nearest(x)).data, x)

    def test_batch_norm_running_stats(self):
        bn = BatchNorm(2)
        x = np.random.default_rng(1).normal(3.0, 2.0, size=(64, 1, 1, 2))
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 1, 2)), rtol=1e-12)

    def test_batch_norm_train_output_standardized(self):
        x = np.random.default_rng(2).normal(3.0, 2.0, size=(32, 2, 2, 3))
        out = BatchNorm(3)(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=(0, 1, 2)), 1.0, atol=1e-3)


class TestLosses:
    def test_bce_half(self):
        assert F.loss_bce(Tensor([0.5]), 1.0).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_l1_identical(self):
        a = np.random.default_rng(0).normal(size=5)
        assert F.loss_l1(Tensor(a), a).item() == 0.0

    def test_ce_confident_correct(self):
        assert F.loss_ce(Tensor([[0.0, 800.0]]), [1]).item() == pytest.approx(0.0, abs=1e-12)

    def test_mse(self):
        assert F.loss_mse(Tensor([1.0, 3.0]), np.array([0.0, 0.0])).item() == pytest.approx(5.0)

    def test_nll_matches_ce_on_softmax(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        ce = F.loss_ce(Tensor(logits), labels).item()
        nll = F.loss_nll(F.softmax(Tensor(logits)), labels).item()
        assert nll == pytest.approx(ce, rel=1e-10)

    def test_bce_clamps_zero_probability(self):
        assert np.isfinite(F.loss_bce(Tensor([0.0]), 1.0).item())

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            F.loss_l1(Tensor(np.zeros((0, 2))), np.zeros((0, 2)))


class TestAdam:
    def test_zero_gradient_no_decay_is_identity(self):
        state = AdamState(lr=1e-3, weight_decay=0.0)
        p = np.array([1.0, -2.0])
        out = adam_step(state, [p.copy()], [np.zeros(2)])
        np.testing.assert_array_equal(out[0], p)

    def test_first_step_hand_evaluated(self):
        # m = 0.1*2 = 0.2, v = 0.001*4 = 0.004; m_hat = 2, v_hat = 4; step = lr * 2 / (2 + eps)
        state = AdamState(lr=1e-3, weight_decay=0.0)
        out = adam_step(state, [np.zeros(1)], [np.array([2.0])])
        assert out[0][0] == pytest.approx(-1e-3 * 2.0 / (2.0 + 1e-8), rel=1e-12)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            layer = Dense(rng, 3, 2)
            opt = Adam(layer.parameters(), 1e-2, 1e-4)
            x = rng.normal(size=(4, 3))
            for _ in range(5):
                opt.zero_grad()
                tsum(layer(Tensor(x)) ** 2).backward()
                opt.step()
            return [p.data.copy() for p in layer.parameters()]

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)

    def test_decoupled_weight_decay_shrinks(self):
        state = AdamState(lr=1e-2, weight_decay=0.5)
        out = adam_step(state, [np.array([1.0])], [np.array([0.0])])
        assert out[0][0] == pytest.approx(1.0 - 1e-2 * 0.5)

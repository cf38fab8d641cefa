"""Node feature path, augmentations, mean-teacher objectives and a short training run."""

import numpy as np
import pytest

from hsemis.data import SyntheticSpec, synth_dataset
from hsemis.errors import DataError, NormalizationError, ShapeError
from hsemis.nn.tensor import Tensor, no_grad
from hsemis.qtest.augment import (
    STRONG_OPS, AugmentationSpec, apply_op, flip, sample_strong_params, strong_augment, translate, weak_augment,
)
from hsemis.qtest.network import BaseNetwork, l2_tanh_normalize, project
from hsemis.qtest.node import (
    NodeConfig, NodeModel, consistency_loss, consistency_weight, ema_update, node_forward, predict_proba, train_node,
)

TINY = dict(filters=(4, 8), fc_dims=(16, 8), n_qubits=4, qcn_layers=2)


def toy_set(n=32, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.uniform(0, 0.3, size=(n, 8, 8, 1)) + 0.6 * y[:, None, None, None]
    return x, y


class TestNetwork:
    def test_default_feature_width(self):
        net = BaseNetwork(np.random.default_rng(0))
        assert net.feature_dim == 512
        net.eval()
        with no_grad():
            assert net.features(np.zeros((1, 32, 32, 1))).shape == (1, 512)
            assert net(np.zeros((1, 32, 32, 1))).shape == (1, 256)

    def test_five_pools_take_224_to_7(self):
        net = BaseNetwork(np.random.default_rng(0), filters=(2, 2, 2, 2, 2), fc_dims=(4, 4))
        h = Tensor(np.random.default_rng(1).uniform(size=(1, 224, 224, 1)))
        with no_grad():
            for block in net.blocks:
                h = block(h)
        assert h.shape == (1, 7, 7, 2)

    def test_project_matches_loop(self):
        rng = np.random.default_rng(2)
        f, w, b = rng.normal(size=(3, 512)), rng.normal(size=(256, 512)), rng.normal(size=256)
        expected = np.array([[sum(w[i, j] * row[j] for j in range(512)) + b[i] for i in range(256)] for row in f])
        np.testing.assert_allclose(project(f, w, b).data, expected, rtol=1e-10)

    def test_project_shape_check(self):
        with pytest.raises(ShapeError):
            project(np.ones(10), np.ones((256, 512)), np.zeros(256))


class TestL2Tanh:
    def test_bounds(self):
        out = l2_tanh_normalize(np.random.default_rng(0).normal(size=(50, 256)) * 100).data
        assert np.all(np.abs(out) <= np.tanh(1.0) + 1e-15)

    def test_scale_invariant(self):
        v = np.random.default_rng(1).normal(size=(4, 16))
        np.testing.assert_allclose(l2_tanh_normalize(v * 37.5).data, l2_tanh_normalize(v).data, rtol=1e-12)

    def test_unit_basis(self):
        np.testing.assert_allclose(l2_tanh_normalize(np.array([0.0, 3.0])).data, [0.0, np.tanh(1.0)])

    def test_zero_vector(self):
        with pytest.raises(NormalizationError):
            l2_tanh_normalize(np.zeros((2, 4)))


class TestAugment:
    def setup_method(self):
        self.img = np.random.default_rng(0).uniform(size=(16, 12, 1))

    def test_flip_involution(self):
        np.testing.assert_array_equal(flip(flip(self.img)), self.img)
        np.testing.assert_array_equal(flip(flip(self.img, False), False), self.img)

    def test_zero_translate_identity(self):
        np.testing.assert_allclose(translate(self.img, 0.0, 0.0), self.img, atol=1e-12)

    def test_integer_translate_shifts(self):
        out = translate(self.img, 0.0, 2.0)
        np.testing.assert_allclose(out[:, 2:], self.img[:, :-2], atol=1e-12)
        np.testing.assert_array_equal(out[:, :2], 0.0)

    def test_strong_params_in_range(self):
        spec = AugmentationSpec()
        rng = np.random.default_rng(1)
        for _ in range(1000):
            params = sample_strong_params(rng, spec)
            assert len(params) == 2
            assert params[0][0] != params[1][0]
            for op, mag in params:
                assert op in STRONG_OPS
                bounds = spec.range_of(op)
                if op == "invert":
                    assert mag is None
                elif op == "blur":
                    assert mag in bounds
                else:
                    assert bounds[0] <= mag <= bounds[1]

    def test_invert_and_brightness(self):
        np.testing.assert_allclose(apply_op(self.img, "invert", None), 1 - self.img)
        np.testing.assert_allclose(apply_op(self.img, "brightness", 0.5), 0.5 * self.img)

    def test_seeded(self):
        np.testing.assert_array_equal(strong_augment(self.img, [1, 2]), strong_augment(self.img, [1, 2]))
        np.testing.assert_array_equal(weak_augment(self.img, 7), weak_augment(self.img, 7))
        assert strong_augment(self.img, 0).shape == self.img.shape

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            apply_op(self.img, "solarize", 1.0)


class TestNodeForward:
    def test_distribution(self):
        model = NodeModel.create(0, config=NodeConfig(**TINY))
        x = np.random.default_rng(0).uniform(size=(5, 8, 8, 1))
        out = node_forward(model, x).data
        assert out.shape == (5, 2)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_identical_networks_agree(self):
        model = NodeModel.create(0, config=NodeConfig(**TINY))
        model.teacher.load_state_dict(model.student.state_dict())
        x = np.random.default_rng(1).uniform(size=(3, 8, 8, 1))
        np.testing.assert_array_equal(predict_proba(model, x, "teacher"), predict_proba(model, x, "student"))

    def test_bad_role(self):
        with pytest.raises(ValueError):
            NodeModel.create(0, config=NodeConfig(**TINY)).network("critic")


class TestConsistency:
    def test_equal_is_zero(self):
        p = np.array([[0.3, 0.7], [0.9, 0.1]])
        assert consistency_loss(p, p).item() == 0.0

    def test_sum_of_squares(self):
        t = np.array([[1.0, 0.0], [0.5, 0.5]])
        s = np.array([[0.0, 1.0], [0.25, 0.75]])
        assert consistency_loss(t, s).item() == pytest.approx(2.0 + 0.125)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            consistency_loss(np.ones((2, 2)), np.ones((3, 2)))


class TestEma:
    def _model(self, mu):
        return NodeModel.create(3, config=NodeConfig(mu=mu, **TINY))

    def test_single_step(self):
        model = self._model(0.9)
        t0 = [p.data.copy() for p in model.teacher.parameters()]
        s = [p.data.copy() for p in model.student.parameters()]
        ema_update(model)
        for got, a, b in zip(model.teacher.parameters(), t0, s):
            np.testing.assert_allclose(got.data, 0.9 * a + 0.1 * b, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("steps", [1, 10, 500])
    def test_closed_form_with_frozen_student(self, steps):
        model = self._model(0.99)
        t0 = [p.data.copy() for p in model.teacher.parameters()]
        s = [p.data.copy() for p in model.student.parameters()]
        for _ in range(steps):
            ema_update(model)
        w = 0.99**steps
        for got, a, b in zip(model.teacher.parameters(), t0, s):
            np.testing.assert_allclose(got.data, w * a + (1 - w) * b, atol=1e-9)

    def test_student_untouched(self):
        model = self._model(0.5)
        s = [p.data.copy() for p in model.student.parameters()]
        ema_update(model)
        for got, b in zip(model.student.parameters(), s):
            np.testing.assert_array_equal(got.data, b)

    def test_mu_range(self):
        with pytest.raises(ValueError):
            self._model(1.0)


class TestConsistencyWeight:
    def test_ramp_endpoints(self):
        assert consistency_weight(0, 100) == pytest.approx(np.exp(-5))
        assert consistency_weight(10, 100) == pytest.approx(np.exp(-5 * 0.25))
        assert consistency_weight(20, 100) == 1.0
        assert consistency_weight(99, 100, lambda_max=3.0) == 3.0

    def test_ramp_monotone(self):
        w = [consistency_weight(s, 500) for s in range(500)]
        assert all(a <= b for a, b in zip(w, w[1:]))

    def test_other_schedules(self):
        assert consistency_weight(0, 10, "off") == 0.0
        assert consistency_weight(0, 10, "constant", 2.5) == 2.5
        with pytest.raises(ValueError):
            consistency_weight(0, 10, "cosine")


class TestTrainNode:
    def test_supervised_only_fits_toy_set(self):
        x, y = toy_set()
        cfg = NodeConfig(steps=120, lambda_schedule="off", lr=1e-2, qcn_lr=1e-2, seed=1, **TINY)
        result = train_node(x, y, None, cfg)
        assert np.mean(predict_proba(result.model, x, "student").argmax(1) == y) >= 0.95
        assert result.history[-1]["con_loss"] == 0.0

    def test_deterministic(self):
        x, y = toy_set(8)
        cfg = NodeConfig(steps=6, eval_every=3, seed=4, **TINY)
        a = train_node(x, y, x[:4], cfg, val_x=x, val_y=y)
        b = train_node(x, y, x[:4], cfg, val_x=x, val_y=y)
        assert a.history_csv() == b.history_csv()
        for k, v in a.model.state_dict().items():
            np.testing.assert_array_equal(v, b.model.state_dict()[k])
        assert a.history_csv().splitlines()[0] == "step,sup_loss,con_loss,val_acc"

    def test_teacher_keeps_up_with_student(self):
        ds = synth_dataset(SyntheticSpec(counts=(40, 1, 1, 1, 40)))
        keep = np.isin(ds.grades, (0, 4))
        x, y = ds.images[keep], (ds.grades[keep] == 4).astype(int)
        order = np.random.default_rng(0).permutation(len(x))
        x, y = x[order], y[order]
        cfg = NodeConfig(steps=300, filters=(4, 8, 8), fc_dims=(16, 8), n_qubits=4, qcn_layers=2, lr=3e-3,
                         qcn_lr=1e-2, eval_every=50, seed=2)
        result = train_node(x[:20], y[:20], x[20:60], cfg)
        acc = {r: np.mean(predict_proba(result.model, x[60:], r).argmax(1) == y[60:]) for r in ("teacher", "student")}
        assert acc["student"] >= 0.9
        assert acc["teacher"] >= acc["student"] - 0.05

    def test_input_checks(self):
        x, y = toy_set(4)
        with pytest.raises(DataError):
            train_node(x[:0], y[:0])
        with pytest.raises(DataError):
            train_node(x, y[:3])
        with pytest.raises(DataError):
            train_node(x, y + 1)

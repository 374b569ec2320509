import math

import numpy as np
import pytest

from hflsim import nn
from hflsim.linalg import ShapeError


def loop_shallow_eval(w1, b1, w2, b2, batch):
    """Per-example scalar re-evaluation of dense -> relu -> dense."""
    out = np.zeros((w2.shape[0], batch.shape[1]))
    for i in range(batch.shape[1]):
        h = [max(0.0, sum(w1[r, c] * batch[c, i] for c in range(batch.shape[0])) + b1[r])
             for r in range(w1.shape[0])]
        for r in range(w2.shape[0]):
            out[r, i] = sum(w2[r, c] * h[c] for c in range(len(h))) + b2[r]
    return out


def loop_loss_eval(w, b, features, labels):
    """Scalar softmax cross-entropy, one example at a time."""
    total = 0.0
    for i in range(features.shape[1]):
        z = [sum(w[r, c] * features[c, i] for c in range(features.shape[0])) + b[r]
             for r in range(w.shape[0])]
        zmax = max(z)
        denom = sum(math.exp(v - zmax) for v in z)
        total += -(z[labels[i]] - zmax - math.log(denom))
    return total / features.shape[1]


def random_split(rng, with_conv=False):
    if with_conv:
        h = w = 5
        shallow_specs = [nn.conv_small(h, w, 3, 2), nn.relu()]
        input_dim = h * w
        boundary = 2 * 3 * 3
    else:
        input_dim = int(rng.integers(3, 7))
        boundary = int(rng.integers(3, 8))
        shallow_specs = [nn.dense(input_dim, boundary), nn.relu()]
    hidden = int(rng.integers(3, 8))
    classes = int(rng.integers(2, 5))
    deep_specs = [nn.dense(boundary, hidden), nn.relu(), nn.dense(hidden, classes)]
    shallow = nn.Stack(shallow_specs, nn.init_stack(shallow_specs, input_dim, rng))
    deep = nn.Stack(deep_specs, nn.init_stack(deep_specs, boundary, rng))
    # Jitter the zero-initialized biases so no relu sits exactly on its kink,
    # where central differences and the subgradient legitimately disagree.
    for params in (shallow.params, deep.params):
        for layer in params:
            if len(layer) == 2:
                layer[1] += rng.normal(scale=0.1, size=layer[1].shape)
    model = nn.SplitModel(shallow, deep, input_dim, boundary, classes)
    assert nn.param_count(shallow.params) + nn.param_count(deep.params) <= 500
    return model


class TestForwardShallow:
    def test_identity_network(self):
        stack = nn.Stack([nn.dense(3, 3)], [[np.eye(3), np.zeros(3)]])
        batch = np.arange(6.0).reshape(3, 2)
        feats, _ = nn.forward_shallow(stack, batch)
        assert np.array_equal(feats, batch)

    def test_zero_weights(self):
        stack = nn.Stack([nn.dense(3, 4)], [[np.zeros((4, 3)), np.zeros(4)]])
        feats, _ = nn.forward_shallow(stack, np.ones((3, 5)))
        assert np.array_equal(feats, np.zeros((4, 5)))

    def test_against_per_example_loop(self):
        rng = np.random.default_rng(10)
        specs = [nn.dense(4, 5), nn.relu(), nn.dense(5, 3)]
        params = nn.init_stack(specs, 4, rng)
        stack = nn.Stack(specs, params)
        batch = rng.normal(size=(4, 3))
        feats, _ = nn.forward_shallow(stack, batch)
        expect = loop_shallow_eval(params[0][0], params[0][1], params[2][0], params[2][1], batch)
        assert np.max(np.abs(feats - expect)) < 1e-12

    def test_shape_mismatch(self):
        stack = nn.Stack([nn.dense(3, 3)], [[np.eye(3), np.zeros(3)]])
        with pytest.raises(ShapeError):
            nn.forward_shallow(stack, np.ones((4, 2)))

    def test_forward_deterministic(self):
        rng = np.random.default_rng(11)
        model = random_split(rng)
        batch = rng.normal(size=(model.input_dim, 4))
        f1, _ = nn.forward_shallow(model.shallow, batch)
        f2, _ = nn.forward_shallow(model.shallow, batch.copy())
        assert f1.tobytes() == f2.tobytes()


class TestForwardDeep:
    def test_uniform_logits_loss(self):
        stack = nn.Stack([nn.dense(4, 10)], [[np.zeros((10, 4)), np.zeros(10)]])
        loss, _ = nn.forward_deep(stack, np.ones((4, 6)), np.zeros(6, dtype=int))
        assert abs(loss - math.log(10)) < 1e-12

    def test_saturated_one_hot(self):
        # Force logit margin 20 for the true class of each example.
        stack = nn.Stack([nn.dense(3, 3)], [[20.0 * np.eye(3), np.zeros(3)]])
        labels = np.array([0, 1, 2])
        loss, _ = nn.forward_deep(stack, np.eye(3), labels)
        assert 0.0 <= loss <= 1e-3

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(4, 5))
        b = rng.normal(size=4)
        stack = nn.Stack([nn.dense(5, 4)], [[w, b]])
        feats = rng.normal(size=(5, 7))
        labels = rng.integers(0, 4, size=7)
        loss, _ = nn.forward_deep(stack, feats, labels)
        assert abs(loss - loop_loss_eval(w, b, feats, labels)) < 1e-12

    def test_label_out_of_range(self):
        stack = nn.Stack([nn.dense(2, 3)], [[np.zeros((3, 2)), np.zeros(3)]])
        with pytest.raises(ValueError, match="class range"):
            nn.forward_deep(stack, np.ones((2, 2)), np.array([0, 3]))

    def test_loss_non_negative(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            model = random_split(rng)
            feats = rng.normal(size=(model.boundary_dim, 5))
            labels = rng.integers(0, model.num_classes, size=5)
            loss, _ = nn.forward_deep(model.deep, feats, labels)
            assert loss >= 0.0


class TestBackward:
    def test_stationary_point_has_zero_gradient(self):
        # Symmetric weights + balanced labels sit at a stationary point.
        stack = nn.Stack([nn.dense(1, 2)], [[np.array([[0.7], [0.7]]), np.zeros(2)]])
        _, trace = nn.forward_deep(stack, np.ones((1, 2)), np.array([0, 1]))
        grads, grad_feats = nn.backward_deep(trace)
        assert np.max(np.abs(grads[0][0])) < 1e-12
        assert np.max(np.abs(grads[0][1])) < 1e-12
        assert np.max(np.abs(grad_feats)) < 1e-12

    def test_grad_features_linear_softmax_closed_form(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(4, 3))
        stack = nn.Stack([nn.dense(3, 4)], [[w, np.zeros(4)]])
        feats = rng.normal(size=(3, 1))
        label = np.array([2])
        _, trace = nn.forward_deep(stack, feats, label)
        _, grad_feats = nn.backward_deep(trace)
        probs = nn.softmax_columns(w @ feats)
        onehot = np.zeros((4, 1))
        onehot[2, 0] = 1.0
        assert np.max(np.abs(grad_feats - w.T @ (probs - onehot))) < 1e-10

    def test_backward_deep_requires_loss_trace(self):
        stack = nn.Stack([nn.dense(2, 2)], [[np.eye(2), np.zeros(2)]])
        _, trace = nn.forward_shallow(stack, np.ones((2, 2)))
        with pytest.raises(ValueError, match="forward_deep"):
            nn.backward_deep(trace)

    def test_backward_shallow_zero_upstream(self):
        rng = np.random.default_rng(15)
        model = random_split(rng)
        batch = rng.normal(size=(model.input_dim, 4))
        _, trace = nn.forward_shallow(model.shallow, batch)
        grads = nn.backward_shallow(trace, np.zeros((model.boundary_dim, 4)))
        assert all(np.all(g == 0.0) for layer in grads for g in layer)

    def test_backward_shallow_hand_chain(self):
        # Identity dense layer: weight gradient is upstream @ batch.T.
        stack = nn.Stack([nn.dense(2, 2)], [[np.eye(2), np.zeros(2)]])
        batch = np.array([[1.0, 2.0], [3.0, 4.0]])
        _, trace = nn.forward_shallow(stack, batch)
        g = np.array([[0.5, -1.0], [0.25, 2.0]])
        grads = nn.backward_shallow(trace, g)
        assert np.allclose(grads[0][0], g @ batch.T)
        assert np.allclose(grads[0][1], g.sum(axis=1))

    def test_backward_shallow_shape_mismatch(self):
        stack = nn.Stack([nn.dense(2, 2)], [[np.eye(2), np.zeros(2)]])
        _, trace = nn.forward_shallow(stack, np.ones((2, 3)))
        with pytest.raises(ShapeError):
            nn.backward_shallow(trace, np.ones((2, 4)))


def gradcheck_model(model, rng, rel_tol=1e-4, step=1e-5):
    batch = rng.normal(size=(model.input_dim, 4))
    labels = rng.integers(0, model.num_classes, size=4)

    feats, shallow_trace = nn.forward_shallow(model.shallow, batch)
    _, deep_trace = nn.forward_deep(model.deep, feats, labels)
    deep_grads, grad_feats = nn.backward_deep(deep_trace)
    shallow_grads = nn.backward_shallow(shallow_trace, grad_feats)

    def loss_at(shallow_params, deep_params):
        f, _ = nn.forward_shallow(nn.Stack(model.shallow.specs, shallow_params), batch)
        loss, _ = nn.forward_deep(nn.Stack(model.deep.specs, deep_params), f, labels)
        return loss

    fd_shallow = nn.finite_diff_gradient(lambda p: loss_at(p, model.deep.params), model.shallow.params, step)
    fd_deep = nn.finite_diff_gradient(lambda p: loss_at(model.shallow.params, p), model.deep.params, step)

    for analytic, numeric in ((shallow_grads, fd_shallow), (deep_grads, fd_deep)):
        for la, lf in zip(analytic, numeric):
            for a, f in zip(la, lf):
                rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-2)
                assert np.max(rel) <= rel_tol


class TestGradientOracle:
    def test_finite_differences_agree_over_20_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            gradcheck_model(random_split(rng, with_conv=(seed % 5 == 4)), rng)


class TestSgdStep:
    def test_eta_zero(self):
        rng = np.random.default_rng(16)
        specs = [nn.dense(3, 2)]
        params = nn.init_stack(specs, 3, rng)
        grads = [[rng.normal(size=(2, 3)), rng.normal(size=2)]]
        new = nn.sgd_step(params, grads, 0.0)
        assert nn.params_allclose(new, params)

    def test_unit_eta_negates_gradient(self):
        params = [[np.zeros((2, 2)), np.zeros(2)]]
        grads = [[np.full((2, 2), 3.0), np.full(2, -1.0)]]
        new = nn.sgd_step(params, grads, 1.0)
        assert np.array_equal(new[0][0], -grads[0][0])
        assert np.array_equal(new[0][1], -grads[0][1])

    def test_reference_learning_rate_decrement(self):
        # eta 0.015 with all-ones gradients shifts every weight by -0.015.
        rng = np.random.default_rng(17)
        params = [[rng.normal(size=(3, 3)), rng.normal(size=3)]]
        grads = [[np.ones((3, 3)), np.ones(3)]]
        new = nn.sgd_step(params, grads, 0.015)
        assert np.max(np.abs((params[0][0] - new[0][0]) - 0.015)) < 1e-12
        assert np.max(np.abs((params[0][1] - new[0][1]) - 0.015)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.sgd_step([[np.zeros((2, 2))]], [[np.zeros((3, 2))]], 0.1)


class TestFiniteDiff:
    def test_quadratic(self):
        params = [[np.array([3.0])]]
        grads = nn.finite_diff_gradient(lambda p: float(p[0][0][0] ** 2), params, 1e-5)
        assert abs(grads[0][0][0] - 6.0) < 1e-6

    def test_linear(self):
        params = [[np.array([2.0])]]
        grads = nn.finite_diff_gradient(lambda p: float(5.0 * p[0][0][0]), params, 1e-5)
        assert abs(grads[0][0][0] - 5.0) < 1e-9

    def test_non_finite_loss_rejected(self):
        params = [[np.array([0.0])]]
        with pytest.raises(ValueError, match="non-finite"):
            nn.finite_diff_gradient(lambda p: float("nan"), params, 1e-5)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            nn.finite_diff_gradient(lambda p: 0.0, [[np.array([1.0])]], 0.0)

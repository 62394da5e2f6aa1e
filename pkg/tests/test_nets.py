"""Layer-level contracts: forward shapes, analytic gradients, determinism."""

import numpy as np
import pytest

from layoutspace.errors import ShapeMismatch, ValidationError
from layoutspace.nets import (
    BatchNorm,
    Dense,
    EncoderStandIn,
    LayoutClassifier,
    ProjectionHead,
    classify_layout,
    cross_entropy,
    dropout_mask,
    projection_forward,
    relu,
    relu_backward,
    softmax,
)

from .oracles import finite_difference, tensor_relative_error


class TestPrimitives:
    def test_dense_gradients(self):
        rng = np.random.default_rng(0)
        layer = Dense.init(4, 3, rng)
        x = rng.normal(size=(5, 4))
        dy = rng.normal(size=(5, 3))

        def scalar_of(xin):
            return float((layer.forward(xin) * dy).sum())

        grad_x, grads = layer.backward(x, dy)
        assert tensor_relative_error(grad_x, finite_difference(scalar_of, x)) < 1e-6

        w0 = layer.weights.copy()

        def scalar_of_w(w):
            layer.weights = w
            out = float((layer.forward(x) * dy).sum())
            layer.weights = w0
            return out

        assert tensor_relative_error(
            grads["weights"], finite_difference(scalar_of_w, w0)) < 1e-6

    def test_relu_backward_masks_negative(self):
        x = np.array([[-1.0, 0.0, 2.0]])
        dy = np.ones_like(x)
        assert np.array_equal(relu(x), [[0.0, 0.0, 2.0]])
        assert np.array_equal(relu_backward(x, dy), [[0.0, 0.0, 1.0]])

    def test_batchnorm_training_normalizes(self):
        rng = np.random.default_rng(1)
        bn = BatchNorm.init(3)
        x = rng.normal(5.0, 2.0, size=(200, 3))
        out, _ = bn.forward(x, training=True)
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-10)
        assert np.allclose(out.var(axis=0), 1.0, atol=1e-3)
        # running stats moved toward the batch statistics
        assert np.all(bn.running_mean > 0.0)

    def test_batchnorm_eval_is_affine(self):
        bn = BatchNorm.init(4)
        x = np.random.default_rng(2).normal(size=(6, 4))
        out, _ = bn.forward(x, training=False)
        assert np.allclose(out, x / np.sqrt(1.0 + bn.eps), atol=1e-12)
        out2, _ = bn.forward(x, training=False)
        assert np.array_equal(out, out2)

    def test_batchnorm_training_gradient(self):
        rng = np.random.default_rng(3)
        bn = BatchNorm.init(3)
        x = rng.normal(size=(7, 3))
        dy = rng.normal(size=(7, 3))

        def scalar_of(xin):
            bn.running_mean = np.zeros(3)
            bn.running_var = np.ones(3)
            out, _ = bn.forward(xin, training=True)
            return float((out * dy).sum())

        out, cache = bn.forward(x, training=True)
        grad_x, grads = bn.backward(cache, dy)
        assert tensor_relative_error(grad_x, finite_difference(scalar_of, x)) < 1e-6

        g0 = bn.gamma.copy()

        def scalar_of_gamma(g):
            bn.gamma = g
            value = scalar_of(x)
            bn.gamma = g0
            return value

        assert tensor_relative_error(
            grads["gamma"], finite_difference(scalar_of_gamma, g0)) < 1e-6

    def test_dropout_mask_counter_determinism(self):
        a = dropout_mask((5, 5), 0.4, key=9, counter=3)
        b = dropout_mask((5, 5), 0.4, key=9, counter=3)
        c = dropout_mask((5, 5), 0.4, key=9, counter=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.dtype == bool

    def test_softmax_rows_sum_to_one(self):
        logits = np.random.default_rng(4).normal(scale=50.0, size=(8, 5))
        probs = softmax(logits)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0.0)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        _, grad = cross_entropy(logits, labels)
        fd = finite_difference(lambda l: cross_entropy(l, labels)[0], logits)
        assert tensor_relative_error(grad, fd) < 1e-6


class TestProjectionHead:
    def test_output_width_and_eval_determinism(self):
        head = ProjectionHead.init(hidden=16, dropout_rate=0.5, rng_seed=0,
                                   input_dim=10)
        x = np.random.default_rng(6).normal(size=(4, 10))
        a = projection_forward(x, head, training=False)
        b = projection_forward(x, head, training=False)
        assert a.shape == (4, 512)
        assert np.array_equal(a, b)

    def test_training_mode_dropout_differs_by_step(self):
        head = ProjectionHead.init(hidden=32, dropout_rate=0.5, rng_seed=0,
                                   input_dim=8)
        x = np.abs(np.random.default_rng(7).normal(size=(6, 8))) + 0.1
        a, _ = head.forward(x, training=True, step=1)
        b, _ = head.forward(x, training=True, step=2)
        assert not np.array_equal(a, b)

    def test_identity_construction_truncates(self):
        head = ProjectionHead.init(hidden=1024, dropout_rate=0.0, rng_seed=0)
        head.fc1.weights = np.eye(1024)
        head.fc1.bias = np.zeros(1024)
        head.fc2.weights = np.eye(1024)[:, :512]
        head.fc2.bias = np.zeros(512)
        x = np.abs(np.random.default_rng(8).normal(size=(3, 1024)))
        out = projection_forward(x, head, training=False)
        assert np.allclose(out, x[:, :512] / np.sqrt(1.0 + head.norm.eps),
                           atol=1e-12)

    def test_full_head_gradient(self):
        rng = np.random.default_rng(9)
        head = ProjectionHead.init(hidden=5, dropout_rate=0.3, rng_seed=1,
                                   input_dim=7)
        x = rng.normal(size=(6, 7))
        dy = rng.normal(size=(6, 512))

        def scalar_of(xin):
            rm, rv = head.norm.running_mean.copy(), head.norm.running_var.copy()
            out, _ = head.forward(xin, training=True, step=3)
            head.norm.running_mean, head.norm.running_var = rm, rv
            return float((out * dy).sum())

        _, cache = head.forward(x, training=True, step=3)
        grad_x, _ = head.backward(cache, dy)
        assert tensor_relative_error(grad_x, finite_difference(scalar_of, x)) < 1e-6

    def test_rejects_wrong_width(self):
        head = ProjectionHead.init(hidden=4, rng_seed=0, input_dim=6)
        with pytest.raises(ShapeMismatch):
            projection_forward(np.zeros((2, 5)), head)

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ValidationError):
            ProjectionHead.init(hidden=0)
        with pytest.raises(ValidationError):
            ProjectionHead.init(dropout_rate=1.0)


class TestEncoderStandIn:
    def test_gradient_and_param_names(self):
        rng = np.random.default_rng(10)
        enc = EncoderStandIn.init(dim=5, depth=3, rng_seed=2)
        assert set(enc.params()) == {
            f"layers.{i}.{leaf}" for i in range(3) for leaf in ("weights", "bias")}
        x = rng.normal(size=(4, 5))
        dy = rng.normal(size=(4, 5))

        def scalar_of(xin):
            out, _ = enc.forward(xin)
            return float((out * dy).sum())

        out, cache = enc.forward(x)
        grad_x, _ = enc.backward(cache, dy)
        assert tensor_relative_error(grad_x, finite_difference(scalar_of, x)) < 1e-6

    def test_same_seed_same_params(self):
        a = EncoderStandIn.init(dim=4, depth=2, rng_seed=5)
        b = EncoderStandIn.init(dim=4, depth=2, rng_seed=5)
        assert all(np.array_equal(a.params()[k], b.params()[k]) for k in a.params())


class TestLayoutClassifier:
    def test_probabilities_normalized(self):
        clf = LayoutClassifier.init(input_dim=6, class_names=("a", "b", "c"),
                                    rng_seed=0)
        x = np.random.default_rng(11).normal(size=(5, 6))
        probs = clf.predict_proba(x)
        assert probs.shape == (5, 3)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(probs >= 0.0)

    def test_uniform_logits_tie_goes_to_first_class(self):
        clf = LayoutClassifier.init(input_dim=4, class_names=("x", "y"), rng_seed=0)
        clf.fc2.weights = np.zeros_like(clf.fc2.weights)
        clf.fc2.bias = np.zeros_like(clf.fc2.bias)
        label, probs = classify_layout(np.ones(4), clf)
        assert label == "x"
        assert np.allclose(probs, 0.5)

    def test_classify_layout_rejects_wrong_width(self):
        clf = LayoutClassifier.init(input_dim=4, class_names=("x", "y"), rng_seed=0)
        with pytest.raises(ShapeMismatch):
            classify_layout(np.ones(3), clf)

    def test_needs_two_classes(self):
        with pytest.raises(ValidationError):
            LayoutClassifier.init(input_dim=4, class_names=("only",), rng_seed=0)

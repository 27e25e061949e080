from pathlib import Path
import math
import tempfile
import unittest

import numpy as np

from smartfeat.nn import (
    PARAM_NAMES,
    Classifier,
    GradientCheck,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    conv1d_forward,
    cross_entropy,
    forward,
    gradient_check,
    init_params,
    load,
    loss,
    maxpool1d_backward,
    maxpool1d_forward,
    predict,
    predict_batch,
    relu_forward,
    save,
    softmax,
    train,
)


def toy_data(n: int = 40, seed: int = 0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = 0.1 * rng.standard_normal((n, 2, 10))
    x[y == 1, 0, :] += 1.0
    return x, y


def zero_classifier(in_channels: int = 2, length: int = 8) -> Classifier:
    config = ModelConfig(n1=3, k1=3, n2=3, k2=3, pool=2, fc=4).for_input(in_channels, length)
    params = {k: np.zeros_like(v) for k, v in init_params(config, 0).items()}
    return Classifier(config, params)


class TestLayers(unittest.TestCase):
    def test_conv(self):
        out, _ = conv1d_forward(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[[1.0, 0.0, -1.0]]]), np.zeros(1))
        assert out.tolist() == [[-2.0, -2.0]]

    def test_conv_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5))
        out, _ = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
        assert np.array_equal(out, x)

    def test_conv_bias_only(self):
        out, _ = conv1d_forward(np.ones((3, 2, 6)), np.zeros((4, 2, 3)), np.full(4, 0.5))
        assert out.shape == (3, 4, 4)
        assert np.all(out == 0.5)

    def test_conv_errors(self):
        with self.assertRaises(ValueError):
            conv1d_forward(np.ones((1, 3, 6)), np.zeros((4, 2, 3)), np.zeros(4))
        with self.assertRaises(ValueError):
            conv1d_forward(np.ones((1, 2, 2)), np.zeros((4, 2, 3)), np.zeros(4))

    def test_translation(self):
        config = ModelConfig(n1=3, k1=3, n2=4, k2=3, pool=2, fc=5).for_input(2, 14)
        params = init_params(config, 2)
        x = np.random.default_rng(3).normal(size=(2, 2, 14))

        def features(inputs):
            a1, _ = relu_forward(conv1d_forward(inputs, params["conv1_w"], params["conv1_b"])[0])
            a2, _ = relu_forward(conv1d_forward(a1, params["conv2_w"], params["conv2_b"])[0])
            return a2

        full = features(x)
        assert full.shape == (2, 4, 10)
        assert np.allclose(features(x[:, :, 1:]), full[:, :, 1:], rtol=0, atol=1e-12)
        assert np.allclose(features(x[:, :, :-1]), full[:, :, :-1], rtol=0, atol=1e-12)
        pooled, _ = maxpool1d_forward(full, 2)
        shifted, _ = maxpool1d_forward(features(x[:, :, 2:]), 2)
        assert np.allclose(shifted, pooled[:, :, 1:], rtol=0, atol=1e-12)

    def test_maxpool(self):
        assert maxpool1d_forward(np.array([1.0, 3.0, 2.0, 5.0]), 2)[0].tolist() == [3.0, 5.0]
        assert maxpool1d_forward(np.array([4.0, 1.0, 1.0, 1.0, 9.0]), 2)[0].tolist() == [4.0, 1.0]
        assert maxpool1d_forward(np.full(6, 2.0), 3)[0].tolist() == [2.0, 2.0]

    def test_maxpool_backward_routes_to_maximum(self):
        x = np.array([[4.0, 1.0, 1.0, 7.0, 9.0]])
        _, cache = maxpool1d_forward(x, 2)
        assert maxpool1d_backward(np.array([[10.0, 20.0]]), cache).tolist() == [[10.0, 0.0, 0.0, 20.0, 0.0]]

    def test_softmax(self):
        probs = softmax(np.array([math.log(2.0), 0.0]))
        assert np.allclose(probs, [2 / 3, 1 / 3])
        assert np.all(np.isfinite(softmax(np.array([1000.0, -1000.0]))))

    def test_loss(self):
        self.assertAlmostEqual(loss(np.array([0.5, 0.5]), 0), math.log(2.0), places=9)
        assert loss(np.array([1 - 1e-15, 1e-15]), 0) < 1e-9
        clamped = cross_entropy(np.array([1.0, 0.0]), 1)
        assert math.isfinite(clamped)
        self.assertAlmostEqual(clamped, -math.log(1e-12), places=6)
        batch = cross_entropy(np.array([[0.5, 0.5], [0.25, 0.75]]), np.array([0, 1]))
        self.assertAlmostEqual(batch, (math.log(2.0) - math.log(0.75)) / 2, places=12)


class TestConfigs(unittest.TestCase):
    def test_full_scale(self):
        config = ModelConfig.full()
        assert (config.n1, config.n2, config.fc) == (256, 256, 160)
        assert ModelConfig.full(fc=10).fc == 10

    def test_shapes(self):
        config = ModelConfig(n1=4, k1=3, n2=5, k2=3, pool=2, fc=6).for_input(3, 30)
        assert config.conv_length == 26
        assert config.flat_size == 5 * 13
        params = init_params(config, 1)
        assert params["conv1_w"].shape == (4, 3, 3)
        assert params["fc1_w"].shape == (65, 6)
        assert not params["conv1_b"].any()

    def test_validation(self):
        with self.assertRaises(ValueError):
            ModelConfig(k1=20, k2=20).for_input(2, 30).validate()
        with self.assertRaises(ValueError):
            ModelConfig(n_class=1).for_input(2, 30).validate()
        with self.assertRaises(ValueError):
            TrainConfig(optimizer="rmsprop").validate()
        with self.assertRaises(ValueError):
            TrainConfig(learning_rate=0).validate()


class TestForward(unittest.TestCase):
    def test_uniform_on_zero_weights(self):
        classifier = zero_classifier()
        assert np.allclose(forward(classifier, np.ones((2, 8))), [0.5, 0.5])
        cls, probs = predict(classifier, np.ones((2, 8)))
        assert cls == 1
        assert predict_batch(classifier, np.ones((3, 2, 8))).tolist() == [1, 1, 1]

    def test_sums_to_one(self):
        config = ModelConfig(n1=4, k1=3, n2=4, k2=3, pool=2, fc=5).for_input(3, 12)
        classifier = Classifier(config, init_params(config, 7))
        probs = forward(classifier, np.random.default_rng(1).normal(size=(6, 3, 12)))
        assert probs.shape == (6, 2)
        assert np.all((probs > 0) & (probs < 1))
        assert np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            forward(zero_classifier(), np.ones((3, 8)))


class TestGradients(unittest.TestCase):
    def test_gradient_check(self):
        for seed in range(3):
            config = ModelConfig(n1=3, k1=3, n2=3, k2=2, pool=2, fc=4)
            result = gradient_check(config, seed)
            assert result.checked > 0
            assert result.passed(1e-4), result

    def test_gradient_check_wider_input(self):
        config = ModelConfig(n1=2, k1=2, n2=4, k2=3, pool=3, fc=3, n_class=3).for_input(5, 14)
        assert gradient_check(config, 11, batch_size=3).passed(1e-4)

    def test_gradient_check_repeats(self):
        config = ModelConfig(n1=3, k1=3, n2=3, k2=3, pool=2, fc=5).for_input(4, 12)
        assert gradient_check(config, 4) == gradient_check(config, 4)

    def test_gradient_check_all_zero(self):
        config = ModelConfig(n1=3, k1=3, n2=3, k2=3, pool=2, fc=5).for_input(4, 12)
        params = {k: np.zeros_like(v) for k, v in init_params(config, 0).items()}
        result = gradient_check(config, 0, inputs=np.zeros((4, 4, 12)), params=params)
        assert math.isfinite(result.max_error)
        assert result.checked > 0 and result.skipped > 0
        assert result.passed(1e-4)

    def test_nothing_checked_does_not_pass(self):
        assert not GradientCheck(0.0, 0, 12).passed(1e-4)
        assert GradientCheck(0.0, 1, 12).passed(1e-4)


class TestTraining(unittest.TestCase):
    def test_learns_separable_data(self):
        x, y = toy_data()
        config = TrainConfig(epochs=50, batch_size=8, learning_rate=1e-2, patience=0, seed=3)
        classifier = train(ModelConfig(n1=4, k1=3, n2=4, k2=3, pool=2, fc=8), config, (x, y))
        assert classifier.config.in_channels == 2 and classifier.config.length == 10
        assert classifier.epochs_run == 50
        assert np.mean(predict_batch(classifier, x) == y) >= 0.95
        assert classifier.loss_curve[-1] < classifier.loss_curve[0]

    def test_deterministic(self):
        x, y = toy_data(16)
        config = TrainConfig(epochs=3, batch_size=4, seed=5)
        a = train(ModelConfig(n1=2, n2=2, fc=3), config, (x, y))
        b = train(ModelConfig(n1=2, n2=2, fc=3), config, (x, y))
        for name in PARAM_NAMES:
            assert a.params[name].tobytes() == b.params[name].tobytes()
        assert a.loss_curve == b.loss_curve

    def test_sgd(self):
        x, y = toy_data(16)
        classifier = train(ModelConfig(n1=2, n2=2, fc=3), TrainConfig(epochs=2, optimizer="sgd"), (x, y))
        assert classifier.epochs_run == 2

    def test_full_batch_sgd_loss_never_rises(self):
        x, y = toy_data()
        config = TrainConfig(epochs=40, batch_size=len(x), learning_rate=1e-3, optimizer="sgd", patience=0, seed=2)
        curve = train(ModelConfig(n1=4, k1=3, n2=4, k2=3, pool=2, fc=8), config, (x, y)).loss_curve
        assert len(curve) == 40
        assert all(b <= a + 1e-6 for a, b in zip(curve, curve[1:])), curve
        assert curve[-1] < curve[0]

    def test_early_stopping(self):
        x, y = toy_data(16)
        config = TrainConfig(epochs=200, learning_rate=1e-9, patience=2, min_delta=1.0)
        classifier = train(ModelConfig(n1=2, n2=2, fc=3), config, (x, y))
        assert classifier.epochs_run == 3

    def test_divergence(self):
        x, y = toy_data(16)
        config = TrainConfig(epochs=20, batch_size=4, learning_rate=1e308, optimizer="sgd", patience=0)
        with np.errstate(all="ignore"):
            with self.assertRaises(TrainingDiverged) as ctx:
                train(ModelConfig(n1=2, n2=2, fc=3), config, (x, y))
        assert ctx.exception.epoch is not None

    def test_errors(self):
        x, y = toy_data(8)
        with self.assertRaises(ValueError):
            train(ModelConfig(), TrainConfig(), (x[:0], y[:0]))
        with self.assertRaises(ValueError):
            train(ModelConfig(), TrainConfig(), (x, y + 5))


class TestModelFiles(unittest.TestCase):
    def test_save_load(self):
        x, y = toy_data(16)
        classifier = train(ModelConfig(n1=2, n2=2, fc=3), TrainConfig(epochs=2), (x, y))
        classifier.attachments = {"note": "toy"}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "toy.model"
            save(classifier, path)
            again = load(path)
        assert again.config == classifier.config
        assert again.train_config == classifier.train_config
        assert again.loss_curve == classifier.loss_curve
        assert again.attachments == {"note": "toy"}
        assert np.array_equal(forward(again, x), forward(classifier, x))

    def test_shape_mismatch(self):
        classifier = zero_classifier()
        classifier.params["fc1_w"] = np.zeros((2, 2))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.model"
            save(classifier, path)
            with self.assertRaises(ValueError):
                load(path)


if __name__ == "__main__":
    unittest.main()

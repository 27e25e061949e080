from fractions import Fraction
from pathlib import Path
import tempfile
import unittest

import numpy as np

from smartfeat.ensemble import (
    EnsembleModel,
    ensemble_curve,
    fit_ensemble,
    load_ensemble,
    member_accuracies,
    member_seeds,
    save_ensemble,
    vote_predict,
    vote_predict_batch,
)
from smartfeat.executor import make_executor
from smartfeat.nn import Classifier, ModelConfig, TrainConfig, TrainingDiverged, init_params

CONFIG = ModelConfig(n1=2, k1=3, n2=2, k2=3, pool=2, fc=3).for_input(2, 8)


def constant_voter(cls: int) -> Classifier:
    """A classifier that always predicts ``cls``, via the output bias."""
    params = {k: np.zeros_like(v) for k, v in init_params(CONFIG, 0).items()}
    params["fc2_b"][cls] = 5.0
    return Classifier(CONFIG, params)


def toy_data(n: int = 24, seed: int = 0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = 0.1 * rng.standard_normal((n, 2, 8))
    x[y == 1, 1, :] += 1.0
    return x, y


class TestVoting(unittest.TestCase):
    def test_plurality(self):
        ensemble = EnsembleModel([constant_voter(0), constant_voter(1), constant_voter(1)], master_seed=0)
        cls, proportions = vote_predict(ensemble, np.zeros((2, 8)))
        assert cls == 1
        assert proportions == [Fraction(1, 3), Fraction(2, 3)]
        assert sum(proportions) == 1

    def test_tie_goes_to_failure(self):
        ensemble = EnsembleModel([constant_voter(0), constant_voter(1)], master_seed=0)
        cls, proportions = vote_predict(ensemble, np.zeros((2, 8)))
        assert cls == 1
        assert proportions == [Fraction(1, 2), Fraction(1, 2)]

    def test_permutation_invariant(self):
        members = [constant_voter(c) for c in (0, 0, 1, 1, 0)]
        x = np.zeros((3, 2, 8))
        a = vote_predict_batch(EnsembleModel(members, 0), x)
        b = vote_predict_batch(EnsembleModel(members[::-1], 0), x)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert a[0].tolist() == [0, 0, 0]
        assert np.allclose(a[1], [[0.6, 0.4]] * 3)

    def test_member_accuracy_and_curve(self):
        ensemble = EnsembleModel([constant_voter(1), constant_voter(0), constant_voter(0)], master_seed=0)
        x = np.zeros((4, 2, 8))
        labels = np.array([1, 1, 1, 0])
        assert member_accuracies(ensemble, x, labels) == [0.75, 0.25, 0.25]
        # one member: class 1; two members tie toward class 1; three members: class 0
        assert ensemble_curve(ensemble, x, labels) == [(1, 0.75), (2, 0.75), (3, 0.25)]
        assert ensemble_curve(ensemble, x, labels, sizes=[3]) == [(3, 0.25)]
        with self.assertRaises(ValueError):
            ensemble_curve(ensemble, x, labels, sizes=[4])

    def test_needs_members(self):
        with self.assertRaises(ValueError):
            EnsembleModel([], master_seed=0)
        other = Classifier(CONFIG.for_input(3, 8), init_params(CONFIG.for_input(3, 8), 0))
        with self.assertRaises(ValueError):
            EnsembleModel([constant_voter(0), other], master_seed=0)


class TestFitting(unittest.TestCase):
    def test_seeds_are_distinct(self):
        seeds = [member_seeds(7, i) for i in range(10)]
        assert len({s for pair in seeds for s in pair}) == 20
        assert member_seeds(7, 3) == member_seeds(7, 3)

    def test_independent_of_workers(self):
        x, y = toy_data()
        train_config = TrainConfig(epochs=2, batch_size=8)
        serial = fit_ensemble(3, ModelConfig(n1=2, n2=2, fc=3), train_config, (x, y), master_seed=5)
        executor = make_executor(3)
        try:
            parallel = fit_ensemble(3, ModelConfig(n1=2, n2=2, fc=3), train_config, (x, y), 5, executor)
        finally:
            executor.shutdown()
        assert serial.k == parallel.k == 3
        for a, b in zip(serial.members, parallel.members):
            for name in a.params:
                assert a.params[name].tobytes() == b.params[name].tobytes()
        assert not np.array_equal(serial.members[0].params["conv1_w"], serial.members[1].params["conv1_w"])

    def test_divergence_names_member(self):
        x, y = toy_data(8)
        config = TrainConfig(epochs=20, batch_size=4, learning_rate=1e308, optimizer="sgd", patience=0)
        with np.errstate(all="ignore"):
            with self.assertRaises(TrainingDiverged) as ctx:
                fit_ensemble(2, ModelConfig(n1=2, n2=2, fc=3), config, (x, y), master_seed=1)
        assert ctx.exception.estimator == 0
        assert "estimator 0" in str(ctx.exception)

    def test_bad_k(self):
        x, y = toy_data(8)
        with self.assertRaises(ValueError):
            fit_ensemble(0, ModelConfig(), TrainConfig(), (x, y), master_seed=0)


class TestEnsembleFiles(unittest.TestCase):
    def test_save_load(self):
        x, y = toy_data()
        ensemble = fit_ensemble(2, ModelConfig(n1=2, n2=2, fc=3), TrainConfig(epochs=1), (x, y), master_seed=3)
        for member in ensemble.members:
            member.attachments = {"features": ["original"]}
        with tempfile.TemporaryDirectory() as tmp:
            save_ensemble(tmp, ensemble)
            assert sorted(p.name for p in Path(tmp).iterdir()) == [
                "manifest.yaml",
                "member-000.model",
                "member-001.model",
            ]
            again = load_ensemble(tmp)
        assert again.k == 2 and again.master_seed == 3
        assert again.attachments == {"features": ["original"]}
        assert np.array_equal(vote_predict_batch(again, x)[1], vote_predict_batch(ensemble, x)[1])


if __name__ == "__main__":
    unittest.main()

import unittest

import numpy as np

from smartfeat.synth import (
    ScenarioSpec,
    attribute_ids,
    generate,
    generate_corpus,
    preset,
    scenario_presets,
    signature_attributes,
)


class TestScenarioSpec(unittest.TestCase):
    def test_failed_devices(self):
        assert ScenarioSpec(devices=400).failed_devices == 200
        assert ScenarioSpec(devices=5).failed_devices == 3
        assert ScenarioSpec(devices=10, failure_fraction=0.01).failed_devices == 1
        assert ScenarioSpec(devices=10, failure_fraction=0.99).failed_devices == 9

    def test_validation(self):
        with self.assertRaises(ValueError):
            ScenarioSpec(devices=1)
        with self.assertRaises(ValueError):
            ScenarioSpec(failure_fraction=1.0)
        with self.assertRaises(ValueError):
            ScenarioSpec(min_lifetime=50, max_lifetime=40)
        with self.assertRaises(ValueError):
            ScenarioSpec(abrupt_lead=60)
        with self.assertRaises(KeyError):
            ScenarioSpec(signatures=("sparkle",))
        with self.assertRaises(ValueError):
            ScenarioSpec(start="yesterday-ish")
        with self.assertRaises(ValueError):
            ScenarioSpec(glitch_rate=1.5)
        with self.assertRaises(ValueError):
            ScenarioSpec(glitch_magnitude=-1.0)
        with self.assertRaises(ValueError):
            ScenarioSpec(scale_spread=0.5)

    def test_presets(self):
        assert sorted(scenario_presets()) == ["abrupt-near-failure", "noisy-trend", "wearout"]
        assert preset("wearout", devices=10).devices == 10
        with self.assertRaises(KeyError):
            preset("nope")


class TestGenerate(unittest.TestCase):
    def test_counts_and_shapes(self):
        spec = ScenarioSpec(devices=20, attributes=4, min_lifetime=10, max_lifetime=15, abrupt_lead=3, seed=2)
        histories = generate_corpus(spec)
        assert len(histories) == 20
        assert sum(h.failed for h in histories) == 10
        assert len({h.serial_number for h in histories}) == 20
        for h in histories:
            assert 10 <= len(h) <= 15
            assert h.values.shape == (len(h), 4)
            assert np.all(np.diff(h.dates) == np.timedelta64(1, "D"))
            assert h.model.startswith("synthetic:abrupt") == h.failed

    def test_bit_identical(self):
        spec = preset("noisy-trend", devices=12, seed=9)
        a = generate_corpus(spec)
        b = generate_corpus(spec)
        for x, y in zip(a, b):
            assert x.values.tobytes() == y.values.tobytes()
            assert x.failed == y.failed
        other = generate_corpus(preset("noisy-trend", devices=12, seed=10))
        assert a[0].values.tobytes() != other[0].values.tobytes()

    def test_signature_columns(self):
        spec = ScenarioSpec(devices=10, attributes=6, signature_attributes=2, seed=3)
        columns = signature_attributes(spec)
        assert len(columns) == 2 and list(columns) == sorted(columns)
        assert signature_attributes(spec) == columns
        assert len(signature_attributes(ScenarioSpec(attributes=2, signature_attributes=5))) == 2

    def test_normal_devices_are_clean(self):
        spec = ScenarioSpec(devices=10, noise=0.0, level_spread=1.0, seed=4)
        for h in generate_corpus(spec):
            if not h.failed:
                assert np.all(h.values == h.values[0])
                assert h.model == "synthetic"

    def test_wear(self):
        spec = ScenarioSpec(devices=10, noise=0.0, level_spread=0.0, signatures=("wear",), wear_level=0.5, seed=5)
        columns = list(signature_attributes(spec))
        for h in generate_corpus(spec):
            expected = 0.5 if h.failed else 0.0
            assert np.all(h.values[:, columns] == expected)

    def test_glitches_hit_both_classes(self):
        spec = ScenarioSpec(
            devices=10,
            noise=0.0,
            level_spread=0.0,
            signature_attributes=1,
            glitch_rate=1.0,
            glitch_magnitude=4.0,
            seed=6,
        )
        columns = list(signature_attributes(spec))
        for h in generate_corpus(spec):
            others = np.delete(h.values, columns, axis=1)
            assert np.all((np.abs(others) >= 2.0) & (np.abs(others) <= 4.0))
            assert (others > 0).any() and (others < 0).any()

    def test_scales_keep_ranks(self):
        spec = ScenarioSpec(
            devices=8,
            attributes=4,
            signature_attributes=4,
            noise=0.0,
            level_spread=0.0,
            signatures=("trend",),
            trend_slope=0.1,
            scale_spread=50.0,
            seed=7,
        )
        for h in generate_corpus(spec):
            if h.failed:
                steps = np.diff(h.values, axis=0)
                assert np.all(steps > 0)
                assert len(np.unique(np.round(steps[0], 9))) == 4
                assert np.all((steps >= 0.1 / 50 - 1e-12) & (steps <= 0.1 * 50 + 1e-12))
            else:
                assert not h.values.any()

    def test_noisy_trend_raw_scale_varies(self):
        histories = generate_corpus(preset("noisy-trend", devices=40, seed=2))
        spreads = np.array([np.ptp(h.values[-30:], axis=0) for h in histories])
        assert spreads.max() > 20 * spreads.min()

    def test_corpus(self):
        spec = ScenarioSpec(devices=4, attributes=3, start="2016-06-01")
        corpus = generate(spec)
        assert corpus.attribute_ids == attribute_ids(spec)
        assert len(corpus.attribute_ids) == 3
        assert corpus.report["scenario"]["devices"] == 4
        assert str(corpus.histories[0].dates[0]) == "2016-06-01"
        assert len(attribute_ids(ScenarioSpec(attributes=30))) == 30


if __name__ == "__main__":
    unittest.main()

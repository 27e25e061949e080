import unittest

import numpy as np

from smartfeat.featurize import (
    BLUR_KERNEL,
    DERIVED_FEATURES,
    EDGE_KERNEL,
    SMOOTH_KERNEL,
    WIDE_EDGE_KERNEL,
    CusumMode,
    CusumParams,
    FeatureId,
    FeatureStack,
    Padding,
    build_feature_stack,
    conv_time,
    cumulative_sum,
    cusum,
    feature_set_name,
    parse_feature_set,
    render_image,
    render_stack,
    reversal_counts,
)
from smartfeat.synth import ScenarioSpec, generate_corpus, signature_attributes


def col(*values: float) -> np.ndarray:
    return np.array(values, dtype=np.float64)[:, None]


def brute_reversals(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for t in range(len(x)):
        for i in range(t):
            if x[i] < x[t]:
                out[t] += 1
    return out


def loop_cusum(x: np.ndarray, mode: CusumMode, init_period: int, slack: float):
    if mode is CusumMode.F1:
        s = list(x)
    else:
        s = [0.0] + [x[t] - x[t - 1] for t in range(1, len(x))]
    target = float(np.mean(s[:init_period]))
    plus, minus = [], []
    gp = gm = 0.0
    for value in s:
        gp = max(0.0, gp + value - (target + slack))
        gm = max(0.0, gm - value + (target - slack))
        plus.append(gp)
        minus.append(gm)
    return np.array(plus), np.array(minus)


class TestConv(unittest.TestCase):
    def test_edge(self):
        assert conv_time(col(1, 1, 4, 4), EDGE_KERNEL, Padding.CAUSAL)[:, 0].tolist() == [0, 0, 3, 0]

    def test_smooth(self):
        assert conv_time(col(0, 4, 0), SMOOTH_KERNEL)[:, 0].tolist() == [1, 2, 1]

    def test_constant(self):
        assert not conv_time(col(7, 7, 7, 7), EDGE_KERNEL, Padding.CAUSAL).any()
        assert np.allclose(conv_time(col(7, 7, 7, 7, 7), BLUR_KERNEL), 7.0)

    def test_wide_edge(self):
        out = conv_time(col(0, 1, 2, 3, 4), WIDE_EDGE_KERNEL, Padding.CAUSAL)[:, 0]
        assert out.tolist() == [0, 1, 2, 2, 2]

    def test_bad_kernels(self):
        with self.assertRaises(ValueError):
            conv_time(col(1, 2, 3), [1.0])
        with self.assertRaises(ValueError):
            conv_time(col(1, 2, 3), BLUR_KERNEL)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(2, 20, 3))
        for kernel in (EDGE_KERNEL, SMOOTH_KERNEL, BLUR_KERNEL):
            lhs = conv_time(2.5 * x - 0.5 * y, kernel)
            rhs = 2.5 * conv_time(x, kernel) - 0.5 * conv_time(y, kernel)
            assert np.allclose(lhs[4:-4], rhs[4:-4])

    def test_edge_then_cumsum(self):
        x = np.random.default_rng(2).normal(size=(40, 4))
        recovered = cumulative_sum(conv_time(x, EDGE_KERNEL, Padding.CAUSAL))
        assert np.max(np.abs(recovered - (x - x[0]))) < 1e-9


class TestSeriesTransforms(unittest.TestCase):
    def test_cumulative_sum(self):
        assert cumulative_sum(col(1, 2, 3))[:, 0].tolist() == [1, 3, 6]
        assert cumulative_sum(col(0, 0, 0))[:, 0].tolist() == [0, 0, 0]
        assert cumulative_sum(col(1, -1, 2))[:, 0].tolist() == [1, 0, 2]

    def test_reversals(self):
        assert reversal_counts(col(1, 2, 3, 4))[:, 0].tolist() == [0, 1, 2, 3]
        assert reversal_counts(col(5, 5, 5))[:, 0].tolist() == [0, 0, 0]
        assert reversal_counts(col(0, 0, 2, 2, 2))[:, 0].tolist() == [0, 0, 2, 2, 2]

    def test_reversals_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            x = rng.integers(0, 5, size=int(rng.integers(1, 25))).astype(np.float64)
            assert np.array_equal(reversal_counts(x[:, None])[:, 0], brute_reversals(x))


class TestCusum(unittest.TestCase):
    def test_constant(self):
        for mode in CusumMode:
            for init in (1, 2, 5):
                g_plus, g_minus = cusum(col(3, 3, 3, 3, 3), CusumParams(mode, init))
                assert not g_plus.any() and not g_minus.any()

    def test_f1(self):
        g_plus, g_minus = cusum(col(0, 0, 3, 3), CusumParams(CusumMode.F1, 2))
        assert g_plus[:, 0].tolist() == [0, 0, 3, 6]
        assert g_minus[:, 0].tolist() == [0, 0, 0, 0]

    def test_f2(self):
        g_plus, g_minus = cusum(col(0, 1, 3, 6), CusumParams(CusumMode.F2, 2))
        assert g_plus[:, 0].tolist() == [0, 0.5, 2, 4.5]
        assert g_minus[:, 0].tolist() == [0.5, 0, 0, 0]

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = rng.normal(size=(int(rng.integers(4, 30)), 2))
            init = int(rng.integers(1, len(x) + 1))
            slack = float(rng.uniform(0, 0.5))
            for mode in CusumMode:
                g_plus, g_minus = cusum(x, CusumParams(mode, init, slack))
                assert (g_plus >= 0).all() and (g_minus >= 0).all()
                for j in range(x.shape[1]):
                    plus, minus = loop_cusum(x[:, j], mode, init, slack)
                    assert np.allclose(g_plus[:, j], plus, rtol=0, atol=1e-12)
                    assert np.allclose(g_minus[:, j], minus, rtol=0, atol=1e-12)

    def test_default_init_period(self):
        assert CusumParams().resolve(40) == 10
        assert CusumParams().resolve(5) == 2
        assert CusumParams().resolve(1) == 1
        with self.assertRaises(ValueError):
            CusumParams(init_period=9).resolve(8)


class TestFeatureSets(unittest.TestCase):
    def test_presets(self):
        assert parse_feature_set("original") == set()
        assert parse_feature_set("all") == set(DERIVED_FEATURES)
        assert len(DERIVED_FEATURES) == 9
        assert parse_feature_set("strong") == {
            FeatureId.EdgeChange,
            FeatureId.Blurred,
            FeatureId.ReversalCount,
            FeatureId.CusumF2Pos,
            FeatureId.CusumF2Neg,
        }

    def test_expressions(self):
        assert parse_feature_set("edge,reversal") == {FeatureId.EdgeChange, FeatureId.ReversalCount}
        assert parse_feature_set("cusum,-cusum-f2-neg") == {
            FeatureId.CusumF1Pos,
            FeatureId.CusumF1Neg,
            FeatureId.CusumF2Pos,
        }
        assert parse_feature_set("all,-cusum") == {
            FeatureId.EdgeChange,
            FeatureId.Smoothed,
            FeatureId.Blurred,
            FeatureId.CumulativeSum,
            FeatureId.ReversalCount,
        }
        with self.assertRaises(KeyError):
            parse_feature_set("all,-sharpen")

    def test_names(self):
        assert feature_set_name(parse_feature_set("all,-smooth,-cumsum,-cusum-f1")) == "strong"
        assert feature_set_name(set()) == "original"
        assert feature_set_name({FeatureId.ReversalCount, FeatureId.EdgeChange}) == "edge,reversal"
        for feature in FeatureId:
            assert FeatureId.from_slug(feature.slug) is feature


class TestFeatureStack(unittest.TestCase):
    def setUp(self):
        self.window = np.random.default_rng(5).uniform(size=(12, 3))

    def test_original_only(self):
        stack = build_feature_stack(self.window, set())
        assert stack.features == (FeatureId.Original,)
        assert np.array_equal(stack.channel(FeatureId.Original), self.window)

    def test_all(self):
        stack = build_feature_stack(self.window, DERIVED_FEATURES)
        assert stack.features == tuple(FeatureId)
        assert stack.matrices.shape == (10, 12, 3)
        assert np.array_equal(stack.matrices[0], self.window)
        derived = stack.matrices[1:]
        assert derived.min() >= 0 and derived.max() <= 1
        assert stack.flatten().shape == (30, 12)
        assert np.array_equal(stack.flatten()[3:6], stack.matrices[1].T)

    def test_deterministic(self):
        a = build_feature_stack(self.window, DERIVED_FEATURES)
        b = build_feature_stack(self.window, DERIVED_FEATURES)
        assert a.matrices.tobytes() == b.matrices.tobytes()

    def test_must_start_with_original(self):
        with self.assertRaises(ValueError):
            FeatureStack((FeatureId.EdgeChange,), np.zeros((1, 4, 2)))


class TestRender(unittest.TestCase):
    def test_scaling(self):
        image = render_image(col(0, 5, 10))
        assert image == b"P5\n3 1\n255\n" + bytes([0, 127, 255])

    def test_constant_row(self):
        image = render_image(np.array([[4.0, 1.0], [4.0, 2.0]]))
        assert image == b"P5\n2 2\n255\n" + bytes([0, 0, 0, 255])

    def test_non_finite(self):
        with self.assertRaises(ValueError):
            render_image(col(0, np.nan))

    def test_render_stack(self):
        stack = build_feature_stack(np.random.default_rng(6).uniform(size=(8, 2)), {FeatureId.ReversalCount})
        images = render_stack(stack)
        assert list(images) == [FeatureId.Original, FeatureId.ReversalCount]
        assert all(image.startswith(b"P5\n8 2\n255\n") for image in images.values())


class TestSignatureRecovery(unittest.TestCase):
    def test_edge_localizes_step(self):
        spec = ScenarioSpec(
            devices=6,
            attributes=3,
            signature_attributes=1,
            noise=0.0,
            signatures=("abrupt",),
            abrupt_magnitude=2.0,
            abrupt_lead=5,
        )
        (column,) = signature_attributes(spec)
        for history in generate_corpus(spec):
            window = history.values[-30:]
            edge = conv_time(window, EDGE_KERNEL, Padding.CAUSAL)
            if history.failed:
                nonzero = np.flatnonzero(edge[:, column])
                assert nonzero.tolist() == [30 - 1 - 5]
                self.assertAlmostEqual(edge[nonzero[0], column], 2.0, places=12)
                edge[:, column] = 0
            assert not edge.any()

    def test_reversal_of_monotone_trend(self):
        spec = ScenarioSpec(
            devices=4,
            attributes=2,
            signature_attributes=1,
            noise=0.0,
            signatures=("trend",),
            trend_slope=0.1,
        )
        (column,) = signature_attributes(spec)
        for history in generate_corpus(spec):
            if history.failed:
                counts = reversal_counts(history.values)[:, column]
                assert counts.tolist() == list(range(len(history)))


if __name__ == "__main__":
    unittest.main()

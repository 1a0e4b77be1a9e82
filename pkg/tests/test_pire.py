import numpy as np
import pytest

from advcbir import imagecore, neuralnet, pire
from advcbir.errors import ConfigError
from advcbir.neuralnet import ConvLayer, NetworkSpec


def tiny_net(seed=3):
    spec = NetworkSpec(3, (
        ("conv", ConvLayer(8, 3, 2, 1)), ("relu",),
        ("gem_pool", 3.0), ("l2_normalize",),
    ))
    return neuralnet.init_network(spec, seed)


class TestClip:
    def test_componentwise(self):
        out = pire.clip_linf(np.array([0.2, -0.05]), 0.1)
        np.testing.assert_allclose(out, [0.1, -0.05])

    def test_idempotent_inside_ball(self, rng):
        v = rng.uniform(-0.01, 0.01, (4, 4))
        assert np.array_equal(pire.clip_linf(v, 0.02), v)

    def test_uniform_overflow(self):
        v = np.full((3, 3), -1.0)
        np.testing.assert_allclose(pire.clip_linf(v, 0.02), -0.02)


class TestFinalize:
    def test_original_zero(self):
        assert np.all(pire.finalize_original(np.zeros(4)) == 0)

    def test_original_factor_ten(self):
        assert pire.finalize_original(np.array([0.004]))[0] == pytest.approx(0.04)

    def test_original_homogeneity(self, rng):
        v = rng.uniform(-0.02, 0.02, (5, 5))
        assert np.abs(pire.finalize_original(v)).max() == pytest.approx(10 * np.abs(v).max())

    def test_refined_subthreshold_zeroed(self):
        assert pire.finalize_refined(np.array([0.0005]))[0] == 0.0

    def test_refined_rounds_up_to_step(self):
        assert pire.finalize_refined(np.array([0.003]))[0] == pytest.approx(1 / 255)
        assert pire.finalize_refined(np.array([-0.01]))[0] == pytest.approx(-3 / 255)

    def test_refined_lands_on_8bit_steps(self, rng):
        v = rng.uniform(-0.04, 0.04, (16, 16, 3))
        out = pire.finalize_refined(v)
        steps = out * 255.0
        np.testing.assert_allclose(steps, np.round(steps), atol=1e-9)


class TestAdam:
    def test_zero_gradient_is_noop(self):
        v = np.array([0.1, -0.2])
        state = pire.AdamState.fresh(v.shape)
        v2, _ = pire.adam_step(v, np.zeros_like(v), state, lr=0.1)
        assert np.array_equal(v2, v)

    def test_first_step_closed_form(self):
        v = np.zeros(3)
        g = np.array([0.5, -2.0, 1e-3])
        state = pire.AdamState.fresh(v.shape)
        v2, state2 = pire.adam_step(v, g, state, lr=0.01, eps=1e-8)
        expected = 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(v2, expected, rtol=1e-9)
        assert state2.step == 1

    def test_deterministic(self, rng):
        v = rng.uniform(-1, 1, 6)
        g = rng.uniform(-1, 1, 6)
        s = pire.AdamState.fresh(v.shape)
        a, _ = pire.adam_step(v, g, s, lr=0.05)
        b, _ = pire.adam_step(v, g, s, lr=0.05)
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pire.adam_step(np.zeros(3), np.zeros(4), pire.AdamState.fresh((3,)), 0.1)


class TestPire:
    def test_degenerate_one_step(self, rng):
        w = tiny_net()
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        cfg = pire.PireConfig(iterations=1, learning_rate=1e-30, seed=4)
        adv, v, trace = pire.pire(x, w, cfg)
        v0 = np.random.default_rng(4).uniform(-cfg.epsilon, cfg.epsilon, x.shape)
        np.testing.assert_allclose(v, v0, atol=1e-12)
        np.testing.assert_allclose(adv, np.clip(x + pire.finalize_refined(v0), 0, 1), atol=1e-12)
        assert trace.iterations_executed == 1

    def test_ascent_makes_progress(self, rng):
        w = tiny_net()
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        cfg = pire.PireConfig(iterations=40, epsilon=0.05, learning_rate=0.002, seed=4)
        _, _, trace = pire.pire(x, w, cfg)
        assert trace.final_loss >= trace.losses[0]

    def test_deterministic(self, rng):
        w = tiny_net()
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        cfg = pire.PireConfig(iterations=5, seed=11)
        a1, v1, _ = pire.pire(x, w, cfg)
        a2, v2, _ = pire.pire(x, w, cfg)
        assert np.array_equal(a1, a2)
        assert np.array_equal(v1, v2)

    def test_constraint_tracked_every_iteration(self, rng):
        w = tiny_net()
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        cfg = pire.PireConfig(iterations=30, epsilon=0.01, learning_rate=0.002, seed=2)
        _, v, trace = pire.pire(x, w, cfg)
        assert len(trace.linf_norms) == 30
        assert all(n <= cfg.epsilon + 1e-15 for n in trace.linf_norms)
        assert np.abs(v).max() <= cfg.epsilon + 1e-15

    def test_original_mode(self, rng):
        w = tiny_net()
        x = rng.uniform(0.3, 0.7, (16, 16, 3))
        cfg = pire.PireConfig(iterations=3, seed=5, finalize_mode="original_x10")
        adv, v, _ = pire.pire(x, w, cfg)
        np.testing.assert_allclose(adv, np.clip(x + 10 * v, 0, 1), atol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            pire.PireConfig(iterations=0).validate()
        with pytest.raises(ConfigError):
            pire.PireConfig(epsilon=0.5).validate()
        with pytest.raises(ConfigError):
            pire.PireConfig(finalize_mode="nope").validate()

    def test_runs_through_canonical_extractor(self, rng):
        w = tiny_net()
        ext = neuralnet.Extractor(w, input_size=24)
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        cfg = pire.PireConfig(iterations=4, seed=6)
        a1, _, _ = pire.pire(x, ext, cfg)
        a2, _, _ = pire.pire(x, ext, cfg)
        assert np.array_equal(a1, a2)


class TestQuantizationSurvival:
    def test_refined_components_survive_save(self, rng):
        w = tiny_net()
        # grid-aligned image, as anything loaded from PNG would be
        x = imagecore.dequantize(rng.integers(10, 246, (16, 16, 3)).astype(np.uint8))
        cfg = pire.PireConfig(iterations=20, epsilon=0.01, learning_rate=5e-4, seed=8)
        adv, v, _ = pire.pire(x, w, cfg)
        p = pire.finalize_refined(v)
        clamped = (x + p) != np.clip(x + p, 0, 1)
        q_adv = imagecore.quantize(adv)
        q_orig = imagecore.quantize(x)
        intended = (p != 0) & ~clamped
        delta = q_adv.astype(int) - q_orig.astype(int)
        expected = np.round(p * 255).astype(int)
        assert np.array_equal(delta[intended], expected[intended])
        # sub-threshold components must not change the stored bytes
        assert np.all(delta[p == 0] == 0)

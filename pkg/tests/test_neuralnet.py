import numpy as np
import pytest

from advcbir import neuralnet
from advcbir.errors import ConfigError
from advcbir.neuralnet import ConvLayer, Extractor, NetworkSpec, default_spec


def small_spec():
    return NetworkSpec(3, (
        ("conv", ConvLayer(8, 3, 2, 1)), ("relu",),
        ("conv", ConvLayer(16, 3, 2, 1)), ("relu",),
        ("gem_pool", 3.0),
        ("l2_normalize",),
    ))


class TestInit:
    def test_same_seed_identical(self):
        a = neuralnet.init_network(small_spec(), 5)
        b = neuralnet.init_network(small_spec(), 5)
        for ka, kb in zip(a.kernels, b.kernels):
            assert np.array_equal(ka, kb)

    def test_fan_in_bound(self):
        spec = NetworkSpec(3, (("conv", ConvLayer(8, 3, 1, 1)), ("relu",),
                               ("gem_pool", 3.0), ("l2_normalize",)))
        w = neuralnet.init_network(spec, 0)
        bound = np.sqrt(6.0 / (3 * 3 * 3))
        assert np.abs(w.kernels[0]).max() <= bound
        # uniform init should come close to the bound with 216 samples
        assert np.abs(w.kernels[0]).max() > 0.9 * bound

    def test_spec_must_end_with_norm(self):
        bad = NetworkSpec(3, (("conv", ConvLayer(8, 3, 1, 1)), ("gem_pool", 3.0)))
        with pytest.raises(ConfigError):
            neuralnet.init_network(bad, 0)

    def test_spec_json_round_trip(self):
        spec = default_spec()
        again = NetworkSpec.from_json(spec.to_json())
        assert again == spec


class TestForward:
    def test_unit_norm(self, rng):
        w = neuralnet.init_network(small_spec(), 1)
        for _ in range(3):
            img = rng.uniform(0, 1, (20, 24, 3))
            f = neuralnet.forward(w, img)
            assert abs(np.linalg.norm(f) - 1.0) <= 1e-6

    def test_zero_image_defined(self):
        w = neuralnet.init_network(small_spec(), 1)
        f = neuralnet.forward(w, np.zeros((16, 16, 3)))
        assert np.isfinite(f).all()
        assert abs(np.linalg.norm(f) - 1.0) <= 1e-6

    def test_deterministic(self, rng):
        w = neuralnet.init_network(small_spec(), 1)
        img = rng.uniform(0, 1, (16, 16, 3))
        assert np.array_equal(neuralnet.forward(w, img), neuralnet.forward(w, img))

    def test_two_seeds_differ(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        f1 = neuralnet.forward(neuralnet.init_network(small_spec(), 1), img)
        f2 = neuralnet.forward(neuralnet.init_network(small_spec(), 2), img)
        assert neuralnet.feature_distance_sq(f1, f2) > 0

    def test_undersized_input_rejected(self):
        w = neuralnet.init_network(default_spec(), 1)
        with pytest.raises(ValueError):
            neuralnet.forward(w, np.zeros((4, 4, 3)))

    def test_gem_mean_with_clamp(self):
        # p=1 GeM over [4, 0, 0, 0] (zeros clamped to 1e-6) is the plain mean
        spec = NetworkSpec(1, (("gem_pool", 1.0), ("l2_normalize",)))
        spec.validate()
        w = neuralnet.NetworkWeights(spec=spec, seed=0)
        x = np.array([[[4.0, 0.0], [0.0, 0.0]]])
        feat, caches = neuralnet._forward_with_cache(w, x)
        pooled = caches[-2][-1]
        assert pooled[0] == pytest.approx(1.0, abs=1e-5)


class TestDistance:
    def test_zero_for_equal(self):
        a = np.array([0.6, 0.8])
        assert neuralnet.feature_distance_sq(a, a) == 0.0

    def test_orthonormal_basis(self):
        e1 = np.array([1.0, 0.0])
        e2 = np.array([0.0, 1.0])
        assert neuralnet.feature_distance_sq(e1, e2) == pytest.approx(2.0)

    def test_unit_vector_bound(self, rng):
        for _ in range(20):
            a = rng.standard_normal(16)
            b = rng.standard_normal(16)
            a /= np.linalg.norm(a)
            b /= np.linalg.norm(b)
            assert neuralnet.feature_distance_sq(a, b) <= 4.0 + 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            neuralnet.feature_distance_sq(np.zeros(3), np.zeros(4))


class TestGradient:
    def test_zero_perturbation_is_stationary(self, rng):
        w = neuralnet.init_network(small_spec(), 3)
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        loss, grad = neuralnet.loss_and_grad(w, x, np.zeros_like(x))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_matches_finite_differences(self, rng):
        w = neuralnet.init_network(small_spec(), 3)
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        v = rng.uniform(-0.05, 0.05, x.shape)
        _, grad = neuralnet.loss_and_grad(w, x, v)
        coords = [tuple(c) for c in rng.integers(0, [16, 16, 3], size=(20, 3))]
        fd = neuralnet.finite_diff_gradient(w, x, v, 1e-3, coords)
        ok = 0
        for c in coords:
            rel = abs(grad[c] - fd[c]) / max(abs(grad[c]), abs(fd[c]), 1e-12)
            ok += rel <= 1e-3
        assert ok >= 19

    def test_clamped_pixels_get_zero_gradient(self, rng):
        w = neuralnet.init_network(small_spec(), 3)
        x = rng.uniform(0.3, 0.7, (16, 16, 3))
        v = rng.uniform(-0.01, 0.01, x.shape)
        x[3, 4, 0] = 0.99
        v[3, 4, 0] = 0.05  # pushes past 1.0
        _, grad = neuralnet.loss_and_grad(w, x, v)
        assert grad[3, 4, 0] == 0.0

    def test_finite_diff_requires_positive_h(self, rng):
        w = neuralnet.init_network(small_spec(), 3)
        x = rng.uniform(0, 1, (16, 16, 3))
        with pytest.raises(ValueError):
            neuralnet.finite_diff_gradient(w, x, np.zeros_like(x), 0.0)

    def test_tight_h_agreement(self, rng):
        w = neuralnet.init_network(small_spec(), 4)
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        v = rng.uniform(-0.04, 0.04, x.shape)
        _, grad = neuralnet.loss_and_grad(w, x, v)
        coords = [(2, 3, 0), (8, 8, 1), (14, 1, 2)]
        fd = neuralnet.finite_diff_gradient(w, x, v, 1e-5, coords)
        for c in coords:
            assert grad[c] == pytest.approx(fd[c], abs=1e-7)


class TestExtractor:
    def test_canonical_resize_gradient(self, rng):
        w = neuralnet.init_network(small_spec(), 7)
        ext = Extractor(w, input_size=24)
        x = rng.uniform(0.2, 0.8, (30, 36, 3))
        v = rng.uniform(-0.05, 0.05, x.shape)
        loss, grad = ext.loss_and_grad(x, v)
        assert loss > 0
        for c in [(4, 4, 0), (15, 20, 1), (28, 30, 2)]:
            vp, vm = v.copy(), v.copy()
            vp[c] += 1e-5
            vm[c] -= 1e-5
            lp = neuralnet.feature_distance_sq(ext.features(x), ext.features(np.clip(x + vp, 0, 1)))
            lm = neuralnet.feature_distance_sq(ext.features(x), ext.features(np.clip(x + vm, 0, 1)))
            fd = (lp - lm) / 2e-5
            assert grad[c] == pytest.approx(fd, rel=1e-3, abs=1e-9)

    def test_native_size_matches_plain_forward(self, rng):
        w = neuralnet.init_network(small_spec(), 7)
        ext = Extractor(w, input_size=16)
        img = rng.uniform(0, 1, (16, 16, 3))
        assert np.array_equal(ext.features(img), neuralnet.forward(w, img))


class TestSerialization:
    def test_weights_round_trip(self, rng, tmp_path):
        w = neuralnet.init_network(small_spec(), 9)
        path = tmp_path / "weights.bin"
        neuralnet.save_weights(w, path)
        again = neuralnet.load_weights(path)
        assert again.spec == w.spec
        assert again.seed == w.seed
        for ka, kb in zip(w.kernels, again.kernels):
            np.testing.assert_allclose(ka, kb, atol=1e-7)  # float32 storage

    def test_loaded_weights_usable(self, rng, tmp_path):
        w = neuralnet.init_network(small_spec(), 9)
        path = tmp_path / "weights.bin"
        neuralnet.save_weights(w, path)
        again = neuralnet.load_weights(path)
        img = rng.uniform(0, 1, (16, 16, 3))
        d = neuralnet.feature_distance_sq(neuralnet.forward(w, img),
                                          neuralnet.forward(again, img))
        assert d < 1e-9

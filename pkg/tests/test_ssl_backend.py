import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from resynth.errors import BackendUnavailable, InvalidInput, ShapeMismatch
from resynth.ssl_backend import (
    ExternalSSLAdapter,
    LayerWeightedSum,
    SSLConditioner,
    SSLFeatureStack,
    extract_features,
    kmeans_tokenize,
    ssl_condition,
    ssl_frame_count,
    train_kmeans,
    weighted_sum,
)
from resynth.signal_core import Waveform, frame_count
from conftest import white_noise
from gradcheck import finite_difference_check


class TestExtractFeatures:
    def test_shape_4s(self):
        stack = extract_features(white_noise(4.0))
        assert stack.layers.shape == (25, 200, 1024)
        assert stack.frame_rate == 50

    def test_zeros_input_finite(self):
        stack = extract_features(Waveform(np.zeros(16000)))
        assert np.all(np.isfinite(stack.layers))

    def test_repeated_calls_byte_identical(self):
        w = white_noise(1.0, seed=3)
        a = extract_features(w).layers
        b = extract_features(w).layers
        assert a.tobytes() == b.tobytes()

    def test_external_adapter_absent_raises(self):
        with pytest.raises(BackendUnavailable):
            extract_features(white_noise(0.5), ExternalSSLAdapter())


class TestWeightedSum:
    def test_equal_logits_is_mean(self, rng):
        layers = rng.normal(size=(4, 10, 1024)).astype(np.float32)
        out = weighted_sum(SSLFeatureStack(layers), np.zeros(4))
        np.testing.assert_allclose(out, layers.mean(axis=0), atol=1e-6)

    def test_dominant_logit_selects_layer(self, rng):
        layers = rng.normal(size=(3, 5, 1024)).astype(np.float32)
        logits = np.array([50.0, 0.0, 0.0])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        assert w[0] >= 1 - 1e-20
        assert w[1] < 1e-20 and w[2] < 1e-20
        out = weighted_sum(SSLFeatureStack(layers), logits)
        np.testing.assert_allclose(out, layers[0], atol=1e-12)

    def test_two_layer_softmax_oracle(self, rng):
        a = rng.normal(size=(1, 7, 1024)).astype(np.float32)
        b = rng.normal(size=(1, 7, 1024)).astype(np.float32)
        layers = np.concatenate([a, b], axis=0)
        # softmax((0, ln 3)) = (1/4, 3/4)
        out = weighted_sum(SSLFeatureStack(layers), np.array([0.0, np.log(3.0)]))
        np.testing.assert_allclose(out, 0.25 * a[0] + 0.75 * b[0], atol=1e-6)

    def test_length_mismatch(self, rng):
        layers = rng.normal(size=(4, 5, 1024)).astype(np.float32)
        with pytest.raises(ShapeMismatch):
            weighted_sum(SSLFeatureStack(layers), np.zeros(3))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        layers = rng.normal(size=(5, 4, 1024)).astype(np.float32)
        logits = rng.normal(size=5)
        perm = rng.permutation(5)
        base = weighted_sum(SSLFeatureStack(layers), logits)
        permuted = weighted_sum(SSLFeatureStack(layers[perm]), logits[perm])
        np.testing.assert_allclose(base, permuted, atol=1e-5)

    def test_softmax_weights_valid(self):
        logits = np.array([-3.0, 0.5, 9.0, 2.2])
        z = np.exp(logits - logits.max())
        w = z / z.sum()
        assert np.all(w > 0)
        assert abs(w.sum() - 1.0) < 1e-9


class TestLayerWeightedSumModule:
    def test_matches_functional(self, rng):
        layers = rng.normal(size=(6, 9, 1024)).astype(np.float32)
        module = LayerWeightedSum(6)
        with torch.no_grad():
            module.logits.copy_(torch.tensor([0.1, -0.4, 2.0, 0.0, 1.0, -1.0]))
        out = module(torch.from_numpy(layers)).detach().numpy()
        oracle = weighted_sum(SSLFeatureStack(layers), module.logits.detach().numpy())
        np.testing.assert_allclose(out, oracle, atol=1e-5)


class TestSSLConditioner:
    def test_output_alignment_to_mel_frames(self):
        w = white_noise(4.0, seed=1)
        stack = extract_features(w)
        fused = weighted_sum(stack, np.zeros(stack.n_layers))
        out = ssl_condition(fused, out_frames=frame_count(len(w)))
        assert out.shape == (401, 256)

    def test_eval_mode_deterministic(self):
        w = white_noise(1.0, seed=2)
        fused = weighted_sum(extract_features(w), np.zeros(25))
        a = ssl_condition(fused, 101, training=False, seed=7)
        b = ssl_condition(fused, 101, training=False, seed=7)
        assert np.array_equal(a, b)

    def test_training_dropout_active(self):
        w = white_noise(1.0, seed=2)
        fused = weighted_sum(extract_features(w), np.zeros(25))
        torch.manual_seed(0)
        conditioner = SSLConditioner()
        conditioner.train()
        x = torch.from_numpy(np.asarray(fused, dtype=np.float32))[None]
        a = conditioner(x, 101).detach().numpy()
        b = conditioner(x, 101).detach().numpy()
        assert not np.array_equal(a, b)

    def test_shape_depends_only_on_length(self, rng):
        conditioner = SSLConditioner(channels=(32, 32))
        for _ in range(3):
            x = torch.from_numpy(rng.normal(size=(1, 50, 1024)).astype(np.float32))
            assert conditioner(x, 101).shape == (1, 101, 256)

    def test_gradients_match_finite_differences(self, rng):
        torch.manual_seed(0)
        conditioner = SSLConditioner(channels=(8, 8), kernel=3)
        x = torch.from_numpy(rng.normal(size=(1, 6, 1024)))

        def loss_fn(m):
            return m(x, 12).sum()

        finite_difference_check(conditioner, loss_fn)


class TestKmeans:
    def test_single_centroid_all_zero(self, rng):
        feats = rng.normal(size=(10, 8))
        centroids = rng.normal(size=(1, 8))
        assert np.all(kmeans_tokenize(feats, centroids) == 0)

    def test_frame_equal_to_centroid(self, rng):
        centroids = rng.normal(size=(12, 16))
        feats = centroids[[7]].copy()
        assert kmeans_tokenize(feats, centroids)[0] == 7

    def test_matches_bruteforce_oracle(self, rng):
        feats = rng.normal(size=(20, 6))
        centroids = rng.normal(size=(5, 6))
        tokens = kmeans_tokenize(feats, centroids)
        for i in range(20):
            dists = [np.linalg.norm(feats[i] - c) for c in centroids]
            assert tokens[i] == int(np.argmin(dists))

    def test_empty_centroids_rejected(self, rng):
        with pytest.raises(InvalidInput):
            kmeans_tokenize(rng.normal(size=(5, 4)), np.zeros((0, 4)))

    def test_training_reduces_distortion(self, rng):
        feats = np.concatenate([rng.normal(loc=c, size=(30, 4)) for c in (-3.0, 0.0, 3.0)])
        initial = feats[np.random.default_rng(0).choice(len(feats), 3, replace=False)]
        trained = train_kmeans(feats, k=3, iters=20, seed=0)

        def distortion(cents):
            t = kmeans_tokenize(feats, cents)
            return np.sum((feats - cents[t]) ** 2)

        assert distortion(trained) <= distortion(initial)

    def test_tokenize_full_pipeline(self):
        w = white_noise(1.0, seed=9)
        fused = weighted_sum(extract_features(w), np.zeros(25))
        centroids = train_kmeans(fused, k=8, iters=5, seed=1)
        tokens = kmeans_tokenize(fused, centroids)
        assert tokens.shape == (fused.shape[0],)
        assert tokens.min() >= 0 and tokens.max() < 8


class TestFrameCounts:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=3200, max_value=96000))
    def test_ssl_frames_track_half_mel_frames(self, n):
        assert abs(2 * ssl_frame_count(n) - frame_count(n)) <= 1

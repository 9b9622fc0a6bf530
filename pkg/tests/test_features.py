import numpy as np
import pytest

from dualtrack import features as F
from dualtrack.core import crop_resize, make_rng

from .oracles import naive_forward


def random_tiny_spec(rng, finetune=False):
    """Two or three conv stages with random geometry, then FC1, FC2 (and head)."""
    size = int(rng.integers(6, 11))
    chans = int(rng.choice([1, 3]))
    layers = []
    shape = size
    for _ in range(int(rng.integers(2, 4))):
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 2))
        if (shape + 2 * pad - k) // stride + 1 < 2:
            stride, pad = 1, k // 2
        layers += [F.Conv(int(rng.integers(2, 5)), k, stride, pad), F.ReLU()]
        shape = (shape + 2 * pad - k) // stride + 1
        if shape >= 4 and rng.random() < 0.5:
            layers.append(F.MaxPool(2, 2))
            shape = (shape - 2) // 2 + 1
    layers += [F.FullyConnected(int(rng.integers(4, 9))), F.ReLU(), F.FullyConnected(int(rng.integers(3, 7))),
               F.ReLU()]
    if finetune:
        layers += [F.FullyConnected(2), F.Softmax()]
    return F.NetworkSpec(tuple(layers), size, chans)


def random_weights(spec, rng, scale=0.5):
    w = F.init_weights(spec, rng)
    # non-zero biases so bias handling is exercised
    return F.Weights([None if p is None else (p[0], rng.normal(0, scale, p[1].shape)) for p in w.params])


class TestSpec:
    def test_default_topology(self):
        spec = F.default_spec(64, finetune=True)
        convs = [l for l in spec.layers if isinstance(l, F.Conv)]
        assert [c.out_channels for c in convs] == [16, 32, 32, 64, 64]
        # a pool follows every conv stage
        for i, l in enumerate(spec.layers):
            if isinstance(l, F.Conv):
                assert isinstance(spec.layers[i + 2], F.MaxPool)
        assert spec.shapes()[spec.trunk_end() - 1] == (2, 2, 64)
        assert spec.feature_dim == 128 and spec.has_classifier_head
        assert not F.default_spec(64).has_classifier_head

    def test_shape_error_names_layer(self):
        with pytest.raises(F.ShapeError, match="layer 2"):
            F.NetworkSpec((F.Conv(4, 3, 1, 0), F.ReLU(), F.Conv(4, 5, 1, 0)), 6, 3)

    def test_input_mismatch(self):
        spec = F.default_spec(32)
        w = F.init_weights(spec, make_rng(0))
        with pytest.raises(F.ShapeError, match="layer 0"):
            F.forward(spec, w, np.zeros((8, 8, 3)))


class TestForward:
    def test_zero_weights(self):
        spec = F.default_spec(32)
        w = F.init_weights(spec, make_rng(0))
        zero = F.Weights([None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1])) for p in w.params])
        acts = F.forward(spec, zero, make_rng(1).random((32, 32, 3)))
        assert all(np.all(a == 0) for a in acts)

    def test_identity_1x1(self):
        spec = F.NetworkSpec((F.Conv(3, 1, 1, 0),), 5, 3)
        kernel = np.eye(3).reshape(1, 1, 3, 3)
        w = F.Weights([(kernel, np.zeros(3))])
        patch = make_rng(2).random((5, 5, 3))
        out = F.forward(spec, w, patch)[0]
        np.testing.assert_allclose(out, patch - patch.mean(), atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_naive_oracle(self, seed):
        rng = make_rng(1000 + seed)
        spec = random_tiny_spec(rng, finetune=bool(seed % 2))
        w = random_weights(spec, rng)
        patch = rng.random((spec.input_size, spec.input_size, spec.channels))
        got = F.forward(spec, w, patch)
        want = naive_forward(spec, w, patch)
        for a, b in zip(got, want):
            np.testing.assert_allclose(a.reshape(b.shape), b, atol=1e-5)

    def test_batch_float32_close_to_float64(self):
        spec = F.default_spec(32)
        w = F.init_weights(spec, make_rng(3))
        patches = make_rng(4).random((10, 32, 32, 3))
        f32 = F.extract_features_batch(spec, w, patches)
        f64 = np.stack([F.extract_features(spec, w, p) for p in patches])
        np.testing.assert_allclose(f32, f64, rtol=1e-4, atol=1e-4)

    def test_softmax_sums_to_one(self):
        rng = make_rng(5)
        for _ in range(5):
            spec = random_tiny_spec(rng, finetune=True)
            w = random_weights(spec, rng, scale=3.0)
            out = F.forward(spec, w, rng.random((spec.input_size, spec.input_size, spec.channels)))[-1]
            assert abs(out.sum() - 1.0) <= 1e-9 and np.all(out > 0)


class TestFeatures:
    def test_dimension(self):
        rng = make_rng(6)
        spec = F.NetworkSpec((F.Conv(4, 3, 1, 1), F.ReLU(), F.MaxPool(2, 2), F.FullyConnected(10), F.ReLU(),
                              F.FullyConnected(16), F.ReLU()), 8, 3)
        w = F.init_weights(spec, rng)
        assert F.extract_features(spec, w, rng.random((8, 8, 3))).shape == (16,)

    def test_deterministic(self):
        spec = F.default_spec(64)
        w = F.init_weights(spec, make_rng(7))
        p = make_rng(8).random((64, 64, 3))
        np.testing.assert_array_equal(F.extract_features(spec, w, p), F.extract_features(spec, w, p.copy()))

    def test_shift_locality(self):
        from dualtrack.synth import make_sequence
        seq = make_sequence("static", 2, seed=0)
        img, box = seq.frames[0], seq.boxes[0]
        spec = F.default_spec(64)
        sims_near, sims_far = [], []
        for seed in range(5):
            w = F.init_weights(spec, make_rng(seed))

            def feat(b):
                v = F.extract_features(spec, w, crop_resize(img, b, 64))
                return v / np.linalg.norm(v)
            base = feat(box)
            sims_near.append(base @ feat(box.shifted(5, 0)))
            rnd = make_rng(50 + seed).random((64, 64, 3))
            v = F.extract_features(spec, w, rnd)
            sims_far.append(base @ (v / np.linalg.norm(v)))
        assert np.mean(sims_near) > np.mean(sims_far)


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        spec = F.default_spec(32, finetune=True)
        w = F.init_weights(spec, make_rng(9))
        F.save_weights(tmp_path / "w.dtw", spec, w)
        assert F.load_weights(tmp_path / "w.dtw", spec).equals(w)

    def test_header_layout(self):
        spec = F.NetworkSpec((F.Conv(2, 3, 1, 1), F.ReLU(), F.FullyConnected(4), F.FullyConnected(3)), 4, 1)
        w = F.init_weights(spec, make_rng(10))
        data = F.weights_to_bytes(spec, w)
        assert data[:4] == b"DTW1"
        assert int.from_bytes(data[4:8], "little") == 3
        assert data[8] == 1 and int.from_bytes(data[9:13], "little") == 4
        assert [int.from_bytes(data[13 + 4 * i:17 + 4 * i], "little") for i in range(4)] == [3, 3, 1, 2]
        assert F.read_header(data) == [(1, (3, 3, 1, 2)), (2, (32, 4)), (2, (4, 3))]
        kernel = np.frombuffer(data, "<f4", count=18, offset=29).reshape(3, 3, 1, 2)
        np.testing.assert_array_equal(kernel, w.params[0][0])
        expected_len = 8 + (1 + 4 + 16 + 4 * 20) + (1 + 4 + 8 + 4 * (128 + 4)) + (1 + 4 + 8 + 4 * (12 + 3))
        assert len(data) == expected_len

    def test_rejects_bad_files(self):
        spec = F.default_spec(32)
        w = F.init_weights(spec, make_rng(11))
        data = F.weights_to_bytes(spec, w)
        with pytest.raises(ValueError, match="magic"):
            F.weights_from_bytes(b"XXXX" + data[4:], spec)
        with pytest.raises(ValueError, match="truncated"):
            F.weights_from_bytes(data[:-10], spec)
        with pytest.raises(F.ShapeError):
            F.weights_from_bytes(data, F.default_spec(64))


def _toy_samples(spec, n=2, seed=0):
    """``n`` alternating positive/negative patches cut from a synthetic frame."""
    from dualtrack.core import TrackerConfig
    from dualtrack.sampling import generate_training_samples
    from dualtrack.synth import make_sequence

    seq = make_sequence("static", 2, seed=seed)
    cfg = TrackerConfig(pos_per_frame=(n + 1) // 2, neg_per_frame=n // 2, patch_size=spec.input_size)
    samples = generate_training_samples(seq.frames[0], seq.boxes[0], cfg, make_rng(seed))
    pos = [x for x in samples if x.label > 0]
    neg = [x for x in samples if x.label < 0]
    return [x for pair in zip(pos, neg) for x in pair] + pos[len(neg):]


class TestFinetune:
    def _net(self, seed=0):
        spec = F.default_spec(32, finetune=True)
        return spec, F.init_weights(spec, make_rng(seed))

    def test_zero_lr_unchanged(self):
        spec, w = self._net()
        new, _ = F.finetune_fc(spec, w, _toy_samples(spec, 8), 3, 0.0, make_rng(1))
        assert new.equals(w)

    def test_conv_tensors_bit_identical(self):
        spec, w = self._net()
        before = w.copy()
        new, _ = F.finetune_fc(spec, w, _toy_samples(spec, 8), 3, 0.05, make_rng(1))
        for i, l in enumerate(spec.layers):
            if isinstance(l, F.Conv):
                assert np.array_equal(new.params[i][0], before.params[i][0])
                assert np.array_equal(new.params[i][1], before.params[i][1])
        assert w.equals(before)
        assert not new.equals(before)

    def test_separable_pair_is_fit(self):
        spec, w = self._net(2)
        _, losses = F.finetune_fc(spec, w, _toy_samples(spec, 2), 200, 0.1, make_rng(3))
        assert losses[-1] < 0.01

    @pytest.mark.parametrize("seed", range(3))
    def test_loss_non_increasing_small_lr(self, seed):
        spec = F.default_spec(64, finetune=True)
        w = F.init_weights(spec, make_rng(seed))
        _, losses = F.finetune_fc(spec, w, _toy_samples(spec, 2, seed=seed), 30, 1e-3, make_rng(6))
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_divergence(self):
        spec, w = self._net(7)
        huge = F.Weights([None if p is None else (p[0] * 1e150, p[1]) for p in w.params])
        with pytest.raises(F.DivergenceError, match="divergence.*epoch 0"):
            F.finetune_fc(spec, huge, _toy_samples(spec, 4), 2, 1.0, make_rng(8))

    def test_needs_head(self):
        spec = F.default_spec(32)
        with pytest.raises(F.ShapeError):
            F.finetune_fc(spec, F.init_weights(spec, make_rng(0)), _toy_samples(spec, 2), 1, 0.1, make_rng(0))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_check(self, seed):
        rng = make_rng(200 + seed)
        spec = random_tiny_spec(rng, finetune=True)
        w = random_weights(spec, rng, scale=0.1)
        start = spec.trunk_end()
        patches = rng.random((6, spec.input_size, spec.input_size, spec.channels))
        labels = rng.integers(0, 2, size=6)
        trunk = F.forward_batch(spec, w, patches, stop=start - 1, dtype=np.float64).reshape(6, -1)
        _, grads = F.head_loss_and_grads(spec, w, trunk, labels)
        eps = 1e-4
        worst = 0.0
        for idx, (gk, gb) in grads.items():
            for which, g in ((0, gk), (1, gb)):
                param = w.params[idx][which]
                for pos in np.ndindex(param.shape):
                    old = param[pos]
                    param[pos] = old + eps
                    lp, _ = F.head_loss_and_grads(spec, w, trunk, labels)
                    param[pos] = old - eps
                    lm, _ = F.head_loss_and_grads(spec, w, trunk, labels)
                    param[pos] = old
                    num = (lp - lm) / (2 * eps)
                    denom = max(abs(num), abs(g[pos]), 1e-6)
                    worst = max(worst, abs(num - g[pos]) / denom)
        assert worst <= 1e-3

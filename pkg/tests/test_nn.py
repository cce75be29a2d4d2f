import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nanofusion import gradcheck, nn


def nhwc(chw):
    """(C, H, W) array -> batch of one, channel-last."""
    return np.asarray(chw, dtype=np.float64).transpose(1, 2, 0)[None]


class TestForward:
    def test_identity_conv(self):
        conv = nn.Conv2d("c", in_ch=1, out_ch=1, kernel=1)
        params = {"c.weight": np.ones((1, 1, 1, 1)), "c.bias": np.zeros(1)}
        y = nn.forward([conv], params, np.full((1, 1, 1, 1), 0.37))
        assert y.item() == 0.37

    def test_relu_values(self):
        y = nn.forward([nn.ReLU("r")], {}, np.array([[-1.0, 2.0]]))
        assert y.tolist() == [[0.0, 2.0]]

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        conv = nn.Conv2d("c", in_ch=2, out_ch=3, kernel=3, stride=2, padding=1)
        params = conv.init_params((2, 7, 6), rng, np.float64)
        params["c.bias"] = rng.standard_normal(3)
        x = rng.standard_normal((2, 7, 6))
        y = nn.forward([conv], params, nhwc(x))[0].transpose(2, 0, 1)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        w = params["c.weight"]
        expected = np.zeros((3, 4, 3))
        for o in range(3):
            for i in range(4):
                for j in range(3):
                    patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    expected[o, i, j] = np.sum(patch * w[o]) + params["c.bias"][o]
        np.testing.assert_allclose(y, expected, rtol=1e-12)

    def test_flatten_emits_chw_order(self):
        x = np.arange(24, dtype=float).reshape(2, 3, 4)     # C, H, W
        y = nn.forward([nn.Flatten("f")], {}, nhwc(x))
        assert y[0].tolist() == x.ravel().tolist()

    def test_shape_error_names_layer(self):
        conv = nn.Conv2d("block9.conv", in_ch=3, out_ch=1, kernel=3)
        params = conv.init_params((3, 5, 5), np.random.default_rng(0))
        with pytest.raises(nn.ShapeError) as e:
            nn.forward([conv], params, np.zeros((1, 5, 5, 2), np.float32))
        assert e.value.layer == "block9.conv"

    def test_deterministic(self):
        layers = nn.conv_bn_relu("a", 1, 4, 3, 1, 1) + [nn.MaxPool2d("p", size=2)]
        params = nn.init_params(layers, (1, 8, 8), np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((2, 8, 8, 1)).astype(np.float32)
        a = nn.forward(layers, params, x)
        b = nn.forward(layers, params, x)
        assert a.tobytes() == b.tobytes()

    def test_batchnorm_eval_uses_running_stats(self):
        bn = nn.BatchNorm2d("bn", channels=2)
        params = bn.init_params((2, 1, 1), None, np.float64)
        params["bn.running_mean"][:] = [1.0, -1.0]
        params["bn.running_var"][:] = [4.0, 1.0]
        y = nn.forward([bn], params, np.array([[[[3.0, 0.0]]]]))
        np.testing.assert_allclose(y.ravel(), [2 / np.sqrt(4 + 1e-5), 1 / np.sqrt(1 + 1e-5)])

    def test_batchnorm_training_updates_running_stats(self):
        bn = nn.BatchNorm2d("bn", channels=1)
        params = bn.init_params((1, 1, 1), None, np.float64)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        nn.forward([bn], params, x, training=True)
        assert params["bn.running_mean"][0] == pytest.approx(0.2)           # 0.9*0 + 0.1*2
        assert params["bn.running_var"][0] == pytest.approx(0.9 + 0.1 * 2)  # unbiased var = 2

    def test_dropout_requires_rng_in_training(self):
        with pytest.raises(ValueError):
            nn.forward([nn.Dropout("d")], {}, np.ones((1, 4)), training=True)
        y = nn.forward([nn.Dropout("d")], {}, np.ones((1, 4)))
        assert y.tolist() == [[1.0] * 4]

    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(4, 20), w=st.integers(4, 20), size=st.integers(2, 3), seed=st.integers(0, 999))
    def test_maxpool_output_is_a_window_max(self, h, w, size, seed):
        x = np.random.default_rng(seed).standard_normal((1, h, w, 2))
        y = nn.forward([nn.MaxPool2d("p", size=size)], {}, x)
        for i in range(y.shape[1]):
            for j in range(y.shape[2]):
                win = x[0, i * size:(i + 1) * size, j * size:(j + 1) * size]
                assert np.array_equal(y[0, i, j], win.max(axis=(0, 1)))


class TestShapes:
    @settings(max_examples=200, deadline=None)
    @given(cin=st.integers(1, 4), cout=st.integers(1, 4), k=st.integers(1, 5),
           s=st.integers(1, 3), p=st.integers(0, 2), h=st.integers(5, 16), w=st.integers(5, 16))
    def test_conv_declared_shape_matches_forward(self, cin, cout, k, s, p, h, w):
        conv = nn.Conv2d("c", in_ch=cin, out_ch=cout, kernel=k, stride=s, padding=p)
        params = conv.init_params((cin, h, w), np.random.default_rng(0))
        y = nn.forward([conv], params, np.zeros((1, h, w, cin), np.float32))
        assert nn.logical_shape(y) == conv.output_shape((cin, h, w))

    @settings(max_examples=100, deadline=None)
    @given(c=st.integers(1, 5), h=st.integers(2, 12), w=st.integers(2, 12), size=st.integers(2, 3))
    def test_pool_and_flatten_shapes(self, c, h, w, size):
        pool = nn.MaxPool2d("p", size=size)
        if h < size or w < size:
            return
        y = nn.forward([pool], {}, np.zeros((1, h, w, c)))
        assert nn.logical_shape(y) == pool.output_shape((c, h, w))
        f = nn.forward([nn.Flatten("f")], {}, y)
        assert f.shape == (1,) + nn.Flatten("f").output_shape(pool.output_shape((c, h, w)))

    def test_backbone_feature_length(self):
        from nanofusion.models import backbone, block3
        assert nn.chain_output_shape(backbone(64) + block3(64), (1, 96, 160)) == (1920,)


class TestBackward:
    @pytest.mark.parametrize("kind", gradcheck.LAYER_KINDS)
    def test_finite_differences(self, kind):
        for seed in range(10):
            r = gradcheck.check_layer(kind, seed)
            assert r.max_rel_error <= 1e-4, r

    def test_fc_l1_gradient_sign(self):
        fc = nn.Linear("fc", in_features=3, out_features=2)
        params = fc.init_params((3,), np.random.default_rng(0), np.float64)
        x = np.array([[0.5, -2.0, 1.0]])
        target = np.array([[10.0, -10.0]])
        tape = nn.Tape()
        pred = nn.forward([fc], params, x, tape=tape)
        _, grads = nn.backward([fc], params, tape, np.sign(pred - target))
        expected = np.outer(np.sign(pred - target)[0], x[0])
        assert np.array_equal(np.sign(grads["fc.weight"]), np.sign(expected))

    def test_zero_upstream_gives_zero_gradients(self):
        layers = nn.conv_bn_relu("a", 1, 2, 3, 1, 1) + [nn.Flatten("f"),
                                                        nn.Linear("fc", in_features=32, out_features=4)]
        params = nn.init_params(layers, (1, 4, 4), np.random.default_rng(0), np.float64)
        tape = nn.Tape()
        nn.forward(layers, params, np.random.default_rng(1).standard_normal((2, 4, 4, 1)),
                   training=True, tape=tape)
        _, grads = nn.backward(layers, params, tape, np.zeros((2, 4)))
        assert set(grads) == {"a.conv.weight", "a.conv.bias", "a.bn.gamma", "a.bn.beta",
                              "fc.weight", "fc.bias"}
        assert all(not np.any(g) for g in grads.values())

    def test_missing_cache(self):
        with pytest.raises(nn.MissingCacheError):
            nn.backward([nn.ReLU("r")], {}, nn.Tape(), np.ones((1, 2)))
        with pytest.raises(nn.MissingCacheError):
            nn.backward([nn.ReLU("r")], {}, None, np.ones((1, 2)))

    def test_non_finite_gradient_names_layer(self):
        fc = nn.Linear("head", in_features=2, out_features=1)
        params = fc.init_params((2,), np.random.default_rng(0), np.float64)
        tape = nn.Tape()
        nn.forward([fc], params, np.array([[np.inf, 1.0]]), tape=tape)
        with pytest.raises(nn.NonFiniteGradientError) as e:
            nn.backward([fc], params, tape, np.ones((1, 1)))
        assert "head" in str(e.value)


class TestSGD:
    def test_single_step(self):
        out = nn.sgd_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, 0.001)
        assert out["w"][0] == pytest.approx(0.9995, abs=1e-15)

    def test_zero_gradient_and_additivity(self):
        p = {"w": np.array([0.25, -1.0])}
        assert np.array_equal(nn.sgd_step(p, {"w": np.zeros(2)}, 0.1)["w"], p["w"])
        g = {"w": np.array([0.5, 2.0])}
        two = nn.sgd_step(nn.sgd_step(p, g, 0.001), g, 0.001)
        np.testing.assert_allclose(two["w"], p["w"] - 2 * 0.001 * g["w"], rtol=1e-15)

    def test_rejects_bad_lr_and_shapes(self):
        with pytest.raises(ValueError):
            nn.sgd_step({"w": np.ones(1)}, {"w": np.ones(1)}, 0.0)
        with pytest.raises(nn.ShapeError):
            nn.sgd_step({"w": np.ones(2)}, {"w": np.ones(3)}, 0.1)


class TestMacs:
    def test_single_conv(self):
        conv = nn.Conv2d("c", in_ch=1, out_ch=1, kernel=3, stride=1, padding=1)
        assert nn.mac_count([conv], (1, 8, 8)) == 576

    def test_backbone_regression_constant(self):
        from nanofusion.models import build_camera_only
        assert build_camera_only().mac_count() == 13_937_280

    def test_invalid_chain(self):
        with pytest.raises(nn.ShapeError):
            nn.mac_count([nn.Conv2d("c", in_ch=2, out_ch=1, kernel=3)], (1, 8, 8))

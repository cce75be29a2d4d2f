import numpy as np
import pytest

from nanofusion import models, nn, quant
from nanofusion.dataset import generate_raw


@pytest.fixture(scope="module")
def renders():
    return generate_raw(1, 80)


@pytest.fixture(scope="module")
def cam(renders):
    m = models.build("cam", seed=0)
    return m, quant.quantize_model(m, renders.images, renders.depths)


@pytest.fixture(scope="module")
def mid(renders):
    m = models.build("mid-fusion", seed=1)
    return m, quant.quantize_model(m, renders.images, renders.depths)


def float64_params(model):
    return {k: v.astype(np.float64) for k, v in model.params.items()}


class TestCalibration:
    def test_scale_from_range(self):
        assert quant.scale_from_maxabs(2.54) == pytest.approx(0.02, rel=1e-12)

    def test_zero_activation_clamps(self):
        assert quant.scale_from_maxabs(0.0) == 1e-8

    def test_doubling_inputs_doubles_first_layer_scale(self, renders):
        m = models.build("cam", seed=2)
        graph = quant.lower(m)
        graph.units[0].bias = np.zeros_like(graph.units[0].bias)   # keep the layer linear
        feeds = graph.feeds(renders.images, None)
        a = quant.calibrate(graph, feeds=feeds)
        b = quant.calibrate(graph, feeds={k: 2 * v for k, v in feeds.items()})
        first = graph.units[0].dst
        assert b["image"] == pytest.approx(2 * a["image"], rel=1e-12)
        assert b[first] == pytest.approx(2 * a[first], rel=1e-12)

    def test_needs_samples(self, renders):
        m = models.build("cam", seed=0)
        with pytest.raises(ValueError):
            quant.calibrate(m, renders.images[:0], None)
        with pytest.raises(ValueError):
            quant.calibrate(m, renders.images[:10], None)

    def test_deterministic(self, renders):
        m = models.build("mid-fusion", seed=0)
        assert quant.calibrate(m, renders.images, renders.depths) == \
            quant.calibrate(m, renders.images, renders.depths)

    def test_every_tensor_has_a_scale(self, mid):
        _, q = mid
        names = set(q.inputs) | {op.dst for op in q.ops}
        assert names <= set(q.scales)


class TestWeights:
    def test_zero_weight(self):
        assert quant.quantize_tensor(np.array([0.0, 1.0]), 0.3)[0] == 0

    def test_extreme_hits_127(self):
        w = np.random.default_rng(0).normal(size=(8, 3, 3, 3))
        w.flat[17] = -5.0
        q = quant.quantize_tensor(w, quant.weight_scale(w))
        assert q.flat[17] == -127 and np.abs(q).max() == 127

    def test_round_half_even(self):
        assert quant.quantize_tensor([0.5, 1.5, 2.5, -0.5], 1.0).tolist() == [0, 2, 2, 0]

    def test_round_trip_within_half_scale(self, cam):
        m, _ = cam
        graph = quant.lower(m)
        for u in graph.units:
            if u.weight is not None:
                s = quant.weight_scale(u.weight)
                err = np.abs(quant.dequantize(quant.quantize_tensor(u.weight, s), s) - u.weight)
                assert err.max() <= s / 2 + 1e-15

    def test_no_batchnorm_after_folding(self, mid):
        m, q = mid
        assert all(op.kind in ("conv", "linear", "maxpool", "flatten", "concat") for op in q.ops)
        n_conv = sum(isinstance(layer, nn.Conv2d) for layer in m.layers())
        assert sum(op.kind == "conv" for op in q.ops) == n_conv

    def test_bias_is_int32_at_product_scale(self, cam):
        m, q = cam
        op = q.ops[0]
        assert op.bias.dtype == np.int32
        u = quant.lower(m).units[0]
        expected = np.rint(u.bias / (q.scales["image"] * op.weight_scale))
        assert np.array_equal(op.bias, expected)


class TestFolding:
    @pytest.mark.parametrize("tag", ["cam", "mid-fusion", "late-fusion", "depth-mid"])
    def test_folded_graph_matches_model(self, tag, renders):
        m = models.build(tag, seed=3)
        rng = np.random.default_rng(0)
        # non-trivial running statistics
        for k in m.params:
            if k.endswith("running_mean"):
                m.params[k][:] = rng.normal(0, 0.2, m.params[k].shape)
            if k.endswith("running_var"):
                m.params[k][:] = rng.uniform(0.5, 2.0, m.params[k].shape)
        a = m.predict(renders.images[:16], renders.depths[:16], params=float64_params(m))
        b = quant.lower(m).predict(renders.images[:16], renders.depths[:16])
        np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-12)

    def test_fold_formula(self):
        w = np.ones((2, 1, 1, 1))
        fw, fb = quant.fold_batchnorm(w, np.array([1.0, 0.0]), np.array([2.0, 1.0]),
                                      np.array([0.5, 0.0]), np.array([1.0, 0.0]),
                                      np.array([4.0, 1.0]), 0.0)
        assert fw.ravel().tolist() == [1.0, 1.0] and fb.tolist() == [0.5, 0.0]

    def test_unfoldable_batchnorm(self):
        layers = [nn.ReLU("r"), nn.BatchNorm2d("bn", channels=1)]
        params = nn.init_params(layers, (1, 4, 4), np.random.default_rng(0))
        with pytest.raises(quant.QuantizationError):
            quant._lower_chain(layers, params, "x")


class TestIntegerArithmetic:
    def test_multiplier_reconstructs_real(self):
        for real in (1e-6, 0.0123, 0.5, 0.75, 0.999999):
            m, s = quant.quantize_multiplier(real)
            assert 2 ** 30 <= m < 2 ** 31
            assert m * 2.0 ** -s == pytest.approx(real, rel=2 ** -30)

    def test_requantize_rounds_half_up(self):
        m, s = quant.quantize_multiplier(0.5)
        out = quant.requantize(np.array([1, -1, 3, -3, 400, -400]), m, s)
        assert out.tolist() == [1, 0, 2, -1, 127, -127]
        assert quant.requantize(np.array([-5, 5]), m, s, relu=True).tolist() == [0, 3]

    def test_int_gemm_exact(self):
        rng = np.random.default_rng(0)
        a = rng.integers(-127, 128, (5, 4000)).astype(np.int8)
        b = rng.integers(-127, 128, (4000, 3)).astype(np.int8)
        assert np.array_equal(quant.int_gemm(a, b), a.astype(np.int64) @ b.astype(np.int64))

    def test_conv_accumulate_matches_loop(self):
        rng = np.random.default_rng(1)
        x = rng.integers(-127, 128, (1, 5, 6, 2)).astype(np.int8)
        w = rng.integers(-127, 128, (3, 2, 3, 3)).astype(np.int8)
        b = rng.integers(-1000, 1000, 3).astype(np.int32)
        acc = quant.conv_accumulate(x, w, b, stride=2, padding=1)
        xp = np.pad(x[0].astype(np.int64), ((1, 1), (1, 1), (0, 0)))
        for o in range(3):
            for i in range(acc.shape[1]):
                for j in range(acc.shape[2]):
                    patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3, :].transpose(2, 0, 1)
                    assert acc[0, i, j, o] == np.sum(patch * w[o]) + b[o]

    def test_accumulator_overflow(self):
        op = quant.QOp("linear", "fc", ("x",), "y", weight=np.full((1, 2), 127, np.int8),
                       bias=np.array([2 ** 31 - 100], np.int32), mults=(2 ** 30,), shifts=(40,))
        with pytest.raises(quant.AccumulatorOverflowError) as e:
            op.run([np.full((1, 2), 127, np.int8)])
        assert e.value.layer == "fc"

    def test_flatten_order(self):
        x = np.arange(24, dtype=np.int8).reshape(1, 3, 4, 2)   # N, H, W, C
        assert quant.flatten_chw(x)[0].tolist() == x[0].transpose(2, 0, 1).ravel().tolist()


class TestQuantizedInference:
    def test_zero_input_first_layer_is_bias(self, cam):
        _, q = cam
        op = q.ops[0]
        y = op.run([np.zeros((1, 96, 160, 1), np.int8)])
        expected = quant.requantize(op.bias.astype(np.int64), op.mults[0], op.shifts[0], op.relu)
        assert np.all(y == expected.reshape(1, 1, 1, -1))

    def test_zero_input_output(self, cam):
        _, q = cam
        img = np.zeros((96, 160), np.uint8)
        out = quant.quantized_output_int8(q, img, None)
        assert out.dtype == np.int8 and out.shape == (4,)
        feeds = {"image": np.zeros((1, 96, 160, 1), np.int8)}
        assert np.array_equal(q.run_int(feeds)[0], out)

    def test_deterministic(self, mid, renders):
        _, q = mid
        a = quant.quantized_output_int8(q, renders.images[0], renders.depths[0])
        b = quant.quantized_output_int8(q, renders.images[0], renders.depths[0])
        assert a.tobytes() == b.tobytes()

    def test_pose_estimate(self, mid, renders):
        _, q = mid
        est = quant.quantized_forward(q, renders.images[3], renders.depths[3])
        assert isinstance(est, models.PoseEstimate)
        np.testing.assert_allclose(est.as_array(), q.predict(renders.images[3:4],
                                                             renders.depths[3:4])[0])

    @pytest.mark.parametrize("tag", models.VARIANT_TAGS)
    def test_every_variant_quantizes(self, tag, renders):
        m = models.build(tag, seed=0)
        q = quant.quantize_model(m, renders.images, renders.depths)
        out = q.predict(renders.images[:4], renders.depths[:4])
        assert out.shape == (4, 4) and np.all(np.isfinite(out))

    def test_tracks_float_model(self, mid, renders):
        """Int8 outputs stay close to the float outputs relative to their spread."""
        m, q = mid
        f = m.predict(renders.images, renders.depths)
        i = q.predict(renders.images, renders.depths)
        for k in range(4):
            assert np.corrcoef(f[:, k], i[:, k])[0, 1] > 0.95
